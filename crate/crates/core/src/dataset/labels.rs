use crate::nn::NUM_CLASSES;

/// Class vocabulary; the position is the label index.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Effusion",
    "Emphysema",
    "Fibrosis",
    "Hernia",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pleural Thickening",
    "Pneumonia",
    "Pneumothorax",
];

/// Multi-hot label vector.
pub type LabelVector = [u8; NUM_CLASSES];

/// Index of a class name. Underscores are read as spaces
/// (`Pleural_Thickening`).
pub fn class_index(name: &str) -> Option<usize> {
    let name = name.trim();
    CLASS_NAMES
        .iter()
        .position(|c| *c == name || c.replace(' ', "_") == name)
}
