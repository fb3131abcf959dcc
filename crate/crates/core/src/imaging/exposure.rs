use std::fmt;

/// Exposure label, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Exposure {
    Overexposed,
    Underexposed,
    Padded,
    Correct,
}

impl fmt::Display for Exposure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Exposure::Overexposed => "overexposed",
            Exposure::Underexposed => "underexposed",
            Exposure::Padded => "padded",
            Exposure::Correct => "correct",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposurePrototype {
    pub label: Exposure,
    pub mean: f64,
    pub std: f64,
}

/// Reference (mean, std) pairs of labelled chest X-ray samples.
///
/// The "overexposed" reference is darker than the "underexposed" one; the
/// reference labels are kept unchanged.
pub const PROTOTYPES: [ExposurePrototype; 4] = [
    ExposurePrototype { label: Exposure::Overexposed, mean: 0.4149, std: 0.1402 },
    ExposurePrototype { label: Exposure::Underexposed, mean: 0.6200, std: 0.1834 },
    ExposurePrototype { label: Exposure::Padded, mean: 0.2428, std: 0.2885 },
    ExposurePrototype { label: Exposure::Correct, mean: 0.4948, std: 0.2406 },
];

/// Nearest prototype in the (mean, std) plane; ties go to the earlier label.
pub fn classify_exposure(mean: f64, std: f64) -> Exposure {
    let mut best = PROTOTYPES[0];
    let mut best_d = f64::INFINITY;
    for p in PROTOTYPES {
        let d = (mean - p.mean).powi(2) + (std - p.std).powi(2);
        if d < best_d {
            best = p;
            best_d = d;
        }
    }
    best.label
}
