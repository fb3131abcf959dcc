use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, SampleRecord, Split};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        SplitFractions { train, val, test }
    }

    fn as_array(self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(self) -> Result<(), DatasetError> {
        let f = self.as_array();
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DatasetError::Config(format!("split fractions must be non-negative, got {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Config(format!("split fractions must sum to 1, got {f:?}")));
        }
        Ok(())
    }

    /// Patients per split by largest remainder, so each count is within one
    /// of its exact share.
    pub fn allocate(self, patients: usize) -> [usize; 3] {
        let exact = self.as_array().map(|f| f * patients as f64);
        let mut counts = exact.map(|e| e.floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = exact[a] - counts[a] as f64;
            let rb = exact[b] - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut left = patients.saturating_sub(counts.iter().sum());
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[k] += 1;
            left -= 1;
        }
        counts
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions::new(0.7, 0.1, 0.2)
    }
}

/// Assign whole patients to train/val/test with a seeded shuffle.
pub fn split_by_patient(
    mut records: Vec<SampleRecord>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<Vec<SampleRecord>, DatasetError> {
    fractions.validate()?;
    let patients: BTreeSet<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    if patients.is_empty() {
        return Err(DatasetError::Config("no patients to split".into()));
    }
    let mut order: Vec<String> = patients.into_iter().map(str::to_string).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let counts = fractions.allocate(order.len());

    let mut assignment = BTreeMap::new();
    let mut cursor = order.into_iter();
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        for patient in cursor.by_ref().take(n) {
            assignment.insert(patient, split);
        }
    }
    for r in &mut records {
        r.split = Some(assignment[&r.patient_id]);
    }
    Ok(records)
}
