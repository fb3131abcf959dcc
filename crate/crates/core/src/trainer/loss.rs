use crate::tensor::{NodeId, Tape, Tensor};

use super::TrainError;

/// Mean BCE-with-logits over every element of a `[B, C]` batch, recorded on
/// the tape.
pub fn bce_with_logits(tape: &mut Tape, logits: NodeId, targets: &Tensor) -> Result<NodeId, TrainError> {
    Ok(tape.bce_with_logits(logits, targets)?)
}

/// The same loss evaluated without a tape.
pub fn bce_value(logits: &Tensor, targets: &Tensor) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = tape.bce_with_logits(z, targets)?;
    Ok(tape.value(loss).item().expect("scalar loss"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64, y: f64) -> f64 {
        bce_value(&Tensor::new(vec![1, 1], vec![x]).unwrap(), &Tensor::new(vec![1, 1], vec![y]).unwrap()).unwrap()
    }

    #[test]
    fn reference_values() {
        assert!((one(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((one(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(one(100.0, 0.0), 100.0);
        assert_eq!(one(-100.0, 1.0), 100.0);
        assert!((one(2.0, 1.0) - 0.126928011043).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_are_exact() {
        for x in [50.0, 73.5, 1e6, 1e300] {
            assert_eq!(one(x, 0.0), x);
            assert_eq!(one(x, 1.0), 0.0);
            assert_eq!(one(-x, 0.0), 0.0);
        }
    }

    #[test]
    fn rejects_soft_targets_and_shape_mismatch() {
        let z = Tensor::zeros(&[2, 3]);
        assert!(bce_value(&z, &Tensor::full(&[2, 3], 0.5)).is_err());
        assert!(bce_value(&z, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn gradient_is_sigmoid_minus_target_over_n() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![1, 2], vec![0.3, -1.2]).unwrap(), true);
        let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let loss = bce_with_logits(&mut tape, z, &y).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(z).unwrap().data();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((g[0] - (s(0.3) - 1.0) / 2.0).abs() < 1e-15);
        assert!((g[1] - s(-1.2) / 2.0).abs() < 1e-15);
    }
}
