use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::trainer::GradMap;

use super::{GradMessage, ParallelError, REDUCER_ID};

/// Batch-size weighted mean of one step's messages.
///
/// Each worker's weight is `b_i / sum(b)`, and the per-element sum runs in
/// ascending worker id whatever order the messages arrived in, so the
/// result bits depend only on the set of messages.
pub fn allreduce_mean(messages: &[GradMessage]) -> Result<GradMessage, ParallelError> {
    let mut order: Vec<&GradMessage> = messages.iter().collect();
    order.sort_by_key(|m| m.worker_id);
    let first = *order
        .first()
        .ok_or_else(|| ParallelError::Mismatch("no messages to reduce".into()))?;
    for pair in order.windows(2) {
        if pair[0].worker_id == pair[1].worker_id {
            return Err(ParallelError::Mismatch(format!(
                "two messages from worker {}",
                pair[0].worker_id
            )));
        }
    }
    for m in &order {
        if m.step != first.step {
            return Err(ParallelError::Mismatch(format!(
                "worker {} sent step {}, expected {}",
                m.worker_id, m.step, first.step
            )));
        }
        if m.manifest != first.manifest || m.payload.len() != first.payload.len() {
            return Err(ParallelError::Mismatch(format!(
                "worker {} manifest {:?} differs from {:?}",
                m.worker_id, m.manifest, first.manifest
            )));
        }
    }
    let total: u64 = order.iter().map(|m| u64::from(m.local_batch_size)).sum();
    if total == 0 {
        return Err(ParallelError::Mismatch("total batch size is zero".into()));
    }
    let weights: Vec<f64> = order
        .iter()
        .map(|m| f64::from(m.local_batch_size) / total as f64)
        .collect();
    let mut payload: Vec<f64> = first.payload.iter().map(|&g| weights[0] * g).collect();
    for (m, &w) in order.iter().zip(&weights).skip(1) {
        for (acc, &g) in payload.iter_mut().zip(&m.payload) {
            *acc += w * g;
        }
    }
    Ok(GradMessage {
        worker_id: REDUCER_ID,
        step: first.step,
        local_batch_size: u32::try_from(total).unwrap_or(u32::MAX),
        manifest: first.manifest.clone(),
        payload,
    })
}

/// Concatenate gradients in parameter-name order.
pub fn flatten_grads(grads: &GradMap) -> Vec<f64> {
    grads.values().flat_map(|t| t.data().iter().copied()).collect()
}

/// Inverse of [`flatten_grads`] for the parameters of `params`.
pub fn unflatten_grads(params: &ParamSet, flat: &[f64]) -> Result<GradMap, ParallelError> {
    if flat.len() != params.numel() {
        return Err(ParallelError::Mismatch(format!(
            "{} gradient values for {} parameters",
            flat.len(),
            params.numel()
        )));
    }
    let mut out = GradMap::new();
    let mut at = 0;
    for (name, p) in params.iter() {
        let n = p.len();
        let t = Tensor::new(p.shape().to_vec(), flat[at..at + n].to_vec())
            .map_err(|e| ParallelError::Mismatch(e.to_string()))?;
        out.insert(name.to_string(), t);
        at += n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(worker: u32, batch: u32, values: &[f64]) -> GradMessage {
        GradMessage::new(worker, 5, batch, vec![values.len() as u32], values.to_vec()).unwrap()
    }

    #[test]
    fn equal_batches_average() {
        let out = allreduce_mean(&[msg(0, 4, &[1.0]), msg(1, 4, &[3.0])]).unwrap();
        assert_eq!(out.payload, vec![2.0]);
        assert_eq!(out.local_batch_size, 8);
        assert_eq!(out.worker_id, REDUCER_ID);
    }

    #[test]
    fn single_worker_is_identity() {
        let values = [0.1, -7.25, 1e-17, f64::INFINITY];
        let out = allreduce_mean(&[msg(0, 3, &values)]).unwrap();
        assert_eq!(out.payload, values);
    }

    #[test]
    fn weights_follow_batch_sizes() {
        let out = allreduce_mean(&[msg(0, 3, &[0.0]), msg(1, 1, &[4.0])]).unwrap();
        assert_eq!(out.payload, vec![1.0]);
    }

    #[test]
    fn arrival_order_does_not_change_bits() {
        let ms: Vec<GradMessage> = (0..4)
            .map(|w| msg(w, w + 1, &[0.1 * f64::from(w + 1), 1.0 / f64::from(w + 3), 1e16]))
            .collect();
        let a = allreduce_mean(&ms).unwrap();
        let mut rev = ms.clone();
        rev.reverse();
        rev.swap(0, 2);
        assert_eq!(allreduce_mean(&rev).unwrap().encode().unwrap(), a.encode().unwrap());
    }

    #[test]
    fn protocol_violations() {
        assert!(allreduce_mean(&[]).is_err());
        assert!(allreduce_mean(&[msg(0, 1, &[1.0]), msg(0, 1, &[1.0])]).is_err());
        assert!(allreduce_mean(&[msg(0, 1, &[1.0]), msg(1, 1, &[1.0, 2.0])]).is_err());
        let mut late = msg(1, 1, &[1.0]);
        late.step = 6;
        assert!(matches!(allreduce_mean(&[msg(0, 1, &[1.0]), late]), Err(ParallelError::Mismatch(_))));
        assert!(allreduce_mean(&[msg(0, 0, &[1.0])]).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let mut params = ParamSet::new();
        params.insert("b", Tensor::zeros(&[2, 2]));
        params.insert("a", Tensor::zeros(&[3]));
        let flat: Vec<f64> = (0..7).map(f64::from).collect();
        let grads = unflatten_grads(&params, &flat).unwrap();
        assert_eq!(grads["a"].data(), &[0.0, 1.0, 2.0]);
        assert_eq!(flatten_grads(&grads), flat);
        assert!(unflatten_grads(&params, &flat[..6]).is_err());
    }
}
