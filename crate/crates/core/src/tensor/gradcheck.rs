use super::{NodeId, Tape, Tensor, TensorError};

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Vec<NodeId>, NodeId), TensorError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &leaves)?;
    Ok((tape, leaves, out))
}

/// Compare tape gradients of `f` against central finite differences.
///
/// `f` records a scalar computation on the tape given one leaf per entry of
/// `params`. Every coordinate of every parameter is probed; the result is
/// the worst relative error seen.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    grad_check_coords(f, params, eps, &coords)
}

/// [`grad_check`] restricted to the given `(param index, element index)` pairs.
pub fn grad_check_coords<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    if eps <= 0.0 {
        return Err(TensorError::Contract("grad_check eps must be positive".into()));
    }
    let (tape, leaves, out) = evaluate(&f, params)?;
    let grads = tape.backward(out)?;

    let scalar_at = |shifted: &[Tensor]| -> Result<f64, TensorError> {
        let (tape, _, out) = evaluate(&f, shifted)?;
        tape.value(out)
            .item()
            .ok_or_else(|| TensorError::Contract("grad_check needs a scalar function".into()))
    };

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for &(p, i) in coords {
        let original = params[p].data()[i];
        probe[p].data_mut()[i] = original + eps;
        let plus = scalar_at(&probe)?;
        probe[p].data_mut()[i] = original - eps;
        let minus = scalar_at(&probe)?;
        probe[p].data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(leaves[p]).map_or(0.0, |g| g.data()[i]);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}
