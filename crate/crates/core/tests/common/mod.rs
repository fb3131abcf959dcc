#![allow(dead_code)]

use gradbench::nn::{
    residual_forward, BatchNormState, BlockNodes, BlockSpec, MicroResNet, MicroResNetConfig, Mode,
};
use gradbench::tensor::{grad_check, grad_check_coords, NodeId, Normalization, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn random_labels(batch: usize, classes: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[batch, classes], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

fn nn_err(e: impl std::fmt::Display) -> TensorError {
    TensorError::Contract(e.to_string())
}

/// Parameters of `model` in name order, plus a tape function that rebuilds
/// the network from leaves in that order and returns the mean BCE loss.
pub fn network_loss(
    model: &MicroResNet,
    images: Tensor,
    labels: Tensor,
) -> (
    Vec<Tensor>,
    impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError> + '_,
) {
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let params = model.params().iter().map(|(_, t)| t.clone()).collect();
    let f = move |tape: &mut Tape, leaves: &[NodeId]| -> Result<NodeId, TensorError> {
        let p = |name: &str| -> Result<NodeId, TensorError> {
            names
                .iter()
                .position(|n| n == name)
                .map(|i| leaves[i])
                .ok_or_else(|| nn_err(format!("missing {name}")))
        };
        let mode = model.mode();
        let x = tape.constant(images.clone());
        let h = tape.conv2d(x, p("stem.conv.weight")?, 1, 1)?;
        let stem = &model.norms()["stem.bn"];
        let norm = match mode {
            Mode::Train => Normalization::Batch { eps: stem.eps },
            Mode::Eval => Normalization::Fixed {
                mean: &stem.running_mean,
                var: &stem.running_var,
                eps: stem.eps,
            },
        };
        let (h, _) = tape.batch_norm(h, p("stem.bn.gamma")?, p("stem.bn.beta")?, norm)?;
        let mut h = tape.relu(h);
        for (i, spec) in model.config().blocks.iter().enumerate() {
            let pre = format!("blocks.{i}");
            let nodes = BlockNodes {
                conv1: p(&format!("{pre}.conv1.weight"))?,
                bn1: (p(&format!("{pre}.bn1.gamma"))?, p(&format!("{pre}.bn1.beta"))?),
                conv2: p(&format!("{pre}.conv2.weight"))?,
                bn2: (p(&format!("{pre}.bn2.gamma"))?, p(&format!("{pre}.bn2.beta"))?),
                proj: p(&format!("{pre}.proj.weight")).ok(),
                stride: spec.stride,
            };
            let bn1 = &model.norms()[&format!("{pre}.bn1")];
            let bn2 = &model.norms()[&format!("{pre}.bn2")];
            h = residual_forward(tape, h, &nodes, bn1, bn2, mode, false).map_err(nn_err)?.0;
        }
        let pooled = tape.global_avg_pool(h)?;
        let z = tape.matmul(pooled, p("head.weight")?)?;
        let z = tape.bias_add(z, p("head.bias")?)?;
        tape.bce_with_logits(z, &labels)
    };
    (params, f)
}

/// Give every normalization layer non-trivial running statistics and every
/// affine parameter a non-default value, so eval-mode checks exercise them.
pub fn perturb_norms(model: &mut MicroResNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for state in model.norms_mut().values_mut() {
        for m in &mut state.running_mean {
            *m = rng.random_range(-0.2..0.2);
        }
        for v in &mut state.running_var {
            *v = rng.random_range(0.5..2.0);
        }
    }
    for (name, t) in model.params_mut().iter_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            for x in t.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
    }
}

/// Values in `±[0.1, 1.5]`, kept clear of the relu kink.
pub fn random_away(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type TapeFn = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>>;

/// `sum(out * r)` for a fixed random `r` of mixed sign, so every output
/// element carries a distinct weight and the sum stays small next to its
/// partials (central differences lose digits to a large function value).
fn weighted_sum(tape: &mut Tape, out: NodeId, seed: u64) -> Result<NodeId, TensorError> {
    let r = random_away(tape.value(out).shape(), seed);
    let r = tape.constant(r);
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

/// One scalar function per differentiable op (and the residual block),
/// with the inputs to probe. Inputs to relu stay at least 0.1 from zero.
pub fn layer_cases() -> Vec<(&'static str, Vec<Tensor>, TapeFn)> {
    let mut cases: Vec<(&'static str, Vec<Tensor>, TapeFn)> = Vec::new();
    for (name, stride, pad, k) in [
        ("conv2d 3x3 s1 p1", 1, 1, 3),
        ("conv2d 3x3 s2 p1", 2, 1, 3),
        ("conv2d 1x1 s2 p0", 2, 0, 1),
    ] {
        cases.push((
            name,
            vec![random_tensor(&[2, 2, 5, 5], -1.0, 1.0, 1), random_tensor(&[3, 2, k, k], -1.0, 1.0, 2)],
            Box::new(move |t, p| {
                let y = t.conv2d(p[0], p[1], stride, pad)?;
                weighted_sum(t, y, 3)
            }),
        ));
    }
    cases.push((
        "matmul",
        vec![random_tensor(&[3, 4], -1.0, 1.0, 4), random_tensor(&[4, 5], -1.0, 1.0, 5)],
        Box::new(|t, p| {
            let y = t.matmul(p[0], p[1])?;
            weighted_sum(t, y, 6)
        }),
    ));
    cases.push((
        "add",
        vec![random_tensor(&[2, 3], -1.0, 1.0, 7), random_tensor(&[2, 3], -1.0, 1.0, 8)],
        Box::new(|t, p| {
            let y = t.add(p[0], p[1])?;
            weighted_sum(t, y, 9)
        }),
    ));
    cases.push((
        "mul",
        vec![random_tensor(&[2, 3], -1.0, 1.0, 10), random_tensor(&[2, 3], -1.0, 1.0, 11)],
        Box::new(|t, p| {
            let y = t.mul(p[0], p[1])?;
            weighted_sum(t, y, 12)
        }),
    ));
    cases.push((
        "scale",
        vec![random_tensor(&[6], -1.0, 1.0, 13)],
        Box::new(|t, p| {
            let y = t.scale(p[0], -2.5);
            weighted_sum(t, y, 14)
        }),
    ));
    cases.push((
        "bias_add",
        vec![random_tensor(&[3, 4], -1.0, 1.0, 15), random_tensor(&[4], -1.0, 1.0, 16)],
        Box::new(|t, p| {
            let y = t.bias_add(p[0], p[1])?;
            weighted_sum(t, y, 17)
        }),
    ));
    cases.push((
        "relu",
        vec![random_away(&[4, 5], 18)],
        Box::new(|t, p| {
            let y = t.relu(p[0]);
            weighted_sum(t, y, 19)
        }),
    ));
    cases.push((
        "sigmoid",
        vec![random_tensor(&[4, 5], -4.0, 4.0, 20)],
        Box::new(|t, p| {
            let y = t.sigmoid(p[0]);
            weighted_sum(t, y, 21)
        }),
    ));
    cases.push((
        "global_avg_pool",
        vec![random_tensor(&[2, 3, 4, 4], -1.0, 1.0, 22)],
        Box::new(|t, p| {
            let y = t.global_avg_pool(p[0])?;
            weighted_sum(t, y, 23)
        }),
    ));
    for (name, shape, batch) in [
        ("batch_norm batch [B,C,H,W]", vec![3, 2, 3, 3], true),
        ("batch_norm batch [B,C]", vec![5, 3], true),
        ("batch_norm fixed [B,C,H,W]", vec![3, 2, 3, 3], false),
    ] {
        let c = shape[1];
        cases.push((
            name,
            vec![
                random_tensor(&shape, -1.0, 1.0, 24),
                random_tensor(&[c], 0.5, 1.5, 25),
                random_tensor(&[c], -0.5, 0.5, 26),
            ],
            Box::new(move |t, p| {
                let mean = vec![0.1; c];
                let var = vec![0.7; c];
                let norm = if batch {
                    Normalization::Batch { eps: 1e-5 }
                } else {
                    Normalization::Fixed { mean: &mean, var: &var, eps: 1e-5 }
                };
                let (y, _) = t.batch_norm(p[0], p[1], p[2], norm)?;
                weighted_sum(t, y, 27)
            }),
        ));
    }
    cases.push((
        "bce_with_logits",
        vec![random_tensor(&[3, 14], -6.0, 6.0, 28)],
        Box::new(|t, p| t.bce_with_logits(p[0], &random_labels(3, 14, 29))),
    ));
    for (name, cin, filters, stride) in [("residual block identity", 3, 3, 1), ("residual block projection", 2, 4, 2)] {
        let mut params = vec![
            random_tensor(&[3, cin, 6, 6], -1.0, 1.0, 30),
            random_tensor(&[filters, cin, 3, 3], -0.6, 0.6, 31),
            random_tensor(&[filters], 0.5, 1.5, 32),
            random_tensor(&[filters], -0.3, 0.3, 33),
            random_tensor(&[filters, filters, 3, 3], -0.6, 0.6, 34),
            random_tensor(&[filters], 0.5, 1.5, 35),
            random_tensor(&[filters], -0.3, 0.3, 36),
        ];
        let proj = stride != 1 || cin != filters;
        if proj {
            params.push(random_tensor(&[filters, cin, 1, 1], -0.6, 0.6, 37));
        }
        cases.push((
            name,
            params,
            Box::new(move |t, p| {
                let nodes = BlockNodes {
                    conv1: p[1],
                    bn1: (p[2], p[3]),
                    conv2: p[4],
                    bn2: (p[5], p[6]),
                    proj: proj.then(|| p[7]),
                    stride,
                };
                let (bn1, bn2) = (BatchNormState::new(filters), BatchNormState::new(filters));
                let (y, _) = residual_forward(t, p[0], &nodes, &bn1, &bn2, Mode::Train, false).map_err(nn_err)?;
                weighted_sum(t, y, 38)
            }),
        ));
    }
    cases
}

/// Two blocks (identity and strided projection) on 8×8 inputs.
pub fn small_config() -> MicroResNetConfig {
    MicroResNetConfig {
        stem_filters: 3,
        blocks: vec![BlockSpec::new(3, 1), BlockSpec::new(4, 2)],
        input_side: 8,
        ..MicroResNetConfig::default()
    }
}

/// Worst relative error of the full forward + BCE loss. With `sample` set,
/// only every `sample`-th coordinate of the flattened parameters is probed.
///
/// Central differences lose about `ulp(loss) / eps` to rounding, so a
/// partial much smaller than that cannot be resolved to 1e-6 relative. The
/// fixed seeds used by callers give partials well above that floor. Larger
/// inputs put more pre-activations within `eps` of a relu kink, so they
/// need a smaller `eps`.
pub fn network_grad_check(
    config: &MicroResNetConfig,
    seed: u64,
    mode: Mode,
    batch: usize,
    eps: f64,
    sample: Option<usize>,
) -> f64 {
    let mut model = MicroResNet::new(config.clone(), seed).unwrap();
    perturb_norms(&mut model, seed + 100);
    model.set_mode(mode);
    let side = config.input_side;
    let images = random_tensor(&[batch, 1, side, side], -1.5, 1.5, seed + 200);
    let labels = random_labels(batch, config.num_classes, seed + 300);
    let (params, f) = network_loss(&model, images, labels);
    match sample {
        None => grad_check(&f, &params, eps).unwrap(),
        Some(step) => {
            let coords: Vec<(usize, usize)> = params
                .iter()
                .enumerate()
                .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
                .step_by(step)
                .collect();
            grad_check_coords(&f, &params, eps, &coords).unwrap()
        }
    }
}

pub mod dp {
    use std::sync::Arc;
    use std::time::Duration;

    use gradbench::dataset::{synthetic, LabeledSet};
    use gradbench::nn::{MicroResNet, MicroResNetConfig, Mode};
    use gradbench::parallel::{flatten_grads, GroupOptions, WorkerGroup};
    use gradbench::trainer::{compute_gradients, TrainConfig, Transport};

    pub fn data(n: usize, seed: u64) -> Arc<LabeledSet> {
        Arc::new(synthetic::labeled_set(n, 32, seed).unwrap())
    }

    pub fn model(mode: Mode, seed: u64) -> MicroResNet {
        let mut m = MicroResNet::new(MicroResNetConfig::default(), seed).unwrap();
        m.set_mode(mode);
        m
    }

    pub fn config(workers: usize) -> TrainConfig {
        TrainConfig {
            workers,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    pub fn group(model: &MicroResNet, config: &TrainConfig, data: &Arc<LabeledSet>, options: GroupOptions) -> WorkerGroup {
        WorkerGroup::spawn_with(model, config, Arc::clone(data), options).unwrap()
    }

    /// Replicas in `gradbench worker` child processes.
    pub fn processes(timeout_ms: u64) -> GroupOptions {
        GroupOptions {
            transport: Transport::Processes,
            program: Some(env!("CARGO_BIN_EXE_gradbench").into()),
            ..quick(timeout_ms)
        }
    }

    pub fn quick(timeout_ms: u64) -> GroupOptions {
        GroupOptions {
            timeout: Duration::from_millis(timeout_ms),
            ..GroupOptions::default()
        }
    }

    /// Largest `|a - b| / max|b|` between the reduced gradient of `workers`
    /// eval-mode replicas and the single-process full-batch gradient.
    pub fn reduced_vs_full_batch(workers: usize, batch: usize) -> f64 {
        let data = data(batch, 7);
        let model = model(Mode::Eval, 3);
        let indices: Vec<usize> = (0..batch).collect();
        let full = compute_gradients(&model, &data.batch(&indices).unwrap(), false, 1.0).unwrap();
        let expect = flatten_grads(&full.grads);
        let mut g = group(&model, &config(workers), &data, quick(30_000));
        let out = g.parallel_train_step(&indices, 1e-3).unwrap();
        assert_eq!(out.averaged.local_batch_size as usize, batch);
        assert!((out.loss - full.loss).abs() <= 1e-12 * full.loss.abs());
        let scale = expect.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        out.averaged
            .payload
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs() / scale)
            .fold(0.0, f64::max)
    }

    /// Train-mode steps on `workers` replicas; returns the number of steps
    /// after which every replica held bit-identical parameters.
    pub fn lockstep_steps(workers: usize, steps: usize) -> usize {
        let data = data(16, 11);
        let model = model(Mode::Train, 5);
        let mut g = group(&model, &config(workers), &data, quick(30_000));
        let mut identical = 0;
        for s in 0..steps {
            let start = (s * 8) % 16;
            let indices: Vec<usize> = (start..start + 8).collect();
            let out = g.parallel_train_step(&indices, 1e-3).unwrap();
            assert!(out.applied);
            let snaps = g.snapshots().unwrap();
            if snaps.iter().all(|m| m.params() == snaps[0].params()) {
                identical += 1;
            }
        }
        identical
    }
}
