use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{BatchStats, Gradients, NodeId, Tape, Tensor};

use super::{BatchNormState, Mode, NnError, ParamSet};

/// Size of the label space.
pub const NUM_CLASSES: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub filters: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub const fn new(filters: usize, stride: usize) -> Self {
        BlockSpec { filters, stride }
    }
}

/// Shape of the classifier: 3×3 stem, residual blocks, global average
/// pool, linear head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroResNetConfig {
    pub in_channels: usize,
    pub stem_filters: usize,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
    pub input_side: usize,
}

impl Default for MicroResNetConfig {
    fn default() -> Self {
        MicroResNetConfig {
            in_channels: 1,
            stem_filters: 8,
            blocks: vec![BlockSpec::new(8, 1), BlockSpec::new(16, 2), BlockSpec::new(32, 2)],
            num_classes: NUM_CLASSES,
            input_side: 32,
        }
    }
}

impl MicroResNetConfig {
    /// Two blocks per stage instead of one; the "bigger network" variant.
    pub fn deep() -> Self {
        MicroResNetConfig {
            blocks: vec![
                BlockSpec::new(8, 1),
                BlockSpec::new(8, 1),
                BlockSpec::new(16, 2),
                BlockSpec::new(16, 1),
                BlockSpec::new(32, 2),
                BlockSpec::new(32, 1),
            ],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let positive = [
            ("in_channels", self.in_channels),
            ("stem_filters", self.stem_filters),
            ("num_classes", self.num_classes),
            ("input_side", self.input_side),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NnError::Config(format!("{name} must be positive")));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.filters == 0 {
                return Err(NnError::Config(format!("block {i} has zero filters")));
            }
            if b.stride != 1 && b.stride != 2 {
                return Err(NnError::Config(format!(
                    "block {i} stride {} not in {{1, 2}}",
                    b.stride
                )));
            }
        }
        Ok(())
    }

    /// Channels entering the head.
    pub fn feature_width(&self) -> usize {
        self.blocks.last().map_or(self.stem_filters, |b| b.filters)
    }

    pub(crate) fn block_inputs(&self) -> impl Iterator<Item = (usize, BlockSpec)> + '_ {
        let mut channels = self.stem_filters;
        self.blocks.iter().map(move |b| {
            let cin = channels;
            channels = b.filters;
            (cin, *b)
        })
    }

    /// Closed-form scalar parameter count (excluding running statistics).
    pub fn param_count(&self) -> usize {
        let stem = self.in_channels * self.stem_filters * 9 + 2 * self.stem_filters;
        let blocks: usize = self
            .block_inputs()
            .map(|(cin, b)| {
                let f = b.filters;
                let proj = if needs_projection(cin, b) { f * cin } else { 0 };
                f * cin * 9 + f * f * 9 + 4 * f + proj
            })
            .sum();
        let head = self.feature_width() * self.num_classes + self.num_classes;
        stem + blocks + head
    }
}

fn needs_projection(cin: usize, block: BlockSpec) -> bool {
    block.stride != 1 || cin != block.filters
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Seeded parameter initialization: fan-in scaled normal weights, zero
/// biases and shifts, unit scales.
pub fn init_params(config: &MicroResNetConfig, seed: u64) -> Result<ParamSet, NnError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut add = |name: String, t: Tensor| {
        let fresh = params.insert(name.clone(), t);
        debug_assert!(fresh, "duplicate parameter {name}");
    };
    let c0 = config.in_channels;
    let s = config.stem_filters;
    add("stem.conv.weight".into(), kaiming(&[s, c0, 3, 3], c0 * 9, &mut rng));
    add("stem.bn.gamma".into(), Tensor::full(&[s], 1.0));
    add("stem.bn.beta".into(), Tensor::zeros(&[s]));
    for (i, (cin, b)) in config.block_inputs().enumerate() {
        let f = b.filters;
        let p = format!("blocks.{i}");
        add(format!("{p}.conv1.weight"), kaiming(&[f, cin, 3, 3], cin * 9, &mut rng));
        add(format!("{p}.bn1.gamma"), Tensor::full(&[f], 1.0));
        add(format!("{p}.bn1.beta"), Tensor::zeros(&[f]));
        add(format!("{p}.conv2.weight"), kaiming(&[f, f, 3, 3], f * 9, &mut rng));
        add(format!("{p}.bn2.gamma"), Tensor::full(&[f], 1.0));
        add(format!("{p}.bn2.beta"), Tensor::zeros(&[f]));
        if needs_projection(cin, b) {
            add(format!("{p}.proj.weight"), kaiming(&[f, cin, 1, 1], cin, &mut rng));
        }
    }
    let width = config.feature_width();
    add(
        "head.weight".into(),
        kaiming(&[width, config.num_classes], width, &mut rng),
    );
    add("head.bias".into(), Tensor::zeros(&[config.num_classes]));
    Ok(params)
}

/// Tape nodes feeding one residual block.
#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub conv1: NodeId,
    pub bn1: (NodeId, NodeId),
    pub conv2: NodeId,
    pub bn2: (NodeId, NodeId),
    pub proj: Option<NodeId>,
    pub stride: usize,
}

fn boundary(tape: &mut Tape, x: NodeId, mixed: bool) -> NodeId {
    if mixed {
        tape.quantize(x)
    } else {
        x
    }
}

/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`, where the
/// shortcut is the identity or a strided 1×1 projection.
///
/// With `mixed` set, every layer output is rounded to binary16.
#[allow(clippy::too_many_arguments)]
pub fn residual_forward(
    tape: &mut Tape,
    x: NodeId,
    block: &BlockNodes,
    bn1: &BatchNormState,
    bn2: &BatchNormState,
    mode: Mode,
    mixed: bool,
) -> Result<(NodeId, [Option<BatchStats>; 2]), NnError> {
    let h = tape.conv2d(x, block.conv1, block.stride, 1)?;
    let h = boundary(tape, h, mixed);
    let (h, s1) = bn1.record(tape, h, block.bn1.0, block.bn1.1, mode)?;
    let h = boundary(tape, h, mixed);
    let h = tape.relu(h);
    let h = tape.conv2d(h, block.conv2, 1, 1)?;
    let h = boundary(tape, h, mixed);
    let (h, s2) = bn2.record(tape, h, block.bn2.0, block.bn2.1, mode)?;
    let h = boundary(tape, h, mixed);
    let shortcut = match block.proj {
        Some(w) => {
            let p = tape.conv2d(x, w, block.stride, 0)?;
            boundary(tape, p, mixed)
        }
        None => x,
    };
    let sum = tape.add(h, shortcut)?;
    let sum = boundary(tape, sum, mixed);
    Ok((tape.relu(sum), [s1, s2]))
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct Forward {
    pub tape: Tape,
    pub logits: NodeId,
    /// Parameter name → its (full precision) leaf.
    pub leaves: BTreeMap<String, NodeId>,
    /// Batch statistics seen by each normalization layer (train mode only).
    pub batch_stats: BTreeMap<String, BatchStats>,
}

impl Forward {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    /// Re-key tape gradients by parameter name.
    pub fn named_gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.leaves
            .iter()
            .filter_map(|(name, id)| grads.get(*id).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Parameters, normalization statistics and config of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroResNet {
    config: MicroResNetConfig,
    params: ParamSet,
    norms: BTreeMap<String, BatchNormState>,
}

impl MicroResNet {
    pub fn new(config: MicroResNetConfig, seed: u64) -> Result<Self, NnError> {
        let params = init_params(&config, seed)?;
        Ok(Self::from_parts(config, params, None))
    }

    pub(crate) fn from_parts(
        config: MicroResNetConfig,
        params: ParamSet,
        norms: Option<BTreeMap<String, BatchNormState>>,
    ) -> Self {
        let norms = norms.unwrap_or_else(|| {
            let mut norms = BTreeMap::new();
            norms.insert("stem.bn".to_string(), BatchNormState::new(config.stem_filters));
            for (i, (_, b)) in config.block_inputs().enumerate() {
                norms.insert(format!("blocks.{i}.bn1"), BatchNormState::new(b.filters));
                norms.insert(format!("blocks.{i}.bn2"), BatchNormState::new(b.filters));
            }
            norms
        });
        MicroResNet {
            config,
            params,
            norms,
        }
    }

    pub fn config(&self) -> &MicroResNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn norms(&self) -> &BTreeMap<String, BatchNormState> {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut BTreeMap<String, BatchNormState> {
        &mut self.norms
    }

    pub fn mode(&self) -> Mode {
        self.params.mode()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.params.set_mode(mode);
    }

    /// Record the network on a fresh tape. Running statistics are not
    /// touched; feed `batch_stats` to [`MicroResNet::apply_batch_stats`].
    pub fn forward(&self, images: &Tensor, mixed: bool) -> Result<Forward, NnError> {
        let [_, channels, h, w] = images.dims4("model_forward")?;
        let side = self.config.input_side;
        if h != side || w != side {
            return Err(NnError::InputSide {
                expected: side,
                actual: if h != side { h } else { w },
            });
        }
        if channels != self.config.in_channels {
            return Err(NnError::Contract(format!(
                "expected {} input channels, got {channels}",
                self.config.in_channels
            )));
        }
        let mode = self.params.mode();
        let mut tape = Tape::new();
        let mut leaves = BTreeMap::new();
        let mut used = BTreeMap::new();
        for (name, value) in self.params.iter() {
            let leaf = tape.leaf(value.clone(), true);
            leaves.insert(name.to_string(), leaf);
            used.insert(name, boundary(&mut tape, leaf, mixed));
        }
        let p = |name: &str| -> Result<NodeId, NnError> {
            used.get(name)
                .copied()
                .ok_or_else(|| NnError::Contract(format!("missing parameter {name}")))
        };
        let norm = |name: &str| -> Result<&BatchNormState, NnError> {
            self.norms
                .get(name)
                .ok_or_else(|| NnError::Contract(format!("missing normalization state {name}")))
        };
        let mut batch_stats = BTreeMap::new();

        let x = tape.constant(images.clone());
        let x = boundary(&mut tape, x, mixed);
        let h = tape.conv2d(x, p("stem.conv.weight")?, 1, 1)?;
        let h = boundary(&mut tape, h, mixed);
        let (h, stats) =
            norm("stem.bn")?.record(&mut tape, h, p("stem.bn.gamma")?, p("stem.bn.beta")?, mode)?;
        if let Some(s) = stats {
            batch_stats.insert("stem.bn".to_string(), s);
        }
        let h = boundary(&mut tape, h, mixed);
        let mut h = tape.relu(h);

        for (i, (_, spec)) in self.config.block_inputs().enumerate() {
            let pre = format!("blocks.{i}");
            let nodes = BlockNodes {
                conv1: p(&format!("{pre}.conv1.weight"))?,
                bn1: (p(&format!("{pre}.bn1.gamma"))?, p(&format!("{pre}.bn1.beta"))?),
                conv2: p(&format!("{pre}.conv2.weight"))?,
                bn2: (p(&format!("{pre}.bn2.gamma"))?, p(&format!("{pre}.bn2.beta"))?),
                proj: used.get(format!("{pre}.proj.weight").as_str()).copied(),
                stride: spec.stride,
            };
            let (out, [s1, s2]) = residual_forward(
                &mut tape,
                h,
                &nodes,
                norm(&format!("{pre}.bn1"))?,
                norm(&format!("{pre}.bn2"))?,
                mode,
                mixed,
            )?;
            for (suffix, s) in [("bn1", s1), ("bn2", s2)] {
                if let Some(s) = s {
                    batch_stats.insert(format!("{pre}.{suffix}"), s);
                }
            }
            h = out;
        }

        let pooled = tape.global_avg_pool(h)?;
        let pooled = boundary(&mut tape, pooled, mixed);
        let z = tape.matmul(pooled, p("head.weight")?)?;
        let z = tape.bias_add(z, p("head.bias")?)?;
        let logits = boundary(&mut tape, z, mixed);
        Ok(Forward {
            tape,
            logits,
            leaves,
            batch_stats,
        })
    }

    /// Logits for a batch, using the current mode.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor, NnError> {
        let fwd = self.forward(images, false)?;
        Ok(fwd.logits().clone())
    }

    pub fn apply_batch_stats(&mut self, stats: &BTreeMap<String, BatchStats>) {
        for (name, s) in stats {
            if let Some(state) = self.norms.get_mut(name) {
                state.update(s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_desk_scale_shape() {
        let c = MicroResNetConfig::default();
        assert_eq!(c.num_classes, 14);
        assert_eq!(c.input_side, 32);
        assert_eq!(c.feature_width(), 32);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_stride_is_rejected() {
        let mut c = MicroResNetConfig::default();
        c.blocks[1].stride = 3;
        assert!(matches!(c.validate(), Err(NnError::Config(_))));
    }

    #[test]
    fn every_parameter_is_created() {
        let c = MicroResNetConfig::default();
        let p = init_params(&c, 0).unwrap();
        assert_eq!(p.numel(), c.param_count());
        // block 0 keeps 8 channels at stride 1: no projection
        assert!(p.get("blocks.0.proj.weight").is_none());
        assert_eq!(p.get("blocks.1.proj.weight").unwrap().shape(), &[16, 8, 1, 1]);
        assert_eq!(p.get("head.weight").unwrap().shape(), &[32, 14]);
        assert!(p.get("head.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("stem.bn.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn wrong_input_side_names_both_sizes() {
        let net = MicroResNet::new(MicroResNetConfig::default(), 1).unwrap();
        let err = net.forward(&Tensor::zeros(&[2, 1, 16, 16]), false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("32") && msg.contains("16"), "{msg}");
    }
}
