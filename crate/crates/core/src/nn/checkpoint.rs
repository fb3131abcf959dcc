//! `GTB1` parameter checkpoints.
//!
//! Layout (little endian): the magic `GTB1`; config as `i32` fields
//! `in_channels, stem_filters, num_classes, input_side, block_count` followed
//! by `filters, stride` per block; then one record per tensor in name order:
//! `u32` name length, name bytes, `u32` dim count, `u32` dims, `f64` data.
//! Records run to end of file. Normalization running statistics are stored
//! as `<layer>.running_mean` / `<layer>.running_var` records.

use std::collections::BTreeMap;
use std::path::Path;

use crate::tensor::Tensor;

use super::resnet::init_params;
use super::{BlockSpec, MicroResNet, MicroResNetConfig, NnError, ParamSet};

pub const MAGIC: &[u8; 4] = b"GTB1";

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

pub fn encode(model: &MicroResNet) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let mut put_i32 = |v: usize| out.extend_from_slice(&(v as i32).to_le_bytes());
    put_i32(cfg.in_channels);
    put_i32(cfg.stem_filters);
    put_i32(cfg.num_classes);
    put_i32(cfg.input_side);
    put_i32(cfg.blocks.len());
    for b in &cfg.blocks {
        put_i32(b.filters);
        put_i32(b.stride);
    }

    let mut records: BTreeMap<String, Tensor> = model
        .params()
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    for (name, state) in model.norms() {
        let c = state.channels();
        let mean = Tensor::new(vec![c], state.running_mean.clone()).expect("channel vector");
        let var = Tensor::new(vec![c], state.running_var.clone()).expect("channel vector");
        records.insert(format!("{name}{RUNNING_MEAN}"), mean);
        records.insert(format!("{name}{RUNNING_VAR}"), var);
    }
    for (name, t) in &records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> NnError {
        NnError::Checkpoint {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail(format!("truncated: wanted {n} bytes")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn count(&mut self) -> Result<usize, NnError> {
        let at = self.pos;
        let v = i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
        usize::try_from(v).map_err(|_| NnError::Checkpoint {
            offset: at,
            message: format!("negative config field {v}"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<MicroResNet, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnError::Checkpoint {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let in_channels = r.count()?;
    let stem_filters = r.count()?;
    let num_classes = r.count()?;
    let input_side = r.count()?;
    let block_count = r.count()?;
    let mut blocks = Vec::with_capacity(block_count.min(1024));
    for _ in 0..block_count {
        let filters = r.count()?;
        let stride = r.count()?;
        blocks.push(BlockSpec { filters, stride });
    }
    let config = MicroResNetConfig {
        in_channels,
        stem_filters,
        blocks,
        num_classes,
        input_side,
    };
    config.validate()?;

    let mut records = BTreeMap::new();
    while r.pos < bytes.len() {
        let at = r.pos;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.fail("parameter name is not UTF-8"))?
            .to_string();
        let ndims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims.min(8));
        for _ in 0..ndims {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| r.fail("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| NnError::Checkpoint {
            offset: at,
            message: e.to_string(),
        })?;
        if records.insert(name.clone(), t).is_some() {
            return Err(NnError::Checkpoint {
                offset: at,
                message: format!("duplicate record {name}"),
            });
        }
    }

    let template = init_params(&config, 0)?;
    let mut params = ParamSet::new();
    for (name, expected) in template.iter() {
        let t = records.remove(name).ok_or_else(|| NnError::Checkpoint {
            offset: bytes.len(),
            message: format!("missing parameter {name}"),
        })?;
        if t.shape() != expected.shape() {
            return Err(NnError::Checkpoint {
                offset: bytes.len(),
                message: format!("{name}: shape {:?}, expected {:?}", t.shape(), expected.shape()),
            });
        }
        params.insert(name, t);
    }
    let mut model = MicroResNet::from_parts(config, params, None);
    for (name, state) in model.norms_mut() {
        for (suffix, slot) in [(RUNNING_MEAN, &mut state.running_mean), (RUNNING_VAR, &mut state.running_var)] {
            let key = format!("{name}{suffix}");
            let t = records.remove(&key).ok_or_else(|| NnError::Checkpoint {
                offset: bytes.len(),
                message: format!("missing record {key}"),
            })?;
            if t.len() != slot.len() {
                return Err(NnError::Checkpoint {
                    offset: bytes.len(),
                    message: format!("{key}: {} channels, expected {}", t.len(), slot.len()),
                });
            }
            *slot = t.into_data();
        }
    }
    if let Some(extra) = records.keys().next() {
        return Err(NnError::Checkpoint {
            offset: bytes.len(),
            message: format!("unexpected record {extra}"),
        });
    }
    Ok(model)
}

pub fn save(model: &MicroResNet, path: &Path) -> Result<(), NnError> {
    crate::fsutil::write_atomic(path, &encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MicroResNet, NnError> {
    decode(&std::fs::read(path)?)
}
