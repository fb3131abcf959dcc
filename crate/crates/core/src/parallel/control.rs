//! Frames between the reducer and a worker. The first frame a worker sees
//! is an [`Init`], then [`Request`]s; it answers with [`Reply`] frames.
//! Gradients travel inside as encoded `GTBG` messages.
//!
//! Every frame starts with a tag byte; integers and floats are little
//! endian, byte strings carry a `u32` length.

use crate::dataset::{LabeledSet, LabelVector};
use crate::nn::{checkpoint, MicroResNet, Mode, NUM_CLASSES};
use crate::trainer::Precision;

use super::{Fault, FaultKind, ParallelError};

const INIT: u8 = 0;
const COMPUTE: u8 = 1;
const APPLY: u8 = 2;
const ABORT: u8 = 3;
const SNAPSHOT: u8 = 4;
const SHUTDOWN: u8 = 5;

const GRAD: u8 = 1;
const APPLIED: u8 = 2;
const FAILED: u8 = 3;
const STATE: u8 = 4;

struct Writer(Vec<u8>);

impl Writer {
    fn new(tag: u8) -> Self {
        Writer(vec![tag])
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("frame field under 4 GiB"));
    }

    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.0.extend_from_slice(b);
    }

    fn model(&mut self, model: &MicroResNet) {
        self.u8(match model.mode() {
            Mode::Train => 0,
            Mode::Eval => 1,
        });
        self.bytes(&checkpoint::encode(model));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn error(&self, message: impl Into<String>) -> ParallelError {
        ParallelError::Protocol {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ParallelError> {
        if self.bytes.len() - self.pos < n {
            return Err(ParallelError::Protocol {
                offset: self.bytes.len(),
                message: format!("truncated frame: need {n} bytes at {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ParallelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ParallelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ParallelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ParallelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, ParallelError> {
        Ok(self.u32()? as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8], ParallelError> {
        let n = self.len()?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, ParallelError> {
        let at = self.pos;
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| ParallelError::Protocol {
            offset: at,
            message: "string is not UTF-8".into(),
        })
    }

    fn model(&mut self) -> Result<MicroResNet, ParallelError> {
        let mode = match self.u8()? {
            0 => Mode::Train,
            1 => Mode::Eval,
            m => return Err(self.error(format!("unknown mode {m}"))),
        };
        let at = self.pos;
        let mut model = checkpoint::decode(self.bytes()?).map_err(|e| ParallelError::Protocol {
            offset: at,
            message: format!("model: {e}"),
        })?;
        model.set_mode(mode);
        Ok(model)
    }

    fn finish(self) -> Result<(), ParallelError> {
        if self.pos != self.bytes.len() {
            return Err(self.error(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// Everything a worker needs before its first step.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Init {
    pub worker: u32,
    pub precision: Precision,
    pub loss_scale: f64,
    pub growth_interval: usize,
    pub faults: Vec<Fault>,
    pub model: MicroResNet,
    pub data: LabeledSet,
}

impl Init {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(INIT);
        w.u32(self.worker);
        w.u8(match self.precision {
            Precision::Full => 0,
            Precision::Mixed => 1,
        });
        w.f64(self.loss_scale);
        w.u64(self.growth_interval as u64);
        w.len(self.faults.len());
        for f in &self.faults {
            w.u32(f.worker);
            w.u64(f.round);
            w.u8(match f.kind {
                FaultKind::Error => 0,
                FaultKind::Silent => 1,
                FaultKind::InfGradient => 2,
            });
        }
        w.model(&self.model);
        let data = &self.data;
        w.len(data.side());
        w.len(data.len());
        for ((image, labels), id) in data.images().iter().zip(data.labels()).zip(data.ids()) {
            w.bytes(id.as_bytes());
            w.0.extend_from_slice(labels);
            for v in image {
                w.f64(*v);
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ParallelError> {
        let mut r = Reader::new(bytes);
        if r.u8()? != INIT {
            return Err(ParallelError::Protocol {
                offset: 0,
                message: "expected an init frame".into(),
            });
        }
        let worker = r.u32()?;
        let precision = match r.u8()? {
            0 => Precision::Full,
            1 => Precision::Mixed,
            p => return Err(r.error(format!("unknown precision {p}"))),
        };
        let loss_scale = r.f64()?;
        let growth_interval = r.u64()? as usize;
        let mut faults = Vec::new();
        for _ in 0..r.len()? {
            let worker = r.u32()?;
            let round = r.u64()?;
            let kind = match r.u8()? {
                0 => FaultKind::Error,
                1 => FaultKind::Silent,
                2 => FaultKind::InfGradient,
                k => return Err(r.error(format!("unknown fault kind {k}"))),
            };
            faults.push(Fault { worker, round, kind });
        }
        let model = r.model()?;
        let side = r.len()?;
        let n = r.len()?;
        let plane = side
            .checked_mul(side)
            .ok_or_else(|| r.error("image side overflows"))?;
        let (mut images, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            ids.push(r.string()?);
            let mut l: LabelVector = [0; NUM_CLASSES];
            l.copy_from_slice(r.take(NUM_CLASSES)?);
            labels.push(l);
            let mut image = Vec::with_capacity(plane);
            for _ in 0..plane {
                image.push(r.f64()?);
            }
            images.push(image);
        }
        r.finish()?;
        Ok(Init {
            worker,
            precision,
            loss_scale,
            growth_interval,
            faults,
            model,
            data: LabeledSet::from_parts(side, images, labels, ids),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Request {
    /// `attempt` counts step calls; `round` also counts snapshots.
    Compute { round: u64, attempt: u64, indices: Vec<usize> },
    Apply { round: u64, lr: f64, grad: Vec<u8> },
    Abort { round: u64 },
    Snapshot { round: u64 },
    Shutdown,
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Request::Compute { round, attempt, indices } => {
                let mut w = Writer::new(COMPUTE);
                w.u64(*round);
                w.u64(*attempt);
                w.len(indices.len());
                for &i in indices {
                    w.u64(i as u64);
                }
                w.0
            }
            Request::Apply { round, lr, grad } => {
                let mut w = Writer::new(APPLY);
                w.u64(*round);
                w.f64(*lr);
                w.bytes(grad);
                w.0
            }
            Request::Abort { round } => {
                let mut w = Writer::new(ABORT);
                w.u64(*round);
                w.0
            }
            Request::Snapshot { round } => {
                let mut w = Writer::new(SNAPSHOT);
                w.u64(*round);
                w.0
            }
            Request::Shutdown => vec![SHUTDOWN],
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ParallelError> {
        let mut r = Reader::new(bytes);
        let out = match r.u8()? {
            COMPUTE => {
                let round = r.u64()?;
                let attempt = r.u64()?;
                let mut indices = Vec::new();
                for _ in 0..r.len()? {
                    indices.push(r.u64()? as usize);
                }
                Request::Compute { round, attempt, indices }
            }
            APPLY => Request::Apply {
                round: r.u64()?,
                lr: r.f64()?,
                grad: r.bytes()?.to_vec(),
            },
            ABORT => Request::Abort { round: r.u64()? },
            SNAPSHOT => Request::Snapshot { round: r.u64()? },
            SHUTDOWN => Request::Shutdown,
            t => {
                return Err(ParallelError::Protocol {
                    offset: 0,
                    message: format!("unknown request tag {t}"),
                })
            }
        };
        r.finish()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Reply {
    Grad { worker: u32, round: u64, loss: f64, grad: Vec<u8> },
    Applied { worker: u32, round: u64, applied: bool },
    Failed { worker: u32, round: u64, message: String },
    Snapshot { worker: u32, round: u64, model: Box<MicroResNet> },
}

impl Reply {
    pub fn tag(&self) -> (u32, u64) {
        match *self {
            Reply::Grad { worker, round, .. }
            | Reply::Applied { worker, round, .. }
            | Reply::Failed { worker, round, .. }
            | Reply::Snapshot { worker, round, .. } => (worker, round),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (worker, round) = self.tag();
        let mut w = Writer::new(match self {
            Reply::Grad { .. } => GRAD,
            Reply::Applied { .. } => APPLIED,
            Reply::Failed { .. } => FAILED,
            Reply::Snapshot { .. } => STATE,
        });
        w.u32(worker);
        w.u64(round);
        match self {
            Reply::Grad { loss, grad, .. } => {
                w.f64(*loss);
                w.bytes(grad);
            }
            Reply::Applied { applied, .. } => w.u8(u8::from(*applied)),
            Reply::Failed { message, .. } => w.bytes(message.as_bytes()),
            Reply::Snapshot { model, .. } => w.model(model),
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ParallelError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let worker = r.u32()?;
        let round = r.u64()?;
        let out = match tag {
            GRAD => Reply::Grad {
                worker,
                round,
                loss: r.f64()?,
                grad: r.bytes()?.to_vec(),
            },
            APPLIED => Reply::Applied {
                worker,
                round,
                applied: r.u8()? != 0,
            },
            FAILED => Reply::Failed {
                worker,
                round,
                message: r.string()?,
            },
            STATE => Reply::Snapshot {
                worker,
                round,
                model: Box::new(r.model()?),
            },
            t => {
                return Err(ParallelError::Protocol {
                    offset: 0,
                    message: format!("unknown reply tag {t}"),
                })
            }
        };
        r.finish()?;
        Ok(out)
    }
}
