//! `GTBG` gradient messages.
//!
//! Layout, little endian: magic `GTBG`, version `u16`, worker id `u32`,
//! step `u64`, local batch size `u32`, dim count `u32`, dims `u32 ...`, then
//! the payload as `f64` values. A message with no dims carries no payload.

use std::io::{self, Read, Write};

use super::ParallelError;

pub const MAGIC: &[u8; 4] = b"GTBG";
pub const VERSION: u16 = 1;
/// Worker id used on messages broadcast by the reducer.
pub const REDUCER_ID: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct GradMessage {
    pub worker_id: u32,
    pub step: u64,
    pub local_batch_size: u32,
    pub manifest: Vec<u32>,
    pub payload: Vec<f64>,
}

fn expected_len(manifest: &[u32]) -> Option<usize> {
    if manifest.is_empty() {
        return Some(0);
    }
    manifest
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

impl GradMessage {
    pub fn new(
        worker_id: u32,
        step: u64,
        local_batch_size: u32,
        manifest: Vec<u32>,
        payload: Vec<f64>,
    ) -> Result<Self, ParallelError> {
        let msg = GradMessage {
            worker_id,
            step,
            local_batch_size,
            manifest,
            payload,
        };
        msg.check()?;
        Ok(msg)
    }

    fn check(&self) -> Result<(), ParallelError> {
        if expected_len(&self.manifest) != Some(self.payload.len()) {
            return Err(ParallelError::Mismatch(format!(
                "manifest {:?} does not describe {} values",
                self.manifest,
                self.payload.len()
            )));
        }
        Ok(())
    }

    /// Payload bits are copied verbatim, so infinities (overflow) and NaN
    /// survive the trip.
    pub fn encode(&self) -> Result<Vec<u8>, ParallelError> {
        self.check()?;
        let mut out = Vec::with_capacity(26 + 4 * self.manifest.len() + 8 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.worker_id.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.local_batch_size.to_le_bytes());
        out.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        for d in &self.manifest {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ParallelError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], ParallelError> {
            let at = pos;
            if bytes.len() - at < n {
                return Err(ParallelError::Protocol {
                    offset: bytes.len(),
                    message: format!("truncated: need {n} bytes at {at}"),
                });
            }
            pos += n;
            Ok(&bytes[at..at + n])
        };
        if take(4)? != MAGIC {
            return Err(ParallelError::Protocol {
                offset: 0,
                message: "bad magic".into(),
            });
        }
        let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(ParallelError::Protocol {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let worker_id = u32_at(take(4)?);
        let step = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let local_batch_size = u32_at(take(4)?);
        let ndims = u32_at(take(4)?) as usize;
        let mut manifest = Vec::with_capacity(ndims.min(64));
        for _ in 0..ndims {
            manifest.push(u32_at(take(4)?));
        }
        let n = expected_len(&manifest).ok_or_else(|| ParallelError::Protocol {
            offset: 26,
            message: "manifest overflows".into(),
        })?;
        let raw = take(n.saturating_mul(8))?;
        let payload = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if pos != bytes.len() {
            return Err(ParallelError::Protocol {
                offset: pos,
                message: format!("{} trailing bytes", bytes.len() - pos),
            });
        }
        Ok(GradMessage {
            worker_id,
            step,
            local_batch_size,
            manifest,
            payload,
        })
    }
}

/// Write one frame: `u32` little endian length, then the bytes.
pub fn write_frame<W: Write>(w: &mut W, bytes: &[u8]) -> io::Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(bytes)?;
    w.flush()
}

/// Read one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GradMessage {
        GradMessage::new(3, 77, 8, vec![2, 3], vec![1.0, -2.5, f64::INFINITY, 0.0, -0.0, 1e-300]).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..4], b"GTBG");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[10..18].try_into().unwrap()), 77);
        assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[22..26].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 26 + 8 + 48);
    }

    #[test]
    fn round_trip_keeps_infinity_and_signed_zero() {
        let m = sample();
        let bytes = m.encode().unwrap();
        let back = GradMessage::decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(back.payload[4].is_sign_negative());
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn empty_manifest() {
        let m = GradMessage::new(0, 0, 0, vec![], vec![]).unwrap();
        assert_eq!(GradMessage::decode(&m.encode().unwrap()).unwrap(), m);
        assert!(GradMessage::new(0, 0, 0, vec![], vec![1.0]).is_err());
        assert!(GradMessage::new(0, 0, 0, vec![2], vec![1.0]).is_err());
    }

    #[test]
    fn bad_input_reports_offsets() {
        let bytes = sample().encode().unwrap();
        let err = GradMessage::decode(b"GTBX\x01\x00").unwrap_err();
        assert!(matches!(err, ParallelError::Protocol { offset: 0, .. }));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(GradMessage::decode(&v2), Err(ParallelError::Protocol { offset: 4, .. })));
        let err = GradMessage::decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, ParallelError::Protocol { offset, .. } if offset == bytes.len() - 1));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(GradMessage::decode(&long), Err(ParallelError::Protocol { offset, .. }) if offset == bytes.len()));
    }

    #[test]
    fn nan_bits_survive() {
        let m = GradMessage::new(0, 0, 1, vec![1], vec![f64::NAN]).unwrap();
        let bytes = m.encode().unwrap();
        assert_eq!(GradMessage::decode(&bytes).unwrap().encode().unwrap(), bytes);
    }

    #[test]
    fn frames_over_a_byte_stream() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"abc").unwrap();
        write_frame(&mut buf, b"").unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"abc");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert!(read_frame(&mut r).unwrap().is_none());
    }
}
