//! Binary training-state files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "DEF1"                      magic
//! u32                         format version
//! u32 + bytes                 key=value config text (model fields, lr, wd, epoch)
//! u32                         tensor count
//! per tensor, by name:
//!   u16 + bytes               name
//!   u8                        rank
//!   u32 x rank                dims
//!   f64 x numel               values
//! u64                         step
//! u64                         seed
//! ```
//!
//! Batchnorm running statistics are stored alongside trainable tensors.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{init_weights, ModelConfig};
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"DEF1";
pub const VERSION: u32 = 1;

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = format!(
        "{}lr={}\nwd={}\nepoch={}\n",
        state.config.to_kv(),
        state.lr,
        state.wd,
        state.epoch
    );
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let all = state.params.all();
    out.extend_from_slice(&(all.len() as u32).to_le_bytes());
    for (name, t) in all {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("parameter name too long: `{name}`")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.seed.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "truncated: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let at = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::CorruptCheckpoint {
            offset: at,
            reason: "text is not UTF-8".into(),
        })
    }
}

/// Parses a checkpoint. The stored tensor names must be exactly those the
/// stored config produces.
pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let len = r.u32()? as usize;
    let text_at = r.pos;
    let text = r.string(len)?;
    let bad_config = |e: Error| Error::CorruptCheckpoint {
        offset: text_at,
        reason: format!("config block: {e}"),
    };
    let (config, extra) = ModelConfig::from_kv(&text).map_err(bad_config)?;
    let (mut lr, mut wd, mut epoch) = (None, None, None);
    for (k, v) in extra {
        let bad = || Error::CorruptCheckpoint {
            offset: text_at,
            reason: format!("config block: bad value `{v}` for `{k}`"),
        };
        match k.as_str() {
            "lr" => lr = Some(v.parse::<f64>().map_err(|_| bad())?),
            "wd" => wd = Some(v.parse::<f64>().map_err(|_| bad())?),
            "epoch" => epoch = Some(v.parse::<u64>().map_err(|_| bad())?),
            _ => {
                return Err(Error::CorruptCheckpoint {
                    offset: text_at,
                    reason: format!("config block: unknown key `{k}`"),
                })
            }
        }
    }
    let (Some(lr), Some(wd), Some(epoch)) = (lr, wd, epoch) else {
        return Err(Error::CorruptCheckpoint {
            offset: text_at,
            reason: "config block lacks lr, wd or epoch".into(),
        });
    };
    let count = r.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let bytes_needed = shape
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.corrupt(format!("tensor `{name}` is too large")))?;
        let raw = r.take(bytes_needed)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    let step = r.u64()?;
    let seed = r.u64()?;
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    check_names(&init_weights(&config, 0)?, &params)?;
    Ok(TrainState {
        params,
        config,
        step,
        epoch,
        seed,
        lr,
        wd,
    })
}

/// Fails with the names `got` lacks and the names it has beyond `expected`.
pub fn check_names(expected: &ModelParams, got: &ModelParams) -> Result<()> {
    let e = expected.all_names();
    let g = got.all_names();
    if e == g {
        return Ok(());
    }
    let diff =
        |a: &BTreeSet<String>, b: &BTreeSet<String>| a.difference(b).cloned().collect::<Vec<_>>();
    Err(Error::NameMismatch {
        missing: diff(&e, &g),
        unexpected: diff(&g, &e),
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads and requires the parameter names of `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    check_names(&init_weights(expected, 0)?, &state.params)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn small_state() -> TrainState {
        let config = ModelConfig {
            cfe_units: 1,
            seed: 11,
            ..ModelConfig::default()
        };
        let mut s = TrainState::new(config).unwrap();
        s.step = 42;
        s.epoch = 3;
        s.lr = 0.1 + 0.2;
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = small_state();
        let back = decode(&encode(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.lr.to_bits(), s.lr.to_bits());
    }

    #[test]
    fn truncation_reports_an_offset() {
        let bytes = encode(&small_state()).unwrap();
        for cut in [0, 3, 9, bytes.len() / 2, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::CorruptCheckpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected_at_zero() {
        let mut bytes = encode(&small_state()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes),
            Err(Error::CorruptCheckpoint { offset: 0, .. })
        ));
    }

    #[test]
    fn other_variant_lists_missing_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.def");
        let baseline =
            TrainState::new(ModelConfig::default().with_variant(Variant::Baseline)).unwrap();
        save_checkpoint(&baseline, &path).unwrap();
        let err = load_checkpoint_for(&path, &ModelConfig::default()).unwrap_err();
        match err {
            Error::NameMismatch {
                missing,
                unexpected,
            } => {
                assert!(missing.iter().any(|n| n.starts_with("cdf.")));
                assert!(unexpected.is_empty());
            }
            other => panic!("{other:?}"),
        }
    }
}
