//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! "FMAP" | u32 version | u64 config hash | u64 step
//! u32 array count, then per array:
//!     u32 name length | name (UTF-8) | u32 rows | u32 cols | u64 len | len x f64
//! u32 rng blob length | rng blob (56 bytes per generator: data, times)
//! u32 config length | canonical config JSON
//! ```
//!
//! Array names are `theta/<segment>`, `ema/<segment>`, `teacher/<segment>`
//! (EMA teacher only), `radam.m/<segment>`, `radam.v/<segment>`, and
//! `radam.hyper` holding `[step, β1, β2, ε]`.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamVector;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rng::RngState;

use super::optim::RAdamState;

pub const MAGIC: &[u8; 4] = b"FMAP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub theta: ParamVector,
    pub ema: ParamVector,
    pub teacher_ema: Option<ParamVector>,
    pub radam: RAdamState,
    /// Data and time-sampling generators, in that order.
    pub rng: Vec<RngState>,
    pub config_json: String,
}

impl Checkpoint {
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_json(&self.config_json)
    }

    /// Parameters used for sampling: the EMA shadow or the raw iterate.
    pub fn eval_params(&self, use_ema: bool) -> &ParamVector {
        if use_ema {
            &self.ema
        } else {
            &self.theta
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());

        let mut arrays: Vec<(String, usize, usize, &[f64])> = Vec::new();
        push_all("theta", &self.theta, &mut arrays);
        push_all("ema", &self.ema, &mut arrays);
        if let Some(t) = &self.teacher_ema {
            push_all("teacher", t, &mut arrays);
        }
        push_all("radam.m", &self.radam.m, &mut arrays);
        push_all("radam.v", &self.radam.v, &mut arrays);
        let hyper = [
            self.radam.step as f64,
            self.radam.beta1,
            self.radam.beta2,
            self.radam.eps,
        ];
        arrays.push(("radam.hyper".into(), 1, 4, &hyper));

        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, rows, cols, values) in &arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(*rows as u32).to_le_bytes());
            out.extend_from_slice(&(*cols as u32).to_le_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in *values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        let mut blob = Vec::new();
        for r in &self.rng {
            r.encode(&mut blob);
        }
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&blob);
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let config_hash = r.u64()?;
        let step = r.u64()?;

        let mut groups: Vec<(String, ParamVector)> = Vec::new();
        let mut hyper = None;
        for _ in 0..r.u32()? {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = r.u64()? as usize;
            if len != rows.saturating_mul(cols) {
                return Err(Error::Format(format!(
                    "array `{name}`: {len} values for {rows}x{cols}"
                )));
            }
            let values = r.f64s(len)?;
            if name == "radam.hyper" {
                hyper = Some(values);
                continue;
            }
            let (prefix, seg) = name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("unexpected array `{name}`")))?;
            let idx = match groups.iter().position(|(p, _)| p == prefix) {
                Some(i) => i,
                None => {
                    groups.push((prefix.to_string(), ParamVector::new()));
                    groups.len() - 1
                }
            };
            groups[idx]
                .1
                .push_segment(seg, rows, cols, values)
                .map_err(|e| Error::Format(e.to_string()))?;
        }

        let blob_len = r.u32()? as usize;
        let blob = r.take(blob_len)?;
        if !blob_len.is_multiple_of(RngState::ENCODED_LEN) {
            return Err(Error::Format(format!("rng blob of {blob_len} bytes")));
        }
        let rng = blob
            .chunks_exact(RngState::ENCODED_LEN)
            .map(RngState::decode)
            .collect::<Result<Vec<_>>>()?;
        let cfg_len = r.u32()? as usize;
        let config_json = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| Error::Format("config is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        let mut take = |prefix: &str| {
            groups
                .iter()
                .position(|(p, _)| p == prefix)
                .map(|i| groups.remove(i).1)
        };
        let theta = take("theta").unwrap_or_default();
        let ema = take("ema").unwrap_or_default();
        let teacher_ema = take("teacher");
        let m = take("radam.m").unwrap_or_default();
        let v = take("radam.v").unwrap_or_default();
        if let Some((p, _)) = groups.first() {
            return Err(Error::Format(format!("unknown array group `{p}`")));
        }
        let hyper = hyper.ok_or_else(|| Error::Format("missing radam.hyper".into()))?;
        if hyper.len() != 4 {
            return Err(Error::Format("radam.hyper must hold 4 values".into()));
        }
        if !(theta.same_layout(&ema) && theta.same_layout(&m) && theta.same_layout(&v))
            || teacher_ema.as_ref().is_some_and(|t| !theta.same_layout(t))
        {
            return Err(Error::Format("parameter groups disagree in layout".into()));
        }
        Ok(Checkpoint {
            config_hash,
            step,
            theta,
            ema,
            teacher_ema,
            radam: RAdamState {
                m,
                v,
                step: hyper[0] as u64,
                beta1: hyper[1],
                beta2: hyper[2],
                eps: hyper[3],
            },
            rng,
            config_json,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("fmap.tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn push_all<'a>(
    prefix: &str,
    p: &'a ParamVector,
    arrays: &mut Vec<(String, usize, usize, &'a [f64])>,
) {
    for s in p.segments() {
        let values = p.values(&s.name).expect("segment exists");
        arrays.push((format!("{prefix}/{}", s.name), s.rows, s.cols, values));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated checkpoint: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("array too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
