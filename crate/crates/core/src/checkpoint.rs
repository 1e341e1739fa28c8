//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! "DISCOCKP"  u32 version  u64 payload_len  u64 payload_checksum  payload
//! ```
//!
//! The payload holds the model config as JSON, the selected parameters, and
//! optionally the full training state (latest parameters, Adam moments,
//! report, best snapshot). Floats are stored as raw IEEE-754 bits, so a
//! write/read cycle reproduces every value exactly.

use std::fs;
use std::path::Path;

use crate::error::{DiscoError, Result};
use crate::linalg::Matrix;
use crate::model::{DiscoConfig, DiscoParams};
use crate::objective::{AdamState, Objective};
use crate::trainer::{EpochRecord, TrainReport};

const MAGIC: &[u8; 8] = b"DISCOCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Best {
    pub params: DiscoParams,
    pub score: f64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub current: DiscoParams,
    pub adam: AdamState,
    pub report: TrainReport,
    pub best: Option<Best>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DiscoConfig,
    /// Parameters used for inference.
    pub params: DiscoParams,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    /// A checkpoint with inference parameters only.
    pub fn inference(config: DiscoConfig, params: DiscoParams) -> Self {
        Checkpoint {
            config,
            params,
            training: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(&serde_json::to_vec(&self.config)?);
        w.params(&self.params);
        match &self.training {
            None => w.u8(0),
            Some(t) => {
                w.u8(1);
                w.params(&t.current);
                w.adam(&t.adam);
                w.report(&t.report);
                match &t.best {
                    None => w.u8(0),
                    Some(b) => {
                        w.u8(1);
                        w.params(&b.params);
                        w.f64(b.score);
                        w.u64(b.epoch as u64);
                    }
                }
            }
        }
        let payload = w.buf;
        let mut out = Vec::with_capacity(payload.len() + 28);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&checksum(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 28 || &bytes[..8] != MAGIC {
            return Err(DiscoError::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(DiscoError::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let sum = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let payload = &bytes[28..];
        if payload.len() != len || checksum(payload) != sum {
            return Err(DiscoError::Checkpoint(
                "payload is truncated or corrupted".into(),
            ));
        }
        let mut r = Reader {
            buf: payload,
            pos: 0,
        };
        let config: DiscoConfig = serde_json::from_slice(r.bytes()?)?;
        config.validate()?;
        let params = r.params()?;
        if !params.matches(&config) {
            return Err(DiscoError::Checkpoint(
                "parameter shapes do not match the stored config".into(),
            ));
        }
        let training = match r.u8()? {
            0 => None,
            1 => {
                let current = r.params()?;
                let adam = r.adam()?;
                let report = r.report()?;
                let best = match r.u8()? {
                    0 => None,
                    1 => Some(Best {
                        params: r.params()?,
                        score: r.f64()?,
                        epoch: r.u64()? as usize,
                    }),
                    t => return Err(DiscoError::Checkpoint(format!("bad tag {t}"))),
                };
                Some(TrainingState {
                    current,
                    adam,
                    report,
                    best,
                })
            }
            t => return Err(DiscoError::Checkpoint(format!("bad tag {t}"))),
        };
        if r.pos != payload.len() {
            return Err(DiscoError::Checkpoint(
                "trailing bytes after payload".into(),
            ));
        }
        Ok(Checkpoint {
            config,
            params,
            training,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| DiscoError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| DiscoError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn objective_tag(o: Objective) -> u8 {
    match o {
        Objective::CompositeKl => 0,
        Objective::Wasserstein => 1,
        Objective::Mae => 2,
        Objective::Combined => 3,
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn opt_f64(&mut self, v: Option<f64>) {
        match v {
            None => self.u8(0),
            Some(x) => {
                self.u8(1);
                self.f64(x);
            }
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        xs.iter().for_each(|&x| self.f64(x));
    }

    fn params(&mut self, p: &DiscoParams) {
        for m in p.matrices() {
            self.u64(m.rows() as u64);
            self.u64(m.cols() as u64);
            m.as_slice().iter().for_each(|&x| self.f64(x));
        }
    }

    fn adam(&mut self, a: &AdamState) {
        self.f64(a.lr);
        self.f64(a.beta1);
        self.f64(a.beta2);
        self.f64(a.eps);
        self.u64(a.t);
        self.f64s(&a.m);
        self.f64s(&a.v);
    }

    fn report(&mut self, r: &TrainReport) {
        self.u64(r.epochs.len() as u64);
        for e in &r.epochs {
            self.u64(e.epoch as u64);
            self.f64(e.loss);
            self.u8(objective_tag(e.objective));
            self.opt_f64(e.dev_soft);
            self.opt_f64(e.dev_pe);
            self.f64(e.seconds);
        }
        match r.best_epoch {
            None => self.u8(0),
            Some(b) => {
                self.u8(1);
                self.u64(b as u64);
            }
        }
        self.u64(r.optimizer_steps);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DiscoError::Checkpoint("unexpected end of payload".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(DiscoError::Checkpoint(format!("implausible length {n}")));
        }
        Ok(n)
    }

    fn opt_f64(&mut self) -> Result<Option<f64>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.f64()?)),
            t => Err(DiscoError::Checkpoint(format!("bad tag {t}"))),
        }
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.len()?;
        let cols = self.len()?;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n * 8 <= self.buf.len())
            .ok_or_else(|| DiscoError::Checkpoint("implausible matrix shape".into()))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<f64>>>()?;
        Ok(Matrix::from_vec(rows, cols, data))
    }

    fn params(&mut self) -> Result<DiscoParams> {
        Ok(DiscoParams {
            w_i: self.matrix()?,
            w_a: self.matrix()?,
            w_p: self.matrix()?,
            w_e: self.matrix()?,
            w_y: self.matrix()?,
            w_yi: self.matrix()?,
            w_ya: self.matrix()?,
        })
    }

    fn adam(&mut self) -> Result<AdamState> {
        Ok(AdamState {
            lr: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
            t: self.u64()?,
            m: self.f64s()?,
            v: self.f64s()?,
        })
    }

    fn report(&mut self) -> Result<TrainReport> {
        let n = self.len()?;
        let mut epochs = Vec::with_capacity(n);
        for _ in 0..n {
            let epoch = self.u64()? as usize;
            let loss = self.f64()?;
            let objective = match self.u8()? {
                0 => Objective::CompositeKl,
                1 => Objective::Wasserstein,
                2 => Objective::Mae,
                3 => Objective::Combined,
                t => return Err(DiscoError::Checkpoint(format!("bad objective tag {t}"))),
            };
            epochs.push(EpochRecord {
                epoch,
                loss,
                objective,
                dev_soft: self.opt_f64()?,
                dev_pe: self.opt_f64()?,
                seconds: self.f64()?,
            });
        }
        let best_epoch = match self.u8()? {
            0 => None,
            1 => Some(self.u64()? as usize),
            t => return Err(DiscoError::Checkpoint(format!("bad tag {t}"))),
        };
        Ok(TrainReport {
            epochs,
            best_epoch,
            optimizer_steps: self.u64()?,
        })
    }
}
