//! Named parameter tensors, Adam, EMA and the checkpoint container.
//!
//! Checkpoint layout: one line of compact JSON (format tag, version, kind,
//! free-form metadata and the ordered tensor table), a `\n`, then every
//! tensor's values as little-endian `f64` in table order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkernel::Mat;

/// A fixed, ordered collection of named matrices.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(String, &Mat)>;
    fn tensors_mut(&mut self) -> Vec<&mut Mat>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|m| m.fill(0.0));
        z
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        let src: Vec<Mat> = other.tensors().into_iter().map(|(_, m)| m.clone()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(&src) {
            dst.axpy(alpha, s);
        }
    }

    fn scale_all(&mut self, s: f64) {
        self.tensors_mut().into_iter().for_each(|m| m.scale(s));
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, m)| m.data().iter().copied())
            .collect()
    }
}

/// `teacher ← m·teacher + (1−m)·student`. With `m == 1` the teacher is untouched.
pub fn ema_update<P: Parameters>(teacher: &mut P, student: &P, momentum: f64) {
    if momentum >= 1.0 {
        return;
    }
    let src: Vec<Mat> = student.tensors().into_iter().map(|(_, m)| m.clone()).collect();
    for (t, s) in teacher.tensors_mut().into_iter().zip(&src) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
}

/// Sums per-item gradients in item order, then divides by the count.
pub fn mean_in_order<P: Parameters>(items: &[P]) -> Option<P> {
    let first = items.first()?;
    let mut acc = first.clone();
    for g in &items[1..] {
        acc.add_scaled(1.0, g);
    }
    acc.scale_all(1.0 / items.len() as f64);
    Some(acc)
}

/// Adam with optional decoupled-from-bias L2 weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient of tensors selected by `decay_mask`.
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new<P: Parameters>(params: &P, lr: f64) -> Self {
        let shapes: Vec<Mat> = params
            .tensors()
            .iter()
            .map(|(_, m)| Mat::zeros(m.rows(), m.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: shapes.clone(),
            v: shapes,
            t: 0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Weight decay applies only to tensors whose name does not
    /// end in `_b` (biases) or `_g` (norm gains).
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names_grads: Vec<(bool, Mat)> = grads
            .tensors()
            .into_iter()
            .map(|(n, g)| (!(n.ends_with("_b") || n.ends_with("_g")), g.clone()))
            .collect();
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let (decay, g) = &names_grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..p.len() {
                let mut gk = g.data()[k];
                if *decay && self.weight_decay > 0.0 {
                    gk += self.weight_decay * p.data()[k];
                }
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = self.lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                p.data_mut()[k] -= update;
            }
        }
    }
}

/// Hex-encoded SHA-256 prefix of a value's canonical JSON.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("fingerprinted values serialize");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn fingerprint_u64<T: Serialize>(value: &T) -> u64 {
    let json = serde_json::to_vec(value).expect("fingerprinted values serialize");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub const CHECKPOINT_FORMAT: &str = "tokenhier-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus JSON metadata, persisted in the shared container format.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    /// Appends all tensors of `params`, each name prefixed with `prefix`.
    pub fn push_params<P: Parameters>(&mut self, prefix: &str, params: &P) {
        for (name, m) in params.tensors() {
            self.tensors.push((format!("{prefix}{name}"), m.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Overwrites every tensor of `params` from `prefix`-named entries.
    pub fn load_params<P: Parameters>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, dst) in names.iter().zip(params.tensors_mut()) {
            let full = format!("{prefix}{name}");
            let src = self
                .get(&full)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {full}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Shape(format!(
                    "tensor {full}: checkpoint {:?} vs model {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt_err = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err("missing header terminator".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| fmt_err(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(fmt_err(format!(
                "unsupported container {} v{}",
                header.format, header.version
            )));
        }
        let mut pos = nl + 1;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry.rows * entry.cols;
            let end = pos + 8 * n;
            if end > bytes.len() {
                return Err(fmt_err(format!("truncated blob for {}", entry.name)));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((entry.name, Mat::new(entry.rows, entry.cols, data)?));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
