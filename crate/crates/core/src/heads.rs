//! Downstream heads on frozen token sequences: a linear probe on the class
//! token, and class-token-queried multi-head attention pooling over the
//! patch tokens followed by a linear classifier.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::balanced_accuracy;
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::numkernel::{dot, matmul_nt, matmul_tn, matvec, softmax, Mat, RngStream};
use crate::params::{mean_in_order, Adam, Checkpoint, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Linear,
    AttnPool,
}

impl HeadMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadMode::Linear => "linear",
            HeadMode::AttnPool => "attnpool",
        }
    }
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadMode::Linear),
            "attnpool" => Ok(HeadMode::AttnPool),
            other => Err(Error::Config(format!(
                "unknown head mode {other:?} (expected linear or attnpool)"
            ))),
        }
    }
}

/// Linear classifier on the class token: `softmax(W·z_cls + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams {
    /// `C × D`.
    pub w: Mat,
    /// `1 × C`.
    pub b: Mat,
}

impl ProbeParams {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        ProbeParams {
            w: Mat::zeros(classes, dim),
            b: Mat::zeros(1, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let mut z = matvec(&self.w, feature)?;
        for (l, b) in z.iter_mut().zip(self.b.data()) {
            *l += b;
        }
        Ok(z)
    }
}

impl Parameters for ProbeParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        vec![("lp_w".into(), &self.w), ("lp_b".into(), &self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Attention pooling with the class token as the single query.
///
/// Head `i` owns feature slice `i·D_h .. (i+1)·D_h` of the projected query,
/// keys and values, so the stacked `D × D` projections are the per-head
/// `D_h × D` matrices on top of each other.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnPoolParams {
    pub num_heads: usize,
    /// When false the query/key/value/output maps are fixed identities and
    /// only the classifier is trainable.
    pub projected: bool,
    pub q_w: Mat,
    pub k_w: Mat,
    pub v_w: Mat,
    pub out_w: Mat,
    /// `C × D`.
    pub cls_w: Mat,
    /// `1 × C`.
    pub cls_b: Mat,
}

impl AttnPoolParams {
    /// Projections start at identity, so training begins from the
    /// projection-free pool; the classifier starts at zero.
    pub fn init(classes: usize, dim: usize, num_heads: usize, projected: bool) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "dimension {dim} not divisible by {num_heads} heads"
            )));
        }
        Ok(AttnPoolParams {
            num_heads,
            projected,
            q_w: Mat::identity(dim),
            k_w: Mat::identity(dim),
            v_w: Mat::identity(dim),
            out_w: Mat::identity(dim),
            cls_w: Mat::zeros(classes, dim),
            cls_b: Mat::zeros(1, classes),
        })
    }

    pub fn dim(&self) -> usize {
        self.q_w.rows()
    }

    pub fn classes(&self) -> usize {
        self.cls_w.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.num_heads
    }

    fn classifier(&self) -> ProbeParams {
        ProbeParams {
            w: self.cls_w.clone(),
            b: self.cls_b.clone(),
        }
    }
}

impl Parameters for AttnPoolParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut v: Vec<(String, &Mat)> = Vec::with_capacity(6);
        if self.projected {
            v.push(("q_w".into(), &self.q_w));
            v.push(("k_w".into(), &self.k_w));
            v.push(("v_w".into(), &self.v_w));
            v.push(("out_w".into(), &self.out_w));
        }
        v.push(("cls_w".into(), &self.cls_w));
        v.push(("cls_b".into(), &self.cls_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = Vec::with_capacity(6);
        if self.projected {
            v.push(&mut self.q_w);
            v.push(&mut self.k_w);
            v.push(&mut self.v_w);
            v.push(&mut self.out_w);
        }
        v.push(&mut self.cls_w);
        v.push(&mut self.cls_b);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams {
    Linear(ProbeParams),
    AttnPool(AttnPoolParams),
}

impl HeadParams {
    pub fn mode(&self) -> HeadMode {
        match self {
            HeadParams::Linear(_) => HeadMode::Linear,
            HeadParams::AttnPool(_) => HeadMode::AttnPool,
        }
    }

    pub fn probabilities(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        match self {
            HeadParams::Linear(p) => linear_probe_forward(&seq.cls, p),
            HeadParams::AttnPool(p) => attnpool_forward(seq, p),
        }
    }

    pub fn predict(&self, seq: &TokenSequence) -> Result<usize> {
        Ok(argmax(&self.probabilities(seq)?))
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        match self {
            HeadParams::Linear(p) => {
                let mut ck = Checkpoint::new("probe", meta);
                ck.push_params("", p);
                ck
            }
            HeadParams::AttnPool(p) => {
                let mut meta = meta;
                if let serde_json::Value::Object(m) = &mut meta {
                    m.insert("num_heads".into(), p.num_heads.into());
                    m.insert("projected".into(), p.projected.into());
                }
                let mut ck = Checkpoint::new("attnpool", meta);
                ck.push_params("", p);
                ck
            }
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.kind.as_str() {
            "probe" => {
                let w = ck.get("lp_w").ok_or_else(|| Error::Config("probe lacks lp_w".into()))?;
                let mut p = ProbeParams::zeros(w.rows(), w.cols());
                ck.load_params("", &mut p)?;
                Ok(HeadParams::Linear(p))
            }
            "attnpool" => {
                let w = ck
                    .get("cls_w")
                    .ok_or_else(|| Error::Config("attnpool lacks cls_w".into()))?;
                let num_heads = ck.meta["num_heads"].as_u64().unwrap_or(1) as usize;
                let projected = ck.meta["projected"].as_bool().unwrap_or(true);
                let mut p = AttnPoolParams::init(w.rows(), w.cols(), num_heads, projected)?;
                ck.load_params("", &mut p)?;
                Ok(HeadParams::AttnPool(p))
            }
            other => Err(Error::Config(format!("not a head checkpoint: {other}"))),
        }
    }

    pub fn write(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_checkpoint(meta).write(path)
    }
}

impl Parameters for HeadParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        match self {
            HeadParams::Linear(p) => p.tensors(),
            HeadParams::AttnPool(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        match self {
            HeadParams::Linear(p) => p.tensors_mut(),
            HeadParams::AttnPool(p) => p.tensors_mut(),
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `softmax(W_lp · z_cls + b)`; binary tasks use a two-way softmax.
pub fn linear_probe_forward(cls: &[f64], p: &ProbeParams) -> Result<Vec<f64>> {
    Ok(softmax(&p.logits(cls)?))
}

/// Pooled vector and the per-head attention weights over the N patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub h: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

struct PoolCache {
    q: Vec<f64>,
    keys: Mat,
    values: Mat,
    concat: Vec<f64>,
    weights: Vec<Vec<f64>>,
    h: Vec<f64>,
}

fn pool_internal(seq: &TokenSequence, p: &AttnPoolParams) -> Result<PoolCache> {
    let n = seq.num_patches();
    if n == 0 {
        return Err(Error::Parameter("attention pooling needs at least one patch token".into()));
    }
    let d = p.dim();
    if seq.dim() != d || seq.patches.cols() != d {
        return Err(Error::Shape(format!(
            "token dim {} vs pooling dim {d}",
            seq.dim()
        )));
    }
    let dh = p.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = matvec(&p.q_w, &seq.cls)?;
    let keys = matmul_nt(&seq.patches, &p.k_w)?;
    let values = matmul_nt(&seq.patches, &p.v_w)?;
    let mut concat = vec![0.0; d];
    let mut weights = Vec::with_capacity(p.num_heads);
    for head in 0..p.num_heads {
        let s = head * dh..(head + 1) * dh;
        let logits: Vec<f64> = (0..n)
            .map(|j| dot(&q[s.clone()], &keys.row(j)[s.clone()]) * scale)
            .collect();
        let a = softmax(&logits);
        for (j, &aj) in a.iter().enumerate() {
            for (c, v) in concat[s.clone()].iter_mut().zip(&values.row(j)[s.clone()]) {
                *c += aj * v;
            }
        }
        weights.push(a);
    }
    let h = matvec(&p.out_w, &concat)?;
    Ok(PoolCache {
        q,
        keys,
        values,
        concat,
        weights,
        h,
    })
}

/// `h = Attn(Q = z_cls, K = Z_patch, V = Z_patch)` with per-head projections.
pub fn attention_pool(seq: &TokenSequence, p: &AttnPoolParams) -> Result<Pooled> {
    let c = pool_internal(seq, p)?;
    Ok(Pooled {
        h: c.h,
        weights: c.weights,
    })
}

/// `softmax(W_attn · h + b)`.
pub fn attnpool_forward(seq: &TokenSequence, p: &AttnPoolParams) -> Result<Vec<f64>> {
    let pooled = attention_pool(seq, p)?;
    linear_probe_forward(&pooled.h, &p.classifier())
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::Parameter(format!(
            "label {label} outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Cross-entropy and parameter gradients for a single item.
fn item_gradients(seq: &TokenSequence, label: usize, params: &HeadParams) -> Result<(f64, HeadParams)> {
    match params {
        HeadParams::Linear(p) => {
            check_label(label, p.classes())?;
            let probs = linear_probe_forward(&seq.cls, p)?;
            let loss = -probs[label].max(1e-300).ln();
            let mut g = p.zeros_like();
            for (c, &pc) in probs.iter().enumerate() {
                let dl = pc - if c == label { 1.0 } else { 0.0 };
                for (gw, z) in g.w.row_mut(c).iter_mut().zip(&seq.cls) {
                    *gw = dl * z;
                }
                g.b.data_mut()[c] = dl;
            }
            Ok((loss, HeadParams::Linear(g)))
        }
        HeadParams::AttnPool(p) => {
            check_label(label, p.classes())?;
            let cache = pool_internal(seq, p)?;
            let probs = linear_probe_forward(&cache.h, &p.classifier())?;
            let loss = -probs[label].max(1e-300).ln();
            let d = p.dim();
            let dh_ = p.head_dim();
            let scale = 1.0 / (dh_ as f64).sqrt();
            let n = seq.num_patches();
            let mut g = p.zeros_like();
            let mut dh = vec![0.0; d];
            for (c, &pc) in probs.iter().enumerate() {
                let dl = pc - if c == label { 1.0 } else { 0.0 };
                for (k, gw) in g.cls_w.row_mut(c).iter_mut().enumerate() {
                    *gw = dl * cache.h[k];
                    dh[k] += dl * p.cls_w.get(c, k);
                }
                g.cls_b.data_mut()[c] = dl;
            }
            if p.projected {
                for r in 0..d {
                    for (gw, cv) in g.out_w.row_mut(r).iter_mut().zip(&cache.concat) {
                        *gw = dh[r] * cv;
                    }
                }
                let dconcat = matvec(&p.out_w.transpose(), &dh)?;
                let mut dq = vec![0.0; d];
                let mut dkeys = Mat::zeros(n, d);
                let mut dvalues = Mat::zeros(n, d);
                for head in 0..p.num_heads {
                    let s = head * dh_..(head + 1) * dh_;
                    let a = &cache.weights[head];
                    let da: Vec<f64> = (0..n)
                        .map(|j| dot(&dconcat[s.clone()], &cache.values.row(j)[s.clone()]))
                        .collect();
                    let inner = dot(a, &da);
                    for j in 0..n {
                        for (dv, dc) in dvalues.row_mut(j)[s.clone()].iter_mut().zip(&dconcat[s.clone()]) {
                            *dv = a[j] * dc;
                        }
                        let dlogit = a[j] * (da[j] - inner) * scale;
                        for (k, dqk) in dq[s.clone()].iter_mut().enumerate() {
                            *dqk += dlogit * cache.keys.get(j, s.start + k);
                        }
                        for (k, dk) in dkeys.row_mut(j)[s.clone()].iter_mut().enumerate() {
                            *dk = dlogit * cache.q[s.start + k];
                        }
                    }
                }
                for r in 0..d {
                    for (gw, z) in g.q_w.row_mut(r).iter_mut().zip(&seq.cls) {
                        *gw = dq[r] * z;
                    }
                }
                g.k_w = matmul_tn(&dkeys, &seq.patches)?;
                g.v_w = matmul_tn(&dvalues, &seq.patches)?;
            }
            Ok((loss, HeadParams::AttnPool(g)))
        }
    }
}

/// Mean cross-entropy over `batch` and its analytic parameter gradients.
pub fn head_gradients(batch: &[(&TokenSequence, usize)], params: &HeadParams) -> Result<(f64, HeadParams)> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let per_item: Vec<(f64, HeadParams)> = batch
        .par_iter()
        .map(|(seq, label)| item_gradients(seq, *label, params))
        .collect::<Result<_>>()?;
    let loss = per_item.iter().map(|(l, _)| l).sum::<f64>() / batch.len() as f64;
    let grads: Vec<HeadParams> = per_item.into_iter().map(|(_, g)| g).collect();
    Ok((loss, mean_in_order(&grads).expect("non-empty batch")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
    pub num_heads: usize,
    /// Learnable query/key/value/output projections in attention pooling.
    pub projected: bool,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch: 32,
            seed: 0,
            num_heads: 4,
            projected: true,
        }
    }
}

impl HeadTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config(
                "head training needs lr >= 0, epochs >= 1, batch >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bacc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedHead {
    pub params: HeadParams,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
}

pub fn predict_all(data: &[(TokenSequence, usize)], params: &HeadParams) -> Result<Vec<usize>> {
    data.par_iter().map(|(s, _)| params.predict(s)).collect()
}

fn evaluate_bacc(data: &[(TokenSequence, usize)], params: &HeadParams, classes: usize) -> Result<f64> {
    let preds = predict_all(data, params)?;
    let truth: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
    balanced_accuracy(&truth, &preds, classes)
}

/// Trains a head on frozen sequences with Adam on mean cross-entropy plus L2
/// weight decay, keeping the epoch with the best validation balanced accuracy
/// (the earliest on ties). An empty `val` selects on the training set.
pub fn train_head(
    train: &[(TokenSequence, usize)],
    val: &[(TokenSequence, usize)],
    mode: HeadMode,
    cfg: &HeadTrainConfig,
) -> Result<TrainedHead> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Parameter("empty training set".into()))?;
    let classes = train
        .iter()
        .chain(val)
        .map(|(_, y)| *y)
        .max()
        .expect("non-empty")
        + 1;
    let distinct = {
        let mut seen = vec![false; classes];
        train.iter().for_each(|(_, y)| seen[*y] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Parameter(
            "training set must contain at least two classes".into(),
        ));
    }
    let dim = first.0.dim();
    let mut params = match mode {
        HeadMode::Linear => HeadParams::Linear(ProbeParams::zeros(classes, dim)),
        HeadMode::AttnPool => HeadParams::AttnPool(AttnPoolParams::init(
            classes,
            dim,
            cfg.num_heads,
            cfg.projected,
        )?),
    };
    let selection = if val.is_empty() { train } else { val };
    let mut opt = Adam::new(&params, cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::NEG_INFINITY, params.clone(), 0usize);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = RngStream::new(cfg.seed, epoch as u64);
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(&TokenSequence, usize)> =
                chunk.iter().map(|&i| (&train[i].0, train[i].1)).collect();
            let (loss, grads) = head_gradients(&batch, &params)?;
            loss_sum += loss * chunk.len() as f64;
            opt.step(&mut params, &grads);
        }
        if !params.all_finite() {
            return Err(Error::numeric("head training", format!("non-finite parameters at epoch {epoch}")));
        }
        let val_bacc = evaluate_bacc(selection, &params, classes)?;
        curve.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_bacc,
        });
        if val_bacc > best.0 {
            best = (val_bacc, params.clone(), epoch);
        }
    }
    Ok(TrainedHead {
        params: best.1,
        curve,
        best_epoch: best.2,
    })
}

/// JSON dump of per-item, per-head attention weights.
pub fn attention_dump(data: &[(TokenSequence, usize)], p: &AttnPoolParams) -> Result<serde_json::Value> {
    let items: Vec<serde_json::Value> = data
        .iter()
        .enumerate()
        .map(|(i, (seq, label))| {
            let pooled = attention_pool(seq, p)?;
            Ok(serde_json::json!({
                "index": i,
                "label": label,
                "weights": pooled.weights,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(serde_json::json!({
        "num_heads": p.num_heads,
        "num_patches": data.first().map_or(0, |(s, _)| s.num_patches()),
        "items": items,
    }))
}
