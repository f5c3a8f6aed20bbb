//! Self-supervised objective and the student / EMA-teacher loop.
//!
//! Pretraining minimizes `dino + ibot + koleo_weight·koleo`; post-training adds
//! `gram_weight·gram` against a frozen Gram-teacher encoder. Each loss term is
//! defined in exactly one function below and ships its analytic gradient.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{stain_augment, StainAugConfig};
use crate::encoder::{
    backward, forward_train_patches, patchify, EncoderConfig, EncoderParams, ForwardCache,
    TokenSequence, INIT_STD,
};
use crate::error::{Error, Result};
use crate::numkernel::{
    dot, gelu, gelu_grad, log_softmax, matmul, matmul_nt, matmul_tn, softmax, Mat, RngStream,
};
use crate::params::{ema_update, mean_in_order, Adam, Checkpoint, Parameters};
use crate::raster::Raster;

/// Floor inside the log of the student probabilities.
pub const LOG_EPS: f64 = 1e-12;
/// Clamp on nearest-neighbour distances in the Koleo term.
pub const KOLEO_EPS: f64 = 1e-8;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Posttrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub prototype_count: usize,
    /// Projection-head hidden width; 0 means `2·D`.
    pub proj_hidden: usize,
    /// Normalized bottleneck width; 0 means `D`.
    pub proj_bottleneck: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    pub ema_momentum: f64,
    pub mask_fraction: f64,
    pub koleo_weight: f64,
    pub gram_weight: f64,
    pub gram_teacher_checkpoint: Option<PathBuf>,
    /// Re-snapshot the Gram teacher from the EMA teacher every this many
    /// post-training steps; 0 keeps it fixed.
    pub gram_refresh: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub stain: StainAugConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            prototype_count: 256,
            proj_hidden: 0,
            proj_bottleneck: 0,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            ema_momentum: 0.99,
            mask_fraction: 0.3,
            koleo_weight: 0.1,
            gram_weight: 1.0,
            gram_teacher_checkpoint: None,
            gram_refresh: 0,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 16,
            stain: StainAugConfig::default(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.prototype_count < 2 {
            return bad("prototype_count must be at least 2");
        }
        if !(self.teacher_temp > 0.0 && self.student_temp > self.teacher_temp) {
            return bad("temperatures must satisfy student_temp > teacher_temp > 0");
        }
        for (name, v) in [
            ("center_momentum", self.center_momentum),
            ("ema_momentum", self.ema_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return bad("mask_fraction must lie in (0, 1)");
        }
        if !(self.koleo_weight >= 0.0 && self.gram_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr >= 0.0) || self.batch_size < 2 {
            return bad("lr must be non-negative and batch_size at least 2");
        }
        self.stain.validate()
    }

    pub fn bottleneck_for(&self, dim: usize) -> usize {
        if self.proj_bottleneck == 0 {
            dim
        } else {
            self.proj_bottleneck
        }
    }

    pub fn hidden_for(&self, dim: usize) -> usize {
        if self.proj_hidden == 0 {
            2 * dim
        } else {
            self.proj_hidden
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dino: f64,
    pub ibot: f64,
    pub koleo: f64,
    pub gram: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(dino: f64, ibot: f64, koleo: f64, gram: f64, cfg: &SslConfig) -> Self {
        LossBreakdown {
            dino,
            ibot,
            koleo,
            gram,
            total: dino + ibot + cfg.koleo_weight * koleo + cfg.gram_weight * gram,
        }
    }
}

/// `H(P_t, P_s)` with `P_t = softmax((teacher − center)/τ_t)` and
/// `P_s = softmax(student/τ_s)`, and its gradient in the student logits.
/// No gradient flows to the teacher.
pub fn distill_cross_entropy(
    student: &[f64],
    teacher: &[f64],
    center: &[f64],
    student_temp: f64,
    teacher_temp: f64,
) -> (f64, Vec<f64>) {
    let t: Vec<f64> = teacher
        .iter()
        .zip(center)
        .map(|(t, c)| (t - c) / teacher_temp)
        .collect();
    let pt = softmax(&t);
    let s: Vec<f64> = student.iter().map(|v| v / student_temp).collect();
    let log_ps = log_softmax(&s);
    let floor = LOG_EPS.ln();
    let mut loss = 0.0;
    let mut unclamped_mass = 0.0;
    for (&p, &lp) in pt.iter().zip(&log_ps) {
        if lp < floor {
            loss -= p * floor;
        } else {
            loss -= p * lp;
            unclamped_mass += p;
        }
    }
    // d/ds_j of −Σ_{k∈U} p_k log ps_k over unclamped k: (ps_j·Σ_U p_k − [j∈U] p_j)/τ_s.
    let grad = log_ps
        .iter()
        .zip(&pt)
        .map(|(&lp, &p)| {
            let own = if lp >= floor { p } else { 0.0 };
            (lp.exp() * unclamped_mass - own) / student_temp
        })
        .collect();
    (loss, grad)
}

/// Image-level term on class-token prototype logits.
pub fn dino_loss(student: &[f64], teacher: &[f64], center: &[f64], cfg: &SslConfig) -> f64 {
    distill_cross_entropy(student, teacher, center, cfg.student_temp, cfg.teacher_temp).0
}

/// Mean over the `M` masked positions of the same cross-entropy, with the
/// gradient in the student rows.
pub fn ibot_loss_grad(
    student: &Mat,
    teacher: &Mat,
    center: &[f64],
    cfg: &SslConfig,
) -> Result<(f64, Mat)> {
    if student.rows() == 0 {
        return Err(Error::Parameter("iBOT term needs at least one masked position".into()));
    }
    if student.shape() != teacher.shape() || student.cols() != center.len() {
        return Err(Error::Shape(format!(
            "student {:?}, teacher {:?}, center {}",
            student.shape(),
            teacher.shape(),
            center.len()
        )));
    }
    let m = student.rows() as f64;
    let mut grad = Mat::zeros(student.rows(), student.cols());
    let mut loss = 0.0;
    for i in 0..student.rows() {
        let (l, g) = distill_cross_entropy(
            student.row(i),
            teacher.row(i),
            center,
            cfg.student_temp,
            cfg.teacher_temp,
        );
        loss += l / m;
        for (d, v) in grad.row_mut(i).iter_mut().zip(g) {
            *d = v / m;
        }
    }
    Ok((loss, grad))
}

pub fn ibot_loss(student: &Mat, teacher: &Mat, center: &[f64], cfg: &SslConfig) -> Result<f64> {
    ibot_loss_grad(student, teacher, center, cfg).map(|(l, _)| l)
}

/// Row-wise ℓ2 normalization; returns the normalized rows and the norms.
fn normalize_rows(x: &Mat) -> (Mat, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = dot(x.row(i), x.row(i)).sqrt().max(NORM_FLOOR);
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

/// Pulls a gradient on normalized rows back to the raw rows.
fn normalize_rows_backward(xhat: &Mat, norms: &[f64], dxhat: &Mat) -> Mat {
    let mut dx = dxhat.clone();
    for i in 0..xhat.rows() {
        let proj = dot(xhat.row(i), dxhat.row(i));
        for (d, xh) in dx.row_mut(i).iter_mut().zip(xhat.row(i)) {
            *d = (*d - proj * xh) / norms[i];
        }
    }
    dx
}

/// Nearest neighbour of each normalized row and the distance to it.
fn nearest_neighbours(xhat: &Mat) -> Vec<(usize, f64)> {
    let n = xhat.rows();
    (0..n)
        .map(|i| {
            let mut best = (usize::MAX, f64::INFINITY);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d2: f64 = xhat
                    .row(i)
                    .iter()
                    .zip(xhat.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 < best.1 {
                    best = (j, d2);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect()
}

/// `−(1/n) Σ_i log max(d_i, ε)` over ℓ2-normalized rows, `d_i` the distance to
/// the nearest other row; gradient in the raw rows.
pub fn koleo_loss_grad(x: &Mat) -> Result<(f64, Mat)> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Parameter(format!("Koleo term needs at least 2 rows, got {n}")));
    }
    let (xhat, norms) = normalize_rows(x);
    let nn = nearest_neighbours(&xhat);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dxhat = Mat::zeros(n, x.cols());
    for (i, &(j, d)) in nn.iter().enumerate() {
        if d > KOLEO_EPS {
            loss -= inv_n * d.ln();
            let coef = -inv_n / (d * d);
            for k in 0..x.cols() {
                let diff = xhat.get(i, k) - xhat.get(j, k);
                dxhat.row_mut(i)[k] += coef * diff;
                dxhat.row_mut(j)[k] -= coef * diff;
            }
        } else {
            loss -= inv_n * KOLEO_EPS.ln();
        }
    }
    Ok((loss, normalize_rows_backward(&xhat, &norms, &dxhat)))
}

pub fn koleo_loss(x: &Mat) -> Result<f64> {
    koleo_loss_grad(x).map(|(l, _)| l)
}

/// `(1/N²)·‖X̂_s X̂_sᵀ − X̂_g X̂_gᵀ‖_F²` on ℓ2-normalized rows; gradient in the
/// raw student rows.
pub fn gram_loss_grad(student: &Mat, teacher: &Mat) -> Result<(f64, Mat)> {
    if student.rows() != teacher.rows() {
        return Err(Error::Shape(format!(
            "Gram term: {} student rows vs {} teacher rows",
            student.rows(),
            teacher.rows()
        )));
    }
    let n = student.rows();
    if n == 0 {
        return Ok((0.0, student.clone()));
    }
    let (xs, ns) = normalize_rows(student);
    let (xg, _) = normalize_rows(teacher);
    let gs = matmul_nt(&xs, &xs)?;
    let gg = matmul_nt(&xg, &xg)?;
    let diff = gs.sub(&gg)?;
    let n2 = (n * n) as f64;
    let loss = diff.frobenius_sq() / n2;
    let dxhat = matmul(&diff, &xs)?.scaled(4.0 / n2);
    Ok((loss, normalize_rows_backward(&xs, &ns, &dxhat)))
}

pub fn gram_loss(student: &Mat, teacher: &Mat) -> Result<f64> {
    gram_loss_grad(student, teacher).map(|(l, _)| l)
}

/// Prototype rows are only used through their directions, so their initial
/// scale sets the effective optimizer step on those directions.
pub const PROTO_INIT_STD: f64 = 1.0;

/// Two-layer GELU MLP into a bottleneck, ℓ2-normalized, scored against
/// ℓ2-normalized prototype rows: logits are cosine similarities in `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub fc1_w: Mat,
    pub fc1_b: Mat,
    pub fc2_w: Mat,
    pub fc2_b: Mat,
    /// `K × bottleneck`; only row directions matter.
    pub proto_w: Mat,
}

pub struct HeadCache {
    input: Mat,
    pre: Mat,
    act: Mat,
    unit: Mat,
    norms: Vec<f64>,
    protos: Mat,
    proto_norms: Vec<f64>,
}

impl ProjectionHead {
    pub fn init(dim: usize, hidden: usize, bottleneck: usize, prototypes: usize, rng: &mut RngStream) -> Self {
        ProjectionHead {
            fc1_w: Mat::from_fn(dim, hidden, |_, _| rng.truncated_normal(INIT_STD)),
            fc1_b: Mat::zeros(1, hidden),
            fc2_w: Mat::from_fn(hidden, bottleneck, |_, _| rng.truncated_normal(INIT_STD)),
            fc2_b: Mat::zeros(1, bottleneck),
            proto_w: Mat::from_fn(prototypes, bottleneck, |_, _| rng.normal(0.0, PROTO_INIT_STD)),
        }
    }

    pub fn prototypes(&self) -> usize {
        self.proto_w.rows()
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, HeadCache)> {
        let mut pre = matmul(x, &self.fc1_w)?;
        pre.add_row_broadcast(self.fc1_b.data());
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut y = matmul(&act, &self.fc2_w)?;
        y.add_row_broadcast(self.fc2_b.data());
        let (unit, norms) = normalize_rows(&y);
        let (protos, proto_norms) = normalize_rows(&self.proto_w);
        let logits = matmul_nt(&unit, &protos)?;
        Ok((
            logits,
            HeadCache {
                input: x.clone(),
                pre,
                act,
                unit,
                norms,
                protos,
                proto_norms,
            },
        ))
    }

    /// Parameter gradients and the gradient in the input rows.
    pub fn backward(&self, cache: &HeadCache, dlogits: &Mat) -> Result<(ProjectionHead, Mat)> {
        let dunit = matmul(dlogits, &cache.protos)?;
        let dprotos = matmul_tn(dlogits, &cache.unit)?;
        let proto_w = normalize_rows_backward(&cache.protos, &cache.proto_norms, &dprotos);
        let dy = normalize_rows_backward(&cache.unit, &cache.norms, &dunit);
        let fc2_w = matmul_tn(&cache.act, &dy)?;
        let fc2_b = Mat::row_vector(dy.col_sums());
        let mut dpre = matmul_nt(&dy, &self.fc2_w)?;
        for (d, p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_grad(*p);
        }
        let fc1_w = matmul_tn(&cache.input, &dpre)?;
        let fc1_b = Mat::row_vector(dpre.col_sums());
        let dx = matmul_nt(&dpre, &self.fc1_w)?;
        Ok((
            ProjectionHead {
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
                proto_w,
            },
            dx,
        ))
    }
}

impl Parameters for ProjectionHead {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        vec![
            ("fc1_w".into(), &self.fc1_w),
            ("fc1_b".into(), &self.fc1_b),
            ("fc2_w".into(), &self.fc2_w),
            ("fc2_b".into(), &self.fc2_b),
            ("proto_w".into(), &self.proto_w),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
            &mut self.proto_w,
        ]
    }
}

/// Encoder plus the class-token (DINO) and patch-token (iBOT) heads.
#[derive(Clone, Debug, PartialEq)]
pub struct SslModel {
    pub encoder: EncoderParams,
    pub cls_head: ProjectionHead,
    pub patch_head: ProjectionHead,
}

impl SslModel {
    pub fn init(enc: &EncoderConfig, cfg: &SslConfig, rng: &mut RngStream) -> Result<Self> {
        let encoder = EncoderParams::init(enc, rng)?;
        let d = enc.embed_dim;
        let h = cfg.hidden_for(d);
        let b = cfg.bottleneck_for(d);
        let cls_head = ProjectionHead::init(d, h, b, cfg.prototype_count, rng);
        let patch_head = ProjectionHead::init(d, h, b, cfg.prototype_count, rng);
        Ok(SslModel {
            encoder,
            cls_head,
            patch_head,
        })
    }
}

impl Parameters for SslModel {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut v = Vec::new();
        for (prefix, part) in [
            ("encoder.", self.encoder.tensors()),
            ("cls_head.", self.cls_head.tensors()),
            ("patch_head.", self.patch_head.tensors()),
        ] {
            v.extend(part.into_iter().map(|(n, m)| (format!("{prefix}{n}"), m)));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.cls_head.tensors_mut());
        v.extend(self.patch_head.tensors_mut());
        v
    }
}

/// Draws `max(1, round(f·N))` distinct masked positions.
pub fn sample_mask(n: usize, fraction: f64, rng: &mut RngStream) -> Vec<bool> {
    let m = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut mask = vec![false; n];
    idx[..m].iter().for_each(|&i| mask[i] = true);
    mask
}

/// Full training state: student, EMA teacher, centers, optimizer and the
/// optional frozen Gram teacher.
#[derive(Clone, Debug)]
pub struct SslState {
    pub encoder_config: EncoderConfig,
    pub config: SslConfig,
    pub student: SslModel,
    pub teacher: SslModel,
    pub center: Vec<f64>,
    pub patch_center: Vec<f64>,
    pub gram_teacher: Option<EncoderParams>,
    pub step: u64,
    pub phase: Phase,
    optimizer: Adam,
}

struct ViewOutput {
    cache: ForwardCache,
    cls_cache: HeadCache,
    patch_cache: Option<HeadCache>,
    student_cls_logits: Vec<f64>,
    student_cls: Vec<f64>,
    teacher_cls_logits: Vec<f64>,
    masked: Vec<usize>,
    student_patch_logits: Mat,
    teacher_patch_logits: Mat,
    student_patches: Mat,
    gram_patches: Option<Mat>,
}

struct ItemGrads {
    dino: f64,
    ibot: f64,
    gram: f64,
    views: [ViewOutput; 2],
    d_cls_logits: [Vec<f64>; 2],
    d_patches: [Mat; 2],
    head_grads: (ProjectionHead, ProjectionHead),
}

fn check_finite(site: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(site, format!("loss term evaluated to {v}")))
    }
}

impl SslState {
    pub fn new(encoder_config: &EncoderConfig, config: &SslConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        encoder_config.validate()?;
        let student = SslModel::init(encoder_config, config, &mut RngStream::new(seed, 0x55_4c))?;
        let teacher = student.clone();
        let optimizer = Adam::new(&student, config.lr).with_weight_decay(config.weight_decay);
        Ok(SslState {
            encoder_config: encoder_config.clone(),
            config: config.clone(),
            center: vec![0.0; config.prototype_count],
            patch_center: vec![0.0; config.prototype_count],
            student,
            teacher,
            gram_teacher: None,
            step: 0,
            phase: Phase::Pretrain,
            optimizer,
        })
    }

    /// Enters post-training with a frozen Gram teacher encoder.
    pub fn begin_posttrain(&mut self, gram_teacher: EncoderParams) -> Result<()> {
        if gram_teacher.config != self.encoder_config {
            return Err(Error::Config("Gram teacher encoder config differs".into()));
        }
        self.gram_teacher = Some(gram_teacher);
        self.phase = Phase::Posttrain;
        Ok(())
    }

    fn view_forward(&self, patches: Mat, mask: Vec<bool>, posttrain: bool) -> Result<ViewOutput> {
        let (t_seq, _) = forward_train_patches(patches.clone(), None, &self.teacher.encoder)?;
        let gram_patches = match (&self.gram_teacher, posttrain) {
            (Some(g), true) => Some(forward_train_patches(patches.clone(), None, g)?.0.patches),
            _ => None,
        };
        let (s_seq, cache) = forward_train_patches(patches, Some(&mask), &self.student.encoder)?;
        let masked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let (s_cls_logits, cls_cache) = self.student.cls_head.forward(&Mat::row_vector(s_seq.cls.clone()))?;
        let (t_cls_logits, _) = self.teacher.cls_head.forward(&Mat::row_vector(t_seq.cls.clone()))?;
        let (s_patch_logits, patch_cache) =
            self.student.patch_head.forward(&s_seq.patches.select_rows(&masked))?;
        let (t_patch_logits, _) = self.teacher.patch_head.forward(&t_seq.patches.select_rows(&masked))?;
        let TokenSequence { cls, patches, .. } = s_seq;
        Ok(ViewOutput {
            cache,
            cls_cache,
            patch_cache: Some(patch_cache),
            student_cls_logits: s_cls_logits.into_data(),
            student_cls: cls,
            teacher_cls_logits: t_cls_logits.into_data(),
            masked,
            student_patch_logits: s_patch_logits,
            teacher_patch_logits: t_patch_logits,
            student_patches: patches,
            gram_patches,
        })
    }

    fn item_phase_one(&self, raster: &Raster, mut rng: RngStream, posttrain: bool) -> Result<ItemGrads> {
        let cfg = &self.config;
        let n = self.encoder_config.num_patches();
        let mut views = Vec::with_capacity(2);
        for _ in 0..2 {
            let v = stain_augment(raster, &cfg.stain, &mut rng)?;
            let mask = sample_mask(n, cfg.mask_fraction, &mut rng);
            views.push(self.view_forward(patchify(&v, &self.encoder_config)?, mask, posttrain)?);
        }
        let [v1, v2]: [ViewOutput; 2] = views.try_into().ok().expect("two views");
        // Cross-view class-token distillation.
        let (l12, g2) = distill_cross_entropy(
            &v2.student_cls_logits,
            &v1.teacher_cls_logits,
            &self.center,
            cfg.student_temp,
            cfg.teacher_temp,
        );
        let (l21, g1) = distill_cross_entropy(
            &v1.student_cls_logits,
            &v2.teacher_cls_logits,
            &self.center,
            cfg.student_temp,
            cfg.teacher_temp,
        );
        let dino = check_finite("dino", 0.5 * (l12 + l21))?;
        let d_cls_logits = [
            g1.iter().map(|g| 0.5 * g).collect::<Vec<_>>(),
            g2.iter().map(|g| 0.5 * g).collect::<Vec<_>>(),
        ];
        let mut ibot = 0.0;
        let mut gram = 0.0;
        let mut d_patches = Vec::with_capacity(2);
        let mut patch_head_grad = self.student.patch_head.zeros_like();
        for v in [&v1, &v2] {
            let (l, dlogits) = ibot_loss_grad(
                &v.student_patch_logits,
                &v.teacher_patch_logits,
                &self.patch_center,
                cfg,
            )?;
            ibot += 0.5 * l;
            let (hg, dx) = self
                .student
                .patch_head
                .backward(v.patch_cache.as_ref().expect("patch cache"), &dlogits.scaled(0.5))?;
            patch_head_grad.add_scaled(1.0, &hg);
            let mut dp = Mat::zeros(n, self.encoder_config.embed_dim);
            for (r, &pos) in v.masked.iter().enumerate() {
                dp.row_mut(pos).copy_from_slice(dx.row(r));
            }
            if let Some(gp) = &v.gram_patches {
                let (lg, dg) = gram_loss_grad(&v.student_patches, gp)?;
                gram += 0.5 * lg;
                dp.axpy(0.5 * cfg.gram_weight, &dg);
            }
            d_patches.push(dp);
        }
        check_finite("ibot", ibot)?;
        check_finite("gram", gram)?;
        let d_patches: [Mat; 2] = d_patches.try_into().ok().expect("two views");
        Ok(ItemGrads {
            dino,
            ibot,
            gram,
            views: [v1, v2],
            d_cls_logits,
            d_patches,
            head_grads: (self.student.cls_head.zeros_like(), patch_head_grad),
        })
    }

    fn item_phase_two(&self, item: &ItemGrads, d_cls_extra: [&[f64]; 2]) -> Result<SslModel> {
        let mut grad = self.student.zeros_like();
        grad.patch_head = item.head_grads.1.clone();
        for v in 0..2 {
            let dlogits = Mat::row_vector(item.d_cls_logits[v].clone());
            let (hg, dx) = self.student.cls_head.backward(&item.views[v].cls_cache, &dlogits)?;
            grad.cls_head.add_scaled(1.0, &hg);
            let mut d_cls = dx.into_data();
            for (d, e) in d_cls.iter_mut().zip(d_cls_extra[v]) {
                *d += e;
            }
            let eg = backward(
                &self.student.encoder,
                &item.views[v].cache,
                &d_cls,
                &item.d_patches[v],
            )?;
            grad.encoder.add_scaled(1.0, &eg);
        }
        Ok(grad)
    }

    /// Loss breakdown and mean student gradient for `batch`, without
    /// touching any state.
    pub fn objective(&self, batch: &[Raster], rng: &RngStream) -> Result<(LossBreakdown, SslModel, Vec<Vec<f64>>, Vec<Mat>)> {
        let cfg = &self.config;
        if batch.len() < 2 {
            return Err(Error::Parameter("a training batch needs at least 2 rasters".into()));
        }
        let posttrain = self.phase == Phase::Posttrain;
        if posttrain && self.gram_teacher.is_none() {
            return Err(Error::Config("post-training requires a Gram teacher checkpoint".into()));
        }
        let items: Vec<ItemGrads> = batch
            .par_iter()
            .enumerate()
            .map(|(i, r)| self.item_phase_one(r, rng.substream(i as u64), posttrain))
            .collect::<Result<_>>()?;
        let b = batch.len();
        let mut koleo = 0.0;
        let mut d_koleo = Vec::with_capacity(2);
        for v in 0..2 {
            let rows: Vec<Vec<f64>> = items.iter().map(|it| it.views[v].student_cls.clone()).collect();
            let (l, g) = koleo_loss_grad(&Mat::from_rows(&rows)?)?;
            koleo += 0.5 * l;
            // The per-item gradients below are averaged over the batch, so the
            // batch-level Koleo gradient is pre-multiplied by B.
            d_koleo.push(g.scaled(0.5 * cfg.koleo_weight * b as f64));
        }
        check_finite("koleo", koleo)?;
        let grads: Vec<SslModel> = items
            .par_iter()
            .enumerate()
            .map(|(i, it)| self.item_phase_two(it, [d_koleo[0].row(i), d_koleo[1].row(i)]))
            .collect::<Result<_>>()?;
        let grad = mean_in_order(&grads).expect("non-empty batch");
        let inv_b = 1.0 / b as f64;
        let dino = items.iter().map(|it| it.dino).sum::<f64>() * inv_b;
        let ibot = items.iter().map(|it| it.ibot).sum::<f64>() * inv_b;
        let gram = if posttrain {
            items.iter().map(|it| it.gram).sum::<f64>() * inv_b
        } else {
            0.0
        };
        let losses = LossBreakdown::combine(dino, ibot, koleo, gram, cfg);
        let teacher_cls: Vec<Vec<f64>> = items
            .iter()
            .flat_map(|it| it.views.iter().map(|v| v.teacher_cls_logits.clone()))
            .collect();
        let teacher_patch: Vec<Mat> = items
            .iter()
            .flat_map(|it| it.views.iter().map(|v| v.teacher_patch_logits.clone()))
            .collect();
        Ok((losses, grad, teacher_cls, teacher_patch))
    }

    /// One optimizer step on the student, then the EMA teacher and center
    /// updates. `rng` seeds the augmentations and masks of this step.
    pub fn train_step(&mut self, batch: &[Raster], rng: &RngStream) -> Result<LossBreakdown> {
        let (losses, grad, teacher_cls, teacher_patch) = self.objective(batch, rng)?;
        check_finite("total", losses.total)?;
        if !grad.all_finite() {
            return Err(Error::numeric("gradient", "non-finite student gradient"));
        }
        self.optimizer.step(&mut self.student, &grad);
        ema_update(&mut self.teacher, &self.student, self.config.ema_momentum);
        let m = self.config.center_momentum;
        let k = self.config.prototype_count;
        let mut mean_cls = vec![0.0; k];
        for row in &teacher_cls {
            mean_cls.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        let mut mean_patch = vec![0.0; k];
        let mut patch_rows = 0usize;
        for mat in &teacher_patch {
            for r in 0..mat.rows() {
                mean_patch.iter_mut().zip(mat.row(r)).for_each(|(a, v)| *a += v);
            }
            patch_rows += mat.rows();
        }
        for (c, s) in self.center.iter_mut().zip(&mean_cls) {
            *c = m * *c + (1.0 - m) * s / teacher_cls.len() as f64;
        }
        for (c, s) in self.patch_center.iter_mut().zip(&mean_patch) {
            *c = m * *c + (1.0 - m) * s / patch_rows.max(1) as f64;
        }
        self.step += 1;
        if self.phase == Phase::Posttrain && self.config.gram_refresh > 0 && self.step % self.config.gram_refresh as u64 == 0 {
            self.gram_teacher = Some(self.teacher.encoder.clone());
        }
        Ok(losses)
    }

    /// Runs `steps` steps over `corpus`, drawing each batch without
    /// replacement from a per-step permutation. `on_step` sees each loss.
    pub fn run(
        &mut self,
        corpus: &[Raster],
        steps: usize,
        seed: u64,
        mut on_step: impl FnMut(u64, &LossBreakdown),
    ) -> Result<Vec<LossBreakdown>> {
        let b = self.config.batch_size.min(corpus.len());
        if b < 2 {
            return Err(Error::Parameter("training corpus needs at least 2 rasters".into()));
        }
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let step = self.step;
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            RngStream::new(seed, 0x6261_7463).substream(step).shuffle(&mut order);
            let batch: Vec<Raster> = order[..b].iter().map(|&i| corpus[i].clone()).collect();
            let losses = self.train_step(&batch, &RngStream::new(seed, 0x6175_6700).substream(step))?;
            on_step(step, &losses);
            out.push(losses);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "encoder": self.encoder_config,
            "ssl": self.config,
            "step": self.step,
            "phase": self.phase,
        });
        let mut ck = Checkpoint::new("ssl", meta);
        ck.push_params("student.", &self.student);
        ck.push_params("teacher.", &self.teacher);
        ck.tensors.push(("center".into(), Mat::row_vector(self.center.clone())));
        ck.tensors.push(("patch_center".into(), Mat::row_vector(self.patch_center.clone())));
        Ok(ck)
    }

    /// Restores student, teacher and centers; optimizer moments start fresh.
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<&SslConfig>) -> Result<Self> {
        if ck.kind != "ssl" {
            return Err(Error::Config(format!("expected an ssl checkpoint, found {:?}", ck.kind)));
        }
        let enc: EncoderConfig = serde_json::from_value(ck.meta["encoder"].clone())?;
        let stored: SslConfig = serde_json::from_value(ck.meta["ssl"].clone())?;
        let cfg = config.cloned().unwrap_or(stored);
        let mut st = SslState::new(&enc, &cfg, 0)?;
        ck.load_params("student.", &mut st.student)?;
        ck.load_params("teacher.", &mut st.teacher)?;
        let vec_of = |name: &str| -> Result<Vec<f64>> {
            let m = ck
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
            if m.len() != cfg.prototype_count {
                return Err(Error::Shape(format!("{name} has {} entries", m.len())));
            }
            Ok(m.data().to_vec())
        };
        st.center = vec_of("center")?;
        st.patch_center = vec_of("patch_center")?;
        st.step = ck.meta["step"].as_u64().unwrap_or(0);
        st.optimizer = Adam::new(&st.student, cfg.lr).with_weight_decay(cfg.weight_decay);
        Ok(st)
    }
}

/// Encoder used for embedding from an ssl checkpoint (the EMA teacher), or
/// the bare encoder stored in an `encoder` checkpoint.
pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<EncoderParams> {
    let enc: EncoderConfig = serde_json::from_value(ck.meta["encoder"].clone())?;
    match ck.kind.as_str() {
        "ssl" => EncoderParams::from_checkpoint(&enc, ck, "teacher.encoder."),
        "encoder" => EncoderParams::from_checkpoint(&enc, ck, ""),
        other => Err(Error::Config(format!("checkpoint kind {other:?} holds no encoder"))),
    }
}
