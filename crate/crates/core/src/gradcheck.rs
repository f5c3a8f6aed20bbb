//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each component builds a small random instance, computes its analytic
//! gradient, and compares it tensor by tensor with
//! `(f(θ + h) − f(θ − h)) / 2h`. The error of a tensor is
//! `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖, 1e-8)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::StainAugConfig;
use crate::encoder::{backward, forward_train, EncoderConfig, EncoderParams, TokenSequence};
use crate::heads::{head_gradients, AttnPoolParams, HeadParams, ProbeParams};
use crate::numkernel::{dot, Mat, RngStream};
use crate::params::Parameters;
use crate::raster::Raster;
use crate::ssl::{
    distill_cross_entropy, gram_loss, gram_loss_grad, ibot_loss, ibot_loss_grad, koleo_loss,
    koleo_loss_grad, ProjectionHead, SslConfig, SslState,
};
use crate::{Error, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;

/// Component names in execution and report order.
pub const COMPONENTS: [&str; 10] = [
    "encoder",
    "ssl.dino",
    "ssl.ibot",
    "ssl.koleo",
    "ssl.gram",
    "ssl.projection_head",
    "ssl.objective",
    "heads.linear",
    "heads.attnpool",
    "heads.attnpool_literal",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    /// Test hook: corrupts the analytic gradient of the named component.
    pub inject_fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            step: DEFAULT_STEP,
            inject_fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub tensor: String,
    pub entries: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: String,
    pub worst_rel_error: f64,
    pub worst_tensor: String,
    pub entries_checked: usize,
    pub passed: bool,
    pub tensors: Vec<TensorError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    pub components: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&ComponentResult> {
        self.components.iter().filter(|c| !c.passed).collect()
    }

    /// One line per component with its worst relative error.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.components {
            out.push_str(&format!(
                "{:<24} {:>10.3e}  {:<4} ({} entries, worst tensor {})\n",
                c.component,
                c.worst_rel_error,
                if c.passed { "ok" } else { "FAIL" },
                c.entries_checked,
                c.worst_tensor
            ));
        }
        out
    }
}

/// Runs every component. Components run in parallel; the report order is
/// fixed by [`COMPONENTS`].
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(opts.tolerance > 0.0) || !(opts.step > 0.0) {
        return Err(Error::Config("gradcheck tolerance and step must be positive".into()));
    }
    if let Some(name) = &opts.inject_fault {
        if !COMPONENTS.contains(&name.as_str()) {
            return Err(Error::Config(format!(
                "unknown gradcheck component '{name}'; expected one of {}",
                COMPONENTS.join(", ")
            )));
        }
    }
    let components = COMPONENTS
        .par_iter()
        .enumerate()
        .map(|(i, name)| {
            let rng = RngStream::new(opts.seed, 0x6763_0000 + i as u64);
            let mut checks = component(name, rng, opts.step)?;
            if opts.inject_fault.as_deref() == Some(*name) {
                checks[0].corrupt();
            }
            Ok(summarize(name, &checks, opts))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        seed: opts.seed,
        tolerance: opts.tolerance,
        step: opts.step,
        components,
    })
}

/// Analytic and numeric values for the checked entries of one tensor.
struct Check {
    tensor: String,
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

impl Check {
    fn corrupt(&mut self) {
        self.analytic.iter_mut().for_each(|v| *v *= 1.01);
        self.analytic[0] += 1e-3;
    }

    fn rel_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = dot(&self.analytic, &self.analytic).sqrt();
        let nn = dot(&self.numeric, &self.numeric).sqrt();
        diff / na.max(nn).max(1e-8)
    }
}

fn summarize(name: &str, checks: &[Check], opts: &GradcheckOptions) -> ComponentResult {
    let tensors: Vec<TensorError> = checks
        .iter()
        .map(|c| TensorError {
            tensor: c.tensor.clone(),
            entries: c.analytic.len(),
            rel_error: c.rel_error(),
        })
        .collect();
    let worst = tensors
        .iter()
        .fold(None::<&TensorError>, |w, t| match w {
            Some(w) if w.rel_error >= t.rel_error => Some(w),
            _ => Some(t),
        })
        .expect("every component checks at least one tensor");
    ComponentResult {
        component: name.to_string(),
        worst_rel_error: worst.rel_error,
        worst_tensor: worst.tensor.clone(),
        entries_checked: tensors.iter().map(|t| t.entries).sum(),
        // NaN errors must fail.
        passed: tensors.iter().all(|t| t.rel_error <= opts.tolerance),
        tensors,
    }
}

/// Evenly spaced entry indices; all of them when `limit` is `None`.
fn entry_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < len => (0..l).map(|i| i * len / l).collect(),
        _ => (0..len).collect(),
    }
}

fn check_params<P: Parameters>(
    params: &P,
    grads: &P,
    h: f64,
    limit: Option<usize>,
    f: impl Fn(&P) -> Result<f64>,
) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (ti, (name, g)) in grads.tensors().into_iter().enumerate() {
        let idx = entry_indices(g.len(), limit);
        let mut numeric = Vec::with_capacity(idx.len());
        for &k in &idx {
            let mut p = params.clone();
            p.tensors_mut()[ti].data_mut()[k] += h;
            let lp = f(&p)?;
            let mut m = params.clone();
            m.tensors_mut()[ti].data_mut()[k] -= h;
            let lm = f(&m)?;
            numeric.push((lp - lm) / (2.0 * h));
        }
        out.push(Check {
            tensor: name,
            analytic: idx.iter().map(|&k| g.data()[k]).collect(),
            numeric,
        });
    }
    Ok(out)
}

fn check_input(name: &str, x: &Mat, g: &Mat, h: f64, f: impl Fn(&Mat) -> Result<f64>) -> Result<Check> {
    let mut numeric = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[k] += h;
        let mut m = x.clone();
        m.data_mut()[k] -= h;
        numeric.push((f(&p)? - f(&m)?) / (2.0 * h));
    }
    Ok(Check {
        tensor: name.to_string(),
        analytic: g.data().to_vec(),
        numeric,
    })
}

fn random_mat(rng: &mut RngStream, rows: usize, cols: usize, sigma: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.normal(0.0, sigma))
}

fn random_raster(rng: &mut RngStream, size: usize) -> Raster {
    Raster::from_fn(size, size, |_, _| [0u8; 3].map(|_| 40 + rng.below(180) as u8))
}

fn jitter<P: Parameters>(params: &mut P, rng: &mut RngStream, sigma: f64) {
    for m in params.tensors_mut() {
        m.data_mut().iter_mut().for_each(|v| *v += rng.normal(0.0, sigma));
    }
}

fn random_sequence(rng: &mut RngStream, n: usize, d: usize) -> TokenSequence {
    TokenSequence {
        cls: (0..d).map(|_| rng.normal(0.0, 1.0)).collect(),
        patches: random_mat(rng, n, d, 1.0),
        config_hash: 0,
    }
}

fn component(name: &str, mut rng: RngStream, h: f64) -> Result<Vec<Check>> {
    match name {
        "encoder" => encoder_checks(&mut rng, h),
        "ssl.dino" => {
            let k = 8;
            let s = random_mat(&mut rng, 1, k, 1.0);
            let t = random_mat(&mut rng, 1, k, 1.0);
            let c = random_mat(&mut rng, 1, k, 0.1);
            let (_, g) = distill_cross_entropy(s.data(), t.data(), c.data(), 0.1, 0.04);
            let f = |m: &Mat| Ok(distill_cross_entropy(m.data(), t.data(), c.data(), 0.1, 0.04).0);
            Ok(vec![check_input("student_logits", &s, &Mat::row_vector(g), h, f)?])
        }
        "ssl.ibot" => {
            let cfg = SslConfig::default();
            let s = random_mat(&mut rng, 3, 8, 1.0);
            let t = random_mat(&mut rng, 3, 8, 1.0);
            let c: Vec<f64> = (0..8).map(|_| rng.normal(0.0, 0.1)).collect();
            let (_, g) = ibot_loss_grad(&s, &t, &c, &cfg)?;
            let f = |m: &Mat| ibot_loss(m, &t, &c, &cfg);
            Ok(vec![check_input("student_logits", &s, &g, h, f)?])
        }
        "ssl.koleo" => {
            let x = random_mat(&mut rng, 6, 5, 1.0);
            let (_, g) = koleo_loss_grad(&x)?;
            Ok(vec![check_input("features", &x, &g, h, koleo_loss)?])
        }
        "ssl.gram" => {
            let s = random_mat(&mut rng, 5, 6, 1.0);
            let t = random_mat(&mut rng, 5, 6, 1.0);
            let (_, g) = gram_loss_grad(&s, &t)?;
            let f = |m: &Mat| gram_loss(m, &t);
            Ok(vec![check_input("student_patches", &s, &g, h, f)?])
        }
        "ssl.projection_head" => {
            let mut head = ProjectionHead::init(6, 8, 4, 7, &mut rng);
            jitter(&mut head, &mut rng, 0.3);
            let x = random_mat(&mut rng, 3, 6, 1.0);
            let r = random_mat(&mut rng, 3, 7, 1.0);
            let loss = |p: &ProjectionHead, x: &Mat| -> Result<f64> {
                let (y, _) = p.forward(x)?;
                Ok(dot(y.data(), r.data()))
            };
            let (_, cache) = head.forward(&x)?;
            let (grads, dx) = head.backward(&cache, &r)?;
            let mut checks = check_params(&head, &grads, h, None, |p| loss(p, &x))?;
            checks.push(check_input("input", &x, &dx, h, |m| loss(&head, m))?);
            Ok(checks)
        }
        "ssl.objective" => objective_checks(&mut rng, h),
        "heads.linear" | "heads.attnpool" | "heads.attnpool_literal" => {
            let (n, d, c) = (4, 8, 3);
            let seqs: Vec<TokenSequence> = (0..4).map(|_| random_sequence(&mut rng, n, d)).collect();
            let batch: Vec<(&TokenSequence, usize)> = seqs.iter().zip([0, 1, 2, 1]).collect();
            let params = match name {
                "heads.linear" => {
                    let mut p = ProbeParams::zeros(c, d);
                    jitter(&mut p, &mut rng, 0.5);
                    HeadParams::Linear(p)
                }
                _ => {
                    let mut p = AttnPoolParams::init(c, d, 2, name == "heads.attnpool")?;
                    jitter(&mut p, &mut rng, 0.3);
                    HeadParams::AttnPool(p)
                }
            };
            let (_, grads) = head_gradients(&batch, &params)?;
            check_params(&params, &grads, h, None, |p| Ok(head_gradients(&batch, p)?.0))
        }
        other => Err(Error::Config(format!("unknown gradcheck component '{other}'"))),
    }
}

/// Two blocks, D = 16, N = 4, with one masked position; the loss is a
/// fixed random linear functional of the final hidden states.
fn encoder_checks(rng: &mut RngStream, h: f64) -> Result<Vec<Check>> {
    let cfg = EncoderConfig {
        image_size: 8,
        token_size: 4,
        embed_dim: 16,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
    };
    let mut params = EncoderParams::init(&cfg, rng)?;
    jitter(&mut params, rng, 0.2);
    let raster = random_raster(rng, cfg.image_size);
    let mask = [false, true, false, false];
    let r_cls: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.normal(0.0, 1.0)).collect();
    let r_patches = random_mat(rng, cfg.num_patches(), cfg.embed_dim, 1.0);
    let loss = |p: &EncoderParams| -> Result<f64> {
        let (seq, _) = forward_train(&raster, Some(&mask), p)?;
        Ok(dot(&seq.cls, &r_cls) + dot(seq.patches.data(), r_patches.data()))
    };
    let (_, cache) = forward_train(&raster, Some(&mask), &params)?;
    let grads = backward(&params, &cache, &r_cls, &r_patches)?;
    check_params(&params, &grads, h, None, loss)
}

/// The full post-training objective (all four terms) on a three-image batch,
/// sampled at eight entries per tensor.
fn objective_checks(rng: &mut RngStream, h: f64) -> Result<Vec<Check>> {
    let enc = EncoderConfig {
        image_size: 16,
        token_size: 8,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 2.0,
    };
    let cfg = SslConfig {
        prototype_count: 8,
        batch_size: 3,
        koleo_weight: 0.5,
        stain: StainAugConfig::disabled(),
        ..Default::default()
    };
    let mut st = SslState::new(&enc, &cfg, rng.next_u64())?;
    jitter(&mut st.student, rng, 0.3);
    st.teacher = st.student.clone();
    jitter(&mut st.teacher, rng, 0.1);
    st.begin_posttrain(st.teacher.encoder.clone())?;
    let batch: Vec<Raster> = (0..3).map(|_| random_raster(rng, enc.image_size)).collect();
    let step_rng = rng.substream(1);
    let (_, grad, _, _) = st.objective(&batch, &step_rng)?;
    let student = st.student.clone();
    check_params(&student, &grad, h, Some(8), |p| {
        let mut s = st.clone();
        s.student = p.clone();
        Ok(s.objective(&batch, &step_rng)?.0.total)
    })
}
