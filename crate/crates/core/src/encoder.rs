//! Small vision transformer: patchify, embed, prepend the class token, add
//! learned positions, run pre-norm blocks and a final layer norm.
//!
//! Backpropagation is written out per layer; [`backward`] consumes the
//! [`ForwardCache`] produced by [`forward_train`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_forward, matmul, matmul_nt, matmul_tn,
    softmax_rows, softmax_rows_backward, LayerNormCache, Mat, RngStream,
};
use crate::params::{fingerprint_u64, Checkpoint, Parameters};
use crate::raster::Raster;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub token_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for EncoderConfig {
    /// Desk-scale default: 64×64 input, 16-pixel tokens (N = 16), D = 64, four blocks.
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            token_size: 16,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_size == 0 || self.image_size == 0 || self.image_size % self.token_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of token_size {}",
                self.image_size, self.token_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.token_size
    }

    /// N = (H/t)·(W/t).
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per flattened token: t·t·3.
    pub fn patch_dim(&self) -> usize {
        self.token_size * self.token_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn hash(&self) -> u64 {
        fingerprint_u64(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub qkv_w: Mat,
    pub qkv_b: Mat,
    pub proj_w: Mat,
    pub proj_b: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
    pub fc1_w: Mat,
    pub fc1_b: Mat,
    pub fc2_w: Mat,
    pub fc2_b: Mat,
}

impl BlockParams {
    fn init(d: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut w = |r, c| Mat::from_fn(r, c, |_, _| rng.truncated_normal(INIT_STD));
        BlockParams {
            ln1_g: Mat::filled(1, d, 1.0),
            ln1_b: Mat::zeros(1, d),
            qkv_w: w(d, 3 * d),
            qkv_b: Mat::zeros(1, 3 * d),
            proj_w: w(d, d),
            proj_b: Mat::zeros(1, d),
            ln2_g: Mat::filled(1, d, 1.0),
            ln2_b: Mat::zeros(1, d),
            fc1_w: w(d, hidden),
            fc1_b: Mat::zeros(1, hidden),
            fc2_w: w(hidden, d),
            fc2_b: Mat::zeros(1, d),
        }
    }

    fn named(&self) -> [(&'static str, &Mat); 12] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("qkv_w", &self.qkv_w),
            ("qkv_b", &self.qkv_b),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("fc1_w", &self.fc1_w),
            ("fc1_b", &self.fc1_b),
            ("fc2_w", &self.fc2_w),
            ("fc2_b", &self.fc2_b),
        ]
    }

    fn all_mut(&mut self) -> [&mut Mat; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }
}

/// All trainable encoder tensors. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// Token projection, `patch_dim × D`.
    pub patch_w: Mat,
    pub patch_b: Mat,
    /// Learned positions, `(N+1) × D`; row 0 belongs to the class token.
    pub pos: Mat,
    pub cls: Mat,
    pub mask_token: Mat,
    pub blocks: Vec<BlockParams>,
    pub norm_g: Mat,
    pub norm_b: Mat,
}

impl EncoderParams {
    /// Truncated-normal weights (σ = 0.02), zero biases, zero class and mask tokens.
    pub fn init(config: &EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let patch_w = Mat::from_fn(config.patch_dim(), d, |_, _| rng.truncated_normal(INIT_STD));
        let pos = Mat::from_fn(config.num_patches() + 1, d, |_, _| rng.truncated_normal(INIT_STD));
        let blocks = (0..config.depth)
            .map(|_| BlockParams::init(d, config.hidden_dim(), rng))
            .collect();
        Ok(EncoderParams {
            config: config.clone(),
            patch_w,
            patch_b: Mat::zeros(1, d),
            pos,
            cls: Mat::zeros(1, d),
            mask_token: Mat::zeros(1, d),
            blocks,
            norm_g: Mat::filled(1, d, 1.0),
            norm_b: Mat::zeros(1, d),
        })
    }

    pub fn from_checkpoint(config: &EncoderConfig, ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut p = EncoderParams::init(config, &mut RngStream::new(0, 0))?;
        ck.load_params(prefix, &mut p)?;
        Ok(p)
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut v: Vec<(String, &Mat)> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("pos".into(), &self.pos),
            ("cls".into(), &self.cls),
            ("mask_token".into(), &self.mask_token),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, m) in b.named() {
                v.push((format!("blocks.{i}.{name}"), m));
            }
        }
        v.push(("norm_g".into(), &self.norm_g));
        v.push(("norm_b".into(), &self.norm_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.pos,
            &mut self.cls,
            &mut self.mask_token,
        ];
        for b in &mut self.blocks {
            v.extend(b.all_mut());
        }
        v.push(&mut self.norm_g);
        v.push(&mut self.norm_b);
        v
    }
}

/// Final hidden states: class token plus N patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub cls: Vec<f64>,
    pub patches: Mat,
    pub config_hash: u64,
}

impl TokenSequence {
    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }

    pub fn dim(&self) -> usize {
        self.cls.len()
    }

    fn from_rows(z: &Mat, config_hash: u64) -> Self {
        TokenSequence {
            cls: z.row(0).to_vec(),
            patches: z.slice_rows(1, z.rows()),
            config_hash,
        }
    }
}

/// Fixed pixel standardization `(v/255 − PIXEL_MEAN) / PIXEL_STD`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Flattens the raster into N rows of `t·t·3` standardized values, tokens in
/// row-major grid order, pixels row-major within a token.
pub fn patchify(r: &Raster, config: &EncoderConfig) -> Result<Mat> {
    if r.width() != config.image_size || r.height() != config.image_size {
        return Err(Error::Shape(format!(
            "raster {}x{} does not match encoder image_size {}",
            r.width(),
            r.height(),
            config.image_size
        )));
    }
    let t = config.token_size;
    let g = config.grid();
    let mut out = Mat::zeros(g * g, config.patch_dim());
    for ty in 0..g {
        for tx in 0..g {
            let row = out.row_mut(ty * g + tx);
            let mut k = 0;
            for py in 0..t {
                for px in 0..t {
                    let rgb = r.get(tx * t + px, ty * t + py);
                    for c in rgb {
                        row[k] = (c as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_mask(mask: Option<&[bool]>, n: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != n => Err(Error::Shape(format!(
            "mask has {} entries, encoder has {n} patch tokens",
            m.len()
        ))),
        _ => Ok(()),
    }
}

fn embed(patches: &Mat, mask: Option<&[bool]>, params: &EncoderParams) -> Result<Mat> {
    let n = patches.rows();
    check_mask(mask, n)?;
    let mut proj = matmul(patches, &params.patch_w)?;
    proj.add_row_broadcast(params.patch_b.data());
    if let Some(mask) = mask {
        for (i, &masked) in mask.iter().enumerate() {
            if masked {
                proj.row_mut(i).copy_from_slice(params.mask_token.data());
            }
        }
    }
    let d = params.config.embed_dim;
    let mut z = Mat::zeros(n + 1, d);
    z.row_mut(0).copy_from_slice(params.cls.data());
    for i in 0..n {
        z.row_mut(i + 1).copy_from_slice(proj.row(i));
    }
    Ok(z.add(&params.pos)?)
}

/// Initial sequence `[z_cls; E(x_1) … E(x_N)] + E_pos`.
pub fn tokenize(r: &Raster, params: &EncoderParams) -> Result<Mat> {
    embed(&patchify(r, &params.config)?, None, params)
}

/// As [`tokenize`] with masked token embeddings replaced by the mask token.
pub fn tokenize_masked(r: &Raster, mask: &[bool], params: &EncoderParams) -> Result<Mat> {
    embed(&patchify(r, &params.config)?, Some(mask), params)
}

#[derive(Clone, Debug)]
struct BlockCache {
    ln1: LayerNormCache,
    h1: Mat,
    qkv: Mat,
    attn: Vec<Mat>,
    concat: Mat,
    ln2: LayerNormCache,
    h2: Mat,
    pre_act: Mat,
    act: Mat,
}

/// Activations retained for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    patches: Mat,
    mask: Option<Vec<bool>>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
}

fn head_slice(qkv: &Mat, part: usize, head: usize, d: usize, dh: usize) -> Mat {
    let start = part * d + head * dh;
    qkv.slice_cols(start, start + dh)
}

fn block_forward(x: &Mat, b: &BlockParams, cfg: &EncoderConfig) -> Result<(Mat, BlockCache)> {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (h1, ln1) = layer_norm_forward(x, &b.ln1_g, &b.ln1_b, LN_EPS);
    let mut qkv = matmul(&h1, &b.qkv_w)?;
    qkv.add_row_broadcast(b.qkv_b.data());
    let t = x.rows();
    let mut concat = Mat::zeros(t, d);
    let mut attn = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let q = head_slice(&qkv, 0, h, d, dh);
        let k = head_slice(&qkv, 1, h, d, dh);
        let v = head_slice(&qkv, 2, h, d, dh);
        let mut s = matmul_nt(&q, &k)?;
        s.scale(scale);
        let a = softmax_rows(&s);
        let o = matmul(&a, &v)?;
        for r in 0..t {
            concat.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(o.row(r));
        }
        attn.push(a);
    }
    let mut attn_out = matmul(&concat, &b.proj_w)?;
    attn_out.add_row_broadcast(b.proj_b.data());
    let x1 = x.add(&attn_out)?;
    let (h2, ln2) = layer_norm_forward(&x1, &b.ln2_g, &b.ln2_b, LN_EPS);
    let mut pre_act = matmul(&h2, &b.fc1_w)?;
    pre_act.add_row_broadcast(b.fc1_b.data());
    let mut act = pre_act.clone();
    act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let mut mlp = matmul(&act, &b.fc2_w)?;
    mlp.add_row_broadcast(b.fc2_b.data());
    let out = x1.add(&mlp)?;
    Ok((
        out,
        BlockCache {
            ln1,
            h1,
            qkv,
            attn,
            concat,
            ln2,
            h2,
            pre_act,
            act,
        },
    ))
}

fn block_backward(
    dout: &Mat,
    b: &BlockParams,
    cache: &BlockCache,
    cfg: &EncoderConfig,
    grad: &mut BlockParams,
) -> Result<Mat> {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t = dout.rows();

    // MLP branch.
    grad.fc2_w.axpy(1.0, &matmul_tn(&cache.act, dout)?);
    grad.fc2_b.axpy(1.0, &Mat::row_vector(dout.col_sums()));
    let mut dpre = matmul_nt(dout, &b.fc2_w)?;
    for (g, u) in dpre.data_mut().iter_mut().zip(cache.pre_act.data()) {
        *g *= gelu_grad(*u);
    }
    grad.fc1_w.axpy(1.0, &matmul_tn(&cache.h2, &dpre)?);
    grad.fc1_b.axpy(1.0, &Mat::row_vector(dpre.col_sums()));
    let dh2 = matmul_nt(&dpre, &b.fc1_w)?;
    let (dx1_ln, dg2, db2) = layer_norm_backward(&dh2, &b.ln2_g, &cache.ln2);
    grad.ln2_g.axpy(1.0, &dg2);
    grad.ln2_b.axpy(1.0, &db2);
    let dx1 = dout.add(&dx1_ln)?;

    // Attention branch.
    grad.proj_w.axpy(1.0, &matmul_tn(&cache.concat, &dx1)?);
    grad.proj_b.axpy(1.0, &Mat::row_vector(dx1.col_sums()));
    let dconcat = matmul_nt(&dx1, &b.proj_w)?;
    let mut dqkv = Mat::zeros(t, 3 * d);
    for h in 0..cfg.num_heads {
        let q = head_slice(&cache.qkv, 0, h, d, dh);
        let k = head_slice(&cache.qkv, 1, h, d, dh);
        let v = head_slice(&cache.qkv, 2, h, d, dh);
        let a = &cache.attn[h];
        let dout_h = dconcat.slice_cols(h * dh, (h + 1) * dh);
        let da = matmul_nt(&dout_h, &v)?;
        let dv = matmul_tn(a, &dout_h)?;
        let mut ds = softmax_rows_backward(a, &da);
        ds.scale(scale);
        let dq = matmul(&ds, &k)?;
        let dk = matmul_tn(&ds, &q)?;
        for r in 0..t {
            let row = dqkv.row_mut(r);
            row[h * dh..(h + 1) * dh].copy_from_slice(dq.row(r));
            row[d + h * dh..d + (h + 1) * dh].copy_from_slice(dk.row(r));
            row[2 * d + h * dh..2 * d + (h + 1) * dh].copy_from_slice(dv.row(r));
        }
    }
    grad.qkv_w.axpy(1.0, &matmul_tn(&cache.h1, &dqkv)?);
    grad.qkv_b.axpy(1.0, &Mat::row_vector(dqkv.col_sums()));
    let dh1 = matmul_nt(&dqkv, &b.qkv_w)?;
    let (dx_ln, dg1, db1) = layer_norm_backward(&dh1, &b.ln1_g, &cache.ln1);
    grad.ln1_g.axpy(1.0, &dg1);
    grad.ln1_b.axpy(1.0, &db1);
    dx1.add(&dx_ln)
}

fn run(
    patches: Mat,
    mask: Option<&[bool]>,
    params: &EncoderParams,
) -> Result<(TokenSequence, ForwardCache)> {
    let cfg = &params.config;
    let mut x = embed(&patches, mask, params)?;
    if !x.is_finite() {
        return Err(Error::numeric("embedding", "non-finite token embeddings"));
    }
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (i, b) in params.blocks.iter().enumerate() {
        let (y, cache) = block_forward(&x, b, cfg)?;
        if !y.is_finite() {
            return Err(Error::numeric(format!("block {i}"), "non-finite activations"));
        }
        blocks.push(cache);
        x = y;
    }
    let (z, final_ln) = layer_norm_forward(&x, &params.norm_g, &params.norm_b, LN_EPS);
    if !z.is_finite() {
        return Err(Error::numeric("final norm", "non-finite activations"));
    }
    Ok((
        TokenSequence::from_rows(&z, cfg.hash()),
        ForwardCache {
            patches,
            mask: mask.map(<[bool]>::to_vec),
            blocks,
            final_ln,
        },
    ))
}

/// Inference forward pass.
pub fn forward(r: &Raster, params: &EncoderParams) -> Result<TokenSequence> {
    run(patchify(r, &params.config)?, None, params).map(|(s, _)| s)
}

/// Forward pass with the masked token positions replaced by the mask token.
pub fn forward_masked(r: &Raster, mask: &[bool], params: &EncoderParams) -> Result<TokenSequence> {
    run(patchify(r, &params.config)?, Some(mask), params).map(|(s, _)| s)
}

/// Forward pass that keeps the activations needed by [`backward`].
pub fn forward_train(
    r: &Raster,
    mask: Option<&[bool]>,
    params: &EncoderParams,
) -> Result<(TokenSequence, ForwardCache)> {
    run(patchify(r, &params.config)?, mask, params)
}

/// Same as [`forward_train`] on pre-flattened token pixels (`N × t·t·3`).
pub fn forward_train_patches(
    patches: Mat,
    mask: Option<&[bool]>,
    params: &EncoderParams,
) -> Result<(TokenSequence, ForwardCache)> {
    if patches.shape() != (params.config.num_patches(), params.config.patch_dim()) {
        return Err(Error::Shape(format!(
            "patch matrix {:?} does not match encoder",
            patches.shape()
        )));
    }
    run(patches, mask, params)
}

/// Parameter gradients given `d_cls` (length D) and `d_patches` (N × D) on
/// the final hidden states.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    d_cls: &[f64],
    d_patches: &Mat,
) -> Result<EncoderParams> {
    let cfg = &params.config;
    let n = cfg.num_patches();
    let d = cfg.embed_dim;
    if d_cls.len() != d || d_patches.shape() != (n, d) {
        return Err(Error::Shape("backward: upstream gradient shape".into()));
    }
    let mut grad = params.zeros_like();
    let mut dz = Mat::zeros(n + 1, d);
    dz.row_mut(0).copy_from_slice(d_cls);
    for i in 0..n {
        dz.row_mut(i + 1).copy_from_slice(d_patches.row(i));
    }
    let (mut dx, dg, db) = layer_norm_backward(&dz, &params.norm_g, &cache.final_ln);
    grad.norm_g = dg;
    grad.norm_b = db;
    for i in (0..params.blocks.len()).rev() {
        dx = block_backward(
            &dx,
            &params.blocks[i],
            &cache.blocks[i],
            cfg,
            &mut grad.blocks[i],
        )?;
    }
    grad.pos = dx.clone();
    grad.cls.data_mut().copy_from_slice(dx.row(0));
    let mut d_embed = dx.slice_rows(1, n + 1);
    if let Some(mask) = &cache.mask {
        for (i, &masked) in mask.iter().enumerate() {
            if masked {
                grad.mask_token.axpy(1.0, &Mat::row_vector(d_embed.row(i).to_vec()));
                d_embed.row_mut(i).fill(0.0);
            }
        }
    }
    grad.patch_w = matmul_tn(&cache.patches, &d_embed)?;
    grad.patch_b = Mat::row_vector(d_embed.col_sums());
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            token_size: 4,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
        }
    }

    fn random_raster(seed: u64, size: usize) -> Raster {
        let mut rng = RngStream::new(seed, 0);
        Raster::from_fn(size, size, |_, _| [0, 0, 0].map(|_: u8| rng.below(256) as u8))
    }

    /// Rescales weights so the tiny model has non-trivial activations.
    fn lively(cfg: &EncoderConfig, seed: u64) -> EncoderParams {
        let mut p = EncoderParams::init(cfg, &mut RngStream::new(seed, 1)).unwrap();
        let mut rng = RngStream::new(seed, 2);
        for m in p.tensors_mut() {
            for v in m.data_mut() {
                *v += rng.normal(0.0, 0.3);
            }
        }
        p
    }

    #[test]
    fn sequence_lengths() {
        let cfg = EncoderConfig {
            image_size: 32,
            token_size: 16,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 1.0,
        };
        let p = EncoderParams::init(&cfg, &mut RngStream::new(0, 0)).unwrap();
        let z0 = tokenize(&random_raster(1, 32), &p).unwrap();
        assert_eq!(z0.rows(), 5);
        let big = EncoderConfig {
            image_size: 224,
            token_size: 16,
            ..cfg
        };
        assert_eq!(big.num_patches(), 196);
    }

    #[test]
    fn standardized_pixels_and_bias_path() {
        let cfg = tiny_config();
        let black = patchify(&Raster::filled(8, 8, [0, 0, 0]), &cfg).unwrap();
        let white = patchify(&Raster::filled(8, 8, [255, 255, 255]), &cfg).unwrap();
        assert!(black.data().iter().all(|&v| v == -PIXEL_MEAN / PIXEL_STD));
        assert!(white.data().iter().all(|&v| v == (1.0 - PIXEL_MEAN) / PIXEL_STD));
        let mut p = lively(&cfg, 3);
        p.pos.fill(0.0);
        p.patch_w.fill(0.0);
        let z0 = tokenize(&random_raster(4, 8), &p).unwrap();
        for i in 1..z0.rows() {
            assert_eq!(z0.row(i), p.patch_b.data());
        }
        assert_eq!(z0.row(0), p.cls.data());
    }

    #[test]
    fn size_mismatch_rejected() {
        let p = EncoderParams::init(&tiny_config(), &mut RngStream::new(0, 0)).unwrap();
        assert!(matches!(
            forward(&random_raster(0, 12), &p),
            Err(Error::Shape(_))
        ));
        assert!(forward_masked(&random_raster(0, 8), &[true; 3], &p).is_err());
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny_config();
        c.image_size = 10;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_stack_is_final_norm_of_tokens() {
        let mut cfg = tiny_config();
        cfg.depth = 0;
        let p = lively(&cfg, 4);
        let r = random_raster(5, 8);
        let z0 = tokenize(&r, &p).unwrap();
        let expect = crate::numkernel::layer_norm(&z0, &p.norm_g, &p.norm_b, LN_EPS);
        let out = forward(&r, &p).unwrap();
        assert_eq!(out.cls, expect.row(0));
        assert_eq!(out.patches, expect.slice_rows(1, expect.rows()));
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let cfg = tiny_config();
        let mut p = lively(&cfg, 6);
        p.pos.fill(0.0);
        let r = random_raster(7, 8);
        // Swap token (0,0) with token (1,1).
        let mut swapped = r.clone();
        for y in 0..4 {
            for x in 0..4 {
                swapped.set(x, y, r.get(x + 4, y + 4));
                swapped.set(x + 4, y + 4, r.get(x, y));
            }
        }
        let a = forward(&r, &p).unwrap();
        let b = forward(&swapped, &p).unwrap();
        for (x, y) in a.cls.iter().zip(&b.cls) {
            assert!((x - y).abs() < 1e-12);
        }
        for c in 0..cfg.embed_dim {
            assert!((a.patches.get(0, c) - b.patches.get(3, c)).abs() < 1e-12);
            assert!((a.patches.get(1, c) - b.patches.get(1, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn masking_semantics() {
        let cfg = tiny_config();
        let p = lively(&cfg, 8);
        let r = random_raster(9, 8);
        let plain = forward(&r, &p).unwrap();
        assert_eq!(forward_masked(&r, &[false; 4], &p).unwrap(), plain);
        let full_a = forward_masked(&r, &[true; 4], &p).unwrap();
        let full_b = forward_masked(&random_raster(10, 8), &[true; 4], &p).unwrap();
        assert_eq!(full_a, full_b);
        let one = forward_masked(&r, &[false, true, false, false], &p).unwrap();
        for i in [0usize, 2, 3] {
            let diff: f64 = (0..cfg.embed_dim)
                .map(|c| (one.patches.get(i, c) - plain.patches.get(i, c)).abs())
                .sum();
            assert!(diff > 1e-9, "unmasked token {i} unchanged");
        }
    }

    #[test]
    fn deterministic_output() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::init(&cfg, &mut RngStream::new(123, 0)).unwrap();
        let r = random_raster(11, 64);
        let a = forward(&r, &p).unwrap();
        let b = forward(&r, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.patches.rows(), 16);
        assert_eq!(a.cls.len(), 64);
    }

    /// Central differences over every encoder parameter for
    /// ℓ = Σ R⊙Z + ½ Σ Z², Z the final hidden states.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_config();
        let p = lively(&cfg, 21);
        let r = random_raster(22, 8);
        let mask = [false, true, false, false];
        let mut rng = RngStream::new(23, 0);
        let rc: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.normal(0.0, 1.0)).collect();
        let rp = Mat::from_fn(4, cfg.embed_dim, |_, _| rng.normal(0.0, 1.0));
        let loss = |p: &EncoderParams| {
            let s = forward_masked(&r, &mask, p).unwrap();
            let mut l = 0.0;
            for (c, w) in s.cls.iter().zip(&rc) {
                l += c * w + 0.5 * c * c;
            }
            for (z, w) in s.patches.data().iter().zip(rp.data()) {
                l += z * w + 0.5 * z * z;
            }
            l
        };
        let (s, cache) = forward_train(&r, Some(&mask), &p).unwrap();
        let dcls: Vec<f64> = s.cls.iter().zip(&rc).map(|(c, w)| w + c).collect();
        let mut dp = rp.clone();
        dp.axpy(1.0, &s.patches);
        let grad = backward(&p, &cache, &dcls, &dp).unwrap();
        let h = 1e-5;
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let analytic = grad.tensors()[ti].1.clone();
            let mut num = analytic.clone();
            for k in 0..analytic.len() {
                let mut pp = p.clone();
                pp.tensors_mut()[ti].data_mut()[k] += h;
                let mut pm = p.clone();
                pm.tensors_mut()[ti].data_mut()[k] -= h;
                num.data_mut()[k] = (loss(&pp) - loss(&pm)) / (2.0 * h);
            }
            let err = analytic.sub(&num).unwrap().frobenius_sq().sqrt();
            let scale = analytic.frobenius_sq().sqrt().max(num.frobenius_sq().sqrt()).max(1e-8);
            assert!(err / scale < 1e-4, "{name}: rel err {}", err / scale);
        }
    }
}
