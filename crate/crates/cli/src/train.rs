use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokenhier_core::bench::pretraining_corpus;
use tokenhier_core::encoder::EncoderConfig;
use tokenhier_core::params::{fingerprint, Checkpoint};
use tokenhier_core::raster::{is_raster_path, read_raster, Raster};
use tokenhier_core::ssl::{encoder_from_checkpoint, LossBreakdown, SslConfig, SslState};

use crate::args::{PosttrainArgs, TrainArgs};
use crate::ctx::{json_bug, load_config, sorted_files, write_text, Ctx};
use crate::fail::{CliResult, Failure};

/// Resolved configuration of a pretraining or post-training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub ssl: SslConfig,
    /// Size of the synthetic corpus when `corpus_dir` is absent.
    pub corpus_size: usize,
    /// Rasters cut into `image_size` crops.
    pub corpus_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            ssl: SslConfig::default(),
            corpus_size: 64,
            corpus_dir: None,
        }
    }
}

impl TrainConfig {
    fn apply(&mut self, a: &TrainArgs) {
        if let Some(lr) = a.lr {
            self.ssl.lr = lr;
        }
        if let Some(b) = a.batch_size {
            self.ssl.batch_size = b;
        }
        if let Some(n) = a.corpus_size {
            self.corpus_size = n;
        }
        if let Some(d) = &a.corpus_dir {
            self.corpus_dir = Some(d.clone());
        }
        if a.no_stain_aug {
            self.ssl.stain.enabled = false;
        }
    }
}

/// Grid-aligned `size`×`size` crops of every raster under `dir`, in sorted
/// file order then row-major.
fn directory_corpus(dir: &Path, size: usize) -> CliResult<Vec<Raster>> {
    let mut out = Vec::new();
    for path in sorted_files(dir, &is_raster_path)? {
        let r = read_raster(&path)?;
        for y in 0..r.height() / size {
            for x in 0..r.width() / size {
                out.push(r.crop(x * size, y * size, size, size)?);
            }
        }
    }
    if out.len() < 2 {
        return Err(Failure::data(format!(
            "corpus directory {} yields {} crop(s) of {size}px; need at least 2",
            dir.display(),
            out.len()
        )));
    }
    Ok(out)
}

fn corpus(cfg: &TrainConfig, seed: u64) -> CliResult<Vec<Raster>> {
    match &cfg.corpus_dir {
        Some(dir) => directory_corpus(dir, cfg.encoder.image_size),
        None => Ok(pretraining_corpus(seed, cfg.corpus_size, cfg.encoder.image_size, cfg.encoder.token_size)?),
    }
}

/// `<ckpt>.losses.jsonl`
pub fn loss_log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".losses.jsonl");
    PathBuf::from(name)
}

#[derive(Serialize)]
struct LossLine<'a> {
    step: u64,
    #[serde(flatten)]
    losses: &'a LossBreakdown,
}

fn train_and_write(
    ctx: &Ctx,
    command: &str,
    mut state: SslState,
    cfg: &TrainConfig,
    steps: usize,
    out: &Path,
    extra: serde_json::Value,
) -> CliResult<PathBuf> {
    let corpus = corpus(cfg, ctx.seed)?;
    let mut log = String::new();
    let mut err = None;
    state.run(&corpus, steps, ctx.seed, |step, l| {
        match serde_json::to_string(&LossLine { step, losses: l }) {
            Ok(s) => {
                log.push_str(&s);
                log.push('\n');
            }
            Err(e) => err = Some(e),
        }
        if (step + 1) % 20 == 0 {
            log::info!("step {:>5} total {:.4} (dino {:.4} ibot {:.4} koleo {:.4} gram {:.4})", step + 1, l.total, l.dino, l.ibot, l.koleo, l.gram);
        }
    })?;
    if let Some(e) = err {
        return Err(json_bug(e));
    }
    let record = serde_json::json!({ "train": cfg, "steps": steps, "extra": extra });
    let mut ck: Checkpoint = state.to_checkpoint()?;
    if let Some(meta) = ck.meta.as_object_mut() {
        meta.insert("config_fingerprint".into(), fingerprint(&(command, ctx.seed, &record)).into());
    }
    let out = ctx.output(out)?;
    ck.write(&out)?;
    let log_path = loss_log_path(&out);
    write_text(&log_path, &log)?;
    ctx.write_run_record(&out, command, &record)?;
    println!("{command}: {steps} step(s) -> {} (loss log {})", out.display(), log_path.display());
    Ok(out)
}

pub fn pretrain(ctx: &Ctx, a: &TrainArgs) -> CliResult<PathBuf> {
    let mut cfg: TrainConfig = load_config(a.config.as_deref())?;
    cfg.apply(a);
    let state = SslState::new(&cfg.encoder, &cfg.ssl, ctx.seed)?;
    train_and_write(ctx, "pretrain", state, &cfg, a.steps, &a.out, serde_json::Value::Null)
}

pub fn posttrain(ctx: &Ctx, a: &PosttrainArgs) -> CliResult<PathBuf> {
    let teacher_path = a
        .gram_teacher
        .as_ref()
        .ok_or_else(|| Failure::usage("posttrain requires --gram-teacher CKPT (the encoder whose patch Gram matrix anchors training)"))?;
    let teacher_ck = Checkpoint::read(teacher_path)?;
    let gram_teacher = encoder_from_checkpoint(&teacher_ck)?;
    let init_ck = match &a.init {
        Some(p) => Some(Checkpoint::read(p)?),
        None if teacher_ck.kind == "ssl" => Some(teacher_ck.clone()),
        None => None,
    };
    let mut cfg: TrainConfig = match (&a.train.config, &init_ck) {
        (None, Some(ck)) => TrainConfig {
            encoder: serde_json::from_value(ck.meta["encoder"].clone())?,
            ssl: serde_json::from_value(ck.meta["ssl"].clone())?,
            ..TrainConfig::default()
        },
        (path, _) => load_config(path.as_deref())?,
    };
    cfg.apply(&a.train);
    cfg.ssl.gram_teacher_checkpoint = Some(teacher_path.clone());
    let mut state = match &init_ck {
        Some(ck) => SslState::from_checkpoint(ck, Some(&cfg.ssl))?,
        None => SslState::new(&cfg.encoder, &cfg.ssl, ctx.seed)?,
    };
    cfg.encoder = state.encoder_config.clone();
    state.begin_posttrain(gram_teacher)?;
    let extra = serde_json::json!({
        "gram_teacher": teacher_path,
        "init": a.init.as_ref().or(init_ck.as_ref().map(|_| teacher_path)),
    });
    train_and_write(ctx, "posttrain", state, &cfg, a.train.steps, &a.train.out, extra)
}
