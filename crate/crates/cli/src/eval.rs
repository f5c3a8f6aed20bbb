use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use tokenhier_core::bench::{
    embed_dataset, evaluate_task, ingest_directory, render_svg, render_table, run_ablation, run_bench,
    split_dataset, AblationConfig, BenchConfig, BenchReport,
};
use tokenhier_core::encoder::EncoderParams;
use tokenhier_core::heads::{HeadMode, HeadTrainConfig};
use tokenhier_core::params::{fingerprint, Checkpoint};
use tokenhier_core::ssl::encoder_from_checkpoint;

use crate::args::{AblateArgs, BenchArgs, EmbedArgs, ModeArg, ProbeArgs};
use crate::ctx::{json_bug, load_config, write_text, Ctx};
use crate::fail::{CliResult, Failure};

impl From<ModeArg> for HeadMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Linear => HeadMode::Linear,
            ModeArg::Attnpool => HeadMode::AttnPool,
        }
    }
}

/// The frozen encoder and whether it was pretrained with stain augmentation.
fn load_encoder(path: &Path) -> CliResult<(EncoderParams, bool)> {
    let ck = Checkpoint::read(path)?;
    let aug = ck.kind == "ssl" && ck.meta["ssl"]["stain"]["enabled"].as_bool().unwrap_or(false);
    Ok((encoder_from_checkpoint(&ck)?, aug))
}

fn write_report(ctx: &Ctx, path: &Path, report: &BenchReport, command: &str, config: &impl Serialize) -> CliResult<PathBuf> {
    let out = ctx.output(path)?;
    write_text(&out, &(report.to_json()? + "\n"))?;
    ctx.write_run_record(&out, command, config)?;
    Ok(out)
}

pub fn embed(ctx: &Ctx, a: &EmbedArgs) -> CliResult<()> {
    let (encoder, _) = load_encoder(&a.ckpt)?;
    let ingested = ingest_directory(&a.data)?;
    let ds = &ingested.dataset;
    let seqs = embed_dataset(ds, &encoder)?;
    let lines: Vec<String> = ds
        .items
        .par_iter()
        .zip(&seqs)
        .map(|(it, (seq, _))| {
            let mut line = serde_json::json!({
                "source_id": it.source_id,
                "label": it.label,
                "class_name": ds.class_names[it.label],
                "cls": seq.cls,
            });
            if a.patches {
                let rows: Vec<&[f64]> = (0..seq.patches.rows()).map(|r| seq.patches.row(r)).collect();
                line["patches"] = serde_json::json!(rows);
            }
            serde_json::to_string(&line).map_err(json_bug)
        })
        .collect::<CliResult<_>>()?;
    let out = ctx.output(&a.out)?;
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_text(&out, &text)?;
    ctx.write_run_record(&out, "embed", &serde_json::json!({ "ckpt": a.ckpt, "data": a.data, "patches": a.patches }))?;
    println!("embedded {} item(s) in {} class(es) -> {}", seqs.len(), ds.class_names.len(), out.display());
    Ok(())
}

pub fn probe(ctx: &Ctx, a: &ProbeArgs) -> CliResult<PathBuf> {
    let mut head: HeadTrainConfig = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        head.epochs = e;
    }
    if let Some(lr) = a.lr {
        head.lr = lr;
    }
    head.seed = ctx.seed;
    head.validate()?;
    let mode = HeadMode::from(a.mode);
    let (encoder, staining_aug) = load_encoder(&a.ckpt)?;
    let ingested = ingest_directory(&a.data)?;
    if ingested.dataset.num_classes() < 2 {
        return Err(Failure::usage(format!(
            "{} holds {} usable class(es); probing needs at least 2",
            a.data.display(),
            ingested.dataset.num_classes()
        )));
    }
    let name = a
        .data
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let splits = split_dataset(&ingested.dataset, &name, ctx.seed)?;
    let result = evaluate_task(&splits, &encoder, mode, &head, staining_aug)?;
    let config = serde_json::json!({ "ckpt": a.ckpt, "data": a.data, "mode": mode, "head": head });
    let bacc = result.bacc;
    let report = BenchReport::single(result, fingerprint(&("probe", ctx.seed, &config)));
    let out = write_report(ctx, &a.report, &report, "probe", &config)?;
    println!("{name} {}: bacc {bacc:.4} -> {}", mode.as_str(), out.display());
    Ok(out)
}

pub fn bench(ctx: &Ctx, a: &BenchArgs) -> CliResult<PathBuf> {
    let mut cfg: BenchConfig = load_config(a.config.as_deref())?;
    if let Some(seeds) = &a.seeds {
        cfg.seeds = seeds.clone();
    }
    let (encoder, _) = load_encoder(&a.ckpt)?;
    let report = run_bench(&cfg, &encoder)?;
    let out = write_report(ctx, &a.report, &report, "bench", &serde_json::json!({ "ckpt": a.ckpt, "bench": cfg }))?;
    for task in cfg.tasks.iter().map(|t| t.name()) {
        for &mode in &cfg.modes {
            if let Some(m) = report.mean_bacc(&task, mode) {
                println!("{task:<12} {:<9} mean bacc {m:.4} over {} seed(s)", mode.as_str(), cfg.seeds.len());
            }
        }
    }
    println!("report -> {}", out.display());
    Ok(out)
}

pub fn ablate(ctx: &Ctx, a: &AblateArgs) -> CliResult<PathBuf> {
    let mut cfg: AblationConfig = load_config(a.config.as_deref())?;
    if let Some(seeds) = &a.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(steps) = a.steps {
        cfg.pretrain_steps = steps;
    }
    let report = run_ablation(&cfg)?;
    let out = write_report(ctx, &a.out, &report, "ablate", &cfg)?;
    let svg = out.with_extension("svg");
    write_text(&svg, &render_svg(&report))?;
    print!("{}", render_table(&report));
    println!("report -> {} (chart {})", out.display(), svg.display());
    Ok(out)
}
