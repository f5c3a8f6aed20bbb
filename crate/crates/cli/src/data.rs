use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use tokenhier_core::bench::{make_synthetic_suite, LabeledDataset, SuiteSpec};
use tokenhier_core::color::{stain_augment_traced, StainAugConfig, StainSpace};
use tokenhier_core::numkernel::RngStream;
use tokenhier_core::params::fingerprint_u64;
use tokenhier_core::raster::{is_raster_path, read_raster, write_ppm};
use tokenhier_core::tiler::{
    extract_tiles, TileManifest, TileOptions, DEFAULT_MIN_TISSUE_FRACTION, DEFAULT_TILE_SIZE,
};
use tokenhier_core::Error;

use crate::args::{AugmentArgs, KindArg, SpaceArg, SplitArg, SynthArgs, TileArgs};
use crate::ctx::{json_bug, load_config, relative_id, sorted_files, write_text, Ctx};
use crate::fail::{CliResult, Failure};

/// Stream id shared with the bench harness so `synth` reproduces its suites.
const SUITE_STREAM: u64 = 0x7375_6974;

#[derive(Serialize)]
struct TileRun<'a> {
    input: &'a Path,
    tile_size: usize,
    min_tissue_fraction: f64,
    invert: bool,
}

pub fn tile(ctx: &Ctx, a: &TileArgs) -> CliResult<()> {
    let opts = TileOptions {
        tile_size: a.tile_size.unwrap_or(DEFAULT_TILE_SIZE),
        min_tissue_fraction: a.min_tissue.unwrap_or(DEFAULT_MIN_TISSUE_FRACTION),
        invert: a.invert,
    };
    let files = if a.input.is_file() {
        vec![a.input.clone()]
    } else if a.input.is_dir() {
        sorted_files(&a.input, &is_raster_path)?
    } else {
        return Err(Failure::usage(format!("input {} does not exist", a.input.display())));
    };
    let root = if a.input.is_file() {
        a.input.parent().unwrap_or(Path::new("")).to_path_buf()
    } else {
        a.input.clone()
    };
    // Unreadable input is a usage error here: the caller pointed at the wrong files.
    let parts: Vec<Result<TileManifest, Error>> = files
        .par_iter()
        .map(|p| {
            let raster = read_raster(p)?;
            extract_tiles(&raster, &relative_id(&root, p), &opts)
        })
        .collect();
    let mut kept = Vec::new();
    let mut degenerate = 0usize;
    let mut unreadable = Vec::new();
    for (path, part) in files.iter().zip(parts) {
        match part {
            Ok(m) => kept.push(m),
            Err(Error::Degenerate(msg)) => {
                log::warn!("skipping {}: {msg}", path.display());
                degenerate += 1;
            }
            Err(Error::Parameter(msg)) => return Err(Failure::usage(msg)),
            Err(e) => unreadable.push(e.to_string()),
        }
    }
    if !unreadable.is_empty() {
        return Err(Failure::usage(format!("unreadable input: {}", unreadable.join("; "))));
    }
    if files.is_empty() {
        log::warn!("no rasters under {}; writing an empty manifest", a.input.display());
    } else if kept.is_empty() {
        return Err(Failure::data(format!(
            "all {degenerate} image(s) under {} are degenerate",
            a.input.display()
        )));
    }
    let manifest = TileManifest::merge(kept, opts.tile_size, opts.min_tissue_fraction)?;
    let out = ctx.output(&a.out)?;
    manifest.write(&out)?;
    ctx.write_run_record(
        &out,
        "tile",
        &TileRun {
            input: &a.input,
            tile_size: opts.tile_size,
            min_tissue_fraction: opts.min_tissue_fraction,
            invert: opts.invert,
        },
    )?;
    println!(
        "tiled {} image(s): {} tile(s) kept, {} degenerate image(s) skipped -> {}",
        files.len() - degenerate,
        manifest.records.len(),
        degenerate,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AugmentRun<'a> {
    input: &'a Path,
    views: usize,
    stain: &'a StainAugConfig,
}

pub fn augment(ctx: &Ctx, a: &AugmentArgs) -> CliResult<()> {
    let mut cfg: StainAugConfig = load_config(a.config.as_deref())?;
    if let Some(space) = a.space {
        cfg.space = match space {
            SpaceArg::Lab => StainSpace::Lab,
            SpaceArg::Hsv => StainSpace::Hsv,
            SpaceArg::Both => StainSpace::Both,
            SpaceArg::Either => StainSpace::Either,
        };
    }
    cfg.validate()?;
    if a.views == 0 {
        return Err(Failure::usage("--views must be at least 1"));
    }
    let (root, files) = if a.input.is_file() {
        (a.input.parent().unwrap_or(Path::new("")).to_path_buf(), vec![a.input.clone()])
    } else if a.input.is_dir() {
        (a.input.clone(), sorted_files(&a.input, &is_raster_path)?)
    } else {
        return Err(Failure::usage(format!("input {} does not exist", a.input.display())));
    };
    let out = ctx.output_dir(&a.out)?;
    let lines: Vec<Vec<String>> = files
        .par_iter()
        .map(|path| -> CliResult<Vec<String>> {
            let raster = read_raster(path)?;
            let id = relative_id(&root, path);
            let stem = Path::new(&id).with_extension("").to_string_lossy().replace('/', "__");
            let stream = RngStream::new(ctx.seed, fingerprint_u64(&id));
            let mut lines = Vec::with_capacity(a.views);
            for v in 0..a.views {
                let (view, draws) = stain_augment_traced(&raster, &cfg, &mut stream.substream(v as u64))?;
                let file = format!("{stem}_v{v}.ppm");
                write_ppm(&out.join(&file), &view)?;
                let draws: Vec<_> = draws
                    .iter()
                    .map(|d| {
                        serde_json::json!({
                            "space": d.space,
                            "channel_mean": d.channel_mean,
                            "mean_shift": d.mean_shift,
                            "std_ratio": d.std_ratio,
                        })
                    })
                    .collect();
                let line = serde_json::json!({ "source": id, "view": v, "file": file, "draws": draws });
                lines.push(serde_json::to_string(&line).map_err(json_bug)?);
            }
            Ok(lines)
        })
        .collect::<CliResult<_>>()?;
    let log_path = out.join("augment.jsonl");
    let mut text = String::new();
    for l in lines.iter().flatten() {
        text.push_str(l);
        text.push('\n');
    }
    write_text(&log_path, &text)?;
    ctx.write_run_record(
        &log_path,
        "augment",
        &AugmentRun {
            input: &a.input,
            views: a.views,
            stain: &cfg,
        },
    )?;
    println!("wrote {} view(s) of {} image(s) to {}", a.views * files.len(), files.len(), out.display());
    Ok(())
}

pub fn suite_spec(kind: KindArg, config: Option<&Path>, per_class: Option<usize>, classes: Option<usize>) -> CliResult<SuiteSpec> {
    let mut value: serde_json::Value = match config {
        None => serde_json::json!({}),
        Some(p) => load_config::<serde_json::Value>(Some(p))?,
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Failure::usage("suite config must be a JSON object"))?;
    let kind = match kind {
        KindArg::Global => "global",
        KindArg::Local => "local",
        KindArg::Shifted => "shifted",
    };
    obj.insert("kind".into(), kind.into());
    if let Some(n) = per_class {
        obj.insert("per_class".into(), n.into());
    }
    if let Some(n) = classes {
        obj.insert("classes".into(), n.into());
    }
    let spec: SuiteSpec = serde_json::from_value(value).map_err(|e| Failure::usage(format!("invalid suite config: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

pub fn synth(ctx: &Ctx, a: &SynthArgs) -> CliResult<PathBuf> {
    let spec = suite_spec(a.kind, a.config.as_deref(), a.per_class, a.classes)?;
    let splits = make_synthetic_suite(&RngStream::new(ctx.seed, SUITE_STREAM), &spec)?;
    let parts: Vec<&LabeledDataset> = match a.split {
        SplitArg::All => vec![&splits.train, &splits.val, &splits.test],
        SplitArg::Train => vec![&splits.train],
        SplitArg::Val => vec![&splits.val],
        SplitArg::Test => vec![&splits.test],
    };
    let out = ctx.output_dir(&a.out)?;
    let names = &splits.train.class_names;
    for name in names {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))?;
    }
    let items: Vec<_> = parts.iter().flat_map(|d| d.items.iter()).collect();
    items.par_iter().try_for_each(|it| -> CliResult<()> {
        let path = out.join(&names[it.label]).join(format!("{}.ppm", it.source_id));
        write_ppm(&path, &it.raster()?)?;
        Ok(())
    })?;
    let mut index = String::new();
    for it in &items {
        index.push_str(&format!("{}/{}.ppm\t{}\n", names[it.label], it.source_id, it.label));
    }
    let index_path = out.join("index.tsv");
    write_text(&index_path, &index)?;
    ctx.write_run_record(&index_path, "synth", &serde_json::json!({ "spec": spec, "split": format!("{:?}", a.split).to_lowercase() }))?;
    println!(
        "wrote {} {} image(s) in {} classes to {}",
        items.len(),
        spec.task_name(),
        names.len(),
        out.display()
    );
    Ok(out)
}
