mod args;
mod ctx;
mod data;
mod eval;
mod fail;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use tokenhier_core::gradcheck::{run_gradcheck, GradcheckOptions, DEFAULT_STEP, DEFAULT_TOLERANCE};

use crate::args::{
    Cli, Command, DemoArgs, GradcheckArgs, KindArg, ModeArg, PosttrainArgs, ProbeArgs, SplitArg, SynthArgs, TrainArgs,
};
use crate::ctx::{write_text, Ctx};
use crate::fail::{CliResult, Failure};

fn gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> CliResult<()> {
    let opts = GradcheckOptions {
        seed: ctx.seed,
        tolerance: a.tolerance.unwrap_or(DEFAULT_TOLERANCE),
        step: DEFAULT_STEP,
        inject_fault: a.inject_fault.clone(),
    };
    let report = run_gradcheck(&opts)?;
    print!("{}", report.render());
    if let Some(path) = &a.report {
        let out = ctx.output(path)?;
        write_text(&out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
        ctx.write_run_record(&out, "gradcheck", &opts.inject_fault)?;
    }
    let failed: Vec<&str> = report.failures().iter().map(|c| c.component.as_str()).collect();
    if failed.is_empty() {
        println!("gradcheck passed: every component within {:.0e}", opts.tolerance);
        Ok(())
    } else {
        Err(Failure::verification(format!("gradcheck failed in: {}", failed.join(", "))))
    }
}

/// Synthetic suites, pretraining, Gram post-training and probing in one run.
fn demo(ctx: &Ctx, a: &DemoArgs) -> CliResult<()> {
    let synth = |kind, dir: &str| {
        data::synth(
            ctx,
            &SynthArgs {
                kind,
                out: PathBuf::from(dir),
                config: None,
                per_class: Some(a.per_class),
                classes: None,
                split: SplitArg::All,
            },
        )
    };
    let global = synth(KindArg::Global, "data/global")?;
    let local = synth(KindArg::Local, "data/local")?;
    let train_args = |steps, out: &str| TrainArgs {
        config: None,
        steps,
        out: PathBuf::from(out),
        lr: None,
        batch_size: None,
        corpus_size: None,
        corpus_dir: None,
        no_stain_aug: false,
    };
    let pre = train::pretrain(ctx, &train_args(a.steps, "pretrain.ckpt"))?;
    let post = train::posttrain(
        ctx,
        &PosttrainArgs {
            train: train_args((a.steps / 3).max(1), "posttrain.ckpt"),
            gram_teacher: Some(pre),
            init: None,
        },
    )?;
    let probe = |data: &Path, mode, report: &str| {
        eval::probe(
            ctx,
            &ProbeArgs {
                ckpt: post.clone(),
                data: data.to_path_buf(),
                mode,
                report: PathBuf::from(report),
                config: None,
                epochs: None,
                lr: None,
            },
        )
    };
    probe(&global, ModeArg::Linear, "reports/global_linear.json")?;
    probe(&local, ModeArg::Linear, "reports/local_linear.json")?;
    probe(&local, ModeArg::Attnpool, "reports/local_attnpool.json")?;
    println!("demo finished");
    Ok(())
}

fn dispatch(ctx: &Ctx, command: &Command) -> CliResult<()> {
    match command {
        Command::Tile(a) => data::tile(ctx, a),
        Command::Augment(a) => data::augment(ctx, a),
        Command::Synth(a) => data::synth(ctx, a).map(drop),
        Command::Pretrain(a) => train::pretrain(ctx, a).map(drop),
        Command::Posttrain(a) => train::posttrain(ctx, a).map(drop),
        Command::Embed(a) => eval::embed(ctx, a),
        Command::Probe(a) => eval::probe(ctx, a).map(drop),
        Command::Bench(a) => eval::bench(ctx, a).map(drop),
        Command::Ablate(a) => eval::ablate(ctx, a).map(drop),
        Command::Gradcheck(a) => gradcheck(ctx, a),
        Command::Demo(a) => demo(ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.global.log_level.filter())
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(fail::EXIT_USAGE as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker thread(s): {e}");
            return ExitCode::from(fail::EXIT_USAGE as u8);
        }
    }
    let mut global = cli.global.clone();
    if matches!(cli.command, Command::Demo(_)) && global.out_dir.is_none() {
        global.out_dir = Some(PathBuf::from("tokenhier-demo"));
    }
    let ctx = Ctx::new(&global);
    match dispatch(&ctx, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
