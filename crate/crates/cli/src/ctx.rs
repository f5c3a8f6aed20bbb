use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use tokenhier_core::params::fingerprint;

use crate::args::GlobalArgs;
use crate::fail::{CliResult, Failure};

/// Settings shared by every subcommand.
pub struct Ctx {
    pub seed: u64,
    out_dir: Option<PathBuf>,
}

impl Ctx {
    pub fn new(global: &GlobalArgs) -> Self {
        Ctx {
            seed: global.seed,
            out_dir: global.out_dir.clone(),
        }
    }

    /// Relative output paths land under `--out-dir`; parent directories are created.
    pub fn output(&self, path: &Path) -> CliResult<PathBuf> {
        let resolved = match &self.out_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        };
        if let Some(parent) = resolved.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)
                .map_err(|e| Failure::data(format!("cannot create {}: {e}", parent.display())))?;
        }
        Ok(resolved)
    }

    pub fn output_dir(&self, path: &Path) -> CliResult<PathBuf> {
        let resolved = self.output(path)?;
        fs::create_dir_all(&resolved)
            .map_err(|e| Failure::data(format!("cannot create {}: {e}", resolved.display())))?;
        Ok(resolved)
    }

    /// Writes `<primary>.run.json`. Holds no thread count or timestamp, so it
    /// is as reproducible as the primary output.
    pub fn write_run_record<C: Serialize>(&self, primary: &Path, command: &str, config: &C) -> CliResult<()> {
        let record = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "config": config,
            "config_fingerprint": fingerprint(&(command, self.seed, config)),
        });
        let mut name = primary.as_os_str().to_owned();
        name.push(".run.json");
        write_text(Path::new(&name), &(serde_json::to_string_pretty(&record).map_err(json_bug)? + "\n"))
    }
}

/// Reads a JSON config, or the type's default when no path is given. A
/// missing or malformed file is a usage error.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::usage(format!("invalid config {}: {e}", p.display())))
        }
    }
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

pub fn json_bug(e: serde_json::Error) -> Failure {
    Failure::verification(format!("serialization failed: {e}"))
}

/// Files under `dir` (recursively) accepted by `keep`, in sorted path order.
pub fn sorted_files(dir: &Path, keep: &dyn Fn(&Path) -> bool) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| Failure::usage(format!("cannot read {}: {e}", d.display())))?;
        for entry in entries {
            let path = entry
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", d.display())))?
                .path();
            if path.is_dir() {
                stack.push(path);
            } else if keep(&path) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Path relative to `root`, with `/` separators.
pub fn relative_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}
