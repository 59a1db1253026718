use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fedmerge::checkpoint::encode_checkpoint;
use fedmerge::merge::merge;
use fedmerge::{Error, HeterogeneityReport, MergeMethod, MergeSpec};
use serde::Serialize;

use crate::exit::usage;
use crate::io::{display_paths, load_inputs, require_out, Staged};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// ta | fednova | fedgma | median | cclip
    #[arg(long)]
    pub method: MergeMethod,
    #[arg(long)]
    pub pretrained: PathBuf,
    /// Repeat once per task.
    #[arg(long, required = true)]
    pub finetuned: Vec<PathBuf>,
    #[arg(long)]
    pub lambda: f64,
    /// Sign-agreement threshold (fedgma) or clipping radius (cclip).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Training-metadata JSON, one per --finetuned in the same order.
    #[arg(long)]
    pub meta: Vec<PathBuf>,
}

#[derive(Serialize)]
struct MergeReport<'a> {
    method: MergeMethod,
    lambda: f64,
    rho: Option<f64>,
    pretrained: String,
    finetuned: Vec<String>,
    meta: Vec<String>,
    diagnostics: &'a HeterogeneityReport,
}

pub fn report_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".report.json");
    PathBuf::from(name)
}

/// Names the checkpoint behind a missing-metadata error.
pub fn explain_merge_error(err: Error, finetuned: &[PathBuf]) -> anyhow::Error {
    match err {
        Error::MissingTrainingMeta { index } => {
            let file = finetuned.get(index).map(|p| p.display().to_string()).unwrap_or_default();
            anyhow::Error::new(err).context(format!("{file}: pass --meta with its learning-rate schedule"))
        }
        other => other.into(),
    }
}

pub fn run(args: &Args, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "merged checkpoint path")?;
    let spec = MergeSpec::new(args.method, args.lambda, args.rho).map_err(|e| usage(e.to_string()))?;
    let inputs = load_inputs(&args.pretrained, &args.finetuned, &args.meta)?;
    let result = merge(&inputs.base, &inputs.taus, &spec).map_err(|e| explain_merge_error(e, &args.finetuned))?;

    let report = MergeReport {
        method: spec.method,
        lambda: spec.lambda,
        rho: spec.rho,
        pretrained: args.pretrained.display().to_string(),
        finetuned: display_paths(&args.finetuned),
        meta: display_paths(&args.meta),
        diagnostics: &result.diagnostics,
    };
    let mut staged = Staged::default();
    staged.add(out, &encode_checkpoint(&result.merged))?;
    staged.add_json(report_path(out), &report)?;
    let written = staged.commit().context("writing merge outputs")?;
    for path in written {
        log::info!("wrote {}", path.display());
    }
    Ok(())
}
