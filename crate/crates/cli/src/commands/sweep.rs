use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use fedmerge::checkpoint::encode_checkpoint;
use fedmerge::fedsim::toy::{ToyConfig, ToyProblem};
use fedmerge::merge::{default_lambda_grid, lambda_sweep, merge, SweepCell, SweepPoint};
use fedmerge::{MergeMethod, MergeSpec, ParamMap};
use serde::{Deserialize, Serialize};

use super::merge::explain_merge_error;
use crate::exit::usage;
use crate::io::{ensure_dir, load_inputs, require_out, Inputs, Staged};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// ta | fednova | fedgma | median | cclip
    #[arg(long)]
    pub method: MergeMethod,
    #[arg(long)]
    pub pretrained: PathBuf,
    #[arg(long, required = true)]
    pub finetuned: Vec<PathBuf>,
    #[arg(long)]
    pub meta: Vec<PathBuf>,
    /// JSON naming the evaluator: `{"evaluator": "toy_mlp", "toy": {...}}` or
    /// `{"evaluator": "scores_csv", "path": "scores.csv"}`.
    #[arg(long)]
    pub eval_config: PathBuf,
    /// Comma-separated lambda grid (default 0.05, 0.10, ..., 2.00).
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Comma-separated rho grid (default depends on the method).
    #[arg(long, value_delimiter = ',')]
    pub rhos: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "evaluator", rename_all = "snake_case", deny_unknown_fields)]
enum EvalConfig {
    /// Average normalized validation accuracy on the bundled two-task MLP problem.
    ToyMlp {
        #[serde(default)]
        toy: ToyConfig,
    },
    /// Precomputed scores with columns `lambda,rho,score`.
    ScoresCsv { path: PathBuf },
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    lambda: f64,
    rho: Option<f64>,
    score: f64,
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    lambda: f64,
    rho: Option<f64>,
    score: Option<f64>,
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct Best {
    method: MergeMethod,
    lambda: f64,
    rho: Option<f64>,
    score: f64,
    cells: usize,
    failed_cells: usize,
}

type Evaluator = Box<dyn FnMut(SweepPoint, &ParamMap) -> std::result::Result<f64, String>>;

fn build_evaluator(path: &Path, inputs: &Inputs) -> Result<Evaluator> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: EvalConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    match config {
        EvalConfig::ToyMlp { toy } => {
            let problem = ToyProblem::generate(&toy).with_context(|| format!("toy config in {}", path.display()))?;
            if inputs.taus.len() != problem.num_tasks() {
                return Err(usage(format!(
                    "the toy evaluator scores {} tasks but {} --finetuned checkpoints were given",
                    problem.num_tasks(),
                    inputs.taus.len()
                )));
            }
            problem
                .theta0
                .check_schema(&inputs.base)
                .context("the pre-trained checkpoint does not have the toy MLP layout")?;
            let base = inputs.base.cast::<f64>();
            let reference: Vec<f64> = inputs
                .taus
                .iter()
                .zip(&problem.splits)
                .map(|(tau, split)| {
                    let model = fedmerge::params::add(&base, &tau.delta.cast::<f64>())?;
                    Ok(problem.mlp.accuracy(&model.flatten(), &split.val))
                })
                .collect::<fedmerge::Result<_>>()?;
            if let Some(t) = reference.iter().position(|&a| a == 0.0) {
                return Err(anyhow!("fine-tuned model {t} has zero validation accuracy; normalized accuracy is undefined"));
            }
            Ok(Box::new(move |_, merged| {
                Ok(problem.normalized_accuracy(&merged.cast::<f64>(), false, &reference))
            }))
        }
        EvalConfig::ScoresCsv { path: csv_path } => {
            let csv_path = path.parent().map_or(csv_path.clone(), |dir| dir.join(&csv_path));
            let mut reader = csv::Reader::from_path(&csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
            let mut scores = HashMap::new();
            for row in reader.deserialize() {
                let row: ScoreRow = row.with_context(|| format!("parsing {}", csv_path.display()))?;
                scores.insert(key(row.lambda, row.rho), row.score);
            }
            Ok(Box::new(move |p, _| {
                scores
                    .get(&key(p.lambda, p.rho))
                    .copied()
                    .ok_or_else(|| format!("no score for lambda={} rho={:?}", p.lambda, p.rho))
            }))
        }
    }
}

fn key(lambda: f64, rho: Option<f64>) -> (u64, Option<u64>) {
    (lambda.to_bits(), rho.map(f64::to_bits))
}

pub fn run(args: &Args, out: Option<&Path>) -> Result<()> {
    let dir = require_out(out, "output directory")?;
    if args.rhos.is_some() && !args.method.uses_rho() {
        return Err(usage(format!("{} takes no --rhos", args.method)));
    }
    let inputs = load_inputs(&args.pretrained, &args.finetuned, &args.meta)?;
    let mut evaluator = build_evaluator(&args.eval_config, &inputs)?;
    let lambdas = args.lambdas.clone().unwrap_or_else(default_lambda_grid);

    let outcome = lambda_sweep(&inputs.base, &inputs.taus, args.method, &lambdas, args.rhos.as_deref(), |p, m| {
        evaluator(p, m)
    })
    .map_err(|e| match e {
        fedmerge::Error::EmptyInput(_) | fedmerge::Error::BadMergeSpec(_) => usage(e.to_string()),
        other => other.into(),
    })?;
    let best: &SweepCell = outcome.best.as_ref().ok_or_else(|| {
        let first = outcome.table.iter().find_map(|c| c.error.clone()).unwrap_or_default();
        anyhow!("every grid cell failed; first failure: {first}")
    })?;
    let spec = MergeSpec::new(args.method, best.lambda, best.rho)?;
    let merged = merge(&inputs.base, &inputs.taus, &spec).map_err(|e| explain_merge_error(e, &args.finetuned))?;

    let mut table = csv::Writer::from_writer(Vec::new());
    for cell in &outcome.table {
        table.serialize(ScoreLine {
            lambda: cell.lambda,
            rho: cell.rho,
            score: cell.score,
            error: cell.error.as_deref(),
        })?;
    }
    let table = table.into_inner().context("encoding scores.csv")?;
    let summary = Best {
        method: args.method,
        lambda: best.lambda,
        rho: best.rho,
        score: best.score.unwrap_or(f64::NAN),
        cells: outcome.table.len(),
        failed_cells: outcome.table.iter().filter(|c| c.score.is_none()).count(),
    };

    ensure_dir(dir)?;
    let mut staged = Staged::default();
    staged.add(dir.join("scores.csv"), &table)?;
    staged.add_json(dir.join("best.json"), &summary)?;
    staged.add(dir.join("best.ckpt"), &encode_checkpoint(&merged.merged))?;
    staged.commit()?;
    println!(
        "best {}: lambda={} rho={} score={:.6} ({} cells)",
        args.method,
        best.lambda,
        best.rho.map_or_else(|| "-".to_string(), |r| r.to_string()),
        summary.score,
        summary.cells
    );
    Ok(())
}
