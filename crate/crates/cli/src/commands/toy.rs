use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fedmerge::checkpoint::{encode_checkpoint, TrainingMetaFile};
use fedmerge::fedsim::toy::{ToyConfig, ToyProblem};
use serde_json::json;

use crate::io::{ensure_dir, require_out, Staged};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Toy settings as JSON; defaults are used for missing fields. The global --seed
    /// applies when the file gives none.
    #[arg(long)]
    pub toy_config: Option<PathBuf>,
    /// Fine-tune the second task at `rate_ratio` times the first task's rate.
    #[arg(long)]
    pub heterogeneous: bool,
}

pub fn run(args: &Args, out: Option<&Path>, seed: u64) -> Result<()> {
    let dir = require_out(out, "output directory")?;
    let config = match &args.toy_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let mut config: ToyConfig =
                serde_json::from_value(value.clone()).with_context(|| format!("parsing {}", path.display()))?;
            if value.get("seed").is_none() {
                config.seed = seed;
            }
            config
        }
        None => ToyConfig { seed, ..ToyConfig::default() },
    };
    let problem = ToyProblem::generate(&config)?;
    let rates = config.rates(args.heterogeneous);
    let tuned = problem.fine_tune(&rates, config.steps)?;

    ensure_dir(dir)?;
    let mut staged = Staged::default();
    staged.add(dir.join("base.ckpt"), &encode_checkpoint(&problem.theta0.cast::<f32>()))?;
    for (t, (model, rate)) in tuned.models.iter().zip(rates).enumerate() {
        staged.add(dir.join(format!("task_{t}.ckpt")), &encode_checkpoint(&model.cast::<f32>()))?;
        let meta = TrainingMetaFile::Constant {
            task_name: format!("task_{t}"),
            learning_rate: rate,
            steps: config.steps,
        };
        staged.add_json(dir.join(format!("task_{t}.meta.json")), &meta)?;
    }
    staged.add_json(dir.join("eval.json"), &json!({ "evaluator": "toy_mlp", "toy": config }))?;
    staged.commit()?;
    println!(
        "fine-tuned validation accuracy: {}",
        tuned.val_reference.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(", ")
    );
    Ok(())
}
