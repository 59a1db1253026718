use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fedmerge::checkpoint::{encode_checkpoint, TrainingMetaFile};
use fedmerge::experiment::ExperimentConfig;
use fedmerge::ParamMap64;

use crate::io::{ensure_dir, require_out, Staged};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// JSON experiment config (`"schema_version": 1`).
    #[arg(long)]
    pub config: PathBuf,
}

pub fn run(args: &Args, out: Option<&Path>, seed: u64) -> Result<()> {
    let dir = require_out(out, "output directory")?;
    let config = ExperimentConfig::load(&args.config)?;
    let experiment = config.run(seed).with_context(|| format!("running {}", args.config.display()))?;

    let mut rounds = csv::Writer::from_writer(Vec::new());
    for row in &experiment.report.per_round {
        rounds.serialize(row)?;
    }
    if experiment.report.per_round.is_empty() {
        rounds.write_record(["round", "loss", "suboptimality", "het_at_point"])?;
    }
    let rounds = rounds.into_inner().context("encoding rounds.csv")?;

    ensure_dir(dir)?;
    let mut staged = Staged::default();
    staged.add_json(dir.join("report.json"), &experiment.report)?;
    staged.add(dir.join("rounds.csv"), &rounds)?;
    if config.dump_task_vectors {
        let as_f32 = |m: &ParamMap64| encode_checkpoint(&m.cast::<f32>());
        staged.add(dir.join("theta0.ckpt"), &as_f32(&experiment.family.theta0))?;
        for (t, end) in experiment.run.local_endpoints[0].iter().enumerate() {
            staged.add(dir.join(format!("task_{t}.ckpt")), &as_f32(end))?;
        }
        for (t, meta) in experiment.metas().into_iter().enumerate() {
            // zero-step schedules have no valid metadata
            if let Some(meta) = meta {
                let file = TrainingMetaFile::Explicit {
                    task_name: format!("task_{t}"),
                    learning_rates: meta.learning_rates().to_vec(),
                };
                staged.add_json(dir.join(format!("task_{t}.meta.json")), &file)?;
            }
        }
    }
    staged.commit()?;
    log::info!(
        "final suboptimality {:e} after {} rounds",
        experiment.report.final_suboptimality,
        experiment.report.rounds
    );
    Ok(())
}
