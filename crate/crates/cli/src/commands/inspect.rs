use std::path::{Path, PathBuf};

use anyhow::Result;
use fedmerge::heterometrics::sign_agreement_histogram;
use fedmerge::params::cosine_similarity;
use serde::Serialize;

use crate::io::{display_paths, load_inputs, Staged};

/// A task vector whose norm exceeds this multiple of the median norm is flagged.
pub const OUTLIER_FACTOR: f64 = 3.0;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub pretrained: PathBuf,
    #[arg(long, required = true)]
    pub finetuned: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Inspection {
    pretrained: String,
    finetuned: Vec<String>,
    norms: Vec<f64>,
    /// Row-major `T x T`.
    cosine_similarity: Vec<Vec<f64>>,
    /// Bin `k` counts coordinates whose sign agreement lies in `[k/10, (k+1)/10)`, the last bin is exactly 1.
    sign_agreement_histogram: Vec<u64>,
    median_norm: f64,
    /// Indices of task vectors longer than 3x the median norm (heuristic).
    norm_outliers: Vec<usize>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * 0.5
    }
}

pub fn run(args: &Args, out: Option<&Path>) -> Result<()> {
    let inputs = load_inputs(&args.pretrained, &args.finetuned, &[])?;
    let deltas: Vec<_> = inputs.taus.iter().map(|t| &t.delta).collect();
    let norms: Vec<f64> = inputs.taus.iter().map(|t| t.norm()).collect();
    let cosine = deltas
        .iter()
        .map(|a| deltas.iter().map(|b| cosine_similarity(a, b)).collect::<fedmerge::Result<Vec<_>>>())
        .collect::<fedmerge::Result<Vec<_>>>()?;
    let histogram = sign_agreement_histogram(&deltas);
    let median_norm = median(&norms);
    let outliers: Vec<usize> = (0..norms.len())
        .filter(|&i| norms[i] > OUTLIER_FACTOR * median_norm)
        .collect();

    println!("task vector norms (global L2):");
    for (path, n) in args.finetuned.iter().zip(&norms) {
        println!("  {:<40} {n:.6}", path.display());
    }
    println!("pairwise cosine similarity:");
    for row in &cosine {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:+.4}")).collect();
        println!("  {}", cells.join(" "));
    }
    println!("sign agreement histogram (bins of width 0.1, last bin = full agreement):");
    println!("  {}", histogram.iter().map(u64::to_string).collect::<Vec<_>>().join(" "));
    for &i in &outliers {
        println!(
            "warning (heuristic): {} has norm {:.4}, more than {OUTLIER_FACTOR}x the median norm {:.4}",
            args.finetuned[i].display(),
            norms[i],
            median_norm
        );
    }

    if let Some(out) = out {
        let report = Inspection {
            pretrained: args.pretrained.display().to_string(),
            finetuned: display_paths(&args.finetuned),
            norms,
            cosine_similarity: cosine,
            sign_agreement_histogram: histogram.to_vec(),
            median_norm,
            norm_outliers: outliers,
        };
        let mut staged = Staged::default();
        staged.add_json(out, &report)?;
        staged.commit()?;
    }
    Ok(())
}
