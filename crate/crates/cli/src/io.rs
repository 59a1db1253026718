use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fedmerge::checkpoint::{read_checkpoint, read_training_meta};
use fedmerge::{ParamMap, TaskVec, TrainingMeta};
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::exit::usage;

/// Output files written to temporaries first and renamed together on commit,
/// so a failed command leaves no partial outputs behind.
#[derive(Default)]
pub struct Staged {
    files: Vec<(PathBuf, NamedTempFile)>,
}

impl Staged {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: &[u8]) -> Result<()> {
        let path = path.into();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let mut tmp = NamedTempFile::new_in(&dir).with_context(|| format!("cannot write into {}", dir.display()))?;
        tmp.write_all(bytes)
            .and_then(|()| tmp.as_file().sync_all())
            .with_context(|| format!("cannot write {}", path.display()))?;
        self.files.push((path, tmp));
        Ok(())
    }

    pub fn add_json(&mut self, path: impl Into<PathBuf>, value: &impl Serialize) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(path, &bytes)
    }

    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::with_capacity(self.files.len());
        for (path, tmp) in self.files {
            tmp.persist(&path).with_context(|| format!("cannot write {}", path.display()))?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn require_out<'a>(out: Option<&'a Path>, what: &str) -> Result<&'a Path> {
    out.ok_or_else(|| usage(format!("--out is required ({what})")))
}

/// Creates an output directory once everything else has succeeded.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

pub struct Inputs {
    pub base: ParamMap,
    pub taus: Vec<TaskVec>,
}

pub fn load_checkpoint(path: &Path) -> Result<ParamMap> {
    Ok(read_checkpoint(path)?)
}

/// Reads the pre-trained and fine-tuned checkpoints (plus optional metadata) as task vectors.
pub fn load_inputs(pretrained: &Path, finetuned: &[PathBuf], metas: &[PathBuf]) -> Result<Inputs> {
    if finetuned.is_empty() {
        return Err(usage("at least one --finetuned checkpoint is required"));
    }
    if !metas.is_empty() && metas.len() != finetuned.len() {
        return Err(usage(format!(
            "got {} --meta files for {} --finetuned checkpoints",
            metas.len(),
            finetuned.len()
        )));
    }
    let base = load_checkpoint(pretrained)?;
    let mut taus = Vec::with_capacity(finetuned.len());
    for (i, path) in finetuned.iter().enumerate() {
        let model = load_checkpoint(path)?;
        base.check_schema(&model)
            .with_context(|| format!("{} does not match {}", path.display(), pretrained.display()))?;
        let meta = metas.get(i).map(|m| load_meta(m)).transpose()?;
        taus.push(fedmerge::merge::task_vector(&base, &model, meta)?);
    }
    Ok(Inputs { base, taus })
}

fn load_meta(path: &Path) -> Result<TrainingMeta> {
    Ok(read_training_meta(path)?)
}

pub fn display_paths(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}
