//! Stage bookkeeping: each stage owns one directory under the output
//! root and a `stamp` file holding the hex digest of everything the
//! stage's output depends on (config sections, the global seed, input
//! file contents, upstream stamps). A stage whose recomputed digest
//! matches its stamp is a no-op; artifacts are written before the
//! stamp, so an interrupted run re-executes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ingest,
    Embed,
    Cluster,
    TrainA3c,
    TrainDdpg,
    Backtest,
    Compare,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::TrainA3c => "train-a3c",
            Stage::TrainDdpg => "train-ddpg",
            Stage::Backtest => "backtest",
            Stage::Compare => "compare",
        }
    }

    pub fn dir(self, out: &Path) -> PathBuf {
        out.join(self.name())
    }

    fn stamp_path(self, out: &Path) -> PathBuf {
        self.dir(out).join("stamp")
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Digest over an ordered list of labeled parts.
pub fn fingerprint(parts: &[(&str, &str)]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"cadport.stage.v1");
    for (label, value) in parts {
        hasher.update([0u8]);
        hasher.update(label.as_bytes());
        hasher.update([0u8]);
        hasher.update(value.as_bytes());
    }
    hex(&hasher.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The stage's recorded stamp, or None before its first completed run.
pub fn read_stamp(out: &Path, stage: Stage) -> Option<String> {
    fs::read_to_string(stage.stamp_path(out)).ok().map(|s| s.trim().to_string())
}

/// True when the stage already ran with exactly these inputs.
pub fn is_current(out: &Path, stage: Stage, fp: &str) -> bool {
    read_stamp(out, stage).as_deref() == Some(fp)
}

/// Marks the stage complete; call only after all artifacts are written.
pub fn write_stamp(out: &Path, stage: Stage, fp: &str) -> Result<()> {
    let path = stage.stamp_path(out);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&path, format!("{fp}\n")).with_context(|| format!("writing {}", path.display()))
}

/// The upstream stamp a dependent stage folds into its own fingerprint;
/// a missing stamp is the staging-contract error.
pub fn require(out: &Path, upstream: Stage, dependent: Stage) -> Result<String> {
    match read_stamp(out, upstream) {
        Some(stamp) => Ok(stamp),
        None => bail!(
            "stage '{dependent}' needs artifacts from stage '{upstream}'; \
             run `cadport {upstream}` first"
        ),
    }
}
