//! Run-directory layout, stage fingerprints and the writer lock.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{FniBinding, RunConfig};

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.model().join("pretrain.ckpt")
    }
    pub fn trees(&self) -> PathBuf {
        self.root.join("trees")
    }
    pub fn codes(&self) -> PathBuf {
        self.trees().join("codes.tsv")
    }
    pub fn fni(&self) -> PathBuf {
        self.root.join("fni")
    }
    pub fn augmented_train(&self) -> PathBuf {
        self.fni().join("train_aug.tsv")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.train().join(format!("seed-{seed}"))
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn accuracy(&self) -> PathBuf {
        self.root.join("fn_accuracy")
    }
}

/// Pipeline stages whose outputs carry a fingerprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    Pretrain,
    Trees,
    Fni,
    Train,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Pretrain => "pretrain",
            Stage::Trees => "trees",
            Stage::Fni => "fni",
            Stage::Train => "train",
        }
    }

    fn own_keys(self) -> &'static [&'static str] {
        match self {
            Stage::Data => &["data.", "noise."],
            Stage::Pretrain => &["model.", "pretrain.", "train.lr", "train.batch_size", "train.l2"],
            Stage::Trees => &["tree.", "spectral."],
            Stage::Fni => &["fni.binding", "fni.candidates", "fni.history", "fni.rule_top_n", "fni.mock_responses", "fni.endpoint", "fni.model"],
            Stage::Train => &["model.", "train.", "sampler.", "eval.", "run."],
        }
    }

    /// Stages whose artifacts this stage consumes under `cfg`.
    pub fn upstream(self, cfg: &RunConfig) -> Vec<Stage> {
        match self {
            Stage::Data => vec![],
            Stage::Pretrain => vec![Stage::Data],
            Stage::Trees => vec![Stage::Pretrain],
            Stage::Fni => vec![Stage::Trees],
            Stage::Train => {
                let mut up = vec![Stage::Data];
                if cfg.fni_binding != FniBinding::Off {
                    up.push(Stage::Fni);
                }
                if cfg.sampler_kind.0.needs_codes() {
                    up.push(Stage::Trees);
                }
                up
            }
        }
    }
}

/// SHA-256 over the stage name, its config keys and the fingerprints of the
/// stages it consumes.
pub fn fingerprint(stage: Stage, cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(stage.name().as_bytes());
    h.update(b"\n");
    for (k, v) in cfg.section(stage.own_keys()) {
        h.update(format!("{k}={v}\n").as_bytes());
    }
    for up in stage.upstream(cfg) {
        h.update(format!("<{}>{}\n", up.name(), fingerprint(up, cfg)).as_bytes());
    }
    hex::encode(h.finalize())
}

/// Written as `stage.json` next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: Stage,
    pub fingerprint: String,
    pub upstream: BTreeMap<String, String>,
    pub config: BTreeMap<String, String>,
    pub files: Vec<String>,
}

impl StageMeta {
    pub fn new(stage: Stage, cfg: &RunConfig, files: Vec<String>) -> Self {
        StageMeta {
            stage,
            fingerprint: fingerprint(stage, cfg),
            upstream: stage.upstream(cfg).into_iter().map(|s| (s.name().to_string(), fingerprint(s, cfg))).collect(),
            config: cfg.section(stage.own_keys()).into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            files,
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        fs::write(dir.join("stage.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join("stage.json");
        let text = fs::read_to_string(&path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Fails unless the artifacts in `dir` were produced by `stage` under the
/// current configuration.
pub fn check_fingerprint(dir: &Path, stage: Stage, cfg: &RunConfig) -> anyhow::Result<()> {
    let meta = StageMeta::read(dir)?;
    let want = fingerprint(stage, cfg);
    if meta.fingerprint != want {
        anyhow::bail!(
            "{} artifacts in {} were produced with a different configuration (fingerprint {} != {})",
            stage.name(),
            dir.display(),
            &meta.fingerprint[..12.min(meta.fingerprint.len())],
            &want[..12]
        );
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
#[error("{dir} is locked by another run (remove {lock} if stale)")]
pub struct Locked {
    pub dir: String,
    pub lock: String,
}

/// Exclusive writer lock on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root)?;
        let path = root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Locked { dir: root.display().to_string(), lock: path.display().to_string() }.into())
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprints_follow_relevant_keys() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.sampler_alpha_c = 0.5;
        assert_eq!(fingerprint(Stage::Trees, &a), fingerprint(Stage::Trees, &b));
        assert_ne!(fingerprint(Stage::Train, &a), fingerprint(Stage::Train, &b));
        b.data_kcore = 5;
        assert_ne!(fingerprint(Stage::Trees, &a), fingerprint(Stage::Trees, &b));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let l = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(l);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }
}
