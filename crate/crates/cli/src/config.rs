//! Run configuration: a flat `key = value` file with dotted sections.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors. Every
//! key has a default, so an empty file is a complete configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use dtlns_core::backbone::{Backbone, TrainConfig};
use dtlns_core::dataset::SplitRatios;
use dtlns_core::fni::LlmConfig;
use dtlns_core::sampler::{SamplerConfig, SamplerKind};
use dtlns_core::spectral::{SolverKind, SpectralOptions};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    Syntax { path: String, line: usize, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FniBinding {
    Off,
    Rule,
    Mock,
    Llm,
}

impl FromStr for FniBinding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "off" => FniBinding::Off,
            "rule" => FniBinding::Rule,
            "mock" => FniBinding::Mock,
            "llm" => FniBinding::Llm,
            other => return Err(format!("expected off|rule|mock|llm, got {other:?}")),
        })
    }
}

impl Display for FniBinding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FniBinding::Off => "off",
            FniBinding::Rule => "rule",
            FniBinding::Mock => "mock",
            FniBinding::Llm => "llm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneName {
    Mf,
    LightGcn,
}

impl FromStr for BackboneName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mf" => Ok(BackboneName::Mf),
            "lightgcn" => Ok(BackboneName::LightGcn),
            other => Err(format!("expected mf|lightgcn, got {other:?}")),
        }
    }
}

impl Display for BackboneName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackboneName::Mf => "mf",
            BackboneName::LightGcn => "lightgcn",
        })
    }
}

/// Comma-separated list value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',').map(|p| p.trim().parse::<T>().map_err(|e| e.to_string())).collect::<Result<_, _>>().map(List)
    }
}

impl<T: Display> Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! run_config {
    ($( $key:literal => $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( $key ),*];

            /// Every key with its rendered value, in declaration order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$( ($key, self.$field.to_string()) ),*]
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $( $key => {
                        self.$field = value.parse::<$ty>().map_err(|e| ConfigError::Value {
                            key: key.to_string(),
                            value: value.to_string(),
                            msg: e.to_string(),
                        })?;
                    } )*
                    other => return Err(ConfigError::UnknownKey(other.to_string())),
                }
                Ok(())
            }
        }
    };
}

run_config! {
    "data.input" => data_input: String = String::new(),
    "data.name" => data_name: String = "dataset".into(),
    "data.kcore" => data_kcore: usize = 10,
    "data.split_seed" => data_split_seed: u64 = 2024,
    "data.train_ratio" => data_train_ratio: u32 = 8,
    "data.valid_ratio" => data_valid_ratio: u32 = 1,
    "data.test_ratio" => data_test_ratio: u32 = 1,
    "noise.fraction" => noise_fraction: f64 = 0.0,
    "noise.seed" => noise_seed: u64 = 2024,
    "tree.branching" => tree_branching: usize = 4,
    "tree.leaf_size" => tree_leaf_size: usize = 30,
    "tree.spectral_dim" => tree_spectral_dim: usize = 32,
    "tree.seed" => tree_seed: u64 = 2024,
    "spectral.tol" => spectral_tol: f64 = 1e-9,
    "spectral.max_iter" => spectral_max_iter: usize = 300,
    "model.backbone" => model_backbone: BackboneName = BackboneName::LightGcn,
    "model.layers" => model_layers: usize = 3,
    "model.dim" => model_dim: usize = 64,
    "pretrain.epochs" => pretrain_epochs: usize = 1000,
    "pretrain.seed" => pretrain_seed: u64 = 2024,
    "pretrain.patience" => pretrain_patience: usize = 10,
    "train.lr" => train_lr: f64 = 0.001,
    "train.batch_size" => train_batch_size: usize = 2048,
    "train.l2" => train_l2: f64 = 1e-4,
    "train.epochs" => train_epochs: usize = 1000,
    "train.patience" => train_patience: usize = 10,
    "fni.binding" => fni_binding: FniBinding = FniBinding::Rule,
    "fni.candidates" => fni_candidates: usize = 20,
    "fni.history" => fni_history: usize = 30,
    "fni.rule_top_n" => fni_rule_top_n: usize = 10,
    "fni.mock_responses" => fni_mock_responses: String = String::new(),
    "fni.endpoint" => fni_endpoint: String = LlmConfig::default().endpoint,
    "fni.model" => fni_model: String = LlmConfig::default().model,
    "fni.token_env" => fni_token_env: String = LlmConfig::default().token_env,
    "fni.concurrency" => fni_concurrency: usize = 8,
    "fni.timeout_secs" => fni_timeout_secs: u64 = 120,
    "fni.max_retries" => fni_max_retries: u32 = 3,
    "fni.backoff_ms" => fni_backoff_ms: u64 = 500,
    "sampler.kind" => sampler_kind: SamplerKindName = SamplerKindName(SamplerKind::DtMhns),
    "sampler.pool" => sampler_pool: usize = 10,
    "sampler.alpha_c" => sampler_alpha_c: f64 = 0.1,
    "sampler.alpha_s" => sampler_alpha_s: f64 = 0.3,
    "eval.ks" => eval_ks: List<usize> = List(vec![10, 20]),
    "run.seeds" => run_seeds: List<u64> = List(vec![2024]),
}

/// `SamplerKind` with its config spelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerKindName(pub SamplerKind);

impl FromStr for SamplerKindName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.parse::<SamplerKind>().map(SamplerKindName).map_err(|e| e.to_string())
    }
}

impl Display for SamplerKindName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0.name())
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.to_string(),
                line: idx + 1,
                msg: "expected `key = value`".into(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// One `key = value` line per key. Floats use the shortest exact
    /// representation, so `parse(render())` is lossless.
    pub fn render(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn values(&self) -> BTreeMap<&'static str, String> {
        self.pairs().into_iter().collect()
    }

    pub fn backbone(&self) -> Backbone {
        match self.model_backbone {
            BackboneName::Mf => Backbone::Mf,
            BackboneName::LightGcn => Backbone::LightGcn { layers: self.model_layers },
        }
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios { train: self.data_train_ratio, validation: self.data_valid_ratio, test: self.data_test_ratio }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.train_lr,
            batch_size: self.train_batch_size,
            l2: self.train_l2,
            epochs: self.train_epochs,
            seed,
            patience: self.train_patience,
            ..TrainConfig::default()
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig { epochs: self.pretrain_epochs, patience: self.pretrain_patience, ..self.train_config(self.pretrain_seed) }
    }

    pub fn spectral_options(&self) -> SpectralOptions {
        SpectralOptions {
            dim: self.tree_spectral_dim,
            tol: self.spectral_tol,
            max_iter: self.spectral_max_iter,
            seed: self.tree_seed,
            solver: SolverKind::Auto,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler_kind.0,
            pool_size: self.sampler_pool,
            alpha_c: self.sampler_alpha_c,
            alpha_s: self.sampler_alpha_s,
        }
    }

    pub fn llm_config(&self) -> LlmConfig {
        LlmConfig {
            endpoint: self.fni_endpoint.clone(),
            model: self.fni_model.clone(),
            token_env: self.fni_token_env.clone(),
            concurrency: self.fni_concurrency,
            timeout_secs: self.fni_timeout_secs,
            max_retries: self.fni_max_retries,
            backoff_ms: self.fni_backoff_ms,
            history_trunc: self.fni_history,
        }
    }

    /// Values under any of `prefixes`, for stage fingerprints.
    pub fn section(&self, prefixes: &[&str]) -> BTreeMap<&'static str, String> {
        self.pairs().into_iter().filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!((c.tree_branching, c.tree_leaf_size, c.tree_spectral_dim), (4, 30, 32));
        assert_eq!(c.fni_candidates, 20);
        assert_eq!((c.sampler_alpha_c, c.sampler_alpha_s, c.sampler_pool), (0.1, 0.3, 10));
        assert_eq!((c.train_lr, c.train_batch_size, c.train_l2), (0.001, 2048, 1e-4));
        assert_eq!(c.backbone(), Backbone::LightGcn { layers: 3 });
        assert_eq!(c.eval_ks.0, vec![10, 20]);
        assert_eq!(c.data_kcore, 10);
    }

    #[test]
    fn render_parse_round_trip() {
        let mut c = RunConfig::default();
        c.set("train.lr", "0.0003").unwrap();
        c.set("sampler.alpha_c", "0.1").unwrap();
        c.set("noise.fraction", "0.2").unwrap();
        c.set("run.seeds", "1, 2,3").unwrap();
        c.set("fni.binding", "mock").unwrap();
        c.set("sampler.kind", "dns_plus").unwrap();
        c.set("spectral.tol", "1e-12").unwrap();
        let back = RunConfig::parse(&c.render(), "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.render(), c.render());
    }

    #[test]
    fn comments_blank_and_errors() {
        let c = RunConfig::parse("# x\n\n model.dim = 8 \n", "mem").unwrap();
        assert_eq!(c.model_dim, 8);
        assert!(matches!(RunConfig::parse("nope = 1", "mem"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::parse("model.dim = x", "mem"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("model.dim", "mem"), Err(ConfigError::Syntax { line: 1, .. })));
    }
}
