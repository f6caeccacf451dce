//! In-memory pipeline steps shared by the commands and the desk experiments.

use std::collections::BTreeMap;
use std::path::Path;

use dtlns_core::backbone::{init_params, pretrain_semantic, propagate, Graph, ModelState};
use dtlns_core::dataset::{
    inject_false_negatives, k_core_filter, split, DatasetManifest, Interaction, InteractionDataset, InteractionLog, NoiseSpec,
    PlantedFnSet, Removal, UserId,
};
use dtlns_core::eval::{evaluate, EvalSplit, MetricReport};
use dtlns_core::fni::{FnClassifier, LlmClassifier, RuleClassifier, ScriptedClassifier};
use dtlns_core::sampler::Sampler;
use dtlns_core::spectral::{jaccard_similarity, normalized_laplacian, spectral_embed, SpectralEmbedding};
use dtlns_core::sparse::Dense;
use dtlns_core::train::{fit, FitOutcome};
use dtlns_core::tree::{build_kary_tree, path_codes, DualCodes, IndexTree};
use dtlns_core::{Error, Result};
use log::info;

use crate::config::{FniBinding, RunConfig};

pub struct Prepared {
    pub log: InteractionLog,
    pub dataset: InteractionDataset,
    pub planted: Option<PlantedFnSet>,
    pub manifest: DatasetManifest,
}

/// k-core filter, global split, then optional false-negative injection.
pub fn prepare(log: &InteractionLog, cfg: &RunConfig) -> Result<Prepared> {
    let core = k_core_filter(&log.interactions, cfg.data_kcore)?;
    let log = log.apply_kcore(&core);
    let (clean, repair) = split(&log.interactions, log.user_count(), log.item_count(), cfg.split_ratios(), cfg.data_split_seed)?;
    let noise = (cfg.noise_fraction > 0.0).then_some(NoiseSpec { removal: Removal::Fraction(cfg.noise_fraction), seed: cfg.noise_seed });
    let (dataset, planted) = match &noise {
        Some(spec) => {
            let (d, p) = inject_false_negatives(&clean, spec)?;
            (d, Some(p))
        }
        None => (clean, None),
    };
    let manifest = DatasetManifest {
        user_count: dataset.user_count,
        item_count: dataset.item_count,
        train: dataset.train.len(),
        validation: dataset.validation.len(),
        test: dataset.test.len(),
        raw_interactions: core.edges.len(),
        kcore: cfg.data_kcore,
        split_seed: cfg.data_split_seed,
        split_ratios: cfg.split_ratios(),
        repair,
        noise,
        planted: planted.as_ref().map_or(0, |p| p.len()),
        fingerprint: String::new(),
    };
    Ok(Prepared { log, dataset, planted, manifest })
}

/// Pretrains the backbone with uniform negatives.
pub fn pretrain(ds: &InteractionDataset, cfg: &RunConfig) -> Result<ModelState> {
    let (state, _) = pretrain_semantic(ds, cfg.backbone(), cfg.model_dim, &cfg.pretrain_config())?;
    Ok(state)
}

pub fn item_embeddings(state: &ModelState, ds: &InteractionDataset) -> Dense {
    propagate(state, &Graph::from_dataset(ds)).items
}

pub struct DualTrees {
    pub spectral: SpectralEmbedding,
    pub collab: IndexTree,
    pub semantic: IndexTree,
    pub codes: DualCodes,
}

/// Collaborative tree over the spectral embedding of the Jaccard graph and
/// semantic tree over the pretrained item embeddings.
pub fn build_dual_trees(ds: &InteractionDataset, semantic_items: &Dense, cfg: &RunConfig) -> Result<DualTrees> {
    let w = jaccard_similarity(ds)?;
    let lap = normalized_laplacian(&w);
    let spectral = spectral_embed(&lap, &cfg.spectral_options())?;
    let collab = build_kary_tree(&spectral.matrix, cfg.tree_branching, cfg.tree_leaf_size, cfg.tree_seed)?;
    let semantic = build_kary_tree(semantic_items, cfg.tree_branching, cfg.tree_leaf_size, dtlns_core::rng::derive(cfg.tree_seed, &[1]))?;
    let codes = DualCodes::new(path_codes(&collab), path_codes(&semantic))?;
    info!(
        "trees: collaborative depth {} ({} leaves), semantic depth {} ({} leaves)",
        collab.depth(),
        collab.leaves().count(),
        semantic.depth(),
        semantic.leaves().count()
    );
    Ok(DualTrees { spectral, collab, semantic, codes })
}

/// Scripted responses file: a JSON object from user id to raw response text.
pub fn read_mock_responses(path: &Path) -> Result<BTreeMap<UserId, String>> {
    let text = std::fs::read_to_string(path)?;
    let raw: BTreeMap<String, String> = serde_json::from_str(&text)?;
    raw.into_iter()
        .map(|(k, v)| k.parse::<UserId>().map(|u| (u, v)).map_err(|e| Error::format(path, format!("user key {k:?}: {e}"))))
        .collect()
}

pub fn make_classifier(cfg: &RunConfig) -> Result<Box<dyn FnClassifier>> {
    Ok(match cfg.fni_binding {
        FniBinding::Off => return Err(Error::InvalidArgument("fni.binding is off".into())),
        FniBinding::Rule => Box::new(RuleClassifier { top_n: cfg.fni_rule_top_n }),
        FniBinding::Mock => {
            if cfg.fni_mock_responses.is_empty() {
                return Err(Error::InvalidArgument("fni.binding = mock needs fni.mock_responses".into()));
            }
            Box::new(ScriptedClassifier { responses: read_mock_responses(Path::new(&cfg.fni_mock_responses))? })
        }
        FniBinding::Llm => Box::new(LlmClassifier::new(cfg.llm_config())?),
    })
}

pub struct SeedRun {
    pub outcome: FitOutcome,
    pub test: MetricReport,
}

/// Trains one seed with the configured sampler and scores the best state on
/// the test split.
pub fn train_seed(ds: &InteractionDataset, codes: Option<&DualCodes>, cfg: &RunConfig, seed: u64, dump: Option<&Path>) -> Result<SeedRun> {
    let sampler = Sampler::new(cfg.sampler_config(), codes)?;
    let init = init_params(ds.user_count, ds.item_count, cfg.model_dim, cfg.backbone(), seed)?;
    let outcome = fit(ds, init, &sampler, &cfg.train_config(seed), dump, |e| {
        log::debug!("seed {seed} epoch {} loss {:.5} recall@20 {:.4} ({:.3}s)", e.epoch, e.loss, e.recall, e.seconds)
    })?;
    let forward = propagate(&outcome.best, &Graph::from_dataset(ds));
    let test = evaluate(&forward, ds, EvalSplit::Test, &cfg.eval_ks.0);
    Ok(SeedRun { outcome, test })
}

/// Raw ids for a log built in memory (e.g. a synthetic dataset).
pub fn log_from_edges(edges: Vec<Interaction>, users: usize, items: usize) -> InteractionLog {
    InteractionLog {
        interactions: edges,
        user_ids: (0..users).map(|u| u.to_string()).collect(),
        item_ids: (0..items).map(|i| i.to_string()).collect(),
    }
}
