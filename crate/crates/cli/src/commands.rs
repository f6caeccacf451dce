//! Pipeline stages over a run directory. Each command reads only persisted
//! artifacts and the config, and checks the fingerprints of what it reads.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dtlns_core::backbone::{propagate, read_checkpoint, write_checkpoint, Graph, ModelState};
use dtlns_core::dataset::{
    load_interactions, read_dataset, read_planted, read_tsv, write_dataset, write_tsv, InputFormat, InteractionDataset,
};
use dtlns_core::eval::{aggregate, evaluate, write_results_csv, EvalSplit, ResultRow};
use dtlns_core::fni::{build_candidate_sets, build_probe_candidate_sets, fn_accuracy, identify, CandidateSet};
use dtlns_core::spectral::write_embedding;
use dtlns_core::synth::{generate_blocks, BlockSpec};
use dtlns_core::train::{write_metric_log, write_timing_log};
use dtlns_core::tree::DualCodes;
use log::info;
use serde::Serialize;

use crate::artifacts::{check_fingerprint, fingerprint, Layout, RunLock, Stage, StageMeta};
use crate::config::{FniBinding, RunConfig};
use crate::pipeline;

/// Subcommands, each with its own exit code on failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Prepare,
    BuildTrees,
    IdentifyFn,
    Train,
    Evaluate,
    FnAccuracy,
    Synth,
}

impl Command {
    pub fn exit_code(self) -> i32 {
        match self {
            Command::Prepare => 10,
            Command::BuildTrees => 11,
            Command::IdentifyFn => 12,
            Command::Train => 13,
            Command::Evaluate => 14,
            Command::FnAccuracy => 15,
            Command::Synth => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::BuildTrees => "build-trees",
            Command::IdentifyFn => "identify-fn",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::FnAccuracy => "fn-accuracy",
            Command::Synth => "synth",
        }
    }
}

/// Exit code for a usage or config error.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code when the run directory is locked.
pub const EXIT_LOCKED: i32 = 3;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.data_input.is_empty() {
        bail!("data.input is not set");
    }
    let lay = Layout::new(out);
    let log = load_interactions(Path::new(&cfg.data_input), InputFormat::TsvTriples)?;
    let mut p = pipeline::prepare(&log, cfg)?;
    p.manifest.fingerprint = fingerprint(Stage::Data, cfg);
    write_dataset(&lay.data(), &p.dataset, &p.manifest, p.planted.as_ref())?;
    p.log.write_id_maps(&lay.data())?;
    let mut files = vec!["train.tsv", "valid.tsv", "test.tsv", "manifest.json", "user_map.tsv", "item_map.tsv"];
    if p.planted.is_some() {
        files.push("planted_fn.tsv");
    }
    StageMeta::new(Stage::Data, cfg, files.into_iter().map(String::from).collect()).write(&lay.data())?;
    info!(
        "prepared {} users, {} items: train {}, valid {}, test {}, planted {}",
        p.manifest.user_count, p.manifest.item_count, p.manifest.train, p.manifest.validation, p.manifest.test, p.manifest.planted
    );
    Ok(())
}

fn load_data(lay: &Layout, cfg: &RunConfig) -> Result<InteractionDataset> {
    check_fingerprint(&lay.data(), Stage::Data, cfg)?;
    let (ds, manifest) = read_dataset(&lay.data())?;
    if manifest.fingerprint != fingerprint(Stage::Data, cfg) {
        bail!("dataset manifest fingerprint does not match the configuration");
    }
    Ok(ds)
}

/// Loads the pretrained model, training and persisting it first if absent.
fn pretrained(lay: &Layout, cfg: &RunConfig, ds: &InteractionDataset) -> Result<ModelState> {
    let ckpt = lay.pretrain_checkpoint();
    if ckpt.exists() {
        check_fingerprint(&lay.model(), Stage::Pretrain, cfg)?;
        return Ok(read_checkpoint(&ckpt)?);
    }
    info!("no pretrained checkpoint; pretraining {:?}", cfg.backbone());
    let state = pipeline::pretrain(ds, cfg)?;
    fs::create_dir_all(lay.model())?;
    write_checkpoint(&ckpt, &state)?;
    StageMeta::new(Stage::Pretrain, cfg, vec!["pretrain.ckpt".into()]).write(&lay.model())?;
    Ok(state)
}

pub fn build_trees(cfg: &RunConfig, out: &Path) -> Result<()> {
    let lay = Layout::new(out);
    let ds = load_data(&lay, cfg)?;
    let state = pretrained(&lay, cfg, &ds)?;
    let trees = pipeline::build_dual_trees(&ds, &pipeline::item_embeddings(&state, &ds), cfg)?;
    let dir = lay.trees();
    fs::create_dir_all(&dir)?;
    trees.collab.write(&dir.join("collab.tree"))?;
    trees.semantic.write(&dir.join("semantic.tree"))?;
    trees.codes.write(&lay.codes())?;
    write_embedding(&dir.join("spectral.emb"), &trees.spectral.matrix)?;
    let files = ["collab.tree", "semantic.tree", "codes.tsv", "spectral.emb"];
    StageMeta::new(Stage::Trees, cfg, files.into_iter().map(String::from).collect()).write(&dir)?;
    Ok(())
}

fn load_codes(lay: &Layout, cfg: &RunConfig) -> Result<DualCodes> {
    check_fingerprint(&lay.trees(), Stage::Trees, cfg)?;
    Ok(DualCodes::read(&lay.codes())?)
}

fn write_candidates(path: &Path, sets: &[CandidateSet]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for c in sets {
        let items: Vec<String> = c.items.iter().map(u32::to_string).collect();
        writeln!(w, "{}\t{}", c.user, items.join(","))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ClassifierTiming {
    classifier: String,
    users: usize,
    seconds: f64,
}

pub fn identify_fn(cfg: &RunConfig, out: &Path) -> Result<()> {
    let lay = Layout::new(out);
    if cfg.fni_binding == FniBinding::Off {
        bail!("fni.binding is off");
    }
    let ds = load_data(&lay, cfg)?;
    let codes = load_codes(&lay, cfg)?;
    check_fingerprint(&lay.model(), Stage::Pretrain, cfg)?;
    let state = read_checkpoint(&lay.pretrain_checkpoint())?;
    let forward = propagate(&state, &Graph::from_dataset(&ds));
    let candidates = build_candidate_sets(&forward, &ds, cfg.fni_candidates)?;
    let classifier = pipeline::make_classifier(cfg)?;
    let (augmented, report) = identify(&ds, &codes, &candidates, classifier.as_ref())?;
    info!(
        "{}: {} detected over {} users in {:.2}s; {} added, {} leakage-filtered",
        report.provenance, report.detected, report.users_prompted, report.classifier_seconds, report.augment.added, report.augment.leakage_filtered
    );
    let dir = lay.fni();
    fs::create_dir_all(&dir)?;
    write_candidates(&dir.join("candidates.tsv"), &candidates)?;
    write_tsv(&lay.augmented_train(), &augmented.train)?;
    write_tsv(&dir.join("detected.tsv"), &report.detected_pairs())?;
    report.write_json(&dir.join("report.json"))?;
    write_json(
        &dir.join("timing.json"),
        &ClassifierTiming { classifier: report.provenance.clone(), users: report.users_prompted, seconds: report.classifier_seconds },
    )?;
    let files = ["candidates.tsv", "train_aug.tsv", "detected.tsv", "report.json", "timing.json"];
    StageMeta::new(Stage::Fni, cfg, files.into_iter().map(String::from).collect()).write(&dir)?;
    Ok(())
}

/// The dataset training sees: the prepared splits with the FNI-augmented
/// train set when identification is on.
fn training_data(lay: &Layout, cfg: &RunConfig) -> Result<InteractionDataset> {
    let ds = load_data(lay, cfg)?;
    if cfg.fni_binding == FniBinding::Off {
        return Ok(ds);
    }
    check_fingerprint(&lay.fni(), Stage::Fni, cfg)?;
    let train = read_tsv(&lay.augmented_train())?;
    Ok(InteractionDataset::new(ds.user_count, ds.item_count, train, ds.validation, ds.test)?)
}

fn sampler_label(cfg: &RunConfig) -> String {
    match cfg.fni_binding {
        FniBinding::Off => cfg.sampler_kind.0.name().to_string(),
        b => format!("{}+fni-{b}", cfg.sampler_kind.0.name()),
    }
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    best_epoch: usize,
    best_valid_recall20: f64,
    epochs_run: usize,
    stopped_early: bool,
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let lay = Layout::new(out);
    if cfg.run_seeds.0.is_empty() {
        bail!("run.seeds is empty");
    }
    let ds = training_data(&lay, cfg)?;
    let codes = if cfg.sampler_kind.0.needs_codes() { Some(load_codes(&lay, cfg)?) } else { None };
    let label = sampler_label(cfg);
    let mut rows = Vec::new();
    for &seed in &cfg.run_seeds.0 {
        let dir = lay.seed_dir(seed);
        fs::create_dir_all(&dir)?;
        let run = pipeline::train_seed(&ds, codes.as_ref(), cfg, seed, Some(&dir.join("diverged.ckpt")))?;
        write_checkpoint(&dir.join("model.ckpt"), &run.outcome.best)?;
        write_metric_log(&dir.join("metrics.csv"), &run.outcome.history)?;
        write_timing_log(&dir.join("timing.csv"), &run.outcome.history)?;
        write_json(
            &dir.join("run.json"),
            &SeedSummary {
                seed,
                best_epoch: run.outcome.best_epoch,
                best_valid_recall20: run.outcome.best_recall,
                epochs_run: run.outcome.history.len(),
                stopped_early: run.outcome.stopped_early,
            },
        )?;
        info!("seed {seed}: best epoch {}, test recall@20 {:.4}", run.outcome.best_epoch, run.test.recall_at(20));
        rows.push(ResultRow { run_id: format!("{}-{label}-s{seed}", cfg.data_name), dataset: cfg.data_name.clone(), sampler: label.clone(), seed, metrics: run.test });
    }
    write_results_csv(&lay.train().join("results.csv"), &rows)?;
    write_json(&lay.train().join("aggregate.json"), &aggregate(&rows)?)?;
    StageMeta::new(Stage::Train, cfg, vec!["results.csv".into(), "aggregate.json".into()]).write(&lay.train())?;
    Ok(())
}

/// Scores checkpoints on the test split: `checkpoint` alone, or every seed's
/// best checkpoint from `train`.
pub fn evaluate_cmd(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let lay = Layout::new(out);
    let ds = training_data(&lay, cfg)?;
    let targets: Vec<(u64, PathBuf)> = match checkpoint {
        Some(p) => vec![(cfg.run_seeds.0.first().copied().unwrap_or(0), p.to_path_buf())],
        None => {
            check_fingerprint(&lay.train(), Stage::Train, cfg)?;
            cfg.run_seeds.0.iter().map(|&s| (s, lay.seed_dir(s).join("model.ckpt"))).collect()
        }
    };
    let graph = Graph::from_dataset(&ds);
    let label = sampler_label(cfg);
    let mut rows = Vec::new();
    for (seed, path) in targets {
        if !path.exists() {
            bail!("missing checkpoint {}", path.display());
        }
        let state = read_checkpoint(&path)?;
        if state.user_count() != ds.user_count || state.item_count() != ds.item_count {
            bail!("checkpoint {} does not match the dataset shape", path.display());
        }
        let metrics = evaluate(&propagate(&state, &graph), &ds, EvalSplit::Test, &cfg.eval_ks.0);
        rows.push(ResultRow { run_id: format!("{}-{label}-s{seed}", cfg.data_name), dataset: cfg.data_name.clone(), sampler: label.clone(), seed, metrics });
    }
    fs::create_dir_all(lay.eval())?;
    write_results_csv(&lay.eval().join("results.csv"), &rows)?;
    write_json(&lay.eval().join("aggregate.json"), &aggregate(&rows)?)?;
    write_json(&lay.eval().join("metrics.json"), &rows)?;
    Ok(())
}

pub fn fn_accuracy_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let lay = Layout::new(out);
    let ds = load_data(&lay, cfg)?;
    let planted_path = lay.data().join("planted_fn.tsv");
    if !planted_path.exists() {
        bail!("no planted false negatives; set noise.fraction > 0 and rerun prepare");
    }
    let planted = read_planted(&lay.data())?;
    let codes = load_codes(&lay, cfg)?;
    check_fingerprint(&lay.model(), Stage::Pretrain, cfg)?;
    let state = read_checkpoint(&lay.pretrain_checkpoint())?;
    let forward = propagate(&state, &Graph::from_dataset(&ds));
    let candidates = build_probe_candidate_sets(&forward, &ds, cfg.fni_candidates, &planted)?;
    let classifier = pipeline::make_classifier(cfg)?;
    let (_, mut report) = identify(&ds, &codes, &candidates, classifier.as_ref())?;
    let acc = fn_accuracy(&report, &planted, &candidates);
    info!(
        "{}: planted recall {:?}, precision {:?}, random baseline {:?} ({} probed)",
        report.provenance, acc.recall, acc.precision, acc.random_baseline, acc.planted_in_candidates
    );
    report.accuracy = Some(acc.clone());
    let dir = lay.accuracy();
    fs::create_dir_all(&dir)?;
    write_candidates(&dir.join("candidates.tsv"), &candidates)?;
    report.write_json(&dir.join("report.json"))?;
    write_json(&dir.join("accuracy.json"), &acc)?;
    Ok(())
}

pub fn synth(spec: &BlockSpec, path: &Path) -> Result<()> {
    let edges = generate_blocks(spec)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_tsv(path, &edges)?;
    info!("wrote {} interactions to {}", edges.len(), path.display());
    Ok(())
}

/// Runs `cmd` under the run-directory lock.
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let _lock = RunLock::acquire(out)?;
    match cmd {
        Command::Prepare => prepare(cfg, out),
        Command::BuildTrees => build_trees(cfg, out),
        Command::IdentifyFn => identify_fn(cfg, out),
        Command::Train => train(cfg, out),
        Command::Evaluate => evaluate_cmd(cfg, out, checkpoint),
        Command::FnAccuracy => fn_accuracy_cmd(cfg, out),
        Command::Synth => unreachable!("synth writes a single file and takes no lock"),
    }
}
