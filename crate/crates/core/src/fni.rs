//! Offline false-negative identification: candidate sets from a pretrained
//! scorer, dual-code prompts, classifier bindings (HTTP chat endpoint,
//! prefix-similarity rule, scripted responses), verdict collection and
//! planted-pair accuracy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use log::{info, warn};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::Forward;
use crate::dataset::{augment_with_positives, AugmentAudit, Interaction, InteractionDataset, ItemId, PlantedFnSet, UserId};
use crate::error::{Error, Result};
use crate::eval::top_k;
use crate::par;
use crate::sparse::dot;
use crate::tree::DualCodes;

pub const DEFAULT_CANDIDATES: usize = 20;
pub const DEFAULT_HISTORY_TRUNC: usize = 30;
pub const DEFAULT_RULE_TOP_N: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub user: UserId,
    pub items: Vec<ItemId>,
}

fn user_scores(forward: &Forward, u: UserId) -> Vec<f64> {
    let eu = forward.users.row(u as usize);
    (0..forward.items.rows).map(|i| dot(eu, forward.items.row(i))).collect()
}

/// Top-`limit` unobserved items per user by the pretrained score, descending,
/// ties to the lowest id. Indexed by user.
pub fn build_candidate_sets(forward: &Forward, ds: &InteractionDataset, limit: usize) -> Result<Vec<CandidateSet>> {
    if limit == 0 {
        return Err(Error::invalid("candidate limit must be >= 1"));
    }
    let sets = par::map_range(ds.user_count, |u| {
        let u = u as UserId;
        CandidateSet { user: u, items: top_k(&user_scores(forward, u), ds.user_pos(u), limit) }
    });
    log_short(&sets, limit);
    Ok(sets)
}

/// Like [`build_candidate_sets`], but each user's planted items are placed in
/// the set first (the best-scored ones if there are more than `limit`), and
/// the remaining slots are filled by score. Final order is by score.
pub fn build_probe_candidate_sets(
    forward: &Forward,
    ds: &InteractionDataset,
    limit: usize,
    planted: &PlantedFnSet,
) -> Result<Vec<CandidateSet>> {
    if limit == 0 {
        return Err(Error::invalid("candidate limit must be >= 1"));
    }
    let by_user = planted.by_user();
    let sets = par::map_range(ds.user_count, |u| {
        let u = u as UserId;
        let scores = user_scores(forward, u);
        let mine: Vec<ItemId> = by_user.get(&u).map(|s| s.iter().copied().collect()).unwrap_or_default();
        // Rank planted items among themselves by masking everything else.
        let mut forced: Vec<ItemId> = if mine.is_empty() {
            Vec::new()
        } else {
            let others: Vec<ItemId> = (0..ds.item_count as ItemId).filter(|i| mine.binary_search(i).is_err()).collect();
            top_k(&scores, &others, limit)
        };
        let mut mask: Vec<ItemId> = ds.user_pos(u).iter().copied().chain(forced.iter().copied()).collect();
        mask.sort_unstable();
        forced.extend(top_k(&scores, &mask, limit - forced.len()));
        forced.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
        CandidateSet { user: u, items: forced }
    });
    log_short(&sets, limit);
    Ok(sets)
}

fn log_short(sets: &[CandidateSet], limit: usize) {
    let short: Vec<UserId> = sets.iter().filter(|c| c.items.len() < limit).map(|c| c.user).collect();
    if !short.is_empty() {
        info!("{} users have fewer than {limit} unobserved items (first: user {})", short.len(), short[0]);
    }
}

/// Instructions sent as the system message.
pub const SYSTEM_PROMPT: &str = "\
Role: you are the sample-labelling stage of a recommender system.
Input: one user's past items and a list of candidate items. Every item appears only as two tree paths: `c:` from the co-interaction tree and `s:` from the embedding tree, each written as comma-separated child slots from the root.
Task: give every candidate the label \"positive\" or \"negative\". Judge only by path similarity, i.e. how long a prefix the candidate's paths share with the paths of the user's past items; a longer shared prefix means more similar.
Output: only a JSON array with one element per candidate, each of the form {\"item_id\":<int>, \"label\":\"positive\"|\"negative\"}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FnPrompt {
    pub user: UserId,
    pub system_text: String,
    pub user_payload: String,
    pub candidates: Vec<ItemId>,
}

/// Renders one prompt per user holding all candidates. `history` is in
/// recency order; only its first `trunc` entries are rendered.
pub fn build_prompt(u: UserId, codes: &DualCodes, history: &[ItemId], candidates: &CandidateSet, trunc: usize) -> Result<FnPrompt> {
    if history.is_empty() {
        return Err(Error::invalid(format!("user {u} has no history to prompt with")));
    }
    let n = codes.item_count();
    if let Some(bad) = history.iter().chain(&candidates.items).find(|&&i| i as usize >= n) {
        return Err(Error::invalid(format!("item {bad} has no path codes")));
    }
    let shown = &history[..history.len().min(trunc.max(1))];
    let mut p = String::new();
    let _ = writeln!(p, "user: {u}");
    let _ = writeln!(p, "history ({} items):", shown.len());
    for &i in shown {
        let _ = writeln!(p, "{}", codes.render_line(i));
    }
    let _ = writeln!(p, "candidates ({} items):", candidates.items.len());
    for &i in &candidates.items {
        let _ = writeln!(p, "{}", codes.render_line(i));
    }
    Ok(FnPrompt { user: u, system_text: SYSTEM_PROMPT.to_string(), user_payload: p, candidates: candidates.items.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub item: ItemId,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedVerdicts {
    /// One verdict per candidate, in candidate order.
    pub verdicts: Vec<Verdict>,
    /// Candidates with no usable record, defaulted to negative.
    pub gaps: usize,
    /// Records naming items that were not prompted.
    pub stray: usize,
    /// The response had no well-formed JSON array and records were salvaged.
    pub salvaged: bool,
}

fn record_of(v: &Value) -> Option<(i64, String)> {
    let id = v.get("item_id")?;
    let id = id.as_i64().or_else(|| id.as_str().and_then(|s| s.trim().parse().ok()))?;
    let label = v.get("label")?.as_str()?.trim().to_ascii_lowercase();
    Some((id, label))
}

fn first_json_array(text: &str) -> Option<Vec<Value>> {
    for (start, _) in text.match_indices('[') {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Array(a))) = stream.next() {
            return Some(a);
        }
    }
    None
}

fn salvage_records(text: &str) -> Vec<(i64, String)> {
    let object = Regex::new(r"\{[^{}]*\}").expect("static regex");
    let id_re = Regex::new(r#""?item_id"?\s*:\s*"?(-?\d+)"#).expect("static regex");
    let label_re = Regex::new(r#"(?i)"?label"?\s*:\s*"?(positive|negative)"#).expect("static regex");
    object
        .find_iter(text)
        .filter_map(|m| {
            let s = m.as_str();
            if let Ok(v) = serde_json::from_str::<Value>(s) {
                if let Some(r) = record_of(&v) {
                    return Some(r);
                }
            }
            let id = id_re.captures(s)?.get(1)?.as_str().parse().ok()?;
            let label = label_re.captures(s)?.get(1)?.as_str().to_ascii_lowercase();
            Some((id, label))
        })
        .collect()
}

/// Maps a model response to one verdict per candidate. Reads the first JSON
/// array in `text`; without one, salvages object-shaped records. The first
/// record per item wins. Unknown labels and missing candidates are negative.
pub fn parse_verdicts(text: &str, candidates: &[ItemId]) -> ParsedVerdicts {
    let (records, salvaged) = match first_json_array(text) {
        Some(a) => (a.iter().filter_map(record_of).collect::<Vec<_>>(), false),
        None => (salvage_records(text), true),
    };
    let allowed: BTreeSet<ItemId> = candidates.iter().copied().collect();
    let mut seen: HashMap<ItemId, Label> = HashMap::new();
    let mut stray = 0;
    for (id, label) in records {
        let item = match ItemId::try_from(id) {
            Ok(i) if allowed.contains(&i) => i,
            _ => {
                stray += 1;
                continue;
            }
        };
        let label = match label.as_str() {
            "positive" => Label::Positive,
            "negative" => Label::Negative,
            _ => continue,
        };
        seen.entry(item).or_insert(label);
    }
    let mut gaps = 0;
    let verdicts = candidates
        .iter()
        .map(|&item| {
            let label = seen.get(&item).copied().unwrap_or_else(|| {
                gaps += 1;
                Label::Negative
            });
            Verdict { item, label }
        })
        .collect();
    ParsedVerdicts { verdicts, gaps, stray, salvaged }
}

/// One user's classification request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FnQuery {
    pub user: UserId,
    /// Train items, most recent first.
    pub history: Vec<ItemId>,
    pub candidates: CandidateSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserOutcome {
    pub user: UserId,
    pub verdicts: Vec<Verdict>,
    pub parse_gaps: usize,
    /// Set when the classifier gave up on this user.
    pub failure: Option<String>,
}

impl UserOutcome {
    pub fn positives(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.verdicts.iter().filter(|v| v.label == Label::Positive).map(|v| v.item)
    }
}

pub trait FnClassifier: Sync {
    /// Endpoint and model, or "rule" / "mock".
    fn provenance(&self) -> String;
    /// One outcome per query, in query order.
    fn classify(&self, queries: &[FnQuery], codes: &DualCodes) -> Result<Vec<UserOutcome>>;
}

/// Summed prefix similarity of each candidate to the history in both trees;
/// returns the `top_n` best, ties to the lowest id.
pub fn rule_fni(codes: &DualCodes, history: &[ItemId], candidates: &[ItemId], top_n: usize) -> Result<Vec<ItemId>> {
    if top_n == 0 {
        return Err(Error::invalid("top_n must be >= 1"));
    }
    let mut scored: Vec<(f64, ItemId)> = candidates
        .iter()
        .map(|&i| {
            let (ci, si) = (&codes.collab[i as usize], &codes.semantic[i as usize]);
            let s: f64 = history
                .iter()
                .map(|&j| ci.similarity(&codes.collab[j as usize]) + si.similarity(&codes.semantic[j as usize]))
                .sum();
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.dedup_by_key(|x| x.1);
    Ok(scored.into_iter().take(top_n).map(|(_, i)| i).collect())
}

#[derive(Debug, Clone, Copy)]
pub struct RuleClassifier {
    pub top_n: usize,
}

impl FnClassifier for RuleClassifier {
    fn provenance(&self) -> String {
        "rule".into()
    }

    fn classify(&self, queries: &[FnQuery], codes: &DualCodes) -> Result<Vec<UserOutcome>> {
        par::map_slice(queries, |q| {
            let picked: BTreeSet<ItemId> = rule_fni(codes, &q.history, &q.candidates.items, self.top_n)?.into_iter().collect();
            let verdicts = q
                .candidates
                .items
                .iter()
                .map(|&item| Verdict { item, label: if picked.contains(&item) { Label::Positive } else { Label::Negative } })
                .collect();
            Ok(UserOutcome { user: q.user, verdicts, parse_gaps: 0, failure: None })
        })
        .into_iter()
        .collect()
    }
}

/// Replays fixed response text per user. Users without a script get an
/// empty response.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClassifier {
    pub responses: BTreeMap<UserId, String>,
}

impl FnClassifier for ScriptedClassifier {
    fn provenance(&self) -> String {
        "mock".into()
    }

    fn classify(&self, queries: &[FnQuery], _codes: &DualCodes) -> Result<Vec<UserOutcome>> {
        Ok(queries
            .iter()
            .map(|q| {
                let text = self.responses.get(&q.user).map(String::as_str).unwrap_or("");
                let p = parse_verdicts(text, &q.candidates.items);
                if p.gaps > 0 {
                    info!("user {}: {} candidates missing from scripted response", q.user, p.gaps);
                }
                UserOutcome { user: q.user, verdicts: p.verdicts, parse_gaps: p.gaps, failure: None }
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub concurrency: usize,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub history_trunc: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "llama-3.1-8b-instruct".into(),
            token_env: "DTLNS_LLM_TOKEN".into(),
            concurrency: 8,
            timeout_secs: 120,
            max_retries: 3,
            backoff_ms: 500,
            history_trunc: DEFAULT_HISTORY_TRUNC,
        }
    }
}

pub struct LlmClassifier {
    config: LlmConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl LlmClassifier {
    pub fn new(config: LlmConfig) -> Result<Self> {
        if config.concurrency == 0 {
            return Err(Error::invalid("LLM concurrency must be >= 1"));
        }
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        if token.is_none() {
            warn!("{} is unset; sending requests without authorization", config.token_env);
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Classifier(format!("http client: {e}")))?;
        Ok(LlmClassifier { config, token, client })
    }

    pub fn request_body(&self, prompt: &FnPrompt) -> Value {
        serde_json::json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": prompt.user_payload},
            ],
            "temperature": 0,
        })
    }

    fn send_once(&self, body: &Value) -> std::result::Result<String, Attempt> {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.is_success() {
            Ok(text)
        } else if status.as_u16() == 429 || status.is_server_error() {
            Err(Attempt::Retry(format!("HTTP {status}")))
        } else {
            Err(Attempt::Fatal(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())))
        }
    }

    /// Sends one prompt with bounded retries and exponential backoff.
    pub fn complete(&self, prompt: &FnPrompt) -> Result<String> {
        let body = self.request_body(prompt);
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 0;
        loop {
            match self.send_once(&body) {
                Ok(text) => return Ok(message_content(&text)),
                Err(Attempt::Fatal(msg)) => return Err(Error::Classifier(msg)),
                Err(Attempt::Retry(msg)) if attempt >= self.config.max_retries => {
                    return Err(Error::Classifier(format!("gave up after {} attempts: {msg}", attempt + 1)));
                }
                Err(Attempt::Retry(msg)) => {
                    warn!("user {}: attempt {} failed ({msg}); retrying in {:?}", prompt.user, attempt + 1, delay);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }

    fn classify_one(&self, q: &FnQuery, codes: &DualCodes) -> UserOutcome {
        let negatives = |q: &FnQuery| q.candidates.items.iter().map(|&item| Verdict { item, label: Label::Negative }).collect();
        let prompt = match build_prompt(q.user, codes, &q.history, &q.candidates, self.config.history_trunc) {
            Ok(p) => p,
            Err(e) => return UserOutcome { user: q.user, verdicts: negatives(q), parse_gaps: 0, failure: Some(e.to_string()) },
        };
        match self.complete(&prompt) {
            Ok(text) => {
                let p = parse_verdicts(&text, &prompt.candidates);
                if p.gaps > 0 || p.stray > 0 || p.salvaged {
                    info!("user {}: {} parse gaps, {} stray records, salvaged={}", q.user, p.gaps, p.stray, p.salvaged);
                }
                UserOutcome { user: q.user, verdicts: p.verdicts, parse_gaps: p.gaps, failure: None }
            }
            Err(e) => {
                warn!("user {}: classification failed: {e}", q.user);
                UserOutcome { user: q.user, verdicts: negatives(q), parse_gaps: 0, failure: Some(e.to_string()) }
            }
        }
    }
}

/// The assistant message content of a chat-completion body, or the body
/// itself when it has another shape.
fn message_content(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.pointer("/choices/0/message/content").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| body.to_string())
}

impl FnClassifier for LlmClassifier {
    fn provenance(&self) -> String {
        format!("{} ({})", self.config.endpoint, self.config.model)
    }

    fn classify(&self, queries: &[FnQuery], codes: &DualCodes) -> Result<Vec<UserOutcome>> {
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel();
        let workers = self.config.concurrency.min(queries.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                let tx = tx.clone();
                let next = &next;
                s.spawn(move || loop {
                    let k = next.fetch_add(1, Ordering::Relaxed);
                    if k >= queries.len() {
                        break;
                    }
                    if tx.send((k, self.classify_one(&queries[k], codes))).is_err() {
                        break;
                    }
                });
            }
        });
        drop(tx);
        let mut slots: Vec<Option<UserOutcome>> = vec![None; queries.len()];
        for (k, o) in rx {
            slots[k] = Some(o);
        }
        slots
            .into_iter()
            .map(|o| o.ok_or_else(|| Error::Classifier("worker dropped a query".into())))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FnAccuracy {
    /// Planted pairs that appear in some candidate set.
    pub planted_in_candidates: usize,
    pub recovered: usize,
    pub detections: usize,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    /// Expected recall of picking as many items uniformly from each set.
    pub random_baseline: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FnReport {
    pub provenance: String,
    pub users_prompted: usize,
    pub users_skipped: usize,
    pub users_failed: usize,
    pub candidates_prompted: usize,
    pub detected: usize,
    pub parse_gaps: usize,
    pub augment: AugmentAudit,
    /// Wall-clock of the classifier call; kept out of the JSON so reruns
    /// are byte-identical.
    #[serde(skip_serializing, default)]
    pub classifier_seconds: f64,
    pub detected_by_user: BTreeMap<UserId, Vec<ItemId>>,
    pub accuracy: Option<FnAccuracy>,
}

impl FnReport {
    pub fn detected_pairs(&self) -> Vec<Interaction> {
        self.detected_by_user.iter().flat_map(|(&u, items)| items.iter().map(move |&i| Interaction::new(u, i))).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Builds one query per user with a non-empty history and candidate set.
/// Returns the queries and the number of users skipped.
pub fn build_queries(ds: &InteractionDataset, candidates: &[CandidateSet]) -> (Vec<FnQuery>, usize) {
    let mut skipped = 0;
    let mut out = Vec::new();
    for c in candidates {
        let history: Vec<ItemId> = ds.train_history(c.user).iter().map(|e| e.item).collect();
        if history.is_empty() || c.items.is_empty() {
            skipped += 1;
            continue;
        }
        out.push(FnQuery { user: c.user, history, candidates: c.clone() });
    }
    if skipped > 0 {
        info!("{skipped} users skipped (no history or no candidates)");
    }
    (out, skipped)
}

/// Collects positive verdicts into per-user detected sets and adds them to
/// the train set behind the leakage guard.
pub fn collect_and_augment(ds: &InteractionDataset, outcomes: &[UserOutcome], provenance: &str) -> Result<(InteractionDataset, FnReport)> {
    let mut detected: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
    let mut report = FnReport { provenance: provenance.to_string(), ..Default::default() };
    for o in outcomes {
        report.users_prompted += 1;
        report.candidates_prompted += o.verdicts.len();
        report.parse_gaps += o.parse_gaps;
        if o.failure.is_some() {
            report.users_failed += 1;
        }
        let pos: BTreeSet<ItemId> = o.positives().collect();
        if !pos.is_empty() {
            detected.entry(o.user).or_default().extend(pos);
        }
    }
    report.detected = detected.values().map(BTreeSet::len).sum();
    let (out, audit) = augment_with_positives(ds, &detected)?;
    report.augment = audit;
    report.detected_by_user = detected.into_iter().map(|(u, s)| (u, s.into_iter().collect())).collect();
    Ok((out, report))
}

/// Runs `classifier` over the candidate sets and augments `ds`.
pub fn identify(
    ds: &InteractionDataset,
    codes: &DualCodes,
    candidates: &[CandidateSet],
    classifier: &dyn FnClassifier,
) -> Result<(InteractionDataset, FnReport)> {
    let (queries, skipped) = build_queries(ds, candidates);
    let start = Instant::now();
    let outcomes = classifier.classify(&queries, codes)?;
    let seconds = start.elapsed().as_secs_f64();
    info!("classifier {} took {seconds:.3}s for {} users", classifier.provenance(), queries.len());
    let (out, mut report) = collect_and_augment(ds, &outcomes, &classifier.provenance())?;
    report.users_skipped = skipped;
    report.classifier_seconds = seconds;
    Ok((out, report))
}

/// Micro recall and precision of the detections against planted pairs that
/// reached a candidate set. The random baseline gives each planted item in
/// set `C_u` a `min(|P̂_u|, |C_u|) / |C_u|` chance.
pub fn fn_accuracy(report: &FnReport, planted: &PlantedFnSet, candidates: &[CandidateSet]) -> FnAccuracy {
    let by_user = planted.by_user();
    let mut acc = FnAccuracy::default();
    let mut expected = 0.0;
    for c in candidates {
        let empty = Vec::new();
        let det = report.detected_by_user.get(&c.user).unwrap_or(&empty);
        acc.detections += det.len();
        let Some(mine) = by_user.get(&c.user) else { continue };
        let probed = c.items.iter().filter(|i| mine.contains(i)).count();
        if probed == 0 {
            continue;
        }
        acc.planted_in_candidates += probed;
        acc.recovered += det.iter().filter(|i| mine.contains(i) && c.items.contains(i)).count();
        expected += probed as f64 * det.len().min(c.items.len()) as f64 / c.items.len() as f64;
    }
    if acc.planted_in_candidates == 0 {
        warn!("no planted pair reached a candidate set; identification accuracy undefined");
    } else {
        acc.recall = Some(acc.recovered as f64 / acc.planted_in_candidates as f64);
        acc.random_baseline = Some(expected / acc.planted_in_candidates as f64);
    }
    if acc.detections == 0 {
        warn!("no detections; precision undefined");
    } else {
        let hits: usize = report
            .detected_by_user
            .iter()
            .map(|(u, items)| by_user.get(u).map_or(0, |m| items.iter().filter(|i| m.contains(i)).count()))
            .sum();
        acc.precision = Some(hits as f64 / acc.detections as f64);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Dense;
    use crate::tree::PathCode;

    fn code(s: &[u32]) -> PathCode {
        PathCode::new(s.to_vec()).unwrap()
    }

    fn codes(n: usize) -> DualCodes {
        DualCodes::new((0..n).map(|i| code(&[i as u32 % 2, i as u32])).collect(), (0..n).map(|i| code(&[i as u32 % 3])).collect())
            .unwrap()
    }

    fn toy(users: usize, items: usize, train: &[(u32, u32)], test: &[(u32, u32)]) -> InteractionDataset {
        let t = |v: &[(u32, u32)]| v.iter().map(|&(u, i)| Interaction::new(u, i)).collect();
        InteractionDataset::new(users, items, t(train), vec![], t(test)).unwrap()
    }

    #[test]
    fn candidates_exclude_train_and_descend() {
        let ds = toy(1, 6, &[(0, 1), (0, 4)], &[]);
        let f = Forward {
            users: Dense::from_vec(1, 1, vec![1.0]),
            items: Dense::from_vec(6, 1, vec![0.3, 9.0, 0.5, 0.5, 8.0, -1.0]),
        };
        let c = build_candidate_sets(&f, &ds, 3).unwrap();
        assert_eq!(c[0].items, vec![2, 3, 0]);
        let c = build_candidate_sets(&f, &ds, 20).unwrap();
        assert_eq!(c[0].items.len(), 4);
    }

    #[test]
    fn full_user_gets_empty_set() {
        let ds = toy(1, 2, &[(0, 0), (0, 1)], &[]);
        let f = Forward { users: Dense::zeros(1, 1), items: Dense::zeros(2, 1) };
        assert!(build_candidate_sets(&f, &ds, 20).unwrap()[0].items.is_empty());
    }

    #[test]
    fn probes_forced_into_set() {
        let ds = toy(1, 6, &[(0, 0)], &[]);
        let f = Forward {
            users: Dense::from_vec(1, 1, vec![1.0]),
            items: Dense::from_vec(6, 1, vec![0.0, 5.0, 4.0, 3.0, 2.0, -7.0]),
        };
        let planted = PlantedFnSet { pairs: vec![Interaction::new(0, 5)] };
        let c = build_probe_candidate_sets(&f, &ds, 3, &planted).unwrap();
        assert_eq!(c[0].items, vec![1, 2, 5]);
    }

    #[test]
    fn prompt_lists_history_and_candidates() {
        let dc = codes(10);
        let cand = CandidateSet { user: 4, items: vec![7, 8, 9] };
        let p = build_prompt(4, &dc, &[1, 2], &cand, 30).unwrap();
        let coded = p.user_payload.lines().filter(|l| l.contains("\tc:") && l.contains("\ts:")).count();
        assert_eq!(coded, 5);
        assert_eq!(p, build_prompt(4, &dc, &[1, 2], &cand, 30).unwrap());
        assert!(build_prompt(4, &dc, &[], &cand, 30).is_err());
        assert!(p.system_text.contains(r#"{"item_id":<int>, "label":"positive"|"negative"}"#));
    }

    #[test]
    fn prompt_truncates_history() {
        let dc = codes(200);
        let hist: Vec<ItemId> = (0..100).collect();
        let cand = CandidateSet { user: 0, items: vec![150] };
        let p = build_prompt(0, &dc, &hist, &cand, 30).unwrap();
        assert_eq!(p.user_payload.lines().filter(|l| l.contains("\tc:")).count(), 31);
        assert!(p.user_payload.contains("history (30 items)"));
    }

    #[test]
    fn parse_round_trip_and_gaps() {
        let p = parse_verdicts(r#"[{"item_id":7,"label":"positive"}]"#, &[7, 8]);
        assert_eq!(p.verdicts, vec![Verdict { item: 7, label: Label::Positive }, Verdict { item: 8, label: Label::Negative }]);
        assert_eq!(p.gaps, 1);
        assert!(!p.salvaged);
    }

    #[test]
    fn parse_takes_first_array_in_prose() {
        let text = "Sure [see below]:\n```json\n[{\"item_id\": 3, \"label\": \"negative\"}, {\"item_id\": 4, \"label\": \"positive\"}]\n``` and [1]";
        let p = parse_verdicts(text, &[3, 4]);
        assert_eq!(p.gaps, 0);
        assert_eq!(p.verdicts[1].label, Label::Positive);
    }

    #[test]
    fn parse_salvages_and_ignores_strays() {
        let text = r#"[{"item_id":3,"label":"positive"}, {"item_id":99,"label":"positive"}, {item_id: 4, label: positive"#;
        let p = parse_verdicts(text, &[3, 4, 5]);
        assert!(p.salvaged);
        assert_eq!(p.stray, 1);
        let pos: Vec<_> = p.verdicts.iter().filter(|v| v.label == Label::Positive).map(|v| v.item).collect();
        assert_eq!(pos, vec![3]);
        assert_eq!(p.gaps, 2);
        let garbage = parse_verdicts("no idea", &[1, 2]);
        assert!(garbage.verdicts.iter().all(|v| v.label == Label::Negative));
        assert_eq!(garbage.gaps, 2);
    }

    #[test]
    fn rule_prefers_shared_leaves() {
        let dc = DualCodes::new(
            vec![code(&[0, 0]), code(&[0, 0]), code(&[1, 0]), code(&[0, 1])],
            vec![code(&[2]), code(&[2]), code(&[0]), code(&[2])],
        )
        .unwrap();
        let got = rule_fni(&dc, &[0], &[2, 3, 1], 2).unwrap();
        assert_eq!(got, vec![1, 3]);
        assert!(rule_fni(&dc, &[0], &[1], 0).is_err());
    }

    #[test]
    fn rule_caps_at_top_n() {
        let dc = codes(40);
        let cands: Vec<ItemId> = (10..30).collect();
        assert_eq!(rule_fni(&dc, &[0, 1, 2], &cands, 10).unwrap().len(), 10);
    }

    #[test]
    fn augment_counts_and_guard() {
        let ds = toy(1, 5, &[(0, 0)], &[(0, 3)]);
        let outcomes = vec![UserOutcome {
            user: 0,
            verdicts: vec![
                Verdict { item: 2, label: Label::Positive },
                Verdict { item: 3, label: Label::Positive },
                Verdict { item: 4, label: Label::Negative },
            ],
            parse_gaps: 0,
            failure: None,
        }];
        let (aug, rep) = collect_and_augment(&ds, &outcomes, "mock").unwrap();
        assert_eq!(aug.user_pos(0), &[0, 2]);
        assert_eq!(rep.detected, 2);
        assert_eq!(rep.augment.leakage_filtered, 1);
        let (again, _) = collect_and_augment(&aug, &outcomes, "mock").unwrap();
        assert_eq!(again.train, aug.train);
    }

    #[test]
    fn accuracy_examples() {
        let planted = PlantedFnSet { pairs: vec![Interaction::new(0, 5)] };
        let cands = vec![CandidateSet { user: 0, items: (0..20).collect() }];
        let mut rep = FnReport::default();
        rep.detected_by_user.insert(0, vec![5]);
        let a = fn_accuracy(&rep, &planted, &cands);
        assert_eq!(a.recall, Some(1.0));
        rep.detected_by_user.insert(0, (10..20).collect());
        let a = fn_accuracy(&rep, &planted, &cands);
        assert_eq!(a.precision, Some(0.0));
        assert_eq!(a.random_baseline, Some(0.5));
    }
}
