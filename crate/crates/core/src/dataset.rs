//! Interaction logs: ingestion, k-core filtering, splitting, synthetic
//! false-negative injection and leakage-guarded positive augmentation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type UserId = u32;
pub type ItemId = u32;

/// One observed user–item pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    /// Seconds; carried for provenance and history ordering only.
    pub timestamp: Option<i64>,
}

impl Interaction {
    pub fn new(user: UserId, item: ItemId) -> Self {
        Interaction { user, item, timestamp: None }
    }

    #[inline]
    pub fn key(&self) -> (UserId, ItemId) {
        (self.user, self.item)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// `user<TAB>item[<TAB>timestamp]`, raw string ids.
    TsvTriples,
}

/// Interactions with dense ids plus the dense → raw id tables.
#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl InteractionLog {
    pub fn user_count(&self) -> usize {
        self.user_ids.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    /// Applies a k-core result, keeping the raw id tables aligned.
    pub fn apply_kcore(&self, core: &KCore) -> InteractionLog {
        InteractionLog {
            interactions: core.edges.clone(),
            user_ids: core.users.iter().map(|&u| self.user_ids[u as usize].clone()).collect(),
            item_ids: core.items.iter().map(|&i| self.item_ids[i as usize].clone()).collect(),
        }
    }

    /// Writes `user_map.tsv` / `item_map.tsv` (`dense<TAB>raw`).
    pub fn write_id_maps(&self, dir: &Path) -> Result<()> {
        for (name, ids) in [("user_map.tsv", &self.user_ids), ("item_map.tsv", &self.item_ids)] {
            let mut w = BufWriter::new(fs::File::create(dir.join(name))?);
            for (dense, raw) in ids.iter().enumerate() {
                writeln!(w, "{dense}\t{raw}")?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Reads a raw interaction log, remapping string ids to dense 0-based ids in
/// order of first appearance. Duplicate pairs collapse to one, keeping the
/// earliest timestamp.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<InteractionLog> {
    let InputFormat::TsvTriples = format;
    let text = fs::read_to_string(path)?;
    let mut users: HashMap<String, UserId> = HashMap::new();
    let mut items: HashMap<String, ItemId> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen: HashMap<(UserId, ItemId), usize> = HashMap::new();
    let mut out: Vec<Interaction> = Vec::new();

    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(parse_err(line_no, format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
        }
        let (u_raw, i_raw) = (fields[0].trim(), fields[1].trim());
        if u_raw.is_empty() || i_raw.is_empty() {
            return Err(parse_err(line_no, "empty user or item id".into()));
        }
        let timestamp = match fields.get(2).map(|s| s.trim()) {
            None | Some("") => None,
            Some(ts) => Some(ts.parse::<i64>().map_err(|e| parse_err(line_no, format!("bad timestamp {ts:?}: {e}")))?),
        };
        let next_user = users.len() as UserId;
        let user = *users.entry(u_raw.to_string()).or_insert_with(|| {
            user_ids.push(u_raw.to_string());
            next_user
        });
        let next_item = items.len() as ItemId;
        let item = *items.entry(i_raw.to_string()).or_insert_with(|| {
            item_ids.push(i_raw.to_string());
            next_item
        });
        match seen.get(&(user, item)) {
            Some(&pos) => {
                let prev = &mut out[pos];
                prev.timestamp = match (prev.timestamp, timestamp) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                };
            }
            None => {
                seen.insert((user, item), out.len());
                out.push(Interaction { user, item, timestamp });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    Ok(InteractionLog { interactions: out, user_ids, item_ids })
}

/// Result of k-core pruning: surviving edges with re-densified ids and the
/// new → old id tables.
#[derive(Debug, Clone, PartialEq)]
pub struct KCore {
    pub edges: Vec<Interaction>,
    pub users: Vec<UserId>,
    pub items: Vec<ItemId>,
}

/// Iteratively removes users and items with degree below `k` until every
/// remaining node has degree ≥ k. The fixed point is the unique maximal
/// k-core of the bipartite graph.
pub fn k_core_filter(edges: &[Interaction], k: usize) -> Result<KCore> {
    if k == 0 {
        return Err(Error::invalid("k-core requires k >= 1"));
    }
    let n_users = edges.iter().map(|e| e.user as usize + 1).max().unwrap_or(0);
    let n_items = edges.iter().map(|e| e.item as usize + 1).max().unwrap_or(0);

    let mut user_edges: Vec<Vec<usize>> = vec![Vec::new(); n_users];
    let mut item_edges: Vec<Vec<usize>> = vec![Vec::new(); n_items];
    for (idx, e) in edges.iter().enumerate() {
        user_edges[e.user as usize].push(idx);
        item_edges[e.item as usize].push(idx);
    }
    let mut user_deg: Vec<usize> = user_edges.iter().map(Vec::len).collect();
    let mut item_deg: Vec<usize> = item_edges.iter().map(Vec::len).collect();
    let mut alive = vec![true; edges.len()];
    let mut user_dead = vec![false; n_users];
    let mut item_dead = vec![false; n_items];

    // (is_user, id)
    let mut queue: VecDeque<(bool, usize)> = VecDeque::new();
    for (u, &d) in user_deg.iter().enumerate() {
        if d < k {
            queue.push_back((true, u));
            user_dead[u] = true;
        }
    }
    for (i, &d) in item_deg.iter().enumerate() {
        if d < k {
            queue.push_back((false, i));
            item_dead[i] = true;
        }
    }
    while let Some((is_user, id)) = queue.pop_front() {
        let incident = if is_user { &user_edges[id] } else { &item_edges[id] };
        for &eidx in incident {
            if !alive[eidx] {
                continue;
            }
            alive[eidx] = false;
            let e = edges[eidx];
            if is_user {
                let i = e.item as usize;
                item_deg[i] -= 1;
                if !item_dead[i] && item_deg[i] < k {
                    item_dead[i] = true;
                    queue.push_back((false, i));
                }
            } else {
                let u = e.user as usize;
                user_deg[u] -= 1;
                if !user_dead[u] && user_deg[u] < k {
                    user_dead[u] = true;
                    queue.push_back((true, u));
                }
            }
        }
    }

    let users: Vec<UserId> = (0..n_users).filter(|&u| !user_dead[u]).map(|u| u as UserId).collect();
    let items: Vec<ItemId> = (0..n_items).filter(|&i| !item_dead[i]).map(|i| i as ItemId).collect();
    if users.is_empty() || items.is_empty() {
        return Err(Error::KCoreEliminated { k });
    }
    let mut user_new = vec![u32::MAX; n_users];
    for (new, &old) in users.iter().enumerate() {
        user_new[old as usize] = new as u32;
    }
    let mut item_new = vec![u32::MAX; n_items];
    for (new, &old) in items.iter().enumerate() {
        item_new[old as usize] = new as u32;
    }
    let kept: Vec<Interaction> = edges
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(e, _)| Interaction { user: user_new[e.user as usize], item: item_new[e.item as usize], timestamp: e.timestamp })
        .collect();
    Ok(KCore { edges: kept, users, items })
}

/// Train / validation / test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 8, validation: 1, test: 1 }
    }
}

impl SplitRatios {
    fn total(&self) -> u32 {
        self.train + self.validation + self.test
    }
}

/// Held-out interactions pulled back into train so every user and item keeps
/// at least one training interaction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRepair {
    pub repaired_users: usize,
    pub repaired_items: usize,
    pub moved_interactions: usize,
}

/// Users, items and the three disjoint interaction sets.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub user_count: usize,
    pub item_count: usize,
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    user_pos: Vec<Vec<ItemId>>,
}

fn sort_canonical(v: &mut [Interaction]) {
    v.sort_unstable_by_key(|e| (e.user, e.item));
}

fn group_by_user(edges: &[Interaction], user_count: usize) -> Vec<Vec<ItemId>> {
    let mut out = vec![Vec::new(); user_count];
    for e in edges {
        out[e.user as usize].push(e.item);
    }
    for v in &mut out {
        v.sort_unstable();
    }
    out
}

impl InteractionDataset {
    /// Validates and indexes the three sets. Sets are stored sorted by
    /// (user, item).
    pub fn new(
        user_count: usize,
        item_count: usize,
        mut train: Vec<Interaction>,
        mut validation: Vec<Interaction>,
        mut test: Vec<Interaction>,
    ) -> Result<Self> {
        let mut seen: HashSet<(UserId, ItemId)> = HashSet::with_capacity(train.len() + validation.len() + test.len());
        for (name, set) in [("train", &train), ("validation", &validation), ("test", &test)] {
            for e in set.iter() {
                if e.user as usize >= user_count || e.item as usize >= item_count {
                    return Err(Error::invalid(format!(
                        "{name} pair ({}, {}) out of range for {user_count} users / {item_count} items",
                        e.user, e.item
                    )));
                }
                if !seen.insert(e.key()) {
                    return Err(Error::invalid(format!("pair ({}, {}) appears twice across splits", e.user, e.item)));
                }
            }
        }
        sort_canonical(&mut train);
        sort_canonical(&mut validation);
        sort_canonical(&mut test);
        let user_pos = group_by_user(&train, user_count);
        Ok(InteractionDataset { user_count, item_count, train, validation, test, user_pos })
    }

    /// Sorted train items of `u` (including any augmented positives).
    #[inline]
    pub fn user_pos(&self, u: UserId) -> &[ItemId] {
        &self.user_pos[u as usize]
    }

    #[inline]
    pub fn is_train_positive(&self, u: UserId, i: ItemId) -> bool {
        self.user_pos[u as usize].binary_search(&i).is_ok()
    }

    /// Train users of each item.
    pub fn item_users(&self) -> Vec<Vec<UserId>> {
        let mut out = vec![Vec::new(); self.item_count];
        for e in &self.train {
            out[e.item as usize].push(e.user);
        }
        out
    }

    pub fn validation_by_user(&self) -> Vec<Vec<ItemId>> {
        group_by_user(&self.validation, self.user_count)
    }

    pub fn test_by_user(&self) -> Vec<Vec<ItemId>> {
        group_by_user(&self.test, self.user_count)
    }

    /// Train interactions of `u`, ordered most recent first (timestamp
    /// descending, missing timestamps last, then ascending item id).
    pub fn train_history(&self, u: UserId) -> Vec<Interaction> {
        let start = self.train.partition_point(|e| e.user < u);
        let end = self.train.partition_point(|e| e.user <= u);
        let mut h = self.train[start..end].to_vec();
        h.sort_by(|a, b| match (a.timestamp, b.timestamp) {
            (Some(x), Some(y)) => y.cmp(&x).then(a.item.cmp(&b.item)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.item.cmp(&b.item),
        });
        h
    }

    pub fn heldout_pairs(&self) -> HashSet<(UserId, ItemId)> {
        self.validation.iter().chain(&self.test).map(Interaction::key).collect()
    }
}

/// Global uniform split at interaction level. Validation and test receive
/// `floor(n * ratio / total)` interactions each; train takes the remainder.
/// Users or items left without a training interaction get their held-out
/// interactions moved back into train.
pub fn split(
    edges: &[Interaction],
    user_count: usize,
    item_count: usize,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(InteractionDataset, SplitRepair)> {
    if ratios.total() == 0 || ratios.train == 0 {
        return Err(Error::invalid("split ratios must have a positive train share"));
    }
    let mut shuffled = edges.to_vec();
    sort_canonical(&mut shuffled);
    shuffled.dedup_by_key(|e| e.key());
    let mut rng = rng::stream(seed, &[0x5B1]);
    shuffled.shuffle(&mut rng);

    let n = shuffled.len();
    let total = ratios.total() as usize;
    let n_val = n * ratios.validation as usize / total;
    let n_test = n * ratios.test as usize / total;
    let mut validation: Vec<Interaction> = shuffled[..n_val].to_vec();
    let mut test: Vec<Interaction> = shuffled[n_val..n_val + n_test].to_vec();
    let mut train: Vec<Interaction> = shuffled[n_val + n_test..].to_vec();

    let mut repair = SplitRepair::default();
    let mut user_train = vec![0usize; user_count];
    let mut item_train = vec![0usize; item_count];
    for e in &train {
        user_train[e.user as usize] += 1;
        item_train[e.item as usize] += 1;
    }
    let orphan_users: BTreeSet<UserId> = validation
        .iter()
        .chain(&test)
        .filter(|e| user_train[e.user as usize] == 0)
        .map(|e| e.user)
        .collect();
    if !orphan_users.is_empty() {
        repair.repaired_users = orphan_users.len();
        for set in [&mut validation, &mut test] {
            let (moved, kept): (Vec<_>, Vec<_>) = set.drain(..).partition(|e| orphan_users.contains(&e.user));
            for e in &moved {
                item_train[e.item as usize] += 1;
            }
            repair.moved_interactions += moved.len();
            train.extend(moved);
            *set = kept;
        }
        warn!("split: {} users had no train interactions; moved their held-out pairs to train", orphan_users.len());
    }
    // Items: one held-out interaction suffices to give the item a train edge.
    let mut orphan_items: BTreeSet<ItemId> = validation
        .iter()
        .chain(&test)
        .filter(|e| item_train[e.item as usize] == 0)
        .map(|e| e.item)
        .collect();
    if !orphan_items.is_empty() {
        repair.repaired_items = orphan_items.len();
        for set in [&mut validation, &mut test] {
            let mut kept = Vec::with_capacity(set.len());
            for e in set.drain(..) {
                if orphan_items.remove(&e.item) {
                    train.push(e);
                    repair.moved_interactions += 1;
                } else {
                    kept.push(e);
                }
            }
            *set = kept;
        }
        warn!("split: {} items had no train interactions; moved one held-out pair each to train", repair.repaired_items);
    }
    let ds = InteractionDataset::new(user_count, item_count, train, validation, test)?;
    Ok((ds, repair))
}

/// How many train positives to hide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Removal {
    Count(usize),
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub removal: Removal,
    pub seed: u64,
}

impl NoiseSpec {
    /// Number of pairs to remove from a train set of size `train_len`.
    pub fn removal_count(&self, train_len: usize) -> Result<usize> {
        let n = match self.removal {
            Removal::Count(c) => c,
            Removal::Fraction(f) => {
                if !(f > 0.0 && f < 1.0) {
                    return Err(Error::invalid(format!("removal fraction must lie in (0, 1), got {f}")));
                }
                (f * train_len as f64).round() as usize
            }
        };
        if n >= train_len {
            return Err(Error::invalid(format!("cannot remove {n} of {train_len} train interactions")));
        }
        Ok(n)
    }
}

/// Train pairs hidden to simulate false negatives.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlantedFnSet {
    pub pairs: Vec<Interaction>,
}

impl PlantedFnSet {
    pub fn by_user(&self) -> BTreeMap<UserId, BTreeSet<ItemId>> {
        let mut out: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
        for e in &self.pairs {
            out.entry(e.user).or_default().insert(e.item);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Removes a uniformly random subset of train positives. Picks that would
/// leave a user or an item without train interactions are skipped and
/// replaced by later draws.
pub fn inject_false_negatives(ds: &InteractionDataset, spec: &NoiseSpec) -> Result<(InteractionDataset, PlantedFnSet)> {
    let target = spec.removal_count(ds.train.len())?;
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut rng = rng::stream(spec.seed, &[0xF17]);
    order.shuffle(&mut rng);

    let mut user_left: Vec<usize> = (0..ds.user_count).map(|u| ds.user_pos(u as UserId).len()).collect();
    let mut item_left = vec![0usize; ds.item_count];
    for e in &ds.train {
        item_left[e.item as usize] += 1;
    }
    let mut removed = vec![false; ds.train.len()];
    let mut picked = 0;
    for idx in order {
        if picked == target {
            break;
        }
        let e = ds.train[idx];
        if user_left[e.user as usize] <= 1 || item_left[e.item as usize] <= 1 {
            continue;
        }
        user_left[e.user as usize] -= 1;
        item_left[e.item as usize] -= 1;
        removed[idx] = true;
        picked += 1;
    }
    if picked < target {
        return Err(Error::invalid(format!(
            "only {picked} of {target} requested removals keep every user and item trainable"
        )));
    }
    let mut planted = Vec::with_capacity(target);
    let mut kept = Vec::with_capacity(ds.train.len() - target);
    for (e, r) in ds.train.iter().zip(removed) {
        if r {
            planted.push(*e);
        } else {
            kept.push(*e);
        }
    }
    let noisy = InteractionDataset::new(ds.user_count, ds.item_count, kept, ds.validation.clone(), ds.test.clone())?;
    Ok((noisy, PlantedFnSet { pairs: planted }))
}

/// Counts from one augmentation pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentAudit {
    pub requested: usize,
    pub added: usize,
    pub leakage_filtered: usize,
    pub already_in_train: usize,
}

/// Adds detected pairs to train, skipping pairs already in train and any pair
/// present in validation or test.
pub fn augment_with_positives(
    ds: &InteractionDataset,
    detected: &BTreeMap<UserId, BTreeSet<ItemId>>,
) -> Result<(InteractionDataset, AugmentAudit)> {
    let heldout = ds.heldout_pairs();
    let mut audit = AugmentAudit::default();
    let mut train = ds.train.clone();
    for (&u, items) in detected {
        if u as usize >= ds.user_count {
            return Err(Error::invalid(format!("detected user {u} out of range")));
        }
        for &i in items {
            if i as usize >= ds.item_count {
                return Err(Error::invalid(format!("detected item {i} out of range")));
            }
            audit.requested += 1;
            if heldout.contains(&(u, i)) {
                audit.leakage_filtered += 1;
            } else if ds.is_train_positive(u, i) {
                audit.already_in_train += 1;
            } else {
                audit.added += 1;
                train.push(Interaction::new(u, i));
            }
        }
    }
    if audit.leakage_filtered > 0 {
        info!("augment: filtered {} detected pairs present in validation/test", audit.leakage_filtered);
    }
    let out = InteractionDataset::new(ds.user_count, ds.item_count, train, ds.validation.clone(), ds.test.clone())?;
    Ok((out, audit))
}

// ---------------------------------------------------------------------------
// Persistence

/// Summary written next to the split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub user_count: usize,
    pub item_count: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub raw_interactions: usize,
    pub kcore: usize,
    pub split_seed: u64,
    pub split_ratios: SplitRatios,
    pub repair: SplitRepair,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub planted: usize,
    #[serde(default)]
    pub fingerprint: String,
}

pub fn write_tsv(path: &Path, edges: &[Interaction]) -> Result<()> {
    let mut sorted = edges.to_vec();
    sort_canonical(&mut sorted);
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in &sorted {
        match e.timestamp {
            Some(ts) => writeln!(w, "{}\t{}\t{}", e.user, e.item, ts)?,
            None => writeln!(w, "{}\t{}", e.user, e.item)?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dense-id TSV written by [`write_tsv`].
pub fn read_tsv(path: &Path) -> Result<Vec<Interaction>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: idx + 1, msg };
        let mut f = line.split('\t');
        let user = f.next().unwrap_or("").parse::<u32>().map_err(|e| err(format!("bad user id: {e}")))?;
        let item = f
            .next()
            .ok_or_else(|| err("missing item column".into()))?
            .parse::<u32>()
            .map_err(|e| err(format!("bad item id: {e}")))?;
        let timestamp = match f.next() {
            Some(ts) if !ts.is_empty() => Some(ts.parse::<i64>().map_err(|e| err(format!("bad timestamp: {e}")))?),
            _ => None,
        };
        out.push(Interaction { user, item, timestamp });
    }
    Ok(out)
}

pub struct SplitPaths {
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
    pub manifest: PathBuf,
    pub planted: PathBuf,
}

impl SplitPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SplitPaths {
            train: dir.join("train.tsv"),
            validation: dir.join("valid.tsv"),
            test: dir.join("test.tsv"),
            manifest: dir.join("manifest.json"),
            planted: dir.join("planted_fn.tsv"),
        }
    }
}

pub fn write_dataset(dir: &Path, ds: &InteractionDataset, manifest: &DatasetManifest, planted: Option<&PlantedFnSet>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = SplitPaths::in_dir(dir);
    write_tsv(&p.train, &ds.train)?;
    write_tsv(&p.validation, &ds.validation)?;
    write_tsv(&p.test, &ds.test)?;
    if let Some(planted) = planted {
        write_tsv(&p.planted, &planted.pairs)?;
    }
    fs::write(&p.manifest, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = SplitPaths::in_dir(dir).manifest;
    let text = fs::read_to_string(&path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads split files, using the manifest for user and item counts.
pub fn read_dataset(dir: &Path) -> Result<(InteractionDataset, DatasetManifest)> {
    let manifest = read_manifest(dir)?;
    let p = SplitPaths::in_dir(dir);
    let ds = InteractionDataset::new(
        manifest.user_count,
        manifest.item_count,
        read_tsv(&p.train)?,
        read_tsv(&p.validation)?,
        read_tsv(&p.test)?,
    )?;
    Ok((ds, manifest))
}

pub fn read_planted(dir: &Path) -> Result<PlantedFnSet> {
    Ok(PlantedFnSet { pairs: read_tsv(&SplitPaths::in_dir(dir).planted)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn edges(pairs: &[(u32, u32)]) -> Vec<Interaction> {
        pairs.iter().map(|&(u, i)| Interaction::new(u, i)).collect()
    }

    #[test]
    fn load_counts_users_items() {
        let f = write_tmp("a\tX\na\tY\nb\tX\n");
        let log = load_interactions(f.path(), InputFormat::TsvTriples).unwrap();
        assert_eq!(log.user_count(), 2);
        assert_eq!(log.item_count(), 2);
        assert_eq!(log.interactions.len(), 3);
    }

    #[test]
    fn load_dedups_keeping_earliest_timestamp() {
        let f = write_tmp("a\tX\t50\nb\tY\na\tX\t20\n");
        let log = load_interactions(f.path(), InputFormat::TsvTriples).unwrap();
        assert_eq!(log.interactions.len(), 2);
        assert_eq!(log.interactions[0].timestamp, Some(20));
    }

    #[test]
    fn load_reports_line_number() {
        let f = write_tmp("a\tX\n\nonlyone\n");
        match load_interactions(f.path(), InputFormat::TsvTriples) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_empty_file_fails() {
        let f = write_tmp("\n\n");
        assert!(matches!(load_interactions(f.path(), InputFormat::TsvTriples), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn kcore_star_graph_is_eliminated() {
        let e = edges(&[(0, 0), (0, 1), (0, 2)]);
        assert!(matches!(k_core_filter(&e, 2), Err(Error::KCoreEliminated { k: 2 })));
    }

    #[test]
    fn kcore_complete_bipartite_unchanged() {
        let mut pairs = Vec::new();
        for u in 0..3 {
            for i in 0..3 {
                pairs.push((u, i));
            }
        }
        let e = edges(&pairs);
        let core = k_core_filter(&e, 3).unwrap();
        assert_eq!(core.edges, e);
        assert_eq!(core.users, vec![0, 1, 2]);
    }

    #[test]
    fn kcore_zero_rejected() {
        assert!(k_core_filter(&edges(&[(0, 0)]), 0).is_err());
    }

    /// Brute force: drop every sub-k node, repeat until nothing changes.
    fn kcore_oracle(e: &[Interaction], k: usize) -> BTreeSet<(u32, u32)> {
        let mut cur: BTreeSet<(u32, u32)> = e.iter().map(|x| x.key()).collect();
        loop {
            let mut ud: HashMap<u32, usize> = HashMap::new();
            let mut id: HashMap<u32, usize> = HashMap::new();
            for &(u, i) in &cur {
                *ud.entry(u).or_default() += 1;
                *id.entry(i).or_default() += 1;
            }
            let next: BTreeSet<(u32, u32)> = cur.iter().copied().filter(|(u, i)| ud[u] >= k && id[i] >= k).collect();
            if next == cur {
                return cur;
            }
            cur = next;
        }
    }

    #[test]
    fn kcore_matches_bruteforce_on_random_graph() {
        let mut rng = rng::seeded(11);
        let mut pairs = Vec::new();
        for u in 0..50 {
            for i in 0..50 {
                if rng.gen::<f64>() < 0.08 {
                    pairs.push((u, i));
                }
            }
        }
        let e = edges(&pairs);
        let core = k_core_filter(&e, 3).unwrap();
        let mapped: BTreeSet<(u32, u32)> =
            core.edges.iter().map(|x| (core.users[x.user as usize], core.items[x.item as usize])).collect();
        let oracle = kcore_oracle(&e, 3);
        assert!(!oracle.is_empty());
        assert_eq!(mapped, oracle);
    }

    #[test]
    fn split_sizes() {
        let e: Vec<_> = (0..10).map(|i| Interaction::new(i % 5, i / 5)).collect();
        let (ds, rep) = split(&e, 5, 2, SplitRatios::default(), 3).unwrap();
        assert_eq!(rep, SplitRepair::default(), "fixture must not trigger repair");
        assert_eq!((ds.train.len(), ds.validation.len(), ds.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_rounds_toward_train() {
        let e: Vec<_> = (0..101).map(|i| Interaction::new(i % 10, i / 10)).collect();
        let (ds, rep) = split(&e, 10, 11, SplitRatios::default(), 9).unwrap();
        assert_eq!(rep, SplitRepair::default(), "fixture must not trigger repair");
        assert_eq!((ds.train.len(), ds.validation.len(), ds.test.len()), (81, 10, 10));
    }

    #[test]
    fn split_is_deterministic() {
        let e: Vec<_> = (0..200).map(|i| Interaction::new(i % 7, i % 13)).collect();
        let a = split(&e, 7, 13, SplitRatios::default(), 42).unwrap();
        let b = split(&e, 7, 13, SplitRatios::default(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_repairs_user_without_train() {
        // User 1 has a single interaction; whichever split it lands in, it must end up in train.
        let mut e: Vec<_> = (0..40).map(|i| Interaction::new(0, i)).collect();
        e.push(Interaction::new(1, 0));
        for seed in 0..20 {
            let (ds, _) = split(&e, 2, 40, SplitRatios::default(), seed).unwrap();
            assert_eq!(ds.user_pos(1), &[0]);
            assert!(ds.train.len() + ds.validation.len() + ds.test.len() == 41);
        }
    }

    fn toy_dataset(n_train: usize) -> InteractionDataset {
        let users = 20u32;
        let train: Vec<_> = (0..n_train as u32).map(|k| Interaction::new(k % users, k / users)).collect();
        let items = (n_train as u32).div_ceil(users) as usize;
        InteractionDataset::new(users as usize, items, train, vec![], vec![]).unwrap()
    }

    #[test]
    fn noise_fraction_and_count() {
        let ds = toy_dataset(1000);
        let (noisy, planted) =
            inject_false_negatives(&ds, &NoiseSpec { removal: Removal::Fraction(0.2), seed: 1 }).unwrap();
        assert_eq!(planted.len(), 200);
        assert_eq!(noisy.train.len(), 800);
        let kept: HashSet<_> = noisy.train.iter().map(Interaction::key).collect();
        assert!(planted.pairs.iter().all(|p| !kept.contains(&p.key())));

        let (_, planted) = inject_false_negatives(&ds, &NoiseSpec { removal: Removal::Count(100), seed: 1 }).unwrap();
        assert_eq!(planted.len(), 100);
    }

    #[test]
    fn noise_rejects_full_removal() {
        let ds = toy_dataset(100);
        assert!(inject_false_negatives(&ds, &NoiseSpec { removal: Removal::Count(100), seed: 0 }).is_err());
        assert!(inject_false_negatives(&ds, &NoiseSpec { removal: Removal::Fraction(1.0), seed: 0 }).is_err());
    }

    #[test]
    fn augment_leakage_and_fresh_pairs() {
        let ds = InteractionDataset::new(
            2,
            6,
            edges(&[(0, 0), (0, 1), (1, 2)]),
            vec![],
            edges(&[(1, 5)]),
        )
        .unwrap();
        let mut det = BTreeMap::new();
        det.insert(1u32, BTreeSet::from([5u32]));
        let (out, audit) = augment_with_positives(&ds, &det).unwrap();
        assert_eq!(out.train.len(), 3);
        assert_eq!(audit.leakage_filtered, 1);

        det.insert(1u32, BTreeSet::from([4u32, 2]));
        let (out, audit) = augment_with_positives(&ds, &det).unwrap();
        assert_eq!(out.train.len(), 4);
        assert_eq!(audit.added, 1);
        assert_eq!(audit.already_in_train, 1);
        assert!(out.is_train_positive(1, 4));
    }

    #[test]
    fn augment_rejects_bad_ids() {
        let ds = InteractionDataset::new(1, 2, edges(&[(0, 0)]), vec![], vec![]).unwrap();
        let det = BTreeMap::from([(0u32, BTreeSet::from([9u32]))]);
        assert!(augment_with_positives(&ds, &det).is_err());
    }

    #[test]
    fn dataset_roundtrips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let e: Vec<_> = (0..60).map(|i| Interaction { user: i % 6, item: i / 6, timestamp: Some(i as i64) }).collect();
        let (ds, repair) = split(&e, 6, 10, SplitRatios::default(), 5).unwrap();
        let m = DatasetManifest {
            user_count: 6,
            item_count: 10,
            train: ds.train.len(),
            validation: ds.validation.len(),
            test: ds.test.len(),
            raw_interactions: 60,
            kcore: 1,
            split_seed: 5,
            split_ratios: SplitRatios::default(),
            repair,
            noise: None,
            planted: 0,
            fingerprint: "abc".into(),
        };
        write_dataset(dir.path(), &ds, &m, None).unwrap();
        let (back, m2) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(m2, m);
    }

    fn arb_edges() -> impl Strategy<Value = Vec<Interaction>> {
        proptest::collection::btree_set((0u32..25, 0u32..25), 1..300)
            .prop_map(|s| s.into_iter().map(|(u, i)| Interaction::new(u, i)).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kcore_idempotent(e in arb_edges(), k in 1usize..4) {
            if let Ok(core) = k_core_filter(&e, k) {
                let again = k_core_filter(&core.edges, k).unwrap();
                prop_assert_eq!(&again.edges, &core.edges);
                let n_users = core.users.len() as u32;
                prop_assert_eq!(again.users, (0..n_users).collect::<Vec<_>>());
            }
        }

        #[test]
        fn split_partitions_input(e in arb_edges(), seed in 0u64..1000) {
            let (ds, _) = split(&e, 25, 25, SplitRatios::default(), seed).unwrap();
            let mut all: Vec<_> = ds.train.iter().chain(&ds.validation).chain(&ds.test).map(Interaction::key).collect();
            all.sort_unstable();
            let mut expect: Vec<_> = e.iter().map(Interaction::key).collect();
            expect.sort_unstable();
            prop_assert_eq!(all, expect);
        }

        #[test]
        fn noise_roundtrip(e in arb_edges(), seed in 0u64..1000) {
            let (ds, _) = split(&e, 25, 25, SplitRatios::default(), seed).unwrap();
            let spec = NoiseSpec { removal: Removal::Fraction(0.1), seed };
            if let Ok((noisy, planted)) = inject_false_negatives(&ds, &spec) {
                let mut merged: Vec<_> = noisy.train.iter().chain(&planted.pairs).map(Interaction::key).collect();
                merged.sort_unstable();
                let before: Vec<_> = ds.train.iter().map(Interaction::key).collect();
                prop_assert_eq!(merged, before);
                prop_assert_eq!(&noisy.test, &ds.test);
            }
        }

        #[test]
        fn augment_never_leaks(e in arb_edges(), det in proptest::collection::vec((0u32..25, 0u32..25), 0..60)) {
            let (ds, _) = split(&e, 25, 25, SplitRatios::default(), 1).unwrap();
            let mut map: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
            for (u, i) in det { map.entry(u).or_default().insert(i); }
            let (out, _) = augment_with_positives(&ds, &map).unwrap();
            let held = out.heldout_pairs();
            prop_assert!(out.train.iter().all(|x| !held.contains(&x.key())));
        }
    }
}
