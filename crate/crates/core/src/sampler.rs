//! Negative samplers: uniform (RNS), score-based (DNS), positive-mixing
//! (MixGCF), the dual-tree multi-view selector, and DNS with dual-tree terms.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::Forward;
use crate::dataset::{InteractionDataset, ItemId, UserId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sparse::dot;
use crate::tree::DualCodes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Rns,
    Dns,
    /// Mixup of positive and candidate, preference-only argmax.
    Mixgcf,
    /// Mixup plus preference and dual-tree similarity fusion.
    DtMhns,
    /// Raw-score DNS with the α-weighted dual-tree terms added.
    DnsPlus,
}

impl SamplerKind {
    pub fn needs_codes(self) -> bool {
        matches!(self, SamplerKind::DtMhns | SamplerKind::DnsPlus)
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Rns => "rns",
            SamplerKind::Dns => "dns",
            SamplerKind::Mixgcf => "mixgcf",
            SamplerKind::DtMhns => "dt_mhns",
            SamplerKind::DnsPlus => "dns_plus",
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rns" => SamplerKind::Rns,
            "dns" => SamplerKind::Dns,
            "mixgcf" => SamplerKind::Mixgcf,
            "dt_mhns" | "dtmhns" | "mhns" => SamplerKind::DtMhns,
            "dns_plus" | "dns+" => SamplerKind::DnsPlus,
            other => return Err(Error::invalid(format!("unknown sampler kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub pool_size: usize,
    pub alpha_c: f64,
    pub alpha_s: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { kind: SamplerKind::DtMhns, pool_size: 10, alpha_c: 0.1, alpha_s: 0.3 }
    }
}

/// `λ e_p + (1 − λ) e_i`.
pub fn mixup_with(e_p: &[f64], e_i: &[f64], lambda: f64) -> Vec<f64> {
    e_p.iter().zip(e_i).map(|(p, i)| lambda * p + (1.0 - lambda) * i).collect()
}

/// Mixup with λ ~ U(0, 1).
pub fn mixup_embedding(e_p: &[f64], e_i: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
    if e_p.len() != e_i.len() {
        return Err(Error::invalid("mixup operands differ in dimension"));
    }
    let lambda: f64 = rng.gen();
    Ok((mixup_with(e_p, e_i, lambda), lambda))
}

/// `(x − min) / (max − min)`; an all-equal input maps to zeros.
pub fn minmax_normalize(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if !(span > 0.0) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|x| (x - min) / span).collect()
}

/// Uniform draw from the items `u` has not interacted with in `ds`.
pub fn sample_rns(u: UserId, ds: &InteractionDataset, rng: &mut Rng) -> Option<ItemId> {
    let pos = ds.user_pos(u);
    let free = ds.item_count - pos.len();
    if free == 0 {
        return None;
    }
    // Rejection is fast while positives are a minority; otherwise index the gaps.
    if pos.len() * 2 <= ds.item_count {
        loop {
            let i = rng.gen_range(0..ds.item_count) as ItemId;
            if pos.binary_search(&i).is_err() {
                return Some(i);
            }
        }
    }
    let mut k = rng.gen_range(0..free) as ItemId;
    // The k-th non-positive item: walk positives in order.
    for &p in pos {
        if p <= k {
            k += 1;
        } else {
            break;
        }
    }
    Some(k)
}

/// Up to `n` distinct unobserved items drawn uniformly without replacement.
pub fn sample_pool(u: UserId, ds: &InteractionDataset, n: usize, rng: &mut Rng) -> Vec<ItemId> {
    let free = ds.item_count - ds.user_pos(u).len();
    if free <= n {
        return (0..ds.item_count as ItemId).filter(|&i| !ds.is_train_positive(u, i)).collect();
    }
    let mut seen = HashSet::with_capacity(n);
    let mut pool = Vec::with_capacity(n);
    while pool.len() < n {
        let i = sample_rns(u, ds, rng).expect("free items exist");
        if seen.insert(i) {
            pool.push(i);
        }
    }
    pool
}

/// Argmax with ties to the lowest item id.
fn argmax(pool: &[ItemId], scores: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..pool.len() {
        if scores[k] > scores[best] || (scores[k] == scores[best] && pool[k] < pool[best]) {
            best = k;
        }
    }
    best
}

/// DNS: the pool item with the largest raw `e_u · e_i`.
pub fn sample_dns(user_vec: &[f64], pool: &[ItemId], items: &crate::sparse::Dense) -> Option<ItemId> {
    if pool.is_empty() {
        return None;
    }
    let scores: Vec<f64> = pool.iter().map(|&i| dot(user_vec, items.row(i as usize))).collect();
    Some(pool[argmax(pool, &scores)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    /// Min-max normalized preference over the pool.
    pub preference: f64,
    pub sim_c: f64,
    pub sim_s: f64,
    pub total: f64,
}

/// The selected negative with its mixed embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct HardNegative {
    pub item: ItemId,
    pub mixed_embedding: Vec<f64>,
    pub lambda: f64,
    pub breakdown: ScoreBreakdown,
}

/// Multi-view scoring of a candidate pool for the pair `(user, pos)`.
///
/// For each candidate the mixed embedding `λ_k e_pos + (1 − λ_k) e_k` is
/// scored against the user, the preference scores are min-max normalized
/// over the pool, and `α_c · sim^c + α_s · sim^s` against the positive is
/// added. `lambdas[k]` is the mixing coefficient of `pool[k]`.
#[allow(clippy::too_many_arguments)]
pub fn multiview_score(
    user_vec: &[f64],
    pos: ItemId,
    pool: &[ItemId],
    items: &crate::sparse::Dense,
    codes: Option<&DualCodes>,
    alpha_c: f64,
    alpha_s: f64,
    lambdas: &[f64],
) -> Result<(Vec<ScoreBreakdown>, HardNegative)> {
    if pool.is_empty() {
        return Err(Error::invalid("negative pool is empty"));
    }
    if lambdas.len() != pool.len() {
        return Err(Error::invalid("one mixing coefficient per pool item is required"));
    }
    if codes.is_none() && (alpha_c != 0.0 || alpha_s != 0.0) {
        return Err(Error::invalid("dual-tree weights need path codes"));
    }
    let e_p = items.row(pos as usize);
    let mixed: Vec<Vec<f64>> =
        pool.iter().zip(lambdas).map(|(&i, &l)| mixup_with(e_p, items.row(i as usize), l)).collect();
    let raw: Vec<f64> = mixed.iter().map(|m| dot(user_vec, m)).collect();
    let breakdown = fuse(&raw, pos, pool, codes, alpha_c, alpha_s);
    let totals: Vec<f64> = breakdown.iter().map(|b| b.total).collect();
    let best = argmax(pool, &totals);
    let hard = HardNegative {
        item: pool[best],
        mixed_embedding: mixed[best].clone(),
        lambda: lambdas[best],
        breakdown: breakdown[best],
    };
    Ok((breakdown, hard))
}

fn fuse(raw: &[f64], pos: ItemId, pool: &[ItemId], codes: Option<&DualCodes>, alpha_c: f64, alpha_s: f64) -> Vec<ScoreBreakdown> {
    let norm = minmax_normalize(raw);
    pool.iter()
        .zip(norm)
        .map(|(&i, preference)| {
            let (sim_c, sim_s) = match codes {
                Some(c) => (
                    c.collab[pos as usize].similarity(&c.collab[i as usize]),
                    c.semantic[pos as usize].similarity(&c.semantic[i as usize]),
                ),
                None => (0.0, 0.0),
            };
            ScoreBreakdown { preference, sim_c, sim_s, total: preference + alpha_c * sim_c + alpha_s * sim_s }
        })
        .collect()
}

/// DNS⁺: normalized raw preference plus dual-tree terms, no mixup.
pub fn dns_plus_select(
    user_vec: &[f64],
    pos: ItemId,
    pool: &[ItemId],
    items: &crate::sparse::Dense,
    codes: &DualCodes,
    alpha_c: f64,
    alpha_s: f64,
) -> Option<(ItemId, ScoreBreakdown)> {
    if pool.is_empty() {
        return None;
    }
    let raw: Vec<f64> = pool.iter().map(|&i| dot(user_vec, items.row(i as usize))).collect();
    let b = fuse(&raw, pos, pool, Some(codes), alpha_c, alpha_s);
    let totals: Vec<f64> = b.iter().map(|x| x.total).collect();
    let best = argmax(pool, &totals);
    Some((pool[best], b[best]))
}

/// A drawn negative: the item plus the mixing coefficient used for its
/// training vector (0 for raw negatives).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeDraw {
    pub item: ItemId,
    pub lambda: f64,
}

/// A configured sampler. `ds` passed to [`Sampler::draw`] defines the positive
/// set excluded from pools (the augmented train set when FNI is on).
#[derive(Debug, Clone, Copy)]
pub struct Sampler<'a> {
    pub config: SamplerConfig,
    pub codes: Option<&'a DualCodes>,
}

impl<'a> Sampler<'a> {
    pub fn new(config: SamplerConfig, codes: Option<&'a DualCodes>) -> Result<Self> {
        if config.kind.needs_codes() && codes.is_none() {
            return Err(Error::invalid(format!("sampler {} needs dual-tree path codes", config.kind.name())));
        }
        if config.kind != SamplerKind::Rns && config.pool_size == 0 {
            return Err(Error::invalid("pool size must be >= 1"));
        }
        Ok(Sampler { config, codes })
    }

    pub fn draw(&self, ds: &InteractionDataset, forward: &Forward, u: UserId, pos: ItemId, rng: &mut Rng) -> Result<Option<NegativeDraw>> {
        let cfg = &self.config;
        if cfg.kind == SamplerKind::Rns {
            return Ok(sample_rns(u, ds, rng).map(|item| NegativeDraw { item, lambda: 0.0 }));
        }
        let pool = sample_pool(u, ds, cfg.pool_size, rng);
        if pool.is_empty() {
            return Ok(None);
        }
        let user_vec = forward.users.row(u as usize);
        let draw = match cfg.kind {
            SamplerKind::Rns => unreachable!(),
            SamplerKind::Dns => sample_dns(user_vec, &pool, &forward.items).map(|item| NegativeDraw { item, lambda: 0.0 }),
            SamplerKind::DnsPlus => {
                let codes = self.codes.expect("checked in new");
                dns_plus_select(user_vec, pos, &pool, &forward.items, codes, cfg.alpha_c, cfg.alpha_s)
                    .map(|(item, _)| NegativeDraw { item, lambda: 0.0 })
            }
            SamplerKind::Mixgcf | SamplerKind::DtMhns => {
                let lambdas: Vec<f64> = pool.iter().map(|_| rng.gen::<f64>()).collect();
                let (codes, ac, as_) = if cfg.kind == SamplerKind::Mixgcf {
                    (None, 0.0, 0.0)
                } else {
                    (self.codes, cfg.alpha_c, cfg.alpha_s)
                };
                let (_, hard) = multiview_score(user_vec, pos, &pool, &forward.items, codes, ac, as_, &lambdas)?;
                Some(NegativeDraw { item: hard.item, lambda: hard.lambda })
            }
        };
        Ok(draw)
    }
}

/// Base samplers that accept the FNI / dual-tree plug-ins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseSampler {
    Rns,
    Dns,
}

/// A base sampler with FNI-augmented positives and/or dual-tree scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComposedSampler {
    pub config: SamplerConfig,
    /// Train on the FNI-augmented positive set.
    pub with_fni: bool,
}

/// Composes DNS with the FNI positive set and/or the dual-tree score terms.
pub fn sampler_integration(
    base: BaseSampler,
    with_fni: bool,
    with_dualtree: bool,
    pool_size: usize,
    alpha_c: f64,
    alpha_s: f64,
) -> Result<ComposedSampler> {
    match base {
        BaseSampler::Dns => {}
        BaseSampler::Rns => {
            return Err(Error::invalid("only DNS composes with FNI/dual-tree plug-ins"));
        }
    }
    let kind = if with_dualtree { SamplerKind::DnsPlus } else { SamplerKind::Dns };
    Ok(ComposedSampler { config: SamplerConfig { kind, pool_size, alpha_c, alpha_s }, with_fni })
}
