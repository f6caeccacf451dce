//! MF and LightGCN scoring models, the BPR objective with analytic
//! gradients, and Adam updates.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionDataset, ItemId, UserId};
use crate::error::{Error, Result};
use crate::rng;
use crate::sparse::{axpy, dot, Csr, Dense};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backbone {
    Mf,
    LightGcn { layers: usize },
}

impl Backbone {
    pub fn layers(&self) -> usize {
        match self {
            Backbone::Mf => 0,
            Backbone::LightGcn { layers } => *layers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation Recall@20 improvement before stopping; 0 disables.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 2048,
            l2: 1e-4,
            epochs: 1000,
            seed: 2024,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.l2 < 0.0 {
            return Err(Error::invalid("train config needs lr > 0, batch_size > 0, l2 >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub user_m: Vec<f64>,
    pub user_v: Vec<f64>,
    pub item_m: Vec<f64>,
    pub item_v: Vec<f64>,
    pub step: u64,
}

impl AdamMoments {
    fn zeros(users: usize, items: usize) -> Self {
        AdamMoments {
            user_m: vec![0.0; users],
            user_v: vec![0.0; users],
            item_m: vec![0.0; items],
            item_v: vec![0.0; items],
            step: 0,
        }
    }
}

/// Layer-0 embedding tables plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub user_emb: Dense,
    pub item_emb: Dense,
    pub backbone: Backbone,
    pub adam: AdamMoments,
}

impl ModelState {
    pub fn dim(&self) -> usize {
        self.user_emb.cols
    }

    pub fn user_count(&self) -> usize {
        self.user_emb.rows
    }

    pub fn item_count(&self) -> usize {
        self.item_emb.rows
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.is_finite() && self.item_emb.is_finite()
    }
}

/// Xavier-uniform tables: entries drawn from ±sqrt(6 / (rows + dim)).
pub fn init_params(user_count: usize, item_count: usize, dim: usize, backbone: Backbone, seed: u64) -> Result<ModelState> {
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be >= 1"));
    }
    let table = |rows: usize, label: u64| {
        let bound = (6.0 / (rows + dim) as f64).sqrt();
        let mut r = rng::stream(seed, &[0xE1, label]);
        Dense::from_vec(rows, dim, (0..rows * dim).map(|_| r.gen_range(-bound..bound)).collect())
    };
    Ok(ModelState {
        user_emb: table(user_count, 0),
        item_emb: table(item_count, 1),
        backbone,
        adam: AdamMoments::zeros(user_count * dim, item_count * dim),
    })
}

/// Symmetric-normalized user–item adjacency over `users + items` nodes. Nodes
/// without any edge carry a unit self-loop so propagation leaves them fixed.
#[derive(Debug, Clone)]
pub struct Graph {
    pub users: usize,
    pub items: usize,
    pub adj: Csr,
}

impl Graph {
    pub fn from_dataset(ds: &InteractionDataset) -> Self {
        let (nu, ni) = (ds.user_count, ds.item_count);
        let mut user_deg = vec![0usize; nu];
        let mut item_deg = vec![0usize; ni];
        for e in &ds.train {
            user_deg[e.user as usize] += 1;
            item_deg[e.item as usize] += 1;
        }
        let mut trip = Vec::with_capacity(ds.train.len() * 2);
        for e in &ds.train {
            let w = 1.0 / ((user_deg[e.user as usize] * item_deg[e.item as usize]) as f64).sqrt();
            let (un, inode) = (e.user, nu as u32 + e.item);
            trip.push((un, inode, w));
            trip.push((inode, un, w));
        }
        for (u, &d) in user_deg.iter().enumerate() {
            if d == 0 {
                trip.push((u as u32, u as u32, 1.0));
            }
        }
        for (i, &d) in item_deg.iter().enumerate() {
            if d == 0 {
                let node = (nu + i) as u32;
                trip.push((node, node, 1.0));
            }
        }
        Graph { users: nu, items: ni, adj: Csr::from_triplets(nu + ni, trip) }
    }

    /// Every layer `A^l X` for `l = 0..=layers`.
    pub fn layers(&self, x: &Dense, layers: usize) -> Vec<Dense> {
        let mut out = Vec::with_capacity(layers + 1);
        out.push(x.clone());
        for l in 0..layers {
            let next = self.adj.matmul_dense(&out[l]);
            out.push(next);
        }
        out
    }

    /// `(1 / (L+1)) Σ_l A^l X`. Self-adjoint, so it also back-propagates.
    pub fn smooth(&self, x: &Dense, layers: usize) -> Dense {
        if layers == 0 {
            return x.clone();
        }
        let mut acc = x.clone();
        let mut cur = x.clone();
        for _ in 0..layers {
            cur = self.adj.matmul_dense(&cur);
            for (a, c) in acc.data.iter_mut().zip(&cur.data) {
                *a += c;
            }
        }
        acc.scale(1.0 / (layers + 1) as f64);
        acc
    }
}

fn stack(users: &Dense, items: &Dense) -> Dense {
    let mut data = Vec::with_capacity(users.data.len() + items.data.len());
    data.extend_from_slice(&users.data);
    data.extend_from_slice(&items.data);
    Dense::from_vec(users.rows + items.rows, users.cols, data)
}

fn unstack(all: Dense, users: usize) -> (Dense, Dense) {
    let cols = all.cols;
    let mut data = all.data;
    let items = data.split_off(users * cols);
    let n_items = items.len() / cols.max(1);
    (Dense::from_vec(users, cols, data), Dense::from_vec(n_items, cols, items))
}

/// Final user and item representations used for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub users: Dense,
    pub items: Dense,
}

impl Forward {
    #[inline]
    pub fn score(&self, u: UserId, i: ItemId) -> f64 {
        dot(self.users.row(u as usize), self.items.row(i as usize))
    }
}

/// LightGCN: mean of layers 0..=L of the normalized adjacency applied to the
/// stacked tables. MF returns the tables unchanged.
pub fn propagate(state: &ModelState, graph: &Graph) -> Forward {
    let layers = state.backbone.layers();
    if layers == 0 {
        return Forward { users: state.user_emb.clone(), items: state.item_emb.clone() };
    }
    let out = graph.smooth(&stack(&state.user_emb, &state.item_emb), layers);
    let (users, items) = unstack(out, graph.users);
    Forward { users, items }
}

/// Inner product of propagated user and item vectors.
pub fn score(forward: &Forward, u: UserId, i: ItemId) -> f64 {
    forward.score(u, i)
}

/// One BPR triple. The negative vector is `λ e_pos + (1 − λ) e_neg`; λ = 0
/// uses the raw negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BprSample {
    pub user: UserId,
    pub pos: ItemId,
    pub neg: ItemId,
    pub lambda: f64,
}

impl BprSample {
    pub fn raw(user: UserId, pos: ItemId, neg: ItemId) -> Self {
        BprSample { user, pos, neg, lambda: 0.0 }
    }
}

/// `−ln σ(x)`, stable for large |x|.
#[inline]
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss value and gradients with respect to the layer-0 tables.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub ranking_loss: f64,
    pub user_grad: Dense,
    pub item_grad: Dense,
}

/// Batch-mean BPR loss plus `l2 · ‖θ_batch‖²` (batch-mean) on the layer-0
/// rows touched by the batch. `forward` must be `propagate(state, graph)`.
pub fn bpr_loss_and_grad(state: &ModelState, graph: &Graph, forward: &Forward, batch: &[BprSample], l2: f64) -> LossGrad {
    let d = state.dim();
    let b = batch.len() as f64;
    let mut g_users = Dense::zeros(state.user_count(), d);
    let mut g_items = Dense::zeros(state.item_count(), d);
    let mut ranking = 0.0;
    let mut neg_vec = vec![0.0; d];
    for s in batch {
        let eu = forward.users.row(s.user as usize);
        let ep = forward.items.row(s.pos as usize);
        let en = forward.items.row(s.neg as usize);
        for k in 0..d {
            neg_vec[k] = s.lambda * ep[k] + (1.0 - s.lambda) * en[k];
        }
        let delta = dot(eu, ep) - dot(eu, &neg_vec);
        ranking += neg_log_sigmoid(delta);
        // dℓ/dΔ for the batch mean.
        let g = -sigmoid(-delta) / b;
        let w = 1.0 - s.lambda;
        let diff: Vec<f64> = ep.iter().zip(&neg_vec).map(|(p, n)| p - n).collect();
        axpy(g, &diff, g_users.row_mut(s.user as usize));
        let eu = eu.to_vec();
        axpy(g * w, &eu, g_items.row_mut(s.pos as usize));
        axpy(-g * w, &eu, g_items.row_mut(s.neg as usize));
    }
    ranking /= b;

    let layers = state.backbone.layers();
    let (mut user_grad, mut item_grad) = if layers == 0 {
        (g_users, g_items)
    } else {
        unstack(graph.smooth(&stack(&g_users, &g_items), layers), graph.users)
    };

    let mut reg = 0.0;
    for s in batch {
        let x = state.user_emb.row(s.user as usize);
        reg += dot(x, x);
        axpy(2.0 * l2 / b, x, user_grad.row_mut(s.user as usize));
        for row in [s.pos as usize, s.neg as usize] {
            let x = state.item_emb.row(row);
            reg += dot(x, x);
            axpy(2.0 * l2 / b, x, item_grad.row_mut(row));
        }
    }
    let loss = ranking + l2 * reg / b;
    LossGrad { loss, ranking_loss: ranking, user_grad, item_grad }
}

fn adam_update(params: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], cfg: &TrainConfig, step: u64) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for k in 0..params.len() {
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad[k];
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
        let mhat = m[k] / bc1;
        let vhat = v[k] / bc2;
        params[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Computes the BPR loss on `batch` and applies one Adam step. Returns the
/// loss before the update.
pub fn bpr_step(state: &mut ModelState, graph: &Graph, forward: &Forward, batch: &[BprSample], cfg: &TrainConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("BPR batch must be non-empty"));
    }
    let lg = bpr_loss_and_grad(state, graph, forward, batch, cfg.l2);
    if !lg.loss.is_finite() {
        return Err(Error::NonFinite {
            step: state.adam.step,
            detail: format!("loss {} (ranking {}) on batch of {}", lg.loss, lg.ranking_loss, batch.len()),
        });
    }
    state.adam.step += 1;
    let step = state.adam.step;
    adam_update(&mut state.user_emb.data, &lg.user_grad.data, &mut state.adam.user_m, &mut state.adam.user_v, cfg, step);
    adam_update(&mut state.item_emb.data, &lg.item_grad.data, &mut state.adam.item_m, &mut state.adam.item_v, cfg, step);
    Ok(lg.loss)
}

/// Trains the configured backbone with uniform negatives (early stopping on
/// validation Recall@20) and returns the best model together with its
/// propagated item embeddings.
pub fn pretrain_semantic(ds: &InteractionDataset, backbone: Backbone, dim: usize, cfg: &TrainConfig) -> Result<(ModelState, Dense)> {
    use crate::sampler::{Sampler, SamplerConfig, SamplerKind};
    let init = init_params(ds.user_count, ds.item_count, dim, backbone, cfg.seed)?;
    let sampler = Sampler::new(SamplerConfig { kind: SamplerKind::Rns, ..Default::default() }, None)?;
    let outcome = crate::train::fit(ds, init, &sampler, cfg, None, |_| {})?;
    let forward = propagate(&outcome.best, &Graph::from_dataset(ds));
    Ok((outcome.best, forward.items))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DTLNSCKP";

/// Header (magic, backbone, layers, users, items, dim, step) followed by the
/// little-endian f64 user and item tables. Optimizer moments are not stored.
pub fn write_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let kind: u32 = match state.backbone {
        Backbone::Mf => 0,
        Backbone::LightGcn { .. } => 1,
    };
    w.write_all(&kind.to_le_bytes())?;
    w.write_all(&(state.backbone.layers() as u32).to_le_bytes())?;
    for v in [state.user_count() as u64, state.item_count() as u64, state.dim() as u64, state.adam.step] {
        w.write_all(&v.to_le_bytes())?;
    }
    for x in state.user_emb.data.iter().chain(&state.item_emb.data) {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelState> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    const HEADER: usize = 8 + 4 + 4 + 8 * 4;
    if buf.len() < HEADER || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap()) as usize;
    let backbone = match u32_at(8) {
        0 => Backbone::Mf,
        1 => Backbone::LightGcn { layers: u32_at(12) as usize },
        k => return Err(Error::format(path, format!("unknown backbone kind {k}"))),
    };
    let (users, items, dim, step) = (u64_at(16), u64_at(24), u64_at(32), u64_at(40));
    let body = &buf[HEADER..];
    if body.len() != (users + items) * dim * 8 {
        return Err(Error::format(path, "table size does not match header"));
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let (u, i) = vals.split_at(users * dim);
    let mut adam = AdamMoments::zeros(users * dim, items * dim);
    adam.step = step as u64;
    Ok(ModelState {
        user_emb: Dense::from_vec(users, dim, u.to_vec()),
        item_emb: Dense::from_vec(items, dim, i.to_vec()),
        backbone,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;

    fn toy_ds(users: u32, items: u32, seed: u64) -> InteractionDataset {
        let mut r = rng::seeded(seed);
        let mut train = Vec::new();
        for u in 0..users {
            for i in 0..items {
                if r.gen::<f64>() < 0.35 || i == u % items {
                    train.push(Interaction::new(u, i));
                }
            }
        }
        InteractionDataset::new(users as usize, items as usize, train, vec![], vec![]).unwrap()
    }

    #[test]
    fn xavier_init_bounds_and_determinism() {
        let a = init_params(100, 50, 64, Backbone::Mf, 1).unwrap();
        let b = init_params(100, 50, 64, Backbone::Mf, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.user_emb.cols, 64);
        let bound = (6.0f64 / 164.0).sqrt();
        assert!(a.user_emb.data.iter().all(|x| x.abs() <= bound));
        let n = a.user_emb.data.len() as f64;
        let mean = a.user_emb.data.iter().sum::<f64>() / n;
        let sigma = bound / 3f64.sqrt();
        assert!(mean.abs() < 3.0 * sigma / n.sqrt());
        assert!(init_params(1, 1, 0, Backbone::Mf, 0).is_err());
    }

    #[test]
    fn zero_layers_is_identity() {
        let ds = toy_ds(4, 5, 1);
        let g = Graph::from_dataset(&ds);
        let st = init_params(4, 5, 3, Backbone::LightGcn { layers: 0 }, 2).unwrap();
        let f = propagate(&st, &g);
        assert_eq!(f.users, st.user_emb);
        assert_eq!(f.items, st.item_emb);
    }

    #[test]
    fn single_edge_layer_one_swaps_embeddings() {
        let ds = InteractionDataset::new(1, 1, vec![Interaction::new(0, 0)], vec![], vec![]).unwrap();
        let g = Graph::from_dataset(&ds);
        let st = init_params(1, 1, 4, Backbone::LightGcn { layers: 1 }, 3).unwrap();
        let layers = g.layers(&stack(&st.user_emb, &st.item_emb), 1);
        assert_eq!(layers[1].row(0), st.item_emb.row(0));
        assert_eq!(layers[1].row(1), st.user_emb.row(0));
    }

    #[test]
    fn propagation_is_linear() {
        let ds = toy_ds(6, 7, 4);
        let g = Graph::from_dataset(&ds);
        let st = init_params(6, 7, 5, Backbone::LightGcn { layers: 3 }, 5).unwrap();
        let mut scaled = st.clone();
        scaled.user_emb.scale(2.5);
        scaled.item_emb.scale(2.5);
        let (a, b) = (propagate(&st, &g), propagate(&scaled, &g));
        for (x, y) in a.users.data.iter().chain(&a.items.data).zip(b.users.data.iter().chain(&b.items.data)) {
            assert!((2.5 * x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn edgeless_graph_leaves_embeddings_fixed() {
        let ds = InteractionDataset::new(3, 4, vec![], vec![], vec![]).unwrap();
        let g = Graph::from_dataset(&ds);
        let st = init_params(3, 4, 6, Backbone::LightGcn { layers: 3 }, 6).unwrap();
        let f = propagate(&st, &g);
        assert_eq!(f.users, st.user_emb);
        assert_eq!(f.items, st.item_emb);
    }

    #[test]
    fn score_matches_naive_loop() {
        let st = init_params(2, 2, 64, Backbone::Mf, 9).unwrap();
        let f = Forward { users: st.user_emb.clone(), items: st.item_emb.clone() };
        let mut naive = 0.0;
        for k in 0..64 {
            naive += st.user_emb.row(1)[k] * st.item_emb.row(0)[k];
        }
        assert!((score(&f, 1, 0) - naive).abs() < 1e-12);

        let f = Forward {
            users: Dense::from_vec(1, 2, vec![1.0, 0.0]),
            items: Dense::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]),
        };
        assert_eq!(score(&f, 0, 0), 0.0);
        assert_eq!(score(&f, 0, 1), 1.0);
    }

    #[test]
    fn bpr_loss_values() {
        assert!((neg_log_sigmoid(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(neg_log_sigmoid(20.0) < 1e-8);
        let mut prev = f64::INFINITY;
        for k in -50..50 {
            let v = neg_log_sigmoid(k as f64 * 0.7);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn bpr_equal_scores_give_ln2() {
        let ds = toy_ds(2, 3, 0);
        let g = Graph::from_dataset(&ds);
        let mut st = init_params(2, 3, 4, Backbone::Mf, 0).unwrap();
        let row = st.item_emb.row(0).to_vec();
        st.item_emb.row_mut(1).copy_from_slice(&row);
        let f = propagate(&st, &g);
        let lg = bpr_loss_and_grad(&st, &g, &f, &[BprSample::raw(0, 0, 1)], 0.0);
        assert!((lg.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let ds = toy_ds(2, 3, 0);
        let g = Graph::from_dataset(&ds);
        let mut st = init_params(2, 3, 4, Backbone::Mf, 0).unwrap();
        let f = propagate(&st, &g);
        assert!(bpr_step(&mut st, &g, &f, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn adam_step_reduces_loss_on_fixed_batch() {
        let ds = toy_ds(5, 6, 2);
        let g = Graph::from_dataset(&ds);
        let mut st = init_params(5, 6, 8, Backbone::LightGcn { layers: 3 }, 1).unwrap();
        let batch = vec![BprSample::raw(0, 0, 5), BprSample::raw(1, 1, 4), BprSample { user: 2, pos: 2, neg: 3, lambda: 0.3 }];
        let cfg = TrainConfig { lr: 0.01, ..Default::default() };
        let f = propagate(&st, &g);
        let first = bpr_step(&mut st, &g, &f, &batch, &cfg).unwrap();
        let mut last = first;
        for _ in 0..50 {
            let f = propagate(&st, &g);
            last = bpr_step(&mut st, &g, &f, &batch, &cfg).unwrap();
        }
        assert!(last < first);
        assert_eq!(st.adam.step, 51);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut st = init_params(3, 4, 5, Backbone::LightGcn { layers: 3 }, 7).unwrap();
        st.adam.step = 12;
        write_checkpoint(&p, &st).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back.user_emb, st.user_emb);
        assert_eq!(back.item_emb, st.item_emb);
        assert_eq!(back.backbone, st.backbone);
        assert_eq!(back.adam.step, 12);
        std::fs::write(&p, b"garbage").unwrap();
        assert!(read_checkpoint(&p).is_err());
    }
}
