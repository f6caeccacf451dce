//! Item–item Jaccard similarity, the normalized graph Laplacian, and spectral
//! embedding from its smallest non-trivial eigenvectors.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::sparse::{axpy, dot, norm, Csr, Dense};

/// Eigenvalues below this are treated as the trivial (null-space) directions.
pub const TRIVIAL_EIGENVALUE: f64 = 1e-8;
/// Below this many non-isolated items `SolverKind::Auto` uses the dense solver.
pub const DENSE_SOLVER_LIMIT: usize = 2000;

/// Sparse symmetric item–item weights with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemSimMatrix {
    pub weights: Csr,
}

impl ItemSimMatrix {
    pub fn from_csr(weights: Csr) -> Result<Self> {
        for r in 0..weights.n {
            for (c, v) in weights.row(r) {
                if c == r && v != 0.0 {
                    return Err(Error::invalid(format!("similarity diagonal entry {r} is nonzero")));
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!("similarity weight {v} at ({r}, {c}) outside [0, 1]")));
                }
            }
        }
        if !weights.is_symmetric(0.0) {
            return Err(Error::invalid("similarity matrix is not symmetric"));
        }
        Ok(ItemSimMatrix { weights })
    }

    pub fn item_count(&self) -> usize {
        self.weights.n
    }

    /// Writes `i j w` lines for every stored entry.
    pub fn write_coo(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for r in 0..self.weights.n {
            for (c, v) in self.weights.row(r) {
                writeln!(w, "{r} {c} {v}")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_coo(path: &Path, item_count: usize) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut trip = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse { path: path.to_path_buf(), line: idx + 1, msg: "expected `i j w`".into() };
            if parts.len() != 3 {
                return Err(bad());
            }
            let i: u32 = parts[0].parse().map_err(|_| bad())?;
            let j: u32 = parts[1].parse().map_err(|_| bad())?;
            let v: f64 = parts[2].parse().map_err(|_| bad())?;
            if i as usize >= item_count || j as usize >= item_count {
                return Err(bad());
            }
            trip.push((i, j, v));
        }
        Self::from_csr(Csr::from_triplets(item_count, trip))
    }
}

/// Jaccard coefficient between the train user sets of every item pair that
/// shares at least one user.
pub fn jaccard_similarity(ds: &InteractionDataset) -> Result<ItemSimMatrix> {
    if ds.train.is_empty() {
        return Err(Error::invalid("jaccard similarity needs a non-empty train set"));
    }
    let item_users = ds.item_users();
    if let Some(i) = item_users.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("item {i} has no train users")));
    }
    let rows: Vec<Vec<(u32, f64)>> = par::map_range(ds.item_count, |i| {
        let mut co: Vec<u32> = Vec::new();
        for &u in &item_users[i] {
            co.extend(ds.user_pos(u).iter().copied().filter(|&j| j as usize != i));
        }
        co.sort_unstable();
        let ni = item_users[i].len();
        let mut row = Vec::new();
        let mut k = 0;
        while k < co.len() {
            let j = co[k];
            let mut run = 0;
            while k < co.len() && co[k] == j {
                run += 1;
                k += 1;
            }
            let union = ni + item_users[j as usize].len() - run;
            row.push((j, run as f64 / union as f64));
        }
        row
    });
    let mut indptr = Vec::with_capacity(ds.item_count + 1);
    indptr.push(0);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for row in rows {
        for (j, w) in row {
            indices.push(j);
            values.push(w);
        }
        indptr.push(indices.len());
    }
    Ok(ItemSimMatrix { weights: Csr { n: ds.item_count, indptr, indices, values } })
}

/// `L = I − D^{-1/2} W D^{-1/2}` with bookkeeping for isolated items, whose
/// rows and columns are left entirely zero.
#[derive(Debug, Clone)]
pub struct Laplacian {
    pub matrix: Csr,
    pub degrees: Vec<f64>,
    pub isolated: Vec<bool>,
    /// Connected component label per item; isolated items get their own label.
    pub component: Vec<usize>,
    pub component_count: usize,
}

impl Laplacian {
    pub fn n(&self) -> usize {
        self.matrix.n
    }

    pub fn isolated_count(&self) -> usize {
        self.isolated.iter().filter(|&&x| x).count()
    }

    /// Components that contain at least one edge.
    pub fn nontrivial_components(&self) -> usize {
        let mut seen = vec![false; self.component_count];
        for (i, &c) in self.component.iter().enumerate() {
            if !self.isolated[i] {
                seen[c] = true;
            }
        }
        seen.iter().filter(|&&x| x).count()
    }

    /// Unit-norm `D^{1/2} 1` restricted to each non-trivial component.
    pub fn null_vectors(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for comp in 0..self.component_count {
            let mut z = vec![0.0; self.n()];
            for i in 0..self.n() {
                if self.component[i] == comp && !self.isolated[i] {
                    z[i] = self.degrees[i].sqrt();
                }
            }
            let nz = norm(&z);
            if nz > 0.0 {
                z.iter_mut().for_each(|x| *x /= nz);
                out.push(z);
            }
        }
        out
    }
}

pub fn normalized_laplacian(w: &ItemSimMatrix) -> Laplacian {
    let n = w.item_count();
    let degrees = w.weights.row_sums();
    let isolated: Vec<bool> = degrees.iter().map(|&d| d <= 0.0).collect();
    let isolated_count = isolated.iter().filter(|&&x| x).count();
    if isolated_count > 0 {
        warn!("laplacian: {isolated_count} isolated items get zero rows");
    }

    let mut indptr = Vec::with_capacity(n + 1);
    indptr.push(0);
    let mut indices = Vec::with_capacity(w.weights.nnz() + n);
    let mut values = Vec::with_capacity(w.weights.nnz() + n);
    for r in 0..n {
        let mut diag_done = isolated[r];
        for (c, v) in w.weights.row(r) {
            if !diag_done && c > r {
                indices.push(r as u32);
                values.push(1.0);
                diag_done = true;
            }
            indices.push(c as u32);
            values.push(-v / (degrees[r] * degrees[c]).sqrt());
        }
        if !diag_done {
            indices.push(r as u32);
            values.push(1.0);
        }
        indptr.push(indices.len());
    }
    let matrix = Csr { n, indptr, indices, values };

    // Connected components by union-find over stored edges.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for r in 0..n {
        for (c, _) in w.weights.row(r) {
            let (a, b) = (find(&mut parent, r), find(&mut parent, c));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut component = vec![0; n];
    let mut count = 0;
    for i in 0..n {
        let root = find(&mut parent, i);
        if label[root] == usize::MAX {
            label[root] = count;
            count += 1;
        }
        component[i] = label[root];
    }
    Laplacian { matrix, degrees, isolated, component, component_count: count }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    /// Dense below [`DENSE_SOLVER_LIMIT`] non-isolated items, iterative above.
    Auto,
    Iterative,
    Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct SpectralOptions {
    pub dim: usize,
    /// Residual bound `‖L v − λ v‖₂` for every returned pair.
    pub tol: f64,
    /// Restart cycles allowed for the iterative solver.
    pub max_iter: usize,
    pub seed: u64,
    pub solver: SolverKind,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions { dim: 32, tol: 1e-9, max_iter: 300, seed: 0, solver: SolverKind::Auto }
    }
}

/// Item embedding from the Laplacian's low spectrum.
#[derive(Debug, Clone)]
pub struct SpectralEmbedding {
    /// item_count × dim.
    pub matrix: Dense,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Rayleigh quotients of the discarded null-space directions.
    pub trivial_eigenvalues: Vec<f64>,
    pub skipped_trivial: usize,
    pub residuals: Vec<f64>,
    pub solver: SolverKind,
}

/// Computes the `dim` smallest eigenpairs of `L` after discarding one
/// zero-eigenvalue direction per connected component. Isolated items receive
/// zero rows.
pub fn spectral_embed(lap: &Laplacian, opts: &SpectralOptions) -> Result<SpectralEmbedding> {
    if opts.dim == 0 {
        return Err(Error::invalid("spectral embedding dimension must be >= 1"));
    }
    let active: Vec<usize> = (0..lap.n()).filter(|&i| !lap.isolated[i]).collect();
    let comps = lap.nontrivial_components();
    if opts.dim + comps > active.len() {
        return Err(Error::invalid(format!(
            "requested {} eigenvectors plus {comps} trivial directions exceeds {} connected items",
            opts.dim,
            active.len()
        )));
    }
    let solver = match opts.solver {
        SolverKind::Auto if active.len() < DENSE_SOLVER_LIMIT => SolverKind::Dense,
        SolverKind::Auto => SolverKind::Iterative,
        s => s,
    };
    let null = lap.null_vectors();
    let (eigenvalues, mut vectors) = match solver {
        SolverKind::Dense => dense_low_spectrum(lap, &active, comps, opts.dim)?,
        _ => lanczos_low_spectrum(lap, &null, opts)?,
    };

    let mut matrix = Dense::zeros(lap.n(), opts.dim);
    let mut residuals = Vec::with_capacity(opts.dim);
    for (col, v) in vectors.iter_mut().enumerate() {
        let nv = norm(v);
        v.iter_mut().for_each(|x| *x /= nv);
        // Deterministic sign: largest-magnitude entry positive.
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let lv = lap.matrix.matvec(v);
        let r: f64 = lv.iter().zip(v.iter()).map(|(a, b)| (a - eigenvalues[col] * b).powi(2)).sum::<f64>().sqrt();
        residuals.push(r);
        for (row, x) in v.iter().enumerate() {
            matrix.data[row * opts.dim + col] = *x;
        }
    }
    let trivial_eigenvalues = null.iter().map(|z| dot(z, &lap.matrix.matvec(z))).collect();
    Ok(SpectralEmbedding { matrix, eigenvalues, trivial_eigenvalues, skipped_trivial: comps, residuals, solver })
}

fn dense_low_spectrum(lap: &Laplacian, active: &[usize], comps: usize, dim: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let m = active.len();
    let mut pos = vec![usize::MAX; lap.n()];
    for (k, &i) in active.iter().enumerate() {
        pos[i] = k;
    }
    let mut a = DMatrix::<f64>::zeros(m, m);
    for (k, &i) in active.iter().enumerate() {
        for (c, v) in lap.matrix.row(i) {
            a[(k, pos[c])] = v;
        }
    }
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    for &k in &order[..comps] {
        if eig.eigenvalues[k] >= TRIVIAL_EIGENVALUE {
            debug!("dense solver: trivial eigenvalue {} above threshold", eig.eigenvalues[k]);
        }
    }
    let mut values = Vec::with_capacity(dim);
    let mut vectors = Vec::with_capacity(dim);
    for &k in &order[comps..comps + dim] {
        values.push(eig.eigenvalues[k]);
        let mut v = vec![0.0; lap.n()];
        for (row, &i) in active.iter().enumerate() {
            v[i] = eig.eigenvectors[(row, k)];
        }
        vectors.push(v);
    }
    Ok((values, vectors))
}

/// Orthogonalizes `x` against every vector of `null` and `basis`. Both sets
/// are swept in each of the two Gram–Schmidt passes; sweeping them separately
/// lets the null component creep back in once Krylov vectors nearly cancel.
fn orthogonalize(x: &mut [f64], null: &[Vec<f64>], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in null.iter().chain(basis) {
            let c = dot(b, x);
            axpy(-c, b, x);
        }
    }
}

/// Thick-restart Lanczos with full reorthogonalization on `M = 2I − L`,
/// deflated against the known null vectors. The largest eigenvalues of `M`
/// on the deflated space are the smallest non-trivial eigenvalues of `L`.
fn lanczos_low_spectrum(lap: &Laplacian, null: &[Vec<f64>], opts: &SpectralOptions) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = lap.n();
    let active = lap.isolated.iter().filter(|&&x| !x).count();
    let space = active - null.len();
    let want = opts.dim;
    let max_basis = space.min((2 * want + 40).max(want + 60));
    let keep = (want + 10).min(max_basis.saturating_sub(1)).max(want);

    let apply = |x: &[f64]| -> Vec<f64> {
        let lx = lap.matrix.matvec(x);
        lx.iter().zip(x).map(|(l, v)| 2.0 * v - l).collect()
    };
    let mut rng = rng::stream(opts.seed, &[0x1A2C]);
    let random_vector = |rng: &mut rng::Rng| -> Vec<f64> {
        (0..n).map(|i| if lap.isolated[i] { 0.0 } else { rng.gen::<f64>() - 0.5 }).collect()
    };

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_basis);
    let mut images: Vec<Vec<f64>> = Vec::with_capacity(max_basis);
    let mut pending = random_vector(&mut rng);
    let mut worst = f64::INFINITY;

    for cycle in 0..opts.max_iter.max(1) {
        let mut exhausted = false;
        while basis.len() < max_basis {
            let mut accepted = false;
            for _attempt in 0..3 {
                let scale = norm(&pending).max(1.0);
                orthogonalize(&mut pending, null, &basis);
                let nv = norm(&pending);
                if nv > 1e-10 * scale {
                    pending.iter_mut().for_each(|x| *x /= nv);
                    accepted = true;
                    break;
                }
                pending = random_vector(&mut rng);
            }
            if !accepted {
                exhausted = true;
                break;
            }
            let v = std::mem::take(&mut pending);
            let av = apply(&v);
            pending = av.clone();
            basis.push(v);
            images.push(av);
        }
        if basis.len() >= space {
            exhausted = true;
        }

        // Rayleigh–Ritz on the current basis.
        let m = basis.len();
        let rows: Vec<Vec<f64>> = par::map_range(m, |a| (0..m).map(|b| dot(&basis[a], &images[b])).collect());
        let mut t = DMatrix::<f64>::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                t[(a, b)] = 0.5 * (rows[a][b] + rows[b][a]);
            }
        }
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
        let take = keep.min(m);
        let mut ritz: Vec<Vec<f64>> = Vec::with_capacity(take);
        let mut ritz_images: Vec<Vec<f64>> = Vec::with_capacity(take);
        let mut thetas = Vec::with_capacity(take);
        let mut residual_norms = Vec::with_capacity(take);
        let mut residual_vecs = Vec::with_capacity(take);
        for &k in &order[..take] {
            let s = eig.eigenvectors.column(k);
            let mut y = vec![0.0; n];
            let mut ay = vec![0.0; n];
            for j in 0..m {
                axpy(s[j], &basis[j], &mut y);
                axpy(s[j], &images[j], &mut ay);
            }
            let theta = eig.eigenvalues[k];
            let r: Vec<f64> = ay.iter().zip(&y).map(|(a, b)| a - theta * b).collect();
            residual_norms.push(norm(&r));
            residual_vecs.push(r);
            thetas.push(theta);
            ritz.push(y);
            ritz_images.push(ay);
        }
        worst = residual_norms[..want].iter().copied().fold(0.0, f64::max);
        debug!("lanczos cycle {cycle}: basis {m}, worst residual {worst:e}");
        if worst <= opts.tol || exhausted {
            if worst > opts.tol {
                return Err(Error::NoConvergence { iterations: cycle + 1, worst_residual: worst });
            }
            let values = thetas[..want].iter().map(|th| 2.0 - th).collect::<Vec<_>>();
            // Ascending in L is descending in M, already the order here.
            return Ok((values, ritz.into_iter().take(want).collect()));
        }
        let restart_from = residual_norms[..want].iter().position(|&r| r > opts.tol).unwrap_or(0);
        pending = std::mem::take(&mut residual_vecs[restart_from]);
        basis = ritz;
        images = ritz_images;
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, worst_residual: worst })
}

const EMBEDDING_MAGIC: &[u8; 8] = b"DTLNSEMB";

/// Little-endian binary: magic, rows (u64), cols (u64), row-major f64 values.
pub fn write_embedding(path: &Path, m: &Dense) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&(m.rows as u64).to_le_bytes())?;
    w.write_all(&(m.cols as u64).to_le_bytes())?;
    for x in &m.data {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding(path: &Path) -> Result<Dense> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 24 || &buf[..8] != EMBEDDING_MAGIC {
        return Err(Error::format(path, "missing embedding header"));
    }
    let rows = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    let body = &buf[24..];
    if body.len() != rows * cols * 8 {
        return Err(Error::format(path, format!("expected {} values, found {} bytes", rows * cols, body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Dense::from_vec(rows, cols, data))
}
