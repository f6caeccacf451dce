//! Hierarchical k-ary index trees built by recursive k-means, root-to-leaf
//! path codes, and normalized longest-common-prefix similarity.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::Rng as _;

use crate::dataset::ItemId;
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::sparse::Dense;

pub const KMEANS_MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    /// Child node ids in slot order.
    pub children: Vec<usize>,
    pub centroid: Vec<f64>,
    /// Sorted item ids; non-empty only for leaves.
    pub items: Vec<ItemId>,
    pub depth: usize,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Cluster hierarchy over all items. Node 0 is the root; ids follow a
/// depth-first preorder.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexTree {
    pub nodes: Vec<TreeNode>,
    pub branching: usize,
    pub leaf_size: usize,
    pub item_count: usize,
}

impl IndexTree {
    pub const ROOT: usize = 0;

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    /// Length of the longest path code.
    pub fn depth(&self) -> usize {
        if self.nodes[Self::ROOT].is_leaf() {
            1
        } else {
            self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
        }
    }

    /// Leaf node reached by following `code` from the root.
    pub fn decode(&self, code: &PathCode) -> Option<usize> {
        let root = &self.nodes[Self::ROOT];
        if root.is_leaf() {
            return (code.0 == [0]).then_some(Self::ROOT);
        }
        let mut node = Self::ROOT;
        for &slot in &code.0 {
            node = *self.nodes[node].children.get(slot as usize)?;
        }
        self.nodes[node].is_leaf().then_some(node)
    }

    /// Line-oriented topology dump: a header, then one line per node
    /// `id<TAB>depth<TAB>children<TAB>items<TAB>centroid` (`-` for empty lists).
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(
            w,
            "# k={} m={} depth={} nodes={} items={}",
            self.branching,
            self.leaf_size,
            self.depth(),
            self.nodes.len(),
            self.item_count
        )?;
        for (id, node) in self.nodes.iter().enumerate() {
            writeln!(
                w,
                "{id}\t{}\t{}\t{}\t{}",
                node.depth,
                join_or_dash(&node.children),
                join_or_dash(&node.items),
                join_or_dash(&node.centroid)
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(path, "empty tree file"))?;
        let field = |key: &str| -> Result<usize> {
            header
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(path, format!("header missing {key}")))
        };
        let (branching, leaf_size, item_count) = (field("k")?, field("m")?, field("items")?);
        let mut nodes = Vec::new();
        for (idx, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split('\t').collect();
            let bad = |msg: &str| Error::Parse { path: path.to_path_buf(), line: idx + 2, msg: msg.into() };
            if parts.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            nodes.push(TreeNode {
                depth: parts[1].parse().map_err(|_| bad("bad depth"))?,
                children: parse_list(parts[2]).map_err(|_| bad("bad children"))?,
                items: parse_list(parts[3]).map_err(|_| bad("bad items"))?,
                centroid: parse_list(parts[4]).map_err(|_| bad("bad centroid"))?,
            });
        }
        if nodes.is_empty() {
            return Err(Error::format(path, "tree has no nodes"));
        }
        Ok(IndexTree { nodes, branching, leaf_size, item_count })
    }
}

fn join_or_dash<T: fmt::Display>(xs: &[T]) -> String {
    if xs.is_empty() {
        "-".to_string()
    } else {
        xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, T::Err> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',').map(str::parse).collect()
}

/// Child-slot indices along an item's root-to-leaf walk. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PathCode(Vec<u32>);

impl PathCode {
    pub fn new(slots: Vec<u32>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::invalid("path code must be non-empty"));
        }
        Ok(PathCode(slots))
    }

    pub fn slots(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Normalized LCP similarity with `other`.
    #[inline]
    pub fn similarity(&self, other: &PathCode) -> f64 {
        lcp_ratio(&self.0, &other.0)
    }
}

impl fmt::Display for PathCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, s) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl FromStr for PathCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let slots = s
            .split(',')
            .map(|p| p.trim().parse::<u32>().map_err(|e| Error::invalid(format!("bad path code {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        PathCode::new(slots)
    }
}

#[inline]
fn lcp_ratio(a: &[u32], b: &[u32]) -> f64 {
    let shared = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    shared as f64 / a.len().min(b.len()) as f64
}

/// `max{l : a[..l] = b[..l]} / min(|a|, |b|)`.
pub fn lcp_similarity(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("lcp similarity needs non-empty codes"));
    }
    Ok(lcp_ratio(a, b))
}

struct Subtree {
    centroid: Vec<f64>,
    items: Vec<ItemId>,
    children: Vec<Subtree>,
}

/// Recursively partitions item embeddings with k-means until every node holds
/// at most `leaf_size` items. Children are ordered by descending size, ties by
/// smallest contained item id.
pub fn build_kary_tree(emb: &Dense, branching: usize, leaf_size: usize, seed: u64) -> Result<IndexTree> {
    if branching < 2 {
        return Err(Error::invalid("tree branching factor must be >= 2"));
    }
    if leaf_size < 1 {
        return Err(Error::invalid("leaf size threshold must be >= 1"));
    }
    if emb.rows == 0 {
        return Err(Error::invalid("cannot build a tree over zero items"));
    }
    let items: Vec<ItemId> = (0..emb.rows as ItemId).collect();
    let root = build_node(emb, items, branching, leaf_size, seed);
    let mut nodes = Vec::new();
    flatten(root, 0, &mut nodes);
    Ok(IndexTree { nodes, branching, leaf_size, item_count: emb.rows })
}

fn flatten(sub: Subtree, depth: usize, nodes: &mut Vec<TreeNode>) -> usize {
    let id = nodes.len();
    nodes.push(TreeNode { children: Vec::new(), centroid: sub.centroid, items: sub.items, depth });
    let mut children = Vec::with_capacity(sub.children.len());
    for child in sub.children {
        children.push(flatten(child, depth + 1, nodes));
    }
    nodes[id].children = children;
    id
}

fn centroid_of(emb: &Dense, items: &[ItemId]) -> Vec<f64> {
    let mut c = vec![0.0; emb.cols];
    for &i in items {
        for (acc, x) in c.iter_mut().zip(emb.row(i as usize)) {
            *acc += x;
        }
    }
    let n = items.len().max(1) as f64;
    c.iter_mut().for_each(|x| *x /= n);
    c
}

fn build_node(emb: &Dense, items: Vec<ItemId>, k: usize, m: usize, seed: u64) -> Subtree {
    let centroid = centroid_of(emb, &items);
    if items.len() <= m {
        return Subtree { centroid, items, children: Vec::new() };
    }
    let mut groups = match kmeans(emb, &items, k, seed) {
        Some(g) => g,
        None => {
            warn!("k-means degenerate on {} identical points; splitting round-robin", items.len());
            let mut g = vec![Vec::new(); k.min(items.len())];
            for (pos, &i) in items.iter().enumerate() {
                g[pos % k].push(i);
            }
            g
        }
    };
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    let children = par::map_range(groups.len(), |slot| {
        build_node(emb, groups[slot].clone(), k, m, rng::derive(seed, &[slot as u64]))
    });
    Subtree { centroid, items: Vec::new(), children }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding over the given rows. Returns the
/// non-empty clusters, or `None` when all points coincide.
fn kmeans(emb: &Dense, items: &[ItemId], k: usize, seed: u64) -> Option<Vec<Vec<ItemId>>> {
    let n = items.len();
    let point = |p: usize| emb.row(items[p] as usize);
    let mut rng = rng::stream(seed, &[0x6B6D]);

    let first = rng.gen_range(0..n);
    let mut centers: Vec<Vec<f64>> = vec![point(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|p| sq_dist(point(p), &centers[0])).collect();
    while centers.len() < k.min(n) {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (p, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = p;
                break;
            }
            target -= d;
        }
        if d2[pick] <= 0.0 {
            pick = (0..n).rev().find(|&p| d2[p] > 0.0)?;
        }
        centers.push(point(pick).to_vec());
        for (p, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(p), centers.last().unwrap()));
        }
    }
    if centers.len() < 2 {
        return None;
    }
    let kk = centers.len();

    let nearest = |centers: &[Vec<f64>], p: usize| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (c, ctr) in centers.iter().enumerate() {
            let d = sq_dist(point(p), ctr);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    };

    let mut assign: Vec<usize> = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let fresh: Vec<(usize, f64)> = par::map_range(n, |p| nearest(&centers, p));
        let mut next: Vec<usize> = fresh.iter().map(|&(c, _)| c).collect();
        let mut dist: Vec<f64> = fresh.iter().map(|&(_, d)| d).collect();

        let mut sizes = vec![0usize; kk];
        for &c in &next {
            sizes[c] += 1;
        }
        // Re-seed empty clusters from the farthest point of a cluster that can spare one.
        for c in 0..kk {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&p| sizes[next[p]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            if let Some(p) = far {
                sizes[next[p]] -= 1;
                next[p] = c;
                sizes[c] = 1;
                dist[p] = 0.0;
                centers[c] = point(p).to_vec();
            }
        }
        let stable = next == assign;
        assign = next;
        if stable {
            break;
        }
        let mut sums = vec![vec![0.0; emb.cols]; kk];
        let mut counts = vec![0usize; kk];
        for (p, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(point(p)) {
                *s += x;
            }
        }
        for c in 0..kk {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let mut groups = vec![Vec::new(); kk];
    for (p, &c) in assign.iter().enumerate() {
        groups[c].push(items[p]);
    }
    groups.retain(|g| !g.is_empty());
    if groups.len() < 2 {
        return None;
    }
    Some(groups)
}

/// Code of every item: the child slots along its root-to-leaf walk. A tree
/// whose root is a leaf gives every item the code `(0)`.
pub fn path_codes(tree: &IndexTree) -> Vec<PathCode> {
    let mut codes: Vec<Option<PathCode>> = vec![None; tree.item_count];
    let root = &tree.nodes[IndexTree::ROOT];
    if root.is_leaf() {
        for &i in &root.items {
            codes[i as usize] = Some(PathCode(vec![0]));
        }
    } else {
        let mut stack: Vec<(usize, Vec<u32>)> = vec![(IndexTree::ROOT, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            let n = &tree.nodes[node];
            if n.is_leaf() {
                for &i in &n.items {
                    codes[i as usize] = Some(PathCode(prefix.clone()));
                }
                continue;
            }
            for (slot, &child) in n.children.iter().enumerate() {
                let mut p = prefix.clone();
                p.push(slot as u32);
                stack.push((child, p));
            }
        }
    }
    codes.into_iter().map(|c| c.expect("leaves partition the item set")).collect()
}

/// Collaborative and semantic codes for every item.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCodes {
    pub collab: Vec<PathCode>,
    pub semantic: Vec<PathCode>,
}

impl DualCodes {
    pub fn new(collab: Vec<PathCode>, semantic: Vec<PathCode>) -> Result<Self> {
        if collab.len() != semantic.len() {
            return Err(Error::invalid(format!(
                "collaborative codes cover {} items but semantic codes cover {}",
                collab.len(),
                semantic.len()
            )));
        }
        Ok(DualCodes { collab, semantic })
    }

    pub fn item_count(&self) -> usize {
        self.collab.len()
    }

    /// `item<TAB>c:<code><TAB>s:<code>`, one line per item in id order.
    pub fn render_line(&self, item: ItemId) -> String {
        format!("{item}\tc:{}\ts:{}", self.collab[item as usize], self.semantic[item as usize])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for i in 0..self.item_count() {
            writeln!(w, "{}", self.render_line(i as ItemId))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut collab = Vec::new();
        let mut semantic = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { path: path.to_path_buf(), line: idx + 1, msg };
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(bad("expected item, c:, s: fields".into()));
            }
            let item: usize = parts[0].parse().map_err(|_| bad("bad item id".into()))?;
            if item != collab.len() {
                return Err(bad(format!("expected item {} next, found {item}", collab.len())));
            }
            let c = parts[1].strip_prefix("c:").ok_or_else(|| bad("missing c: prefix".into()))?;
            let s = parts[2].strip_prefix("s:").ok_or_else(|| bad("missing s: prefix".into()))?;
            collab.push(c.parse().map_err(|e: Error| bad(e.to_string()))?);
            semantic.push(s.parse().map_err(|e: Error| bad(e.to_string()))?);
        }
        DualCodes::new(collab, semantic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn code(s: &[u32]) -> PathCode {
        PathCode::new(s.to_vec()).unwrap()
    }

    #[test]
    fn lcp_examples() {
        assert_eq!(lcp_similarity(&[3, 1, 2], &[3, 1, 2]).unwrap(), 1.0);
        assert_eq!(lcp_similarity(&[3, 1, 2], &[3, 1, 4]).unwrap(), 2.0 / 3.0);
        assert_eq!(lcp_similarity(&[1, 2, 3], &[2, 2, 3]).unwrap(), 0.0);
        assert_eq!(lcp_similarity(&[3, 1], &[3, 1, 4]).unwrap(), 1.0);
        assert!(lcp_similarity(&[], &[1]).is_err());
        assert!(PathCode::new(vec![]).is_err());
    }

    fn blobs() -> Dense {
        let mut data = Vec::new();
        for i in 0..8 {
            let base = if i < 4 { 0.0 } else { 100.0 };
            data.extend([base + i as f64 * 0.01, base - i as f64 * 0.02]);
        }
        Dense::from_vec(8, 2, data)
    }

    #[test]
    fn two_blobs_split_at_depth_one() {
        let tree = build_kary_tree(&blobs(), 2, 4, 7).unwrap();
        let leaves: Vec<_> = tree.leaves().map(|l| l.items.clone()).collect();
        assert_eq!(leaves, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
        let codes = path_codes(&tree);
        assert!(codes.iter().all(|c| c.len() == 1));
        assert_eq!(codes[0], code(&[0]));
        assert_eq!(codes[7], code(&[1]));
    }

    #[test]
    fn small_item_set_is_single_leaf() {
        let tree = build_kary_tree(&blobs(), 4, 8, 1).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert!(path_codes(&tree).iter().all(|c| *c == code(&[0])));
        assert_eq!(tree.decode(&code(&[0])), Some(0));
    }

    #[test]
    fn identical_points_split_round_robin() {
        let emb = Dense::from_vec(10, 2, vec![1.0; 20]);
        let tree = build_kary_tree(&emb, 3, 2, 0).unwrap();
        assert!(tree.leaves().all(|l| l.items.len() <= 2));
        let all: BTreeSet<_> = tree.leaves().flat_map(|l| l.items.clone()).collect();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(build_kary_tree(&blobs(), 1, 4, 0).is_err());
        assert!(build_kary_tree(&blobs(), 2, 0, 0).is_err());
    }

    #[test]
    fn codes_decode_to_their_leaf() {
        let mut r = rng::seeded(3);
        let emb = Dense::from_vec(300, 4, (0..1200).map(|_| r.gen::<f64>()).collect());
        let tree = build_kary_tree(&emb, 4, 10, 9).unwrap();
        for (item, c) in path_codes(&tree).iter().enumerate() {
            let leaf = tree.decode(c).unwrap();
            assert!(tree.nodes[leaf].items.contains(&(item as u32)));
        }
    }

    #[test]
    fn tree_and_codes_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng::seeded(4);
        let emb = Dense::from_vec(120, 3, (0..360).map(|_| r.gen::<f64>()).collect());
        let tree = build_kary_tree(&emb, 3, 7, 1).unwrap();
        tree.write(&dir.path().join("t.txt")).unwrap();
        assert_eq!(IndexTree::read(&dir.path().join("t.txt")).unwrap(), tree);

        let codes = DualCodes::new(path_codes(&tree), path_codes(&tree)).unwrap();
        codes.write(&dir.path().join("c.tsv")).unwrap();
        assert_eq!(DualCodes::read(&dir.path().join("c.tsv")).unwrap(), codes);
        let first = std::fs::read_to_string(dir.path().join("c.tsv")).unwrap();
        assert!(first.lines().next().unwrap().starts_with("0\tc:"));
    }

    fn brute_lcp(a: &[u32], b: &[u32]) -> f64 {
        let mut l = 0;
        for len in 1..=a.len().min(b.len()) {
            if a[..len] == b[..len] {
                l = len;
            }
        }
        l as f64 / a.len().min(b.len()) as f64
    }

    proptest! {
        #[test]
        fn lcp_properties(a in proptest::collection::vec(0u32..4, 1..7), b in proptest::collection::vec(0u32..4, 1..7)) {
            let s = lcp_similarity(&a, &b).unwrap();
            prop_assert_eq!(s, lcp_similarity(&b, &a).unwrap());
            prop_assert_eq!(s, brute_lcp(&a, &b));
            prop_assert_eq!(lcp_similarity(&a, &a).unwrap(), 1.0);
            let min = a.len().min(b.len()) as f64;
            prop_assert!((s * min - (s * min).round()).abs() < 1e-12);
        }

        #[test]
        fn leaves_partition_and_respect_bound(n in 1usize..150, k in 2usize..5, m in 1usize..20, seed in 0u64..50) {
            let mut r = rng::seeded(seed);
            let emb = Dense::from_vec(n, 3, (0..n * 3).map(|_| r.gen::<f64>()).collect());
            let tree = build_kary_tree(&emb, k, m, seed).unwrap();
            let mut all: Vec<u32> = tree.leaves().flat_map(|l| l.items.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n as u32).collect::<Vec<_>>());
            prop_assert!(tree.leaves().all(|l| l.items.len() <= m && !l.items.is_empty()));
            prop_assert!(tree.nodes.iter().filter(|x| !x.is_leaf()).all(|x| (2..=k).contains(&x.children.len())));
            // Same leaf means similarity 1; different root subtrees means 0.
            let codes = path_codes(&tree);
            for leaf in tree.leaves() {
                for w in leaf.items.windows(2) {
                    prop_assert_eq!(codes[w[0] as usize].similarity(&codes[w[1] as usize]), 1.0);
                }
            }
        }
    }
}
