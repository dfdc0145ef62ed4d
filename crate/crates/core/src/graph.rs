//! Graph operators outside the autodiff tape: edge lists, k-NN construction,
//! multi-hop reachability supports, symmetric normalization, top-k
//! sparsification, and the noise-injection bookkeeping for the denoising
//! experiments. Everything here is a pure function of its inputs.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---- edge lists ------------------------------------------------------------

/// Undirected weighted edge list with weights in (0, 1]. Self loops are
/// rejected; normalization is the only place self connections appear.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl EdgeList {
    pub fn new(n_nodes: usize) -> Self {
        EdgeList { n_nodes, edges: Vec::new() }
    }

    pub fn add(&mut self, src: usize, dst: usize, weight: f64) -> Result<()> {
        if src >= self.n_nodes || dst >= self.n_nodes {
            return Err(Error::invalid(format!(
                "edge ({src},{dst}) out of range for {} nodes",
                self.n_nodes
            )));
        }
        if src == dst {
            return Err(Error::invalid(format!("self loop at node {src} is not allowed")));
        }
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::invalid(format!(
                "edge ({src},{dst}) weight {weight} outside (0,1]"
            )));
        }
        self.edges.push((src, dst, weight));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Dense symmetric adjacency; both orientations of every edge are set.
    pub fn to_dense(&self) -> Tensor {
        let mut a = Tensor::zeros(self.n_nodes, self.n_nodes);
        for &(s, d, w) in &self.edges {
            a.set(s, d, w);
            a.set(d, s, w);
        }
        a
    }

    /// Directed nonzero off-diagonal entries of a dense matrix.
    pub fn from_dense(t: &Tensor) -> Self {
        let mut el = EdgeList::new(t.rows());
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                let w = t.get(i, j);
                if i != j && w > 0.0 {
                    el.edges.push((i, j, w));
                }
            }
        }
        el
    }

    /// Text format: one `src<TAB>dst<TAB>weight` line per edge, 0-based,
    /// `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut max_node = 0usize;
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let mut field = |name: &str| {
                parts
                    .next()
                    .ok_or_else(|| Error::parse(origin, lineno + 1, format!("missing {name}")))
            };
            let src: usize = field("source")?
                .parse()
                .map_err(|_| Error::parse(origin, lineno + 1, "source is not an index"))?;
            let dst: usize = field("target")?
                .parse()
                .map_err(|_| Error::parse(origin, lineno + 1, "target is not an index"))?;
            let w: f64 = field("weight")?
                .parse()
                .map_err(|_| Error::parse(origin, lineno + 1, "weight is not a number"))?;
            if src == dst {
                return Err(Error::parse(origin, lineno + 1, "self loops are not allowed"));
            }
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::parse(origin, lineno + 1, format!("weight {w} outside (0,1]")));
            }
            max_node = max_node.max(src).max(dst);
            edges.push((src, dst, w));
        }
        let n_nodes = if edges.is_empty() { 0 } else { max_node + 1 };
        Ok(EdgeList { n_nodes, edges })
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &(s, d, w) in &self.edges {
            out.push_str(&format!("{s}\t{d}\t{w}\n"));
        }
        out
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

// ---- symmetric normalization and top-k (pure variants) ---------------------

/// D^{-1/2} (A + I) D^{-1/2} with D_ii = 1 + sum_j A_ij. Entries must be
/// nonnegative; callers clamp first. The differentiable twin lives on the
/// tape as `sym_norm`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    if a.rows() != a.cols() {
        return Err(Error::InvalidDimension {
            op: "normalize_adjacency",
            expected: "square matrix".into(),
            got: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    let n = a.rows();
    let mut u = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = 0.0;
        for (j, &v) in a.row(i).iter().enumerate() {
            if v < 0.0 {
                return Err(Error::invalid(format!(
                    "normalize_adjacency: negative entry {v} at ({i},{j})"
                )));
            }
            s += v;
        }
        u.push(1.0 / (1.0 + s).sqrt());
    }
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let b = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
            if b != 0.0 {
                out.set(i, j, u[i] * b * u[j]);
            }
        }
    }
    Ok(out)
}

/// Replace-min pool used by the top-k scans.
pub(crate) struct TopkPool {
    entries: Vec<(f64, u32)>,
    min_v: f64,
    min_pos: usize,
    min_idx: u32,
}

impl TopkPool {
    pub(crate) fn new() -> Self {
        TopkPool { entries: Vec::new(), min_v: f64::INFINITY, min_pos: 0, min_idx: 0 }
    }

    #[inline]
    pub(crate) fn min_value(&self) -> f64 {
        self.min_v
    }

    pub(crate) fn reset(&mut self) {
        self.entries.clear();
        self.min_v = f64::INFINITY;
        self.min_pos = 0;
        self.min_idx = 0;
    }

    #[inline]
    pub(crate) fn seed(&mut self, v: f64, j: u32) {
        if v < self.min_v || (v == self.min_v && j > self.min_idx) {
            self.min_v = v;
            self.min_pos = self.entries.len();
            self.min_idx = j;
        }
        self.entries.push((v, j));
    }

    /// Strict > keeps the earlier index on ties; the smallest value is
    /// evicted, among equals the one with the higher index.
    #[inline]
    pub(crate) fn offer(&mut self, v: f64, j: u32) {
        if v > self.min_v {
            self.entries[self.min_pos] = (v, j);
            self.min_v = f64::INFINITY;
            for (pos, &(hv, hj)) in self.entries.iter().enumerate() {
                if hv < self.min_v || (hv == self.min_v && hj > self.min_idx) {
                    self.min_v = hv;
                    self.min_pos = pos;
                    self.min_idx = hj;
                }
            }
        }
    }

    pub(crate) fn sorted_indices(&self) -> Vec<u32> {
        let mut sel: Vec<u32> = self.entries.iter().map(|&(_, j)| j).collect();
        sel.sort_unstable();
        sel
    }
}

/// Indices of the k largest entries of `row` (value descending, ties toward
/// the lower index), returned in ascending index order. Blocks whose
/// maximum cannot beat the current pool minimum are skipped wholesale,
/// which keeps the common path a vectorizable max-reduction.
pub(crate) fn select_topk(row: &[f64], k: usize, pool: &mut TopkPool) -> Vec<u32> {
    let n = row.len();
    if k >= n {
        return (0..n as u32).collect();
    }
    pool.reset();
    for (j, &v) in row.iter().enumerate().take(k) {
        pool.seed(v, j as u32);
    }
    const LANES: usize = 8;
    let tail_start = k + (n - k) / LANES * LANES;
    let mut j = k;
    while j + LANES <= n {
        let block = &row[j..j + LANES];
        let mut bmax = block[0];
        for &v in &block[1..] {
            bmax = bmax.max(v);
        }
        if bmax > pool.min_v {
            for (off, &v) in block.iter().enumerate() {
                pool.offer(v, (j + off) as u32);
            }
        }
        j += LANES;
    }
    for (off, &v) in row[tail_start..].iter().enumerate() {
        pool.offer(v, (tail_start + off) as u32);
    }
    pool.sorted_indices()
}

/// Per row: clamp negatives to zero and keep the k largest entries, ties
/// toward the lower column index. Pure twin of the tape op.
pub fn topk_rows(r: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::invalid("topk_rows: k must be >= 1"));
    }
    let mut out = Tensor::zeros(r.rows(), r.cols());
    let mut pool = TopkPool::new();
    for i in 0..r.rows() {
        let row = r.row(i);
        for &j in &select_topk(row, k, &mut pool) {
            out.row_mut(i)[j as usize] = row[j as usize].max(0.0);
        }
    }
    Ok(out)
}

// ---- multi-hop supports -----------------------------------------------------

/// Binary hop-reachability structure of a carried graph: for each hop count
/// `h` in 1..=K the support of the h-th power of the graph's support, plus
/// their union. The complement of the union (off-diagonal) is the
/// "farther than K hops" indicator.
#[derive(Debug)]
pub struct HopSupports {
    n: usize,
    hops: Vec<Vec<Vec<u32>>>,
    reach: Vec<Vec<u32>>,
}

impl HopSupports {
    /// Build from the nonzero pattern of `a`, for hops 1..=k_hops.
    pub fn from_graph(a: &Tensor, k_hops: usize) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::InvalidDimension {
                op: "HopSupports::from_graph",
                expected: "square matrix".into(),
                got: format!("{}x{}", a.rows(), a.cols()),
            });
        }
        let n = a.rows();
        let words = n.div_ceil(64);
        let mut base: Vec<Vec<u64>> = vec![vec![0u64; words]; n];
        for i in 0..n {
            for (j, &v) in a.row(i).iter().enumerate() {
                if v != 0.0 {
                    base[i][j / 64] |= 1u64 << (j % 64);
                }
            }
        }
        Self::from_base(base, n, k_hops)
    }

    /// Build from per-row nonzero column lists instead of a dense matrix.
    pub fn from_lists(n: usize, lists: &[Vec<u32>], k_hops: usize) -> Result<Self> {
        if lists.len() != n {
            return Err(Error::invalid(format!(
                "hop supports: {} rows of structure for {n} nodes",
                lists.len()
            )));
        }
        let words = n.div_ceil(64);
        let mut base: Vec<Vec<u64>> = vec![vec![0u64; words]; n];
        for (i, cols) in lists.iter().enumerate() {
            for &j in cols {
                base[i][j as usize / 64] |= 1u64 << (j % 64);
            }
        }
        Self::from_base(base, n, k_hops)
    }

    fn from_base(base: Vec<Vec<u64>>, n: usize, k_hops: usize) -> Result<Self> {
        if k_hops == 0 {
            return Err(Error::invalid("hop supports need K >= 1"));
        }
        let words = n.div_ceil(64);
        let mut hops = Vec::with_capacity(k_hops);
        let mut reach_bits: Vec<Vec<u64>> = vec![vec![0u64; words]; n];
        let mut current = base.clone();
        for h in 0..k_hops {
            if h > 0 {
                // next power: row i = OR of base rows reachable in h steps
                let mut next: Vec<Vec<u64>> = vec![vec![0u64; words]; n];
                for i in 0..n {
                    for j in bit_indices(&current[i]) {
                        let row = &base[j as usize];
                        for (acc, &w) in next[i].iter_mut().zip(row) {
                            *acc |= w;
                        }
                    }
                }
                current = next;
            }
            let mut lists = Vec::with_capacity(n);
            for i in 0..n {
                for (acc, &w) in reach_bits[i].iter_mut().zip(&current[i]) {
                    *acc |= w;
                }
                lists.push(bit_indices(&current[i]).collect());
            }
            hops.push(lists);
        }
        let reach = reach_bits.iter().map(|bits| bit_indices(bits).collect()).collect();
        Ok(HopSupports { n, hops, reach })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn k_hops(&self) -> usize {
        self.hops.len()
    }

    pub fn hop_row(&self, hop: usize, row: usize) -> &[u32] {
        &self.hops[hop][row]
    }

    pub fn reach_row(&self, row: usize) -> &[u32] {
        &self.reach[row]
    }

    pub fn hop_contains(&self, hop: usize, row: usize, col: usize) -> bool {
        self.hops[hop][row].binary_search(&(col as u32)).is_ok()
    }

    pub fn reach_contains(&self, row: usize, col: usize) -> bool {
        self.reach[row].binary_search(&(col as u32)).is_ok()
    }

    /// Fill one row of the hop-weight mix: far weight everywhere except the
    /// diagonal and reachable entries, plus per-hop weights where supported.
    pub fn fill_mix_row(&self, row: usize, weights: &[f64], out: &mut [f64]) {
        let far = weights[self.k_hops()];
        out.fill(far);
        out[row] = 0.0;
        for &j in &self.reach[row] {
            out[j as usize] = 0.0;
        }
        for (h, lists) in self.hops.iter().enumerate() {
            let w = weights[h];
            for &j in &lists[row] {
                out[j as usize] += w;
            }
        }
    }

    /// Dense 0/1 tensor for hop `h` (1-based power = h+1 in storage order).
    pub fn hop_dense(&self, hop: usize) -> Tensor {
        let mut t = Tensor::zeros(self.n, self.n);
        for i in 0..self.n {
            for &j in &self.hops[hop][i] {
                t.set(i, j as usize, 1.0);
            }
        }
        t
    }

    /// Dense indicator of "not reachable within K hops, off-diagonal".
    pub fn far_dense(&self) -> Tensor {
        let mut t = Tensor::filled(self.n, self.n, 1.0);
        for i in 0..self.n {
            t.set(i, i, 0.0);
            for &j in &self.reach[i] {
                t.set(i, j as usize, 0.0);
            }
        }
        t
    }
}

fn bit_indices(bits: &[u64]) -> impl Iterator<Item = u32> + '_ {
    bits.iter().enumerate().flat_map(|(w, &word)| {
        let mut word = word;
        std::iter::from_fn(move || {
            if word == 0 {
                None
            } else {
                let b = word.trailing_zeros();
                word &= word - 1;
                Some(w as u32 * 64 + b)
            }
        })
    })
}

/// Multi-hop powers of `a` in the default support-clamped form: H^h is the
/// 0/1 support of the h-th power of a's support, and the second output is
/// the off-diagonal unreachable indicator.
pub fn hop_powers(a: &Tensor, k_hops: usize) -> Result<(Vec<Tensor>, Tensor)> {
    let sup = HopSupports::from_graph(a, k_hops)?;
    let hs = (0..k_hops).map(|h| sup.hop_dense(h)).collect();
    Ok((hs, sup.far_dense()))
}

/// Raw weighted matrix powers A^1..A^K with the same unreachable indicator.
pub fn hop_powers_weighted(a: &Tensor, k_hops: usize) -> Result<(Vec<Tensor>, Tensor)> {
    let sup = HopSupports::from_graph(a, k_hops)?;
    let mut hs = Vec::with_capacity(k_hops);
    let mut cur = a.clone();
    for h in 0..k_hops {
        if h > 0 {
            cur = cur.matmul(a)?;
        }
        hs.push(cur.clone());
    }
    Ok((hs, sup.far_dense()))
}

// ---- k nearest neighbors ----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnMetric {
    Cosine,
    Euclidean,
}

/// Binary k-nearest-neighbor graph: weight 1 toward each row's k nearest
/// other rows, symmetrized with max(A, A^T). Ties break toward the lower
/// index.
pub fn knn_graph(x: &Tensor, k: usize, metric: KnnMetric) -> Result<Tensor> {
    let n = x.rows();
    if k >= n {
        return Err(Error::invalid(format!("knn_graph: k = {k} must be < {n} samples")));
    }
    // Pairwise distances from the Gram matrix: one syrk instead of N^2 dots.
    let gram = x.gram();
    let norms: Vec<f64> = (0..n).map(|i| gram.get(i, i)).collect();
    let dist = |i: usize, j: usize| -> f64 {
        match metric {
            KnnMetric::Euclidean => (norms[i] + norms[j] - 2.0 * gram.get(i, j)).max(0.0),
            KnnMetric::Cosine => {
                let denom = (norms[i] * norms[j]).sqrt();
                if denom == 0.0 {
                    if norms[i] == 0.0 && norms[j] == 0.0 {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    1.0 - gram.get(i, j) / denom
                }
            }
        }
    };
    let mut a = Tensor::zeros(n, n);
    let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        for j in 0..n {
            if j != i {
                cand.push((dist(i, j), j as u32));
            }
        }
        let ord = |p: &(f64, u32), q: &(f64, u32)| {
            p.0.partial_cmp(&q.0).unwrap_or(std::cmp::Ordering::Equal).then(p.1.cmp(&q.1))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, ord);
        }
        for &(_, j) in &cand[..k] {
            a.set(i, j as usize, 1.0);
        }
    }
    // symmetrize: max(A, A^T)
    for i in 0..n {
        for j in (i + 1)..n {
            let m = a.get(i, j).max(a.get(j, i));
            a.set(i, j, m);
            a.set(j, i, m);
        }
    }
    Ok(a)
}

// ---- noise injection for the denoising experiment ---------------------------

/// Record of the edges planted on top of a clean graph.
#[derive(Clone, Debug)]
pub struct NoiseRecord {
    pub planted: EdgeList,
    pub seed: u64,
}

/// Add `count` uniformly chosen absent undirected pairs with weights drawn
/// from (0,1]. Returns the noisy graph and the planted set.
pub fn inject_noise_edges(
    graph: &EdgeList,
    count: usize,
    seed: u64,
) -> Result<(EdgeList, NoiseRecord)> {
    let n = graph.n_nodes;
    let mut present: HashSet<(usize, usize)> = HashSet::with_capacity(graph.len());
    for &(s, d, _) in &graph.edges {
        present.insert((s.min(d), s.max(d)));
    }
    let mut absent: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if !present.contains(&(i, j)) {
                absent.push((i, j));
            }
        }
    }
    if count > absent.len() {
        return Err(Error::invalid(format!(
            "inject_noise_edges: requested {count} edges but only {} pairs are absent",
            absent.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // partial Fisher-Yates: the first `count` slots become the sample
    for idx in 0..count {
        let swap = rng.gen_range(idx..absent.len());
        absent.swap(idx, swap);
    }
    let mut noisy = graph.clone();
    let mut planted = EdgeList::new(n);
    for &(i, j) in &absent[..count] {
        let w = 1.0 - rng.gen::<f64>(); // in (0, 1]
        noisy.add(i, j, w)?;
        planted.add(i, j, w)?;
    }
    Ok((noisy, NoiseRecord { planted, seed }))
}

/// How many planted edges survive in a learned graph (nonzero in either
/// orientation), alongside the planted total.
pub fn remaining_noise(learned: &Tensor, record: &NoiseRecord) -> (usize, usize) {
    let added = record.planted.len();
    let remaining = record
        .planted
        .edges
        .iter()
        .filter(|&&(s, d, _)| learned.get(s, d) != 0.0 || learned.get(d, s) != 0.0)
        .count();
    (remaining, added)
}
