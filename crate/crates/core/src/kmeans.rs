//! Lloyd's k-means with k-means++ seeding (uniform seeding for very large k).
//!
//! Used for the product-quantizer sub-codebooks and for the coarse quantizer
//! of the inverted file. All distances are squared Euclidean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nalgebra::{DMatrix, DMatrixView};

use crate::error::{invalid, Result};

/// `k` centroids of dimension `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
}

/// Per-iteration mean quantization error recorded by [`train_with_history`].
#[derive(Debug, Clone)]
pub struct Training {
    pub codebook: Codebook,
    /// `errors[i]` is the mean squared error of the assignment step of
    /// iteration `i`, i.e. measured against the centroids entering it.
    pub errors: Vec<f64>,
}

#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f32>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return invalid("codebook needs k >= 1 and dim >= 1");
        }
        if centroids.len() != k * dim {
            return invalid(format!(
                "{} centroid values for a {}x{} codebook",
                centroids.len(),
                k,
                dim
            ));
        }
        Ok(Self { k, dim, centroids })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest centroid and its squared distance. Ties go to the lowest index.
    pub fn assign(&self, v: &[f32]) -> Result<(usize, f32)> {
        if v.len() != self.dim {
            return invalid(format!(
                "vector of dim {} against codebook of dim {}",
                v.len(),
                self.dim
            ));
        }
        Ok(self.assign_unchecked(v))
    }

    #[inline]
    pub(crate) fn assign_unchecked(&self, v: &[f32]) -> (usize, f32) {
        let mut best = (0, f32::INFINITY);
        for (i, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = squared_l2(v, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Nearest centroid of every row of `data`, identical to calling
    /// [`Codebook::assign`] row by row.
    ///
    /// For larger codebooks candidates are screened in blocks with a matrix
    /// product (`|x|^2 - 2 x.c + |c|^2`); every centroid whose screened value
    /// lies within the rounding bound of the best is then measured directly.
    pub fn assign_all(&self, data: &[f32]) -> Vec<(usize, f32)> {
        debug_assert_eq!(data.len() % self.dim, 0);
        if self.k < BATCH_MIN_K {
            return data.chunks_exact(self.dim).map(|x| self.assign_unchecked(x)).collect();
        }
        let dim = self.dim;
        let n = data.len() / dim;
        let mut out = Vec::with_capacity(n);
        if dim <= KDTREE_MAX_DIM {
            // Probe the tree on a prefix; keep it only if it prunes well.
            // Both paths are exact, so the switch never changes results.
            let tree = KdTree::build(self);
            let probe = n.min(KDTREE_PROBE_ROWS);
            let mut visited = 0usize;
            for x in data[..probe * dim].chunks_exact(dim) {
                let (hit, v) = tree.nearest(self, x);
                visited += v;
                out.push(hit);
            }
            if visited <= probe * self.k / KDTREE_MIN_PRUNING {
                out.extend(data[probe * dim..].chunks_exact(dim).map(|x| tree.nearest(self, x).0));
                return out;
            }
        }
        let done = out.len();
        self.assign_screened(&data[done * dim..], &mut out);
        out
    }

    fn assign_screened(&self, data: &[f32], out: &mut Vec<(usize, f32)>) {
        let dim = self.dim;
        let n = data.len() / dim;
        let cnorm: Vec<f32> = self.centroids.chunks_exact(dim).map(dot_self).collect();
        let cmax = cnorm.iter().copied().fold(0f32, f32::max);
        // k x dim, so the product below runs through the packed gemm kernel
        let ct = DMatrixView::from_slice(&self.centroids, dim, self.k).transpose();
        let rows = (BATCH_ENTRIES / self.k).clamp(8, 1024);
        let mut g = DMatrix::<f32>::zeros(self.k, rows);
        for start in (0..n).step_by(rows) {
            let b = rows.min(n - start);
            let block = &data[start * dim..(start + b) * dim];
            let x = DMatrixView::from_slice(block, dim, b);
            g.columns_mut(0, b).gemm(-2.0, &ct, &x, 0.0);
            let g_slice = g.as_mut_slice();
            for (col, xi) in block.chunks_exact(dim).enumerate() {
                // |x|^2 is common to every centroid; it only widens the bound
                let screened = &mut g_slice[col * self.k..(col + 1) * self.k];
                let mut best = f32::INFINITY;
                for (s, &cn) in screened.iter_mut().zip(&cnorm) {
                    *s += cn;
                    best = best.min(*s);
                }
                let tol = 8.0 * (dim as f32 + 4.0) * f32::EPSILON * (dot_self(xi) + cmax);
                let mut pick = (0, f32::INFINITY);
                for (i, &s) in screened.iter().enumerate() {
                    if s <= best + tol {
                        let d = squared_l2(xi, self.centroid(i));
                        if d < pick.1 {
                            pick = (i, d);
                        }
                    }
                }
                out.push(pick);
            }
        }
    }

    /// Squared distances from `v` to every centroid, written into `out`.
    pub fn distances_into(&self, v: &[f32], out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.k);
        for (o, c) in out.iter_mut().zip(self.centroids.chunks_exact(self.dim)) {
            *o = squared_l2(v, c);
        }
    }
}

/// Codebooks at least this large are assigned through blocked matrix products.
const BATCH_MIN_K: usize = 64;
/// Codebooks of at most this dimension are first tried with a k-d tree.
const KDTREE_MAX_DIM: usize = 16;
const KDTREE_LEAF: usize = 16;
const KDTREE_PROBE_ROWS: usize = 256;
/// The tree is kept when it measures at most `k / KDTREE_MIN_PRUNING`
/// centroids per row on the probe.
const KDTREE_MIN_PRUNING: usize = 4;
/// Size of the screening buffer, in distances.
const BATCH_ENTRIES: usize = 1 << 22;
/// Above this many centroids, k-means++ seeding (itself O(n k d)) is replaced
/// by uniform sampling of distinct training points.
pub const KMEANSPP_MAX_K: usize = 4096;

/// Exact nearest-centroid search for small dimensions. Subtrees are only
/// skipped when the splitting plane is strictly farther than the best
/// distance, so ties still resolve to the lowest index.
struct KdTree {
    nodes: Vec<KdNode>,
    order: Vec<u32>,
    /// Centroids copied in `order`, so leaves scan contiguous memory.
    points: Vec<f32>,
}

enum KdNode {
    Leaf { start: u32, end: u32 },
    Split { axis: u16, value: f32, left: u32, right: u32 },
}

impl KdTree {
    fn build(cb: &Codebook) -> Self {
        let mut tree = KdTree {
            nodes: Vec::new(),
            order: (0..cb.k as u32).collect(),
            points: Vec::new(),
        };
        tree.build_node(cb, 0, cb.k);
        tree.points = tree.order.iter().flat_map(|&i| cb.centroid(i as usize)).copied().collect();
        tree
    }

    fn build_node(&mut self, cb: &Codebook, start: usize, end: usize) -> u32 {
        let id = self.nodes.len() as u32;
        if end - start <= KDTREE_LEAF {
            self.nodes.push(KdNode::Leaf { start: start as u32, end: end as u32 });
            return id;
        }
        let slice = &mut self.order[start..end];
        let axis = (0..cb.dim)
            .map(|a| {
                let (lo, hi) = slice.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &i| {
                    let v = cb.centroid(i as usize)[a];
                    (lo.min(v), hi.max(v))
                });
                (a, hi - lo)
            })
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
            .map(|(a, _)| a)
            .unwrap_or(0);
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&i, &j| {
            cb.centroid(i as usize)[axis].total_cmp(&cb.centroid(j as usize)[axis])
        });
        let value = cb.centroid(slice[mid] as usize)[axis];
        // placeholder, patched once the children exist
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build_node(cb, start, start + mid);
        let right = self.build_node(cb, start + mid, end);
        self.nodes[id as usize] = KdNode::Split { axis: axis as u16, value, left, right };
        id
    }

    /// Nearest centroid and the number of centroids measured.
    fn nearest(&self, cb: &Codebook, x: &[f32]) -> ((usize, f32), usize) {
        let mut best = (usize::MAX, f32::INFINITY);
        let mut visited = 0;
        self.search(cb, 0, x, &mut best, &mut visited);
        (best, visited)
    }

    fn search(&self, cb: &Codebook, node: u32, x: &[f32], best: &mut (usize, f32), visited: &mut usize) {
        match self.nodes[node as usize] {
            KdNode::Leaf { start, end } => {
                let (start, end) = (start as usize, end as usize);
                *visited += end - start;
                let dim = x.len();
                let pts = self.points[start * dim..end * dim].chunks_exact(dim);
                for (&i, c) in self.order[start..end].iter().zip(pts) {
                    let i = i as usize;
                    let d = squared_l2(x, c);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                // left holds values <= `value`, right values >= `value`
                let diff = x[axis as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(cb, near, x, best, visited);
                if diff * diff <= best.1 {
                    self.search(cb, far, x, best, visited);
                }
            }
        }
    }
}

#[inline]
fn dot_self(x: &[f32]) -> f32 {
    x.iter().map(|v| v * v).sum()
}

fn check_args(data: &[f32], dim: usize, k: usize, iters: usize) -> Result<usize> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    if dim == 0 || data.len() % dim != 0 {
        return invalid("data length is not a multiple of dim");
    }
    if iters == 0 {
        return invalid("iters must be at least 1");
    }
    let n = data.len() / dim;
    if n < k {
        return invalid(format!("{} training points for {} centroids", n, k));
    }
    Ok(n)
}

/// Trains `k` centroids over row-major `data` with `iters` Lloyd iterations.
pub fn train(data: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Result<Codebook> {
    train_with_history(data, dim, k, iters, seed).map(|t| t.codebook)
}

pub fn train_with_history(
    data: &[f32],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Training> {
    let n = check_args(data, dim, k, iters)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = if k > KMEANSPP_MAX_K {
        uniform_seeds(data, dim, n, k, &mut rng)
    } else {
        kmeanspp(data, dim, n, k, &mut rng)
    };
    let mut codebook = Codebook { k, dim, centroids };
    let errors = lloyd(&mut codebook, data, iters);
    Ok(Training { codebook, errors })
}

/// Continues Lloyd iterations from an existing codebook.
pub fn refine(codebook: &mut Codebook, data: &[f32], iters: usize) -> Result<Vec<f64>> {
    check_args(data, codebook.dim, codebook.k, iters)?;
    Ok(lloyd(codebook, data, iters))
}

fn uniform_seeds(data: &[f32], dim: usize, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let picks = rand::seq::index::sample(rng, n, k);
    let mut centroids = Vec::with_capacity(k * dim);
    for i in picks.iter() {
        centroids.extend_from_slice(&data[i * dim..(i + 1) * dim]);
    }
    centroids
}

/// k-means++ seeding: each new centroid is drawn with probability
/// proportional to its squared distance to the nearest chosen one.
fn kmeanspp(data: &[f32], dim: usize, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut centroids = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);

    let mut nearest: Vec<f32> = data
        .chunks_exact(dim)
        .map(|x| squared_l2(x, &centroids[..dim]))
        .collect();

    for _ in 1..k {
        let total: f64 = nearest.iter().map(|&d| d as f64).sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                target -= d as f64;
                if target < 0.0 {
                    break;
                }
            }
            pick
        } else {
            None
        };
        // All remaining mass is zero (duplicates): fall back to an unused point.
        let pick = pick.unwrap_or_else(|| {
            let unused = chosen.iter().filter(|&&c| !c).count();
            let nth = rng.gen_range(0..unused);
            chosen
                .iter()
                .enumerate()
                .filter(|(_, &c)| !c)
                .nth(nth)
                .map(|(i, _)| i)
                .unwrap()
        });
        chosen[pick] = true;
        let c = &data[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(c);
        for (d, x) in nearest.iter_mut().zip(data.chunks_exact(dim)) {
            let nd = squared_l2(x, c);
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

fn lloyd(cb: &mut Codebook, data: &[f32], iters: usize) -> Vec<f64> {
    let dim = cb.dim;
    let n = data.len() / dim;
    let mut assignment = vec![0usize; n];
    let mut dists = vec![0f32; n];
    let mut sums = vec![0f64; cb.k * dim];
    let mut counts = vec![0usize; cb.k];
    let mut errors = Vec::with_capacity(iters);

    for _ in 0..iters {
        let mut err = 0f64;
        for (i, (a, d)) in cb.assign_all(data).into_iter().enumerate() {
            assignment[i] = a;
            dists[i] = d;
            err += d as f64;
        }
        errors.push(err / n as f64);

        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for (x, &a) in data.chunks_exact(dim).zip(&assignment) {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(x) {
                *s += v as f64;
            }
        }
        for c in 0..cb.k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (dst, &s) in cb.centroids[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *dst = (s * inv) as f32;
            }
        }
        repair_empty(cb, data, &counts, &mut dists);
    }
    errors
}

/// Moves each empty centroid onto the point farthest from its own centroid.
fn repair_empty(cb: &mut Codebook, data: &[f32], counts: &[usize], dists: &mut [f32]) {
    let dim = cb.dim;
    for c in 0..cb.k {
        if counts[c] != 0 {
            continue;
        }
        let (far, &d) = dists
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty training set");
        if d <= 0.0 {
            // every point already sits on a centroid
            break;
        }
        cb.centroids[c * dim..(c + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
        dists[far] = 0.0;
    }
}

/// Mean squared distance of `data` to its nearest centroids.
pub fn mean_error(cb: &Codebook, data: &[f32]) -> f64 {
    let n = data.len() / cb.dim;
    if n == 0 {
        return 0.0;
    }
    cb.assign_all(data).iter().map(|a| a.1 as f64).sum::<f64>()
        / n as f64
}
