//! SIFT-like synthetic corpora for runs without the real datasets.
//!
//! Points are drawn from a Gaussian mixture in a low-dimensional latent
//! space and lifted by a fixed random linear map whose column scales decay,
//! so the ambient vectors are correlated across dimensions with a skewed
//! spectrum, roughly like local image descriptors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use quickadc::{Dataset, GroundTruth};
use quickadc::kmeans::squared_l2;

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub dim: usize,
    pub latent: usize,
    pub clusters: usize,
    pub n_learn: usize,
    pub n_base: usize,
    pub n_query: usize,
    /// Within-cluster spread relative to the spread of cluster centers.
    pub spread: f32,
    /// Apply the SIFT descriptor post-processing: absolute values, unit
    /// normalization, clipping at 0.2, renormalization, scaling to 0..=255
    /// and truncation to integers.
    pub sift_normalize: bool,
    pub seed: u64,
}

impl SynthSpec {
    /// The stand-in corpus used when no SIFT data is available: 64-d
    /// Gaussian mixture whose exhaustive Recall@100 for 64-bit codes falls in
    /// the same range as SIFT1M's (roughly 0.8 to 0.99 from 16x4 to 4x16).
    /// The learning set is large enough to train 16-bit sub-quantizers.
    pub fn proxy(n_base: usize, n_query: usize, seed: u64) -> Self {
        Self {
            dim: 64,
            latent: 32,
            clusters: 50,
            n_learn: 70_000,
            n_base,
            n_query,
            spread: 1.0,
            sift_normalize: false,
            seed,
        }
    }

    pub fn sift_like(n_learn: usize, n_base: usize, n_query: usize, seed: u64) -> Self {
        Self {
            dim: 128,
            latent: 32,
            clusters: 100,
            n_learn,
            n_base,
            n_query,
            spread: 0.5,
            sift_normalize: true,
            seed,
        }
    }
}

pub struct SynthData {
    pub learn: Dataset,
    pub base: Dataset,
    pub queries: Dataset,
}

struct Generator {
    dim: usize,
    latent: usize,
    lift: Vec<f32>,
    centers: Vec<f32>,
    spread: f32,
    sift_normalize: bool,
}

impl Generator {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let (d, l) = (spec.dim, spec.latent);
        let mut lift = vec![0f32; d * l];
        for c in 0..l {
            let scale = 1.0 / (1.0 + c as f32).sqrt();
            for r in 0..d {
                lift[r * l + c] = scale * rng.sample::<f32, _>(StandardNormal);
            }
        }
        let centers = (0..spec.clusters * l)
            .map(|_| 2.0 * rng.sample::<f32, _>(StandardNormal))
            .collect();
        Self {
            dim: d,
            latent: l,
            lift,
            centers,
            spread: spec.spread,
            sift_normalize: spec.sift_normalize,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Dataset {
        let (d, l) = (self.dim, self.latent);
        let clusters = self.centers.len() / l;
        let mut out = Vec::with_capacity(n * d);
        let mut z = vec![0f32; l];
        for _ in 0..n {
            let c = rng.gen_range(0..clusters);
            for (zi, ci) in z.iter_mut().zip(&self.centers[c * l..(c + 1) * l]) {
                *zi = ci + self.spread * rng.sample::<f32, _>(StandardNormal);
            }
            let start = out.len();
            for r in 0..d {
                let row = &self.lift[r * l..(r + 1) * l];
                let v: f32 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                out.push(v + 0.05 * rng.sample::<f32, _>(StandardNormal));
            }
            if self.sift_normalize {
                sift_postprocess(&mut out[start..]);
            }
        }
        Dataset::new(d, out).expect("generated rows have the declared width")
    }
}

fn sift_postprocess(v: &mut [f32]) {
    let normalize = |v: &mut [f32]| {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
    };
    v.iter_mut().for_each(|x| *x = x.abs());
    normalize(v);
    v.iter_mut().for_each(|x| *x = x.min(0.2));
    normalize(v);
    v.iter_mut().for_each(|x| *x = (*x * 512.0).min(255.0).floor());
}

pub fn generate(spec: &SynthSpec) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = Generator::new(spec, &mut rng);
    SynthData {
        learn: g.sample(&mut rng, spec.n_learn),
        base: g.sample(&mut rng, spec.n_base),
        queries: g.sample(&mut rng, spec.n_query),
    }
}

/// Exact `depth` nearest base rows per query, ties broken by lower id.
pub fn exact_knn(base: &Dataset, queries: &Dataset, depth: usize) -> GroundTruth {
    let depth = depth.min(base.count()).max(1);
    let mut ids = Vec::with_capacity(queries.count() * depth);
    let mut scored: Vec<(f32, u32)> = Vec::with_capacity(base.count());
    for q in queries.rows() {
        scored.clear();
        scored.extend(base.rows().enumerate().map(|(i, x)| (squared_l2(q, x), i as u32)));
        let cmp = |a: &(f32, u32), b: &(f32, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if depth < scored.len() {
            scored.select_nth_unstable_by(depth - 1, cmp);
            scored.truncate(depth);
        }
        scored.sort_unstable_by(cmp);
        ids.extend(scored.iter().map(|s| s.1));
    }
    GroundTruth::new(depth, ids).expect("depth is positive")
}
