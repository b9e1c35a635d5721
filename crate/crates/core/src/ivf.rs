//! Inverted-file index over product-quantized residuals.
//!
//! A coarse codebook of `K` centroids partitions the space; each database
//! vector is stored in the list of its nearest coarse centroid as the PQ code
//! of its residual `x - c`. An index can also be *flat* (exhaustive search):
//! one list of raw-vector codes and no coarse step.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{format_err, invalid, Error, Result};
use crate::kmeans::{self, squared_l2, Codebook};
use crate::pq::{read_f32s, write_f32s, ProductQuantizer};
use crate::qadc::TransposedList;
use crate::vecio::Dataset;

const INDEX_MAGIC: &[u8; 4] = b"QIVF";
const INDEX_VERSION: u32 = 1;

pub const DEFAULT_K: usize = 256;

/// Base rows encoded per batch during a build.
const BUILD_BLOCK: usize = 65536;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Codes stored one after another.
    Standard,
    /// Blocks of 16 codes transposed for the shuffle kernels (4-bit codes).
    Transposed16,
}

impl Layout {
    fn tag(self) -> u8 {
        match self {
            Layout::Standard => 0,
            Layout::Transposed16 => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Layout::Standard),
            1 => Ok(Layout::Transposed16),
            _ => format_err(format!("unknown layout tag {}", t)),
        }
    }
}

/// One inverted list. Ids are kept in a parallel array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvertedList {
    Standard { ids: Vec<u64>, codes: Vec<u8> },
    Transposed(TransposedList),
}

impl InvertedList {
    pub fn len(&self) -> usize {
        match self {
            InvertedList::Standard { ids, .. } => ids.len(),
            InvertedList::Transposed(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Valid ids in list order.
    pub fn ids(&self) -> &[u64] {
        match self {
            InvertedList::Standard { ids, .. } => ids,
            InvertedList::Transposed(t) => t.ids(),
        }
    }

    /// Packed code of entry `i`.
    pub fn code(&self, i: usize, code_bytes: usize) -> Vec<u8> {
        match self {
            InvertedList::Standard { codes, .. } => codes[i * code_bytes..(i + 1) * code_bytes].to_vec(),
            InvertedList::Transposed(t) => t.code(i),
        }
    }
}

/// Cells chosen for a query and the query's residual against each.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub cells: Vec<usize>,
    /// `cells.len()` residuals of dimension `d`, back to back.
    pub residuals: Vec<f32>,
}

impl ProbeSet {
    pub fn residual(&self, i: usize) -> &[f32] {
        let d = self.residuals.len() / self.cells.len().max(1);
        &self.residuals[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    d: usize,
    m: usize,
    b: u32,
    /// `None` for a flat (exhaustive) index.
    coarse: Option<Codebook>,
    layout: Layout,
    lists: Vec<InvertedList>,
}

fn make_list(ids: Vec<u64>, codes: Vec<u8>, m: usize, layout: Layout) -> Result<InvertedList> {
    Ok(match layout {
        Layout::Standard => InvertedList::Standard { ids, codes },
        Layout::Transposed16 => InvertedList::Transposed(TransposedList::from_codes(m, &ids, &codes)?),
    })
}

fn check_layout(pq: &ProductQuantizer, layout: Layout) -> Result<()> {
    if layout == Layout::Transposed16 && pq.b() != 4 {
        return Err(Error::Unsupported(format!(
            "transposed layout needs 4-bit codes, quantizer has b={}",
            pq.b()
        )));
    }
    Ok(())
}

impl IvfIndex {
    /// Trains `k` coarse centroids (k-means) on `learning_set`.
    pub fn train_coarse(learning_set: &Dataset, k: usize, iters: usize, seed: u64) -> Result<Codebook> {
        kmeans::train(learning_set.data(), learning_set.dim(), k, iters, seed)
    }

    /// Trains the coarse quantizer on `base` itself, then indexes it.
    pub fn build_with_training(
        pq: &ProductQuantizer,
        coarse_k: usize,
        base: &Dataset,
        iters: usize,
        seed: u64,
        layout: Layout,
    ) -> Result<Self> {
        if coarse_k > base.count() {
            return invalid(format!("K={} exceeds the {} base vectors", coarse_k, base.count()));
        }
        let coarse = Self::train_coarse(base, coarse_k, iters, seed)?;
        Self::build(pq, coarse, base, layout)
    }

    /// Assigns every base vector to its nearest coarse cell and stores the PQ
    /// code of its residual. Ids are the row numbers of `base`.
    pub fn build(pq: &ProductQuantizer, coarse: Codebook, base: &Dataset, layout: Layout) -> Result<Self> {
        check_layout(pq, layout)?;
        if coarse.dim() != pq.d() || (base.count() > 0 && base.dim() != pq.d()) {
            return invalid("coarse codebook, quantizer and base dimensions differ");
        }
        let k = coarse.k();
        let cb = pq.code_bytes();
        let mut ids: Vec<Vec<u64>> = vec![Vec::new(); k];
        let mut codes: Vec<Vec<u8>> = vec![Vec::new(); k];
        let d = pq.d();
        let assignment = coarse.assign_all(base.data());
        let mut residuals = Vec::with_capacity(BUILD_BLOCK * d);
        for (b, rows) in base.data().chunks(BUILD_BLOCK * d).enumerate() {
            let first = b * BUILD_BLOCK;
            residuals.clear();
            for (i, x) in rows.chunks_exact(d).enumerate() {
                let cell = assignment[first + i].0;
                residuals.extend(x.iter().zip(coarse.centroid(cell)).map(|(a, c)| a - c));
            }
            let encoded = pq.encode_dataset(&Dataset::new(d, residuals.clone())?)?;
            for (i, code) in encoded.chunks_exact(cb).enumerate() {
                let cell = assignment[first + i].0;
                ids[cell].push((first + i) as u64);
                codes[cell].extend_from_slice(code);
            }
        }
        let lists = ids
            .into_iter()
            .zip(codes)
            .map(|(i, c)| make_list(i, c, pq.m(), layout))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d: pq.d(),
            m: pq.m(),
            b: pq.b(),
            coarse: Some(coarse),
            layout,
            lists,
        })
    }

    /// A single list holding the codes of the raw base vectors.
    pub fn flat(pq: &ProductQuantizer, base: &Dataset, layout: Layout) -> Result<Self> {
        check_layout(pq, layout)?;
        let codes = pq.encode_dataset(base)?;
        let ids = (0..base.count() as u64).collect();
        Ok(Self {
            d: pq.d(),
            m: pq.m(),
            b: pq.b(),
            coarse: None,
            layout,
            lists: vec![make_list(ids, codes, pq.m(), layout)?],
        })
    }

    /// The same index re-stored in another layout.
    pub fn with_layout(&self, layout: Layout) -> Result<Self> {
        if layout == Layout::Transposed16 && self.b != 4 {
            return Err(Error::Unsupported("transposed layout needs 4-bit codes".into()));
        }
        let lists = self
            .lists
            .iter()
            .map(|l| {
                let (ids, codes) = match l {
                    InvertedList::Standard { ids, codes } => (ids.clone(), codes.clone()),
                    InvertedList::Transposed(t) => t.to_standard(),
                };
                make_list(ids, codes, self.m, layout)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lists,
            layout,
            ..self.clone()
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn b(&self) -> u32 {
        self.b
    }

    pub fn code_bytes(&self) -> usize {
        crate::pq::code_bytes(self.m, self.b)
    }

    pub fn is_flat(&self) -> bool {
        self.coarse.is_none()
    }

    pub fn coarse(&self) -> Option<&Codebook> {
        self.coarse.as_ref()
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Number of cells (1 for a flat index).
    pub fn n_lists(&self) -> usize {
        self.lists.len()
    }

    pub fn list(&self, cell: usize) -> &InvertedList {
        &self.lists[cell]
    }

    pub fn lists(&self) -> &[InvertedList] {
        &self.lists
    }

    /// Total number of stored vectors (padding excluded).
    pub fn len(&self) -> usize {
        self.lists.iter().map(InvertedList::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `ma` cells nearest to `query` (ties by lower cell id) with the
    /// query's residual against each. A flat index returns its single list
    /// and the query itself.
    pub fn probe(&self, query: &[f32], ma: usize) -> Result<ProbeSet> {
        if query.len() != self.d {
            return invalid(format!("query of dim {} for an index of dim {}", query.len(), self.d));
        }
        let Some(coarse) = &self.coarse else {
            if ma > 1 {
                return invalid("a flat index has a single list");
            }
            return Ok(ProbeSet {
                cells: vec![0],
                residuals: query.to_vec(),
            });
        };
        if ma == 0 || ma > coarse.k() {
            return invalid(format!("ma={} must be in 1..={}", ma, coarse.k()));
        }
        let mut dists = vec![0f32; coarse.k()];
        coarse.distances_into(query, &mut dists);
        let mut order: Vec<usize> = (0..coarse.k()).collect();
        let by_distance = |a: &usize, b: &usize| dists[*a].total_cmp(&dists[*b]).then(a.cmp(b));
        if ma < order.len() {
            order.select_nth_unstable_by(ma - 1, by_distance);
            order.truncate(ma);
        }
        order.sort_unstable_by(by_distance);
        let mut residuals = Vec::with_capacity(ma * self.d);
        for &c in &order {
            residuals.extend(query.iter().zip(coarse.centroid(c)).map(|(a, b)| a - b));
        }
        Ok(ProbeSet {
            cells: order,
            residuals,
        })
    }

    /// Mean squared error between base vectors and their reconstruction
    /// (coarse centroid plus decoded residual).
    pub fn reconstruction_error(&self, pq: &ProductQuantizer, base: &Dataset) -> f64 {
        let cb = self.code_bytes();
        let mut total = 0f64;
        for (cell, list) in self.lists.iter().enumerate() {
            for (i, &id) in list.ids().iter().enumerate() {
                let mut rec = pq.decode_packed(&list.code(i, cb));
                if let Some(coarse) = &self.coarse {
                    rec.iter_mut().zip(coarse.centroid(cell)).for_each(|(r, c)| *r += c);
                }
                total += squared_l2(base.row(id as usize), &rec) as f64;
            }
        }
        total / self.len().max(1) as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION)?;
        w.write_u32::<LittleEndian>(self.n_lists() as u32)?;
        w.write_u8(self.layout.tag())?;
        w.write_u8(self.is_flat() as u8)?;
        w.write_u32::<LittleEndian>(self.d as u32)?;
        w.write_u32::<LittleEndian>(self.m as u32)?;
        w.write_u32::<LittleEndian>(self.b)?;
        if let Some(c) = &self.coarse {
            write_f32s(w, c.centroids())?;
        }
        for list in &self.lists {
            let (len, ids, codes): (usize, &[u64], &[u8]) = match list {
                InvertedList::Standard { ids, codes } => (ids.len(), ids, codes),
                InvertedList::Transposed(t) => (t.len(), t.padded_ids(), t.blocks()),
            };
            w.write_u64::<LittleEndian>(len as u64)?;
            w.write_u64::<LittleEndian>(ids.len() as u64)?;
            for &id in ids {
                w.write_u64::<LittleEndian>(id)?;
            }
            w.write_all(codes)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return format_err("not an index file");
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != INDEX_VERSION {
            return format_err(format!("unsupported index version {}", version));
        }
        let k = r.read_u32::<LittleEndian>()? as usize;
        let layout = Layout::from_tag(r.read_u8()?)?;
        let flat = r.read_u8()? != 0;
        let d = r.read_u32::<LittleEndian>()? as usize;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let b = r.read_u32::<LittleEndian>()?;
        if m == 0 || !crate::pq::SUPPORTED_BITS.contains(&b) || (layout == Layout::Transposed16 && b != 4) {
            return format_err("bad code shape in index header");
        }
        let coarse = if flat {
            None
        } else {
            Some(Codebook::new(k, d, read_f32s(r, k * d)?).map_err(|e| Error::Format(e.to_string()))?)
        };
        let cb = crate::pq::code_bytes(m, b);
        let mut lists = Vec::with_capacity(k);
        for _ in 0..k {
            let len = r.read_u64::<LittleEndian>()? as usize;
            let stored = r.read_u64::<LittleEndian>()? as usize;
            let mut ids = vec![0u64; stored];
            r.read_u64_into::<LittleEndian>(&mut ids)?;
            let mut codes = vec![0u8; stored * cb];
            r.read_exact(&mut codes)?;
            lists.push(match layout {
                Layout::Standard if len == stored => InvertedList::Standard { ids, codes },
                Layout::Standard => return format_err("padding in a standard-layout list"),
                Layout::Transposed16 => InvertedList::Transposed(
                    TransposedList::from_raw_parts(m, len, ids, codes).map_err(|e| Error::Format(e.to_string()))?,
                ),
            });
        }
        Ok(Self {
            d,
            m,
            b,
            coarse,
            layout,
            lists,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pq::train_pq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::new(d, (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    fn residual_set(base: &Dataset, coarse: &Codebook) -> Dataset {
        let mut out = Dataset::empty(base.dim());
        for x in base.rows() {
            let (c, _) = coarse.assign(x).unwrap();
            let r: Vec<f32> = x.iter().zip(coarse.centroid(c)).map(|(a, b)| a - b).collect();
            out.push(&r).unwrap();
        }
        out
    }

    #[test]
    fn single_cell_holds_everything() {
        let base = random_dataset(200, 8, 1);
        let pq = train_pq(&base, 4, 4, 3, 0).unwrap();
        let ix = IvfIndex::build_with_training(&pq, 1, &base, 3, 0, Layout::Standard).unwrap();
        assert_eq!(ix.n_lists(), 1);
        assert_eq!(ix.list(0).ids(), (0..200).collect::<Vec<u64>>().as_slice());
        // residual = x - the single centroid
        let c = ix.coarse().unwrap().centroid(0).to_vec();
        let x = base.row(17);
        let want: Vec<f32> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
        assert_eq!(ix.list(0).code(17, 2), pq.encode(&want).unwrap().packed());
    }

    #[test]
    fn vector_on_centroid_has_zero_residual() {
        let base = random_dataset(300, 8, 2);
        let coarse = IvfIndex::train_coarse(&base, 8, 5, 1).unwrap();
        let mut with_centroid = base.clone();
        with_centroid.push(coarse.centroid(3)).unwrap();
        let pq = train_pq(&base, 2, 8, 3, 0).unwrap();
        let ix = IvfIndex::build(&pq, coarse, &with_centroid, Layout::Standard).unwrap();
        let pos = ix.list(3).ids().iter().position(|&id| id == 300).unwrap();
        assert_eq!(ix.list(3).code(pos, 2), pq.encode(&[0.0; 8]).unwrap().packed());
    }

    #[test]
    fn lists_partition_the_base() {
        let base = random_dataset(1000, 16, 3);
        let pq = train_pq(&base, 4, 4, 3, 0).unwrap();
        for layout in [Layout::Standard, Layout::Transposed16] {
            let ix = IvfIndex::build_with_training(&pq, 16, &base, 5, 9, layout).unwrap();
            let mut all: Vec<u64> = ix.lists().iter().flat_map(|l| l.ids().to_vec()).collect();
            all.sort();
            assert_eq!(all, (0..1000).collect::<Vec<u64>>());
            assert_eq!(ix.len(), 1000);
        }
        assert!(IvfIndex::build_with_training(&pq, 1001, &base, 1, 0, Layout::Standard).is_err());
        let pq8 = train_pq(&base, 4, 8, 1, 0).unwrap();
        assert!(matches!(IvfIndex::flat(&pq8, &base, Layout::Transposed16), Err(Error::Unsupported(_))));
    }

    #[test]
    fn probe_examples() {
        let base = random_dataset(500, 8, 4);
        let pq = train_pq(&base, 4, 4, 2, 0).unwrap();
        let ix = IvfIndex::build_with_training(&pq, 16, &base, 5, 2, Layout::Standard).unwrap();
        let coarse = ix.coarse().unwrap();

        let p = ix.probe(coarse.centroid(7), 1).unwrap();
        assert_eq!(p.cells, vec![7]);
        assert!(p.residual(0).iter().all(|&x| x == 0.0));

        let q = base.row(5);
        let all = ix.probe(q, 16).unwrap();
        let mut sorted = all.cells.clone();
        sorted.sort();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1f32..1.0)).collect();
            let mut brute: Vec<(f32, usize)> = (0..16).map(|c| (squared_l2(&q, coarse.centroid(c)), c)).collect();
            brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let p = ix.probe(&q, 4).unwrap();
            assert_eq!(p.cells, brute[..4].iter().map(|x| x.1).collect::<Vec<_>>());
            let full = ix.probe(&q, 16).unwrap();
            assert_eq!(&full.cells[..4], &p.cells[..]);
        }
        assert!(ix.probe(q, 17).is_err());
        assert!(ix.probe(&[0.0; 3], 1).is_err());
    }

    #[test]
    fn residual_error_below_raw_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // clustered data: residuals carry far less energy than raw vectors
        let centers: Vec<f32> = (0..16 * 16).map(|_| rng.gen_range(-10f32..10.0)).collect();
        let mut base = Dataset::empty(16);
        for i in 0..3000 {
            let c = &centers[(i % 16) * 16..(i % 16 + 1) * 16];
            let v: Vec<f32> = c.iter().map(|x| x + rng.gen_range(-1f32..1.0)).collect();
            base.push(&v).unwrap();
        }
        let coarse = IvfIndex::train_coarse(&base, 16, 10, 0).unwrap();
        let residuals = residual_set(&base, &coarse);
        let pq_res = train_pq(&residuals, 4, 4, 10, 0).unwrap();
        let pq_raw = train_pq(&base, 4, 4, 10, 0).unwrap();
        let ivf = IvfIndex::build(&pq_res, coarse, &base, Layout::Standard).unwrap();
        let flat = IvfIndex::flat(&pq_raw, &base, Layout::Standard).unwrap();
        let (e_ivf, e_flat) = (ivf.reconstruction_error(&pq_res, &base), flat.reconstruction_error(&pq_raw, &base));
        assert!(e_ivf <= e_flat, "ivf {} flat {}", e_ivf, e_flat);
        assert!((e_ivf - pq_res.reconstruction_error(&residuals)).abs() <= 1e-3 * e_ivf.max(1e-9));
    }

    #[test]
    fn save_load_round_trip() {
        let base = random_dataset(333, 8, 7);
        let pq = train_pq(&base, 4, 4, 2, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ivf = IvfIndex::build_with_training(&pq, 8, &base, 3, 1, Layout::Transposed16).unwrap();
        let indexes = [
            ivf.with_layout(Layout::Standard).unwrap(),
            ivf.clone(),
            IvfIndex::flat(&pq, &base, Layout::Transposed16).unwrap(),
        ];
        for (i, ix) in indexes.iter().enumerate() {
            let path = dir.path().join(format!("{}.qivf", i));
            ix.save(&path).unwrap();
            assert_eq!(&IvfIndex::load(&path).unwrap(), ix);
        }
        assert_eq!(indexes[0].with_layout(Layout::Transposed16).unwrap(), ivf);
        std::fs::write(dir.path().join("bad"), b"QADC\x01\0\0\0").unwrap();
        assert!(matches!(IvfIndex::load(dir.path().join("bad")), Err(Error::Format(_))));
    }
}
