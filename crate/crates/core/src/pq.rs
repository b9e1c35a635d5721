//! Product quantizers, with an optional learned rotation (OPQ).
//!
//! A vector of dimension `d` is split into `m` sub-vectors of `dsub = d / m`
//! components; sub-vector `j` is replaced by the index of its nearest centroid
//! in codebook `j`, which holds `k = 2^b` centroids.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use crate::error::{format_err, invalid, Error, Result};
use crate::kmeans::{self, squared_l2, Codebook};
use crate::vecio::Dataset;

const MODEL_MAGIC: &[u8; 4] = b"QADC";
const MODEL_VERSION: u32 = 1;

/// Lloyd iterations spent refreshing the codebooks after each rotation update.
const OPQ_REFINE_ITERS: usize = 2;

pub const DEFAULT_OPQ_ITERS: usize = 20;

/// Sub-code widths supported by the packing code.
/// Rows rotated and encoded together in bulk operations.
const ENCODE_BLOCK: usize = 4096;

pub const SUPPORTED_BITS: [u32; 3] = [4, 8, 16];

/// Packed byte length of an `m`-component code of `b`-bit sub-codes.
pub fn code_bytes(m: usize, b: u32) -> usize {
    (m * b as usize + 7) / 8
}

/// Packs sub-codes into `out`. For `b = 4`, byte `j` holds sub-code `2j` in
/// its low nibble and `2j + 1` in its high nibble. For `b = 16` each sub-code
/// takes two little-endian bytes.
pub fn pack_into(codes: &[u16], b: u32, out: &mut [u8]) {
    match b {
        4 => {
            for (byte, pair) in out.iter_mut().zip(codes.chunks(2)) {
                let hi = pair.get(1).copied().unwrap_or(0);
                *byte = (pair[0] as u8 & 0x0f) | ((hi as u8) << 4);
            }
        }
        8 => {
            for (byte, &c) in out.iter_mut().zip(codes) {
                *byte = c as u8;
            }
        }
        16 => {
            for (pair, &c) in out.chunks_exact_mut(2).zip(codes) {
                pair.copy_from_slice(&c.to_le_bytes());
            }
        }
        _ => unreachable!("unsupported sub-code width {}", b),
    }
}

/// Sub-code `j` of a packed code.
#[inline]
pub fn subcode(packed: &[u8], b: u32, j: usize) -> usize {
    match b {
        4 => ((packed[j / 2] >> ((j & 1) * 4)) & 0x0f) as usize,
        8 => packed[j] as usize,
        16 => u16::from_le_bytes([packed[2 * j], packed[2 * j + 1]]) as usize,
        _ => unreachable!("unsupported sub-code width {}", b),
    }
}

pub fn unpack(packed: &[u8], m: usize, b: u32) -> Vec<u16> {
    (0..m).map(|j| subcode(packed, b, j) as u16).collect()
}

/// One encoded vector: its `m` sub-codes and their packed bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PqCode {
    codes: Vec<u16>,
    packed: Vec<u8>,
}

impl PqCode {
    pub fn from_codes(codes: Vec<u16>, b: u32) -> Result<Self> {
        check_bits(codes.len(), b)?;
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= 1usize << b) {
            return invalid(format!("sub-code {} does not fit in {} bits", c, b));
        }
        let mut packed = vec![0u8; code_bytes(codes.len(), b)];
        pack_into(&codes, b, &mut packed);
        Ok(Self { codes, packed })
    }

    pub fn from_packed(packed: &[u8], m: usize, b: u32) -> Result<Self> {
        check_bits(m, b)?;
        if packed.len() != code_bytes(m, b) {
            return invalid(format!("{} packed bytes for m={} b={}", packed.len(), m, b));
        }
        Ok(Self {
            codes: unpack(packed, m, b),
            packed: packed.to_vec(),
        })
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn m(&self) -> usize {
        self.codes.len()
    }
}

fn check_bits(m: usize, b: u32) -> Result<()> {
    if !SUPPORTED_BITS.contains(&b) {
        return Err(Error::InvalidArgument(format!(
            "unsupported sub-code width b={} (expected one of {:?})",
            b, SUPPORTED_BITS
        )));
    }
    if m == 0 {
        return invalid("m must be at least 1");
    }
    if b == 4 && m % 2 != 0 {
        return invalid(format!("4-bit codes need an even m, got {}", m));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductQuantizer {
    d: usize,
    m: usize,
    b: u32,
    codebooks: Vec<Codebook>,
    /// Row-major `d x d`; a vector is quantized as `pq(R x)`.
    rotation: Option<Vec<f32>>,
}

/// OPQ training output with the reconstruction error after each alternation.
#[derive(Debug, Clone)]
pub struct OpqTraining {
    pub pq: ProductQuantizer,
    /// `errors[0]` is the plain PQ error; `errors[t]` follows alternation `t`.
    pub errors: Vec<f64>,
}

impl ProductQuantizer {
    pub fn from_parts(
        d: usize,
        m: usize,
        b: u32,
        codebooks: Vec<Codebook>,
        rotation: Option<Vec<f32>>,
    ) -> Result<Self> {
        check_bits(m, b)?;
        if d == 0 || d % m != 0 {
            return invalid(format!("dimension {} is not divisible by m={}", d, m));
        }
        let dsub = d / m;
        if codebooks.len() != m
            || codebooks
                .iter()
                .any(|cb| cb.dim() != dsub || cb.k() != 1usize << b)
        {
            return invalid("codebooks do not match m, b and d / m");
        }
        if rotation.as_ref().is_some_and(|r| r.len() != d * d) {
            return invalid("rotation is not d x d");
        }
        Ok(Self {
            d,
            m,
            b,
            codebooks,
            rotation,
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

    pub fn k(&self) -> usize {
        1 << self.b
    }

    pub fn dsub(&self) -> usize {
        self.d / self.m
    }

    pub fn code_bytes(&self) -> usize {
        code_bytes(self.m, self.b)
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn codebook(&self, j: usize) -> &Codebook {
        &self.codebooks[j]
    }

    pub fn rotation(&self) -> Option<&[f32]> {
        self.rotation.as_deref()
    }

    fn check_dim(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.d {
            return invalid(format!("vector of dim {} for a quantizer of dim {}", v.len(), self.d));
        }
        Ok(())
    }

    /// `R v` into `out`, or a copy when there is no rotation.
    pub fn rotate_into(&self, v: &[f32], out: &mut [f32]) {
        match &self.rotation {
            Some(r) => rotate(r, self.d, v, out),
            None => out.copy_from_slice(v),
        }
    }

    pub fn rotate(&self, v: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.d];
        self.rotate_into(v, &mut out);
        out
    }

    /// Sub-codes of a vector already in the quantizer's (rotated) space.
    fn subcodes_rotated(&self, x: &[f32], codes: &mut [u16]) -> f32 {
        let dsub = self.dsub();
        let mut err = 0.0;
        for (j, (slot, sub)) in codes.iter_mut().zip(x.chunks_exact(dsub)).enumerate() {
            let (i, dist) = self.codebooks[j].assign_unchecked(sub);
            *slot = i as u16;
            err += dist;
        }
        err
    }

    pub fn encode(&self, v: &[f32]) -> Result<PqCode> {
        self.check_dim(v)?;
        let x = self.rotate(v);
        let mut codes = vec![0u16; self.m];
        self.subcodes_rotated(&x, &mut codes);
        let mut packed = vec![0u8; self.code_bytes()];
        pack_into(&codes, self.b, &mut packed);
        Ok(PqCode { codes, packed })
    }

    /// Sub-codes (`m` per row) and squared quantization errors of rows that
    /// are already in the rotated space. Same results as encoding row by row.
    fn subcodes_rotated_rows(&self, rotated: &[f32]) -> (Vec<u16>, Vec<f32>) {
        let (d, m, dsub) = (self.d, self.m, self.dsub());
        let n = rotated.len() / d;
        let mut codes = vec![0u16; n * m];
        let mut errs = vec![0f32; n];
        for (j, cb) in self.codebooks.iter().enumerate() {
            let sub = sub_slice(rotated, d, dsub, j);
            for (i, (c, dist)) in cb.assign_all(&sub).into_iter().enumerate() {
                codes[i * m + j] = c as u16;
                errs[i] += dist;
            }
        }
        (codes, errs)
    }

    /// Rotates `rows` in blocks and hands each block's sub-codes and errors
    /// to `f` together with the index of its first row.
    fn for_each_encoded_block(&self, rows: &[f32], mut f: impl FnMut(usize, &[u16], &[f32])) {
        let d = self.d;
        let mut buf = Vec::with_capacity(ENCODE_BLOCK * d);
        for (b, block) in rows.chunks(ENCODE_BLOCK * d).enumerate() {
            buf.clear();
            buf.resize(block.len(), 0.0);
            for (x, out) in block.chunks_exact(d).zip(buf.chunks_exact_mut(d)) {
                self.rotate_into(x, out);
            }
            let (codes, errs) = self.subcodes_rotated_rows(&buf);
            f(b * ENCODE_BLOCK, &codes, &errs);
        }
    }

    /// Bulk encoding into a contiguous buffer of `code_bytes()` per vector.
    pub fn encode_dataset(&self, data: &Dataset) -> Result<Vec<u8>> {
        if data.count() > 0 && data.dim() != self.d {
            return invalid(format!("dataset of dim {} for a quantizer of dim {}", data.dim(), self.d));
        }
        let cb = self.code_bytes();
        let mut out = vec![0u8; data.count() * cb];
        self.for_each_encoded_block(data.data(), |first, codes, _| {
            for (i, c) in codes.chunks_exact(self.m).enumerate() {
                let row = first + i;
                pack_into(c, self.b, &mut out[row * cb..(row + 1) * cb]);
            }
        });
        Ok(out)
    }

    /// Reconstruction in the quantizer's rotated space.
    pub fn decode_rotated(&self, packed: &[u8]) -> Vec<f32> {
        let dsub = self.dsub();
        let mut out = Vec::with_capacity(self.d);
        for j in 0..self.m {
            out.extend_from_slice(self.codebooks[j].centroid(subcode(packed, self.b, j)));
        }
        debug_assert_eq!(out.len(), dsub * self.m);
        out
    }

    /// Reconstruction in the input space (`R^T` applied for OPQ).
    pub fn decode(&self, code: &PqCode) -> Result<Vec<f32>> {
        if code.m() != self.m || code.packed().len() != self.code_bytes() {
            return invalid("code shape does not match the quantizer");
        }
        Ok(self.decode_packed(code.packed()))
    }

    pub fn decode_packed(&self, packed: &[u8]) -> Vec<f32> {
        let y = self.decode_rotated(packed);
        match &self.rotation {
            Some(r) => {
                let mut out = vec![0f32; self.d];
                rotate_transposed(r, self.d, &y, &mut out);
                out
            }
            None => y,
        }
    }

    /// Mean `||x - decode(encode(x))||^2` over a dataset.
    pub fn reconstruction_error(&self, data: &Dataset) -> f64 {
        if data.count() == 0 {
            return 0.0;
        }
        let mut total = 0f64;
        self.for_each_encoded_block(data.data(), |_, _, errs| {
            total += errs.iter().map(|&e| e as f64).sum::<f64>();
        });
        total / data.count() as f64
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
        w.write_all(MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(MODEL_VERSION)?;
        w.write_u32::<LittleEndian>(self.d as u32)?;
        w.write_u32::<LittleEndian>(self.m as u32)?;
        w.write_u32::<LittleEndian>(self.b)?;
        w.write_u8(self.rotation.is_some() as u8)?;
        if let Some(r) = &self.rotation {
            write_f32s(w, r)?;
        }
        for cb in &self.codebooks {
            write_f32s(w, cb.centroids())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return format_err("not a quantizer model file");
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != MODEL_VERSION {
            return format_err(format!("unsupported model version {}", version));
        }
        let d = r.read_u32::<LittleEndian>()? as usize;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let b = r.read_u32::<LittleEndian>()?;
        check_bits(m, b).map_err(|e| Error::Format(e.to_string()))?;
        if d == 0 || d % m != 0 {
            return format_err("model dimension not divisible by m");
        }
        let rotation = match r.read_u8()? {
            0 => None,
            1 => Some(read_f32s(r, d * d)?),
            t => return format_err(format!("bad rotation flag {}", t)),
        };
        let k = 1usize << b;
        let codebooks = (0..m)
            .map(|_| Codebook::new(k, d / m, read_f32s(r, k * (d / m))?))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(d, m, b, codebooks, rotation)
    }
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> Result<()> {
    for &x in xs {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

/// `out = R v` for row-major `R`.
pub fn rotate(r: &[f32], d: usize, v: &[f32], out: &mut [f32]) {
    for (o, row) in out.iter_mut().zip(r.chunks_exact(d)) {
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// `out = R^T v`.
pub fn rotate_transposed(r: &[f32], d: usize, v: &[f32], out: &mut [f32]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (row, &s) in r.chunks_exact(d).zip(v) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * s;
        }
    }
}

fn validate_training(learning_set: &Dataset, m: usize, b: u32) -> Result<()> {
    check_bits(m, b)?;
    let d = learning_set.dim();
    if d == 0 || d % m != 0 {
        return invalid(format!("dimension {} is not divisible by m={}", d, m));
    }
    if learning_set.count() < 1 << b {
        return invalid(format!(
            "{} training vectors for {} centroids per sub-quantizer",
            learning_set.count(),
            1usize << b
        ));
    }
    Ok(())
}

/// Columns `[j * dsub, (j + 1) * dsub)` of every row, contiguous.
fn sub_slice(data: &[f32], d: usize, dsub: usize, j: usize) -> Vec<f32> {
    data.chunks_exact(d)
        .flat_map(|row| &row[j * dsub..(j + 1) * dsub])
        .copied()
        .collect()
}

fn sub_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(j as u64)
}

/// Trains one k-means codebook per sub-space of the learning set.
pub fn train_pq(
    learning_set: &Dataset,
    m: usize,
    b: u32,
    iters: usize,
    seed: u64,
) -> Result<ProductQuantizer> {
    validate_training(learning_set, m, b)?;
    let d = learning_set.dim();
    let dsub = d / m;
    let codebooks = (0..m)
        .map(|j| {
            let sub = sub_slice(learning_set.data(), d, dsub, j);
            kmeans::train(&sub, dsub, 1 << b, iters, sub_seed(seed, j))
        })
        .collect::<Result<Vec<_>>>()?;
    ProductQuantizer::from_parts(d, m, b, codebooks, None)
}

/// OPQ by alternating minimization, starting from the identity rotation.
///
/// Each alternation fixes the codes and sets `R` to the orthogonal Procrustes
/// solution mapping the vectors onto their reconstructions, then refreshes the
/// codebooks on the re-rotated learning set. With `opq_iters = 0` the result
/// is exactly [`train_pq`] plus an identity rotation.
pub fn train_opq(
    learning_set: &Dataset,
    m: usize,
    b: u32,
    iters: usize,
    opq_iters: usize,
    seed: u64,
) -> Result<OpqTraining> {
    let base = train_pq(learning_set, m, b, iters, seed)?;
    let d = base.d;
    let dsub = base.dsub();
    let n = learning_set.count();

    let mut rotation = identity(d);
    let mut codebooks = base.codebooks;
    let mut rotated = learning_set.data().to_vec();
    let mut pq = ProductQuantizer::from_parts(d, m, b, codebooks.clone(), Some(rotation.clone()))?;
    let mut errors = vec![pq.reconstruction_error(learning_set)];

    for _ in 0..opq_iters {
        // Cross-covariance between reconstructions y (rotated space) and x.
        let (codes, _) = pq.subcodes_rotated_rows(&rotated);
        let mut cross = DMatrix::<f64>::zeros(d, d);
        for (xs, cs) in learning_set
            .data()
            .chunks(ENCODE_BLOCK * d)
            .zip(codes.chunks(ENCODE_BLOCK * m))
        {
            let rows = xs.len() / d;
            let x = DMatrix::<f64>::from_iterator(d, rows, xs.iter().map(|&v| v as f64));
            let mut y = DMatrix::<f64>::zeros(d, rows);
            for (i, c) in cs.chunks_exact(m).enumerate() {
                for (j, &cj) in c.iter().enumerate() {
                    for (t, &v) in codebooks[j].centroid(cj as usize).iter().enumerate() {
                        y[(j * dsub + t, i)] = v as f64;
                    }
                }
            }
            cross.gemm(1.0, &y, &x.transpose(), 1.0);
        }
        let svd = cross.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::InvalidArgument("SVD failed to converge".into())),
        };
        let r = u * v_t;
        for i in 0..d {
            for j in 0..d {
                rotation[i * d + j] = r[(i, j)] as f32;
            }
        }

        for (x, xr) in learning_set.rows().zip(rotated.chunks_exact_mut(d)) {
            rotate(&rotation, d, x, xr);
        }
        for (j, cb) in codebooks.iter_mut().enumerate() {
            let sub = sub_slice(&rotated, d, dsub, j);
            kmeans::refine(cb, &sub, OPQ_REFINE_ITERS)?;
        }
        pq = ProductQuantizer::from_parts(d, m, b, codebooks.clone(), Some(rotation.clone()))?;
        errors.push(pq.reconstruction_error(learning_set));
    }
    debug_assert_eq!(rotated.len(), n * d);
    Ok(OpqTraining { pq, errors })
}

fn identity(d: usize) -> Vec<f32> {
    let mut r = vec![0f32; d * d];
    for i in 0..d {
        r[i * d + i] = 1.0;
    }
    r
}

/// `max |R^T R - I|` of a row-major `d x d` matrix.
pub fn orthonormality_error(r: &[f32], d: usize) -> f64 {
    let mut worst = 0f64;
    for i in 0..d {
        for j in 0..d {
            let dot: f64 = (0..d).map(|k| r[k * d + i] as f64 * r[k * d + j] as f64).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - want).abs());
        }
    }
    worst
}

/// Squared distance between a vector and the reconstruction of its code,
/// measured in the quantizer's space.
pub fn code_distance(pq: &ProductQuantizer, v: &[f32], packed: &[u8]) -> f32 {
    squared_l2(&pq.rotate(v), &pq.decode_rotated(packed))
}
