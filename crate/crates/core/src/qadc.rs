//! Quantized ADC over 4-bit codes.
//!
//! Inverted lists are stored in blocks of 16 codes. Inside a block, row `j`
//! holds byte `j` of each of the 16 packed codes, so one 16-byte load yields
//! sub-codes `2j` (low nibbles) and `2j + 1` (high nibbles) of all 16 codes.
//! Float lookup tables are quantized to 8-bit entries in `0..=127`; each table
//! then fits in one 16-byte register and a byte shuffle performs 16 lookups.
//! Lane distances are accumulated with unsigned saturating adds.
//!
//! The scalar kernel is the reference; the SSSE3 and AVX2 kernels must agree
//! with it byte for byte.

use std::sync::OnceLock;

use crate::adc::{adc_distance_packed, LookupTables, Neighbor, NeighborHeap};
use crate::error::{invalid, Error, Result};

pub const BLOCK: usize = 16;
/// Number of quantization bins; entries range over `0..=BINS`.
pub const BINS: u32 = 127;
/// Id stored next to padding codes.
pub const INVALID_ID: u64 = u64::MAX;
/// Packed byte of a padding code: both sub-codes point at entry 15.
pub const PAD_BYTE: u8 = 0xff;

/// Transposes 16 packed 4-bit codes (`m / 2` bytes each, back to back) into
/// a block of `m / 2` rows of 16 bytes.
pub fn transpose_block(codes: &[u8], m: usize, b: u32) -> Result<Vec<u8>> {
    if b != 4 {
        return Err(Error::Unsupported(format!(
            "block transposition needs 4-bit codes, got b={}",
            b
        )));
    }
    if m == 0 || m % 2 != 0 {
        return invalid(format!("block transposition needs an even m, got {}", m));
    }
    let row_bytes = m / 2;
    if codes.len() != BLOCK * row_bytes {
        return invalid(format!("{} bytes is not 16 codes of {} bytes", codes.len(), row_bytes));
    }
    let mut out = vec![0u8; codes.len()];
    transpose_into(codes, row_bytes, &mut out);
    Ok(out)
}

fn transpose_into(codes: &[u8], row_bytes: usize, out: &mut [u8]) {
    for (l, code) in codes.chunks_exact(row_bytes).enumerate() {
        for (j, &byte) in code.iter().enumerate() {
            out[j * BLOCK + l] = byte;
        }
    }
}

/// Inverse of [`transpose_block`].
pub fn untranspose_block(block: &[u8], m: usize) -> Vec<u8> {
    let row_bytes = m / 2;
    let mut out = vec![0u8; block.len()];
    for (j, row) in block.chunks_exact(BLOCK).enumerate() {
        for (l, &byte) in row.iter().enumerate() {
            out[l * row_bytes + j] = byte;
        }
    }
    out
}

/// An inverted list in block-transposed layout. The last block is padded
/// with [`PAD_BYTE`] codes whose id is [`INVALID_ID`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransposedList {
    m: usize,
    len: usize,
    ids: Vec<u64>,
    blocks: Vec<u8>,
}

impl TransposedList {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            len: 0,
            ids: Vec::new(),
            blocks: Vec::new(),
        }
    }

    /// Builds from standard-layout packed codes.
    pub fn from_codes(m: usize, ids: &[u64], codes: &[u8]) -> Result<Self> {
        if m == 0 || m % 2 != 0 {
            return invalid(format!("transposed lists need an even m, got {}", m));
        }
        let row_bytes = m / 2;
        if codes.len() != ids.len() * row_bytes {
            return invalid("code bytes do not match the id count");
        }
        let n_blocks = (ids.len() + BLOCK - 1) / BLOCK;
        let mut blocks = vec![0u8; n_blocks * BLOCK * row_bytes];
        let mut padded = vec![PAD_BYTE; BLOCK * row_bytes];
        for (bi, dst) in blocks.chunks_exact_mut(BLOCK * row_bytes).enumerate() {
            let start = bi * BLOCK * row_bytes;
            let end = (start + BLOCK * row_bytes).min(codes.len());
            let src = if end - start == BLOCK * row_bytes {
                &codes[start..end]
            } else {
                padded[..end - start].copy_from_slice(&codes[start..end]);
                &padded[..]
            };
            transpose_into(src, row_bytes, dst);
        }
        let mut all_ids = ids.to_vec();
        all_ids.resize(n_blocks * BLOCK, INVALID_ID);
        Ok(Self {
            m,
            len: ids.len(),
            ids: all_ids,
            blocks,
        })
    }

    pub(crate) fn from_raw_parts(m: usize, len: usize, ids: Vec<u64>, blocks: Vec<u8>) -> Result<Self> {
        let row_bytes = m / 2;
        if m == 0
            || m % 2 != 0
            || ids.len() != (len + BLOCK - 1) / BLOCK * BLOCK
            || blocks.len() != ids.len() * row_bytes
        {
            return invalid("inconsistent transposed list");
        }
        Ok(Self { m, len, ids, blocks })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of valid (non-padding) codes.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_blocks(&self) -> usize {
        self.ids.len() / BLOCK
    }

    pub fn block_bytes(&self) -> usize {
        BLOCK * self.m / 2
    }

    pub fn block(&self, i: usize) -> &[u8] {
        let bb = self.block_bytes();
        &self.blocks[i * bb..(i + 1) * bb]
    }

    pub fn blocks(&self) -> &[u8] {
        &self.blocks
    }

    /// Ids including padding.
    pub fn padded_ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids[..self.len]
    }

    /// Valid codes in the final block.
    pub fn valid_in_last_block(&self) -> usize {
        match self.len % BLOCK {
            0 if self.len > 0 => BLOCK,
            r => r,
        }
    }

    /// Packed code at position `i` (reads across the transposed rows).
    pub fn code(&self, i: usize) -> Vec<u8> {
        let (bi, l) = (i / BLOCK, i % BLOCK);
        self.block(bi).chunks_exact(BLOCK).map(|row| row[l]).collect()
    }

    /// Standard-layout codes of the valid entries.
    pub fn to_standard(&self) -> (Vec<u64>, Vec<u8>) {
        let row_bytes = self.m / 2;
        let mut codes = Vec::with_capacity(self.len * row_bytes);
        for bi in 0..self.n_blocks() {
            codes.extend(untranspose_block(self.block(bi), self.m));
        }
        codes.truncate(self.len * row_bytes);
        (self.ids().to_vec(), codes)
    }

    /// Float ADC distances of the first `n` valid codes, in list order.
    pub fn float_distances<'a>(&'a self, tables: &'a LookupTables, n: usize) -> impl Iterator<Item = f32> + 'a {
        (0..n.min(self.len)).map(move |i| adc_distance_packed(&self.code(i), 4, tables))
    }
}

/// 8-bit lookup tables plus the scalar quantizer that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTables {
    m: usize,
    entries: Vec<u8>,
    qmin: f32,
    qmax: f32,
    delta: f32,
    table_minima: Vec<f32>,
}

impl QuantizedTables {
    /// Builds tables from raw entries; used by tests and fuzzers.
    pub fn from_entries(entries: Vec<u8>, qmin: f32, delta: f32) -> Result<Self> {
        if entries.is_empty() || entries.len() % BLOCK != 0 {
            return invalid("quantized tables need 16 entries per table");
        }
        if entries.iter().any(|&e| e as u32 > BINS) {
            return invalid("quantized entries must be at most 127");
        }
        let m = entries.len() / BLOCK;
        Ok(Self {
            m,
            entries,
            qmin,
            qmax: qmin + delta * BINS as f32,
            delta,
            table_minima: vec![qmin; m],
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn table(&self, j: usize) -> &[u8] {
        &self.entries[j * BLOCK..(j + 1) * BLOCK]
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    pub fn qmin(&self) -> f32 {
        self.qmin
    }

    pub fn qmax(&self) -> f32 {
        self.qmax
    }

    pub fn delta(&self) -> f32 {
        self.delta
    }

    pub fn table_minima(&self) -> &[f32] {
        &self.table_minima
    }

    /// Quantized value of a single float entry.
    #[inline]
    pub fn quantize(&self, v: f32) -> u8 {
        quantize_value(v, self.qmin, self.delta)
    }

    /// Bin midpoint of a single entry.
    pub fn dequantize(&self, q: u8) -> f32 {
        self.qmin + (q as f32 + 0.5) * self.delta
    }

    /// Distance estimate for a lane total: the sum of the `m` bin midpoints
    /// the total is made of. Strictly increasing in `total` when `delta > 0`.
    #[inline]
    pub fn lane_distance(&self, total: u8) -> f32 {
        let m = self.m as f32;
        m * self.qmin + (total as f32 + 0.5 * m) * self.delta
    }

    /// Smallest lane total whose distance estimate is not below `bound`;
    /// lanes strictly under it beat the bound. Returns 256 if every total does.
    pub fn admission_limit(&self, bound: f32) -> u16 {
        if bound == f32::INFINITY {
            return 256;
        }
        if self.delta <= 0.0 {
            return if self.lane_distance(0) < bound { 256 } else { 0 };
        }
        let m = self.m as f32;
        // a rough guess (float-to-int casts saturate); the loops make it exact
        let guess = (bound - m * self.qmin) / self.delta - 0.5 * m;
        let mut t = guess.clamp(0.0, 256.0) as u16;
        // settle float rounding against the exact estimate
        while t > 0 && self.lane_distance((t - 1) as u8) >= bound {
            t -= 1;
        }
        while t < 256 && self.lane_distance(t as u8) < bound {
            t += 1;
        }
        t
    }
}

#[inline]
fn quantize_value(v: f32, qmin: f32, delta: f32) -> u8 {
    if v <= qmin {
        0
    } else if delta <= 0.0 {
        BINS as u8
    } else {
        // non-negative, so truncation is the floor
        ((v - qmin) / delta).min(BINS as f32) as u8
    }
}

/// Quantizes 16-entry float tables into `BINS` uniform bins over
/// `[qmin, qmax]`; values above `qmax` map to 127.
pub fn quantize_tables(tables: &LookupTables, qmin: f32, qmax: f32) -> Result<QuantizedTables> {
    if tables.k() != BLOCK {
        return Err(Error::Unsupported(format!(
            "quantized tables need 16 entries per table, got {}",
            tables.k()
        )));
    }
    if !(qmax >= qmin) {
        return invalid(format!("qmax {} is below qmin {}", qmax, qmin));
    }
    let delta = (qmax - qmin) / BINS as f32;
    let entries = tables
        .as_slice()
        .iter()
        .map(|&v| quantize_value(v, qmin, delta))
        .collect();
    let table_minima = (0..tables.m())
        .map(|j| tables.table(j).iter().copied().fold(f32::INFINITY, f32::min))
        .collect();
    Ok(QuantizedTables {
        m: tables.m(),
        entries,
        qmin,
        qmax,
        delta,
        table_minima,
    })
}

/// The `r`-th smallest float distance among the first `init` candidates, or
/// the largest seen when fewer than `r` are available. With no candidates,
/// returns `fallback` (typically [`LookupTables::max_distance`]).
pub fn find_qmax(candidates: impl IntoIterator<Item = f32>, r: usize, init: usize, fallback: f32) -> f32 {
    let mut heap = NeighborHeap::new(r.max(1));
    for (i, d) in candidates.into_iter().take(init.max(1)).enumerate() {
        heap.offer(i as u64, d);
    }
    heap.peek().map_or(fallback, |n| n.distance)
}

/// Which block kernel to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    Scalar,
    /// 16-lane byte shuffles on 128-bit registers (SSSE3).
    Simd128,
    /// Two rows per iteration, one per 128-bit half of a 256-bit register (AVX2).
    Simd256,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Scalar, Kernel::Simd128, Kernel::Simd256];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Scalar => "scalar",
            Kernel::Simd128 => "128",
            Kernel::Simd256 => "256",
        }
    }

    pub fn parse(s: &str) -> Option<Kernel> {
        match s.trim().to_ascii_lowercase().as_str() {
            "scalar" => Some(Kernel::Scalar),
            "128" | "sse" | "ssse3" => Some(Kernel::Simd128),
            "256" | "avx" | "avx2" => Some(Kernel::Simd256),
            _ => None,
        }
    }

    pub fn is_available(self) -> bool {
        match self {
            Kernel::Scalar => true,
            #[cfg(target_arch = "x86_64")]
            Kernel::Simd128 => is_x86_feature_detected!("ssse3"),
            #[cfg(target_arch = "x86_64")]
            Kernel::Simd256 => is_x86_feature_detected!("avx2"),
            #[cfg(not(target_arch = "x86_64"))]
            _ => false,
        }
    }

    /// Widest kernel the CPU supports.
    pub fn best_available() -> Kernel {
        [Kernel::Simd256, Kernel::Simd128]
            .into_iter()
            .find(|k| k.is_available())
            .unwrap_or(Kernel::Scalar)
    }

    /// The kernel named by `QADC_KERNEL` (`scalar`, `128`, `256`), falling
    /// back to the scalar kernel if the requested one is unsupported; the
    /// widest available kernel when unset. Resolved once per process.
    pub fn detect() -> Kernel {
        static KERNEL: OnceLock<Kernel> = OnceLock::new();
        *KERNEL.get_or_init(|| {
            match std::env::var("QADC_KERNEL").ok().as_deref().and_then(Kernel::parse) {
                Some(k) if k.is_available() => k,
                Some(_) => Kernel::Scalar,
                None => Kernel::best_available(),
            }
        })
    }

    /// Runs the block kernel, substituting the scalar one when unsupported.
    pub fn scan_block(self, block: &[u8], qt: &QuantizedTables) -> [u8; BLOCK] {
        assert_eq!(block.len(), BLOCK * qt.m / 2, "block does not match table count");
        match self {
            #[cfg(target_arch = "x86_64")]
            Kernel::Simd128 if self.is_available() => unsafe { x86::block_128(block, qt) },
            #[cfg(target_arch = "x86_64")]
            Kernel::Simd256 if self.is_available() => unsafe { x86::block_256(block, qt) },
            _ => scan_block_scalar(block, qt),
        }
    }
}

/// Lane `l` is the saturating sum of `qt[j][sub-code j of code l]`, added in
/// row order: table `2j` then `2j + 1` for each row `j`.
pub fn scan_block_scalar(block: &[u8], qt: &QuantizedTables) -> [u8; BLOCK] {
    let mut acc = [0u8; BLOCK];
    for (j, row) in block.chunks_exact(BLOCK).enumerate() {
        let lo = qt.table(2 * j);
        let hi = qt.table(2 * j + 1);
        for (a, &byte) in acc.iter_mut().zip(row) {
            *a = a.saturating_add(lo[(byte & 0x0f) as usize]);
            *a = a.saturating_add(hi[(byte >> 4) as usize]);
        }
    }
    acc
}

/// The widest supported vector kernel (see [`Kernel::detect`]).
pub fn scan_block_simd(block: &[u8], qt: &QuantizedTables) -> [u8; BLOCK] {
    Kernel::detect().scan_block(block, qt)
}

/// Inserts lanes of a block into the heap. `mask` has bit `l` set for lanes
/// that were below the limit when the block was tested.
struct Extractor<'a> {
    heap: &'a mut NeighborHeap,
    qt: &'a QuantizedTables,
    ids: &'a [u64],
    /// Lanes with a total strictly below this are candidates.
    limit: u16,
}

impl<'a> Extractor<'a> {
    fn new(heap: &'a mut NeighborHeap, qt: &'a QuantizedTables, ids: &'a [u64]) -> Self {
        let limit = qt.admission_limit(heap.bound());
        Self { heap, qt, ids, limit }
    }

    #[inline]
    fn limit(&self) -> u16 {
        self.limit
    }

    #[inline]
    fn extract(&mut self, block_index: usize, lanes: &[u8; BLOCK], mut mask: u32) {
        let ids = &self.ids[block_index * BLOCK..(block_index + 1) * BLOCK];
        while mask != 0 {
            let l = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            let (total, id) = (lanes[l], ids[l]);
            if (total as u16) >= self.limit || id == INVALID_ID {
                continue;
            }
            let kept = self.heap.push(Neighbor {
                id,
                distance: self.qt.lane_distance(total),
            });
            if kept && self.heap.is_full() {
                self.limit = self.qt.admission_limit(self.heap.bound()).min(255);
            }
        }
    }
}

/// Scans a transposed list with quantized tables. Lane totals are converted
/// to distances with [`QuantizedTables::lane_distance`] before insertion;
/// admission is decided on the integer totals.
pub fn qadc_scan(list: &TransposedList, qt: &QuantizedTables, heap: &mut NeighborHeap, kernel: Kernel) -> Result<()> {
    if list.m() != qt.m() {
        return invalid(format!("list of m={} scanned with {} tables", list.m(), qt.m()));
    }
    if list.is_empty() || heap.capacity() == 0 {
        return Ok(());
    }
    let mut ex = Extractor::new(heap, qt, list.padded_ids());
    match kernel {
        #[cfg(target_arch = "x86_64")]
        Kernel::Simd128 if kernel.is_available() => unsafe { x86::scan_128(list, qt, &mut ex) },
        #[cfg(target_arch = "x86_64")]
        Kernel::Simd256 if kernel.is_available() => unsafe { x86::scan_256(list, qt, &mut ex) },
        _ => {
            for bi in 0..list.n_blocks() {
                let lanes = scan_block_scalar(list.block(bi), qt);
                let limit = ex.limit();
                let mask = lanes
                    .iter()
                    .enumerate()
                    .filter(|&(_, &t)| (t as u16) < limit)
                    .fold(0u32, |acc, (l, _)| acc | 1 << l);
                if mask != 0 {
                    ex.extract(bi, &lanes, mask);
                }
            }
        }
    }
    Ok(())
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    use super::{Extractor, QuantizedTables, TransposedList, BLOCK};

    #[inline]
    #[target_feature(enable = "ssse3")]
    unsafe fn lookup_add_128(comps: __m128i, table: __m128i, acc: __m128i, mask: __m128i) -> __m128i {
        let masked = _mm_and_si128(comps, mask);
        let partial = _mm_shuffle_epi8(table, masked);
        _mm_adds_epu8(acc, partial)
    }

    #[inline]
    #[target_feature(enable = "ssse3")]
    unsafe fn accumulate_128(block: *const u8, tables: &[__m128i]) -> __m128i {
        let mask = _mm_set1_epi8(0x0f);
        let mut acc = _mm_setzero_si128();
        for (j, pair) in tables.chunks_exact(2).enumerate() {
            let comps = _mm_loadu_si128(block.add(j * BLOCK) as *const __m128i);
            acc = lookup_add_128(comps, pair[0], acc, mask);
            let comps = _mm_srli_epi16(comps, 4);
            acc = lookup_add_128(comps, pair[1], acc, mask);
        }
        acc
    }

    #[target_feature(enable = "ssse3")]
    unsafe fn load_tables_128(qt: &QuantizedTables) -> Vec<__m128i> {
        (0..qt.m())
            .map(|j| _mm_loadu_si128(qt.table(j).as_ptr() as *const __m128i))
            .collect()
    }

    /// Bit `l` set when lane `l` is strictly below `limit`.
    #[inline]
    #[target_feature(enable = "ssse3")]
    unsafe fn below_mask_128(acc: __m128i, limit: u16) -> u32 {
        match limit {
            0 => 0,
            256.. => 0xffff,
            t => {
                let cap = _mm_set1_epi8((t - 1) as u8 as i8);
                let le = _mm_cmpeq_epi8(_mm_min_epu8(acc, cap), acc);
                _mm_movemask_epi8(le) as u32
            }
        }
    }

    #[inline]
    unsafe fn store_128(acc: __m128i) -> [u8; BLOCK] {
        let mut out = [0u8; BLOCK];
        _mm_storeu_si128(out.as_mut_ptr() as *mut __m128i, acc);
        out
    }

    #[target_feature(enable = "ssse3")]
    pub(super) unsafe fn block_128(block: &[u8], qt: &QuantizedTables) -> [u8; BLOCK] {
        let tables = load_tables_128(qt);
        store_128(accumulate_128(block.as_ptr(), &tables))
    }

    #[target_feature(enable = "ssse3")]
    pub(super) unsafe fn scan_128(list: &TransposedList, qt: &QuantizedTables, ex: &mut Extractor) {
        let tables = load_tables_128(qt);
        let bb = list.block_bytes();
        let base = list.blocks().as_ptr();
        for bi in 0..list.n_blocks() {
            let acc = accumulate_128(base.add(bi * bb), &tables);
            let mask = below_mask_128(acc, ex.limit());
            if mask != 0 {
                ex.extract(bi, &store_128(acc), mask);
            }
        }
    }

    /// Tables for the 256-bit kernel: for row pair `p`, the low-nibble lookup
    /// uses `[D^{4p} | D^{4p+2}]` and the high-nibble one `[D^{4p+1} | D^{4p+3}]`.
    #[target_feature(enable = "avx2")]
    unsafe fn load_tables_256(qt: &QuantizedTables) -> (Vec<__m256i>, Option<(__m128i, __m128i)>) {
        let rows = qt.m() / 2;
        let load = |j: usize| _mm_loadu_si128(qt.table(j).as_ptr() as *const __m128i);
        let pairs = (0..rows / 2)
            .flat_map(|p| {
                let lo = _mm256_set_m128i(load(4 * p + 2), load(4 * p));
                let hi = _mm256_set_m128i(load(4 * p + 3), load(4 * p + 1));
                [lo, hi]
            })
            .collect();
        let tail = (rows % 2 == 1).then(|| (load(2 * (rows - 1)), load(2 * rows - 1)));
        (pairs, tail)
    }

    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn accumulate_256(block: *const u8, pairs: &[__m256i], tail: Option<(__m128i, __m128i)>) -> __m128i {
        let mask = _mm256_set1_epi8(0x0f);
        let mut acc = _mm256_setzero_si256();
        for (p, t) in pairs.chunks_exact(2).enumerate() {
            let comps = _mm256_loadu_si256(block.add(p * 2 * BLOCK) as *const __m256i);
            let masked = _mm256_and_si256(comps, mask);
            acc = _mm256_adds_epu8(acc, _mm256_shuffle_epi8(t[0], masked));
            let shifted = _mm256_and_si256(_mm256_srli_epi16(comps, 4), mask);
            acc = _mm256_adds_epu8(acc, _mm256_shuffle_epi8(t[1], shifted));
        }
        let mut out = _mm_adds_epu8(_mm256_castsi256_si128(acc), _mm256_extracti128_si256(acc, 1));
        if let Some((lo, hi)) = tail {
            let mask = _mm_set1_epi8(0x0f);
            let comps = _mm_loadu_si128(block.add(pairs.len() * BLOCK) as *const __m128i);
            out = lookup_add_128(comps, lo, out, mask);
            out = lookup_add_128(_mm_srli_epi16(comps, 4), hi, out, mask);
        }
        out
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn block_256(block: &[u8], qt: &QuantizedTables) -> [u8; BLOCK] {
        let (pairs, tail) = load_tables_256(qt);
        store_128(accumulate_256(block.as_ptr(), &pairs, tail))
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn scan_256(list: &TransposedList, qt: &QuantizedTables, ex: &mut Extractor) {
        let (pairs, tail) = load_tables_256(qt);
        let bb = list.block_bytes();
        let base = list.blocks().as_ptr();
        for bi in 0..list.n_blocks() {
            let acc = accumulate_256(base.add(bi * bb), &pairs, tail);
            let mask = below_mask_128(acc, ex.limit());
            if mask != 0 {
                ex.extract(bi, &store_128(acc), mask);
            }
        }
    }
}
