//! Reference asymmetric distance computation: float lookup tables and the
//! scalar scan over standard-layout codes, collecting results in a bounded
//! max-heap.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{invalid, Result};
use crate::kmeans::squared_l2;
use crate::pq::{subcode, ProductQuantizer};

/// Per-query distance tables: entry `(j, i)` is the squared distance between
/// sub-vector `j` of the (rotated) query and centroid `i` of codebook `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTables {
    m: usize,
    k: usize,
    data: Vec<f32>,
}

impl LookupTables {
    pub fn from_raw(m: usize, k: usize, data: Vec<f32>) -> Result<Self> {
        if m == 0 || k == 0 || data.len() != m * k {
            return invalid(format!("{} table entries for m={} k={}", data.len(), m, k));
        }
        Ok(Self { m, k, data })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn table(&self, j: usize) -> &[f32] {
        &self.data[j * self.k..(j + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Sum of the per-table maxima: the largest distance any code can have.
    pub fn max_distance(&self) -> f32 {
        self.data
            .chunks_exact(self.k)
            .map(|t| t.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .sum()
    }

    pub fn scaled(&self, alpha: f32) -> Self {
        Self {
            m: self.m,
            k: self.k,
            data: self.data.iter().map(|x| x * alpha).collect(),
        }
    }
}

/// Builds the `m` tables for a query already expressed in the quantizer's
/// rotated space.
pub fn compute_tables(pq: &ProductQuantizer, rotated_query: &[f32]) -> Result<LookupTables> {
    if rotated_query.len() != pq.d() {
        return invalid(format!(
            "query of dim {} for a quantizer of dim {}",
            rotated_query.len(),
            pq.d()
        ));
    }
    let mut tables = LookupTables {
        m: pq.m(),
        k: pq.k(),
        data: vec![0.0; pq.m() * pq.k()],
    };
    compute_tables_into(pq, rotated_query, &mut tables);
    Ok(tables)
}

pub(crate) fn compute_tables_into(pq: &ProductQuantizer, rotated_query: &[f32], out: &mut LookupTables) {
    let dsub = pq.dsub();
    let k = pq.k();
    for (j, (table, sub)) in out
        .data
        .chunks_exact_mut(k)
        .zip(rotated_query.chunks_exact(dsub))
        .enumerate()
    {
        pq.codebook(j).distances_into(sub, table);
    }
}

/// `sum_j D^j[c[j]]`, accumulated in ascending `j`.
#[inline]
pub fn adc_distance_packed(packed: &[u8], b: u32, tables: &LookupTables) -> f32 {
    let mut d = 0.0f32;
    for j in 0..tables.m {
        d += tables.data[j * tables.k + subcode(packed, b, j)];
    }
    d
}

pub fn adc_distance(code: &crate::pq::PqCode, tables: &LookupTables) -> Result<f32> {
    if code.m() != tables.m {
        return invalid(format!("code of {} components for {} tables", code.m(), tables.m));
    }
    let mut d = 0.0f32;
    for (j, &c) in code.codes().iter().enumerate() {
        d += tables.data[j * tables.k + c as usize];
    }
    Ok(d)
}

/// Scans standard-layout codes (`codes` holds `ids.len()` packed codes back
/// to back) and offers each distance to the heap.
pub fn scan_list(ids: &[u64], codes: &[u8], b: u32, tables: &LookupTables, heap: &mut NeighborHeap) {
    let m = tables.m;
    let bytes = crate::pq::code_bytes(m, b);
    debug_assert_eq!(codes.len(), ids.len() * bytes);
    match b {
        4 => scan_list_4(ids, codes, tables, heap),
        8 => scan_list_8(ids, codes, tables, heap),
        _ => {
            for (&id, code) in ids.iter().zip(codes.chunks_exact(bytes)) {
                heap.offer(id, adc_distance_packed(code, b, tables));
            }
        }
    }
}

// Same summation order as `adc_distance_packed`, so distances are identical.
fn scan_list_4(ids: &[u64], codes: &[u8], tables: &LookupTables, heap: &mut NeighborHeap) {
    let m = tables.m;
    let t = &tables.data[..m * 16];
    for (&id, code) in ids.iter().zip(codes.chunks_exact(m / 2)) {
        let mut d = 0.0f32;
        for (p, &byte) in code.iter().enumerate() {
            d += t[p * 32 + (byte & 0x0f) as usize];
            d += t[p * 32 + 16 + (byte >> 4) as usize];
        }
        heap.offer(id, d);
    }
}

fn scan_list_8(ids: &[u64], codes: &[u8], tables: &LookupTables, heap: &mut NeighborHeap) {
    let m = tables.m;
    let t = &tables.data[..m * 256];
    for (&id, code) in ids.iter().zip(codes.chunks_exact(m)) {
        let mut d = 0.0f32;
        for (j, &c) in code.iter().enumerate() {
            d += t[j * 256 + c as usize];
        }
        heap.offer(id, d);
    }
}

/// A candidate and its distance. Ordered by distance, then by id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f32,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Keeps the `capacity` smallest neighbors seen so far.
#[derive(Debug, Clone)]
pub struct NeighborHeap {
    capacity: usize,
    heap: BinaryHeap<Neighbor>,
}

impl NeighborHeap {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            heap: BinaryHeap::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.heap.len() >= self.capacity
    }

    /// The current worst kept neighbor.
    pub fn peek(&self) -> Option<&Neighbor> {
        self.heap.peek()
    }

    /// Distance a candidate must not exceed to be considered; infinite while
    /// the heap is not full.
    #[inline]
    pub fn bound(&self) -> f32 {
        if self.is_full() {
            self.heap.peek().map_or(f32::NEG_INFINITY, |n| n.distance)
        } else {
            f32::INFINITY
        }
    }

    /// Inserts the candidate if it beats the current worst. Returns whether it
    /// was kept.
    #[inline]
    pub fn offer(&mut self, id: u64, distance: f32) -> bool {
        if distance > self.bound() {
            return false;
        }
        self.push(Neighbor { id, distance })
    }

    pub fn push(&mut self, n: Neighbor) -> bool {
        if self.capacity == 0 {
            return false;
        }
        if self.heap.len() < self.capacity {
            self.heap.push(n);
            return true;
        }
        let mut top = self.heap.peek_mut().expect("full heap is non-empty");
        if n < *top {
            *top = n;
            true
        } else {
            false
        }
    }

    /// Removes and returns the worst kept neighbor.
    pub fn pop(&mut self) -> Option<Neighbor> {
        self.heap.pop()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Neighbor> {
        self.heap.iter()
    }

    /// Kept neighbors, nearest first.
    pub fn into_sorted_vec(self) -> Vec<Neighbor> {
        self.heap.into_sorted_vec()
    }
}

/// Squared distance between a rotated query and a code's reconstruction.
pub fn decoded_distance(pq: &ProductQuantizer, rotated_query: &[f32], packed: &[u8]) -> f32 {
    squared_l2(rotated_query, &pq.decode_rotated(packed))
}
