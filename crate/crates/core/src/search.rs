//! Query pipeline: select cells (Index), build lookup tables (Tables), scan
//! the selected lists (Scan). Each phase is timed separately.

use std::time::{Duration, Instant};

use crate::adc::{compute_tables_into, scan_list, LookupTables, Neighbor, NeighborHeap};
use crate::error::{invalid, Error, Result};
use crate::ivf::{InvertedList, IvfIndex};
use crate::pq::ProductQuantizer;
use crate::qadc::{find_qmax, qadc_scan, quantize_tables, Kernel, QuantizedTables, BINS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Float tables, scalar scan over standard-layout codes.
    Adc,
    /// Quantized tables, shuffle scan over block-transposed 4-bit codes.
    Qadc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Adc => "adc",
            Method::Qadc => "qadc",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s.to_ascii_lowercase().as_str() {
            "adc" => Some(Method::Adc),
            "qadc" => Some(Method::Qadc),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SearchParams {
    /// Neighbors returned.
    pub r: usize,
    /// Cells probed (ignored by a flat index).
    pub ma: usize,
    /// Candidates scanned with float tables to set `qmax` (QADC only).
    pub init: usize,
    pub method: Method,
    pub kernel: Kernel,
}

impl SearchParams {
    pub fn new(method: Method, r: usize, ma: usize) -> Self {
        Self {
            r,
            ma,
            init: 200,
            method,
            kernel: Kernel::detect(),
        }
    }

    pub fn with_init(mut self, init: usize) -> Self {
        self.init = init;
        self
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = kernel;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub index: Duration,
    pub tables: Duration,
    pub scan: Duration,
    pub total: Duration,
}

impl std::ops::AddAssign for PhaseTimings {
    fn add_assign(&mut self, o: Self) {
        self.index += o.index;
        self.tables += o.tables;
        self.scan += o.scan;
        self.total += o.total;
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    /// Nearest first; ties by lower id.
    pub neighbors: Vec<Neighbor>,
    pub timings: PhaseTimings,
}

impl SearchResult {
    pub fn ids(&self) -> Vec<u64> {
        self.neighbors.iter().map(|n| n.id).collect()
    }
}

/// Per-thread query state over a shared index. Table buffers are reused
/// across queries.
pub struct Searcher<'a> {
    pq: &'a ProductQuantizer,
    index: &'a IvfIndex,
    tables: Vec<LookupTables>,
    rotated: Vec<f32>,
}

impl<'a> Searcher<'a> {
    pub fn new(pq: &'a ProductQuantizer, index: &'a IvfIndex) -> Result<Self> {
        if pq.d() != index.d() || pq.m() != index.m() || pq.b() != index.b() {
            return invalid("quantizer does not match the index");
        }
        Ok(Self {
            pq,
            index,
            tables: Vec::new(),
            rotated: vec![0.0; pq.d()],
        })
    }

    pub fn search(&mut self, query: &[f32], params: &SearchParams) -> Result<SearchResult> {
        let layout_ok = match params.method {
            Method::Adc => self.index.layout() == crate::ivf::Layout::Standard,
            Method::Qadc => self.index.layout() == crate::ivf::Layout::Transposed16,
        };
        if !layout_ok {
            return Err(Error::Unsupported(format!(
                "{} search over a {:?} index",
                params.method.name(),
                self.index.layout()
            )));
        }
        if params.r == 0 {
            return invalid("R must be at least 1");
        }
        let mut timings = PhaseTimings::default();
        let start = Instant::now();

        let probe = if self.index.is_flat() {
            self.index.probe(query, 1)?
        } else {
            let t = Instant::now();
            let p = self.index.probe(query, params.ma)?;
            timings.index = t.elapsed();
            p
        };
        let n_cells = probe.cells.len();

        let t = Instant::now();
        let (m, k) = (self.pq.m(), self.pq.k());
        if self.tables.len() < n_cells {
            self.tables
                .resize_with(n_cells, || LookupTables::from_raw(m, k, vec![0.0; m * k]).unwrap());
        }
        for i in 0..n_cells {
            self.pq.rotate_into(probe.residual(i), &mut self.rotated);
            compute_tables_into(self.pq, &self.rotated, &mut self.tables[i]);
        }
        let quantized = match params.method {
            Method::Adc => Vec::new(),
            Method::Qadc => self.quantize(&probe.cells, params)?,
        };
        timings.tables = t.elapsed();

        let t = Instant::now();
        let mut heap = NeighborHeap::new(params.r);
        for (i, &cell) in probe.cells.iter().enumerate() {
            match self.index.list(cell) {
                InvertedList::Standard { ids, codes } => {
                    scan_list(ids, codes, self.pq.b(), &self.tables[i], &mut heap);
                }
                InvertedList::Transposed(list) => {
                    qadc_scan(list, &quantized[i], &mut heap, params.kernel)?;
                }
            }
        }
        let neighbors = heap.into_sorted_vec();
        timings.scan = t.elapsed();
        timings.total = start.elapsed();
        Ok(SearchResult { neighbors, timings })
    }

    /// One `qmax` per query from the first `init` candidates in probe order;
    /// `qmin` per cell from that cell's tables.
    fn quantize(&self, cells: &[usize], params: &SearchParams) -> Result<Vec<QuantizedTables>> {
        let mut remaining = params.init.max(1);
        let mut prefix = Vec::with_capacity(remaining);
        for (i, &cell) in cells.iter().enumerate() {
            if remaining == 0 {
                break;
            }
            if let InvertedList::Transposed(list) = self.index.list(cell) {
                let before = prefix.len();
                prefix.extend(list.float_distances(&self.tables[i], remaining));
                remaining -= prefix.len() - before;
            }
        }
        let qmax = find_qmax(prefix, params.r, params.init, self.tables[0].max_distance());

        let mut reference_delta = None;
        let mut out = Vec::with_capacity(cells.len());
        for tables in &self.tables[..cells.len()] {
            let qmin = tables.min_value();
            let cell_qmax = if qmax > qmin {
                qmax
            } else {
                // cell lies entirely beyond qmax; keep the bin width of
                // earlier cells so its estimates stay comparable
                reference_delta.map_or(qmin, |d: f32| qmin + d * BINS as f32)
            };
            let q = quantize_tables(tables, qmin, cell_qmax)?;
            if reference_delta.is_none() && q.delta() > 0.0 {
                reference_delta = Some(q.delta());
            }
            out.push(q);
        }
        Ok(out)
    }
}

/// One-shot convenience wrapper around [`Searcher`].
pub fn search(
    index: &IvfIndex,
    pq: &ProductQuantizer,
    query: &[f32],
    params: &SearchParams,
) -> Result<SearchResult> {
    Searcher::new(pq, index)?.search(query, params)
}
