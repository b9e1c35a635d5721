//! Product-quantization approximate nearest neighbor search.
//!
//! Two scan paths share one index: the reference [`adc`] scan, which sums
//! 32-bit float lookup-table entries, and the [`qadc`] scan, which works on
//! 4-bit sub-codes stored in blocks of 16 and 8-bit quantized tables held in
//! 16-lane byte-shuffle registers.

pub mod adc;
pub mod error;
pub mod ivf;
pub mod kmeans;
pub mod pq;
pub mod qadc;
pub mod search;
pub mod vecio;

pub use adc::{LookupTables, Neighbor, NeighborHeap};
pub use error::{Error, Result};
pub use ivf::{IvfIndex, Layout, ProbeSet};
pub use kmeans::Codebook;
pub use pq::{PqCode, ProductQuantizer};
pub use qadc::{Kernel, QuantizedTables, TransposedList};
pub use search::{Method, PhaseTimings, SearchParams, SearchResult};
pub use vecio::{Dataset, GroundTruth};
