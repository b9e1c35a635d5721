use anyhow::{bail, Result};
use quickadc::GroundTruth;

/// Recall@R': the fraction of queries whose true nearest neighbor (ground
/// truth rank 0) appears among the first `r_prime` results.
///
/// This is 1-NN recall, not precision-style overlap between result and
/// ground-truth sets.
pub fn recall_at(results: &[Vec<u64>], gt: &GroundTruth, r_prime: usize) -> Result<f64> {
    if r_prime == 0 {
        bail!("R' must be at least 1");
    }
    if gt.depth() == 0 || gt.count() < results.len() {
        bail!(
            "ground truth covers {} queries, {} results given",
            gt.count(),
            results.len()
        );
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let hits = results
        .iter()
        .enumerate()
        .filter(|(q, ids)| {
            let nn = gt.row(*q)[0] as u64;
            ids.iter().take(r_prime).any(|&id| id == nn)
        })
        .count();
    Ok(hits as f64 / results.len() as f64)
}
