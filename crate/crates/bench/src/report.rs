use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Mean and population standard deviation of one phase across repeats, in
/// milliseconds per query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(samples: &[f64]) -> Stat {
        if samples.is_empty() {
            return Stat::default();
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        if samples.len() == 1 {
            return Stat { mean, std: 0.0 };
        }
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseMs {
    pub index: Stat,
    pub tables: Stat,
    pub scan: Stat,
    pub total: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub queries: usize,
    pub repeats: usize,
    pub kernel: String,
    /// R' -> Recall@R'. Only depths not exceeding R are present.
    pub recall_at: BTreeMap<usize, f64>,
    pub phase_ms: PhaseMs,
}

pub const TABLE_HEADER: &str = "| Config | R@1 | R@10 | R@100 | Index | Tables | Scan | Total |";

impl BenchReport {
    pub fn recall(&self, r_prime: usize) -> Option<f64> {
        self.recall_at.get(&r_prime).copied()
    }

    /// One markdown row: label, recall columns, then per-phase times.
    pub fn table_row(&self) -> String {
        let rec = |r| self.recall(r).map_or("-".to_string(), |v| format!("{:.3}", v));
        let p = &self.phase_ms;
        format!(
            "| {} | {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} |",
            self.label,
            rec(1),
            rec(10),
            rec(100),
            p.index.mean,
            p.tables.mean,
            p.scan.mean,
            p.total.mean
        )
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim()).context("parsing report record")
    }
}

pub fn render_table(reports: &[BenchReport]) -> String {
    if reports.is_empty() {
        return String::new();
    }
    let mut s = String::new();
    writeln!(s, "{}", TABLE_HEADER).unwrap();
    writeln!(s, "|---|---|---|---|---|---|---|---|").unwrap();
    for r in reports {
        writeln!(s, "{}", r.table_row()).unwrap();
    }
    s
}

pub fn parse_json_lines(text: &str) -> Result<Vec<BenchReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(BenchReport::from_json_line)
        .collect()
}
