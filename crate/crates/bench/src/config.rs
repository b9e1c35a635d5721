use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use quickadc::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScanMethod {
    Adc,
    Qadc,
}

impl From<ScanMethod> for Method {
    fn from(m: ScanMethod) -> Method {
        match m {
            ScanMethod::Adc => Method::Adc,
            ScanMethod::Qadc => Method::Qadc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub base: Option<PathBuf>,
    pub learn: Option<PathBuf>,
    pub query: Option<PathBuf>,
    pub groundtruth: Option<PathBuf>,
    pub m: usize,
    pub b: u32,
    pub opq: bool,
    pub opq_iters: usize,
    /// Coarse cells; 0 scans the whole database (no inverted index).
    pub coarse_k: usize,
    pub ma: usize,
    pub r: usize,
    pub init: usize,
    pub method: ScanMethod,
    pub seed: u64,
    pub repeats: usize,
    pub kmeans_iters: usize,
    /// Leading queries used from the query file.
    pub max_queries: usize,
    pub learn_limit: Option<usize>,
    pub base_limit: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            base: None,
            learn: None,
            query: None,
            groundtruth: None,
            m: 16,
            b: 4,
            opq: false,
            opq_iters: quickadc::pq::DEFAULT_OPQ_ITERS,
            coarse_k: 0,
            ma: 1,
            r: 100,
            init: 200,
            method: ScanMethod::Qadc,
            seed: 0,
            repeats: 1,
            kmeans_iters: 20,
            max_queries: 1000,
            learn_limit: None,
            base_limit: None,
        }
    }
}

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("parsing bench config")?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("m", self.m),
            ("R", self.r),
            ("init", self.init),
            ("repeats", self.repeats),
            ("kmeans_iters", self.kmeans_iters),
            ("max_queries", self.max_queries),
        ];
        for (name, v) in counts {
            if v == 0 {
                bail!("{} must be positive", name);
            }
        }
        if !quickadc::pq::SUPPORTED_BITS.contains(&self.b) {
            bail!("b={} is not one of {:?}", self.b, quickadc::pq::SUPPORTED_BITS);
        }
        if self.method == ScanMethod::Qadc && self.b != 4 {
            bail!("qadc needs b=4 sub-quantizers, got b={}", self.b);
        }
        if self.coarse_k > 0 && (self.ma == 0 || self.ma > self.coarse_k) {
            bail!("ma={} must be in 1..={}", self.ma, self.coarse_k);
        }
        Ok(())
    }

    /// Short label, e.g. `OPQ 16x4 QADC K=256 ma=24`.
    pub fn label(&self) -> String {
        let mut s = format!(
            "{}{}x{} {}",
            if self.opq { "OPQ " } else { "PQ " },
            self.m,
            self.b,
            match self.method {
                ScanMethod::Adc => "ADC",
                ScanMethod::Qadc => "QADC",
            }
        );
        if self.coarse_k > 0 {
            s.push_str(&format!(" K={} ma={}", self.coarse_k, self.ma));
        }
        s
    }
}
