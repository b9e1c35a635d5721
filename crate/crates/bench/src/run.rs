use std::time::Duration;

use anyhow::{bail, Context, Result};

use quickadc::ivf::IvfIndex;
use quickadc::pq::{train_opq, train_pq};
use quickadc::search::Searcher;
use quickadc::vecio::{read_ivecs, read_vectors};
use quickadc::{Codebook, Dataset, GroundTruth, Kernel, Layout, Method, PhaseTimings, ProductQuantizer, SearchParams};

use crate::config::{BenchConfig, ScanMethod};
use crate::recall::recall_at;
use crate::report::{BenchReport, PhaseMs, Stat};

pub const RECALL_DEPTHS: [usize; 3] = [1, 10, 100];

pub struct BenchData {
    pub learn: Dataset,
    pub base: Dataset,
    pub queries: Dataset,
    pub gt: GroundTruth,
}

impl BenchData {
    pub fn load(cfg: &BenchConfig) -> Result<Self> {
        let need = |p: &Option<std::path::PathBuf>, what: &str| -> Result<std::path::PathBuf> {
            p.clone().with_context(|| format!("no {} path configured", what))
        };
        let base_path = need(&cfg.base, "base")?;
        let base = read_vectors(&base_path, cfg.base_limit)
            .with_context(|| format!("reading {}", base_path.display()))?;
        let learn = match &cfg.learn {
            Some(p) => read_vectors(p, cfg.learn_limit).with_context(|| format!("reading {}", p.display()))?,
            None => base.truncated(cfg.learn_limit.unwrap_or(base.count())),
        };
        let qp = need(&cfg.query, "query")?;
        let queries = read_vectors(&qp, Some(cfg.max_queries))
            .with_context(|| format!("reading {}", qp.display()))?;
        let gp = need(&cfg.groundtruth, "groundtruth")?;
        let gt = read_ivecs(&gp).with_context(|| format!("reading {}", gp.display()))?;
        Self::new(learn, base, queries, gt)
    }

    pub fn new(learn: Dataset, base: Dataset, queries: Dataset, gt: GroundTruth) -> Result<Self> {
        if learn.dim() != base.dim() || queries.dim() != base.dim() {
            bail!(
                "dimension mismatch: learn {} base {} query {}",
                learn.dim(),
                base.dim(),
                queries.dim()
            );
        }
        if gt.count() < queries.count() {
            bail!("ground truth has {} rows for {} queries", gt.count(), queries.count());
        }
        gt.validate(base.count())?;
        Ok(Self { learn, base, queries, gt })
    }
}

/// Trained quantizers: the coarse codebook (if any) and the product
/// quantizer, trained on learning-set residuals when a coarse codebook is
/// present.
pub struct Model {
    pub coarse: Option<Codebook>,
    pub pq: ProductQuantizer,
}

pub fn residuals(coarse: &Codebook, data: &Dataset) -> Result<Dataset> {
    let mut out = Vec::with_capacity(data.data().len());
    for x in data.rows() {
        let (c, _) = coarse.assign(x)?;
        out.extend(x.iter().zip(coarse.centroid(c)).map(|(a, b)| a - b));
    }
    Ok(Dataset::new(data.dim(), out)?)
}

pub fn train_model(learn: &Dataset, cfg: &BenchConfig) -> Result<Model> {
    cfg.validate()?;
    let (coarse, set) = if cfg.coarse_k > 0 {
        let coarse = IvfIndex::train_coarse(learn, cfg.coarse_k, cfg.kmeans_iters, cfg.seed)?;
        let res = residuals(&coarse, learn)?;
        (Some(coarse), res)
    } else {
        (None, learn.clone())
    };
    let pq = if cfg.opq {
        train_opq(&set, cfg.m, cfg.b, cfg.kmeans_iters, cfg.opq_iters, cfg.seed.wrapping_add(1))?.pq
    } else {
        train_pq(&set, cfg.m, cfg.b, cfg.kmeans_iters, cfg.seed.wrapping_add(1))?
    };
    Ok(Model { coarse, pq })
}

pub fn layout_for(method: ScanMethod) -> Layout {
    match method {
        ScanMethod::Adc => Layout::Standard,
        ScanMethod::Qadc => Layout::Transposed16,
    }
}

pub fn build_index(model: &Model, base: &Dataset, layout: Layout) -> Result<IvfIndex> {
    Ok(match &model.coarse {
        Some(c) => IvfIndex::build(&model.pq, c.clone(), base, layout)?,
        None => IvfIndex::flat(&model.pq, base, layout)?,
    })
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Runs every query single-threaded `cfg.repeats` times and reports recall
/// and per-query phase times (mean/std over repeats).
pub fn evaluate(
    pq: &ProductQuantizer,
    index: &IvfIndex,
    queries: &Dataset,
    gt: &GroundTruth,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    cfg.validate()?;
    let queries = queries.truncated(cfg.max_queries.min(queries.count()));
    let kernel = Kernel::detect();
    let params = SearchParams {
        r: cfg.r,
        ma: cfg.ma,
        init: cfg.init,
        method: Method::from(cfg.method),
        kernel,
    };
    let mut searcher = Searcher::new(pq, index)?;
    let mut per_phase: [Vec<f64>; 4] = Default::default();
    let mut results = Vec::new();
    for rep in 0..cfg.repeats {
        let mut sum = PhaseTimings::default();
        let mut ids = Vec::with_capacity(queries.count());
        for q in queries.rows() {
            let res = searcher.search(q, &params)?;
            sum += res.timings;
            if rep == 0 {
                ids.push(res.ids());
            }
        }
        if rep == 0 {
            results = ids;
        }
        let n = queries.count().max(1) as f64;
        for (v, d) in per_phase.iter_mut().zip([sum.index, sum.tables, sum.scan, sum.total]) {
            v.push(ms(d) / n);
        }
    }
    let mut recall = std::collections::BTreeMap::new();
    for rp in RECALL_DEPTHS.into_iter().filter(|&rp| rp <= cfg.r) {
        recall.insert(rp, recall_at(&results, gt, rp)?);
    }
    Ok(BenchReport {
        label: cfg.label(),
        queries: queries.count(),
        repeats: cfg.repeats,
        kernel: match cfg.method {
            ScanMethod::Qadc => kernel.name().to_string(),
            ScanMethod::Adc => "float".to_string(),
        },
        recall_at: recall,
        phase_ms: PhaseMs {
            index: Stat::of(&per_phase[0]),
            tables: Stat::of(&per_phase[1]),
            scan: Stat::of(&per_phase[2]),
            total: Stat::of(&per_phase[3]),
        },
    })
}

pub fn run_bench_on(data: &BenchData, cfg: &BenchConfig) -> Result<BenchReport> {
    let model = train_model(&data.learn, cfg)?;
    let index = build_index(&model, &data.base, layout_for(cfg.method))?;
    evaluate(&model.pq, &index, &data.queries, &data.gt, cfg)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let data = BenchData::load(cfg)?;
    run_bench_on(&data, cfg)
}

/// Exhaustive float-ADC runs for each `m x b` shape, as in the code-size
/// tradeoff table. An empty shape list yields no rows.
pub fn sweep_configs(data: &BenchData, base: &BenchConfig, shapes: &[(usize, u32)]) -> Result<Vec<BenchReport>> {
    shapes
        .iter()
        .map(|&(m, b)| {
            let cfg = BenchConfig {
                m,
                b,
                coarse_k: 0,
                ma: 1,
                method: ScanMethod::Adc,
                ..base.clone()
            };
            run_bench_on(data, &cfg)
        })
        .collect()
}

pub fn parse_shape(s: &str) -> Result<(usize, u32)> {
    let (m, b) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("shape '{}' is not of the form MxB", s))?;
    Ok((m.trim().parse()?, b.trim().parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("16x4").unwrap(), (16, 4));
        assert_eq!(parse_shape("4X16").unwrap(), (4, 16));
        assert!(parse_shape("16").is_err());
        assert!(parse_shape("ax4").is_err());
    }
}
