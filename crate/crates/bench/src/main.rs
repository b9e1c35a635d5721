use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use quickadc::ivf::IvfIndex;
use quickadc::search::Searcher;
use quickadc::vecio::{read_ivecs, read_vectors, write_fvecs, write_ivecs};
use quickadc::{Codebook, Dataset, GroundTruth, Kernel, Layout, Method, ProductQuantizer, SearchParams};
use quickadc_bench::run::{build_index, parse_shape, train_model, Model};
use quickadc_bench::synth::{exact_knn, generate, SynthSpec};
use quickadc_bench::{recall_at, render_table, run_bench, sweep_configs, BenchConfig, BenchData, BenchReport, ScanMethod};

/// Product-quantization ANN search: training, indexing and benchmarks.
///
/// The scan kernel can be pinned with QADC_KERNEL=scalar|128|256.
#[derive(Parser)]
#[command(name = "qadc", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a (O)PQ model and optionally a coarse quantizer.
    Train(TrainArgs),
    /// Encode a base set into an index file.
    Build(BuildArgs),
    /// Search an index, report timings and (with ground truth) recall.
    Query(QueryArgs),
    /// Full train/build/query run for one configuration.
    Bench(BenchArgs),
    /// Exhaustive runs over several m x b shapes.
    Sweep(SweepArgs),
    /// Write a synthetic SIFT-like corpus with exact ground truth.
    Synth(SynthArgs),
    /// Compute exact nearest-neighbor ground truth by brute force.
    Gt(GtArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Standard,
    Transposed,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Layout {
        match l {
            LayoutArg::Standard => Layout::Standard,
            LayoutArg::Transposed => Layout::Transposed16,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    learn: PathBuf,
    #[arg(long)]
    learn_limit: Option<usize>,
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long, default_value_t = 4)]
    b: u32,
    #[arg(long)]
    opq: bool,
    #[arg(long, default_value_t = quickadc::pq::DEFAULT_OPQ_ITERS)]
    opq_iters: usize,
    /// Coarse cells; 0 trains no coarse quantizer.
    #[arg(long, default_value_t = 0)]
    coarse_k: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path of the product quantizer.
    #[arg(long)]
    out: PathBuf,
    /// Output path (.fvecs) of the coarse centroids.
    #[arg(long)]
    coarse_out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    pq: PathBuf,
    /// Coarse centroids (.fvecs); omitted for an exhaustive index.
    #[arg(long)]
    coarse: Option<PathBuf>,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    base_limit: Option<usize>,
    #[arg(long, value_enum, default_value = "transposed")]
    layout: LayoutArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    pq: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 1000)]
    max_queries: usize,
    #[arg(long, default_value_t = 100)]
    r: usize,
    #[arg(long, default_value_t = 1)]
    ma: usize,
    #[arg(long, default_value_t = 200)]
    init: usize,
    #[arg(long, value_enum, default_value = "qadc")]
    method: ScanMethod,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Write result ids (.ivecs).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Overrides applied on top of the config file (or defaults).
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON config file; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    learn: Option<PathBuf>,
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long)]
    groundtruth: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    b: Option<u32>,
    #[arg(long)]
    opq: Option<bool>,
    #[arg(long)]
    coarse_k: Option<usize>,
    #[arg(long)]
    ma: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    init: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<ScanMethod>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    kmeans_iters: Option<usize>,
    #[arg(long)]
    max_queries: Option<usize>,
    #[arg(long)]
    learn_limit: Option<usize>,
    #[arg(long)]
    base_limit: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<BenchConfig> {
        let mut c = match &self.config {
            Some(p) => BenchConfig::load(p)?,
            None => BenchConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        macro_rules! set_opt {
            ($($f:ident),*) => { $( if self.$f.is_some() { c.$f = self.$f.clone(); } )* };
        }
        set!(m, b, opq, coarse_k, ma, r, init, method, seed, repeats, kmeans_iters, max_queries);
        set_opt!(base, learn, query, groundtruth, learn_limit, base_limit);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Append the line-delimited JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "16x4,8x8,4x16")]
    shapes: Vec<String>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 20_000)]
    n_learn: usize,
    #[arg(long, default_value_t = 100_000)]
    n_base: usize,
    #[arg(long, default_value_t = 1000)]
    n_query: usize,
    #[arg(long, default_value_t = 100)]
    gt_depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GtArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    depth: usize,
    #[arg(long)]
    out: PathBuf,
}

fn append_reports(path: &Option<PathBuf>, reports: &[BenchReport]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for r in reports {
        writeln!(f, "{}", r.to_json_line())?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let learn = read_vectors(&a.learn, a.learn_limit)?;
    let cfg = BenchConfig {
        m: a.m,
        b: a.b,
        opq: a.opq,
        opq_iters: a.opq_iters,
        coarse_k: a.coarse_k,
        ma: 1,
        kmeans_iters: a.iters,
        seed: a.seed,
        method: if a.b == 4 { ScanMethod::Qadc } else { ScanMethod::Adc },
        ..BenchConfig::default()
    };
    let model = train_model(&learn, &cfg)?;
    model.pq.save(&a.out)?;
    eprintln!(
        "trained {} on {} vectors, reconstruction error {:.4}",
        cfg.label(),
        learn.count(),
        model.pq.reconstruction_error(&learn)
    );
    match (&model.coarse, &a.coarse_out) {
        (Some(c), Some(p)) => write_fvecs(p, &Dataset::new(c.dim(), c.centroids().to_vec())?)?,
        (Some(_), None) => bail!("--coarse-k given without --coarse-out"),
        _ => {}
    }
    Ok(())
}

fn build(a: BuildArgs) -> Result<()> {
    let pq = ProductQuantizer::load(&a.pq)?;
    let coarse = match &a.coarse {
        Some(p) => {
            let c = read_vectors(p, None)?;
            Some(Codebook::new(c.count(), c.dim(), c.into_data())?)
        }
        None => None,
    };
    let base = read_vectors(&a.base, a.base_limit)?;
    let model = Model { coarse, pq };
    let index = build_index(&model, &base, a.layout.into())?;
    index.save(&a.out)?;
    eprintln!("indexed {} vectors into {} lists", index.len(), index.n_lists());
    Ok(())
}

fn query(a: QueryArgs) -> Result<()> {
    let pq = ProductQuantizer::load(&a.pq)?;
    let index = IvfIndex::load(&a.index)?;
    let queries = read_vectors(&a.queries, Some(a.max_queries))?;
    let params = SearchParams {
        r: a.r,
        ma: a.ma,
        init: a.init,
        method: Method::from(a.method),
        kernel: Kernel::detect(),
    };
    let mut searcher = Searcher::new(&pq, &index)?;
    let mut results = Vec::with_capacity(queries.count());
    let mut sum = quickadc::PhaseTimings::default();
    for q in queries.rows() {
        let res = searcher.search(q, &params)?;
        sum += res.timings;
        results.push(res.ids());
    }
    let n = queries.count().max(1) as f64;
    let per = |d: std::time::Duration| d.as_secs_f64() * 1e3 / n;
    println!(
        "queries={} index={:.3}ms tables={:.3}ms scan={:.3}ms total={:.3}ms",
        queries.count(),
        per(sum.index),
        per(sum.tables),
        per(sum.scan),
        per(sum.total)
    );
    if let Some(gt) = &a.gt {
        let gt = read_ivecs(gt)?;
        for rp in [1, 10, 100].into_iter().filter(|&rp| rp <= a.r) {
            println!("R@{}={:.4}", rp, recall_at(&results, &gt, rp)?);
        }
    }
    if let Some(out) = &a.out {
        let depth = a.r;
        let mut ids = Vec::with_capacity(results.len() * depth);
        for r in &results {
            for i in 0..depth {
                ids.push(r.get(i).map_or(u32::MAX, |&id| id as u32));
            }
        }
        write_ivecs(out, &GroundTruth::new(depth, ids)?)?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let report = run_bench(&cfg)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    println!("{}", report.to_json_line());
    append_reports(&a.report, &[report])
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let shapes = a
        .shapes
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_shape(s))
        .collect::<Result<Vec<_>>>()?;
    let data = BenchData::load(&cfg)?;
    let reports = sweep_configs(&data, &cfg, &shapes)?;
    print!("{}", render_table(&reports));
    for r in &reports {
        println!("{}", r.to_json_line());
    }
    append_reports(&a.report, &reports)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        dim: a.dim,
        latent: (a.dim / 4).max(1),
        ..SynthSpec::sift_like(a.n_learn, a.n_base, a.n_query, a.seed)
    };
    let data = generate(&spec);
    std::fs::create_dir_all(&a.out_dir)?;
    write_fvecs(a.out_dir.join("learn.fvecs"), &data.learn)?;
    write_fvecs(a.out_dir.join("base.fvecs"), &data.base)?;
    write_fvecs(a.out_dir.join("query.fvecs"), &data.queries)?;
    let gt = exact_knn(&data.base, &data.queries, a.gt_depth);
    write_ivecs(a.out_dir.join("groundtruth.ivecs"), &gt)?;
    eprintln!("wrote synthetic corpus to {}", a.out_dir.display());
    Ok(())
}

fn gt(a: GtArgs) -> Result<()> {
    let base = read_vectors(&a.base, None)?;
    let queries = read_vectors(&a.queries, None)?;
    write_ivecs(&a.out, &exact_knn(&base, &queries, a.depth))?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(a) => train(a),
        Cmd::Build(a) => build(a),
        Cmd::Query(a) => query(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Synth(a) => synth(a),
        Cmd::Gt(a) => gt(a),
    }
}
