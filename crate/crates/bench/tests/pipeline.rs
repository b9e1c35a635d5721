use quickadc_bench::report::parse_json_lines;
use quickadc_bench::run::{build_index, layout_for, train_model};
use quickadc_bench::synth::{exact_knn, generate, SynthSpec};
use quickadc_bench::{evaluate, render_table, run_bench_on, sweep_configs, BenchConfig, BenchData, ScanMethod};

fn small_data() -> BenchData {
    let spec = SynthSpec {
        dim: 32,
        latent: 8,
        clusters: 10,
        n_learn: 2000,
        n_base: 3000,
        n_query: 40,
        spread: 0.5,
        sift_normalize: false,
        seed: 3,
    };
    let s = generate(&spec);
    let gt = exact_knn(&s.base, &s.queries, 100);
    BenchData::new(s.learn, s.base, s.queries, gt).unwrap()
}

fn cfg(method: ScanMethod, m: usize, b: u32) -> BenchConfig {
    BenchConfig { m, b, method, kmeans_iters: 5, seed: 5, ..BenchConfig::default() }
}

#[test]
fn bench_is_deterministic_per_seed() {
    let data = small_data();
    let c = cfg(ScanMethod::Qadc, 8, 4);
    let a = run_bench_on(&data, &c).unwrap();
    let b = run_bench_on(&data, &c).unwrap();
    assert_eq!(a.recall_at, b.recall_at);
    assert_eq!(a.queries, 40);
    assert!(a.recall(100).unwrap() > 0.5);
}

#[test]
fn qadc_close_to_adc_on_same_model() {
    let data = small_data();
    let c = cfg(ScanMethod::Adc, 8, 4);
    let model = train_model(&data.learn, &c).unwrap();
    let flat = build_index(&model, &data.base, layout_for(ScanMethod::Adc)).unwrap();
    let adc = evaluate(&model.pq, &flat, &data.queries, &data.gt, &c).unwrap();
    let qc = BenchConfig { method: ScanMethod::Qadc, ..c };
    let packed = build_index(&model, &data.base, layout_for(ScanMethod::Qadc)).unwrap();
    let qadc = evaluate(&model.pq, &packed, &data.queries, &data.gt, &qc).unwrap();
    assert!((adc.recall(100).unwrap() - qadc.recall(100).unwrap()).abs() <= 0.1);
    assert_eq!(adc.kernel, "float");
}

#[test]
fn ivf_probing_everything_matches_exhaustive_recall_range() {
    let data = small_data();
    let c = BenchConfig { coarse_k: 8, ma: 8, opq: true, opq_iters: 3, ..cfg(ScanMethod::Qadc, 8, 4) };
    let r = run_bench_on(&data, &c).unwrap();
    assert!(r.recall(100).unwrap() > 0.5);
    assert!(r.label.contains("OPQ") && r.label.contains("ma=8"));
}

#[test]
fn sweep_with_no_shapes_is_empty() {
    let data = small_data();
    let rows = sweep_configs(&data, &cfg(ScanMethod::Adc, 8, 4), &[]).unwrap();
    assert!(rows.is_empty());
    assert_eq!(render_table(&rows), "");
}

#[test]
fn sweep_rows_roundtrip_through_json() {
    let data = small_data();
    let rows = sweep_configs(&data, &cfg(ScanMethod::Adc, 8, 4), &[(8, 4), (4, 8)]).unwrap();
    assert_eq!(rows.len(), 2);
    let text: String = rows.iter().map(|r| r.to_json_line() + "\n").collect();
    let back = parse_json_lines(&text).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[1].label, rows[1].label);
    assert_eq!(back[0].recall_at, rows[0].recall_at);
    assert!(render_table(&rows).lines().count() >= 3);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = small_data();
    assert!(run_bench_on(&data, &cfg(ScanMethod::Qadc, 4, 8)).is_err());
    assert!(run_bench_on(&data, &BenchConfig { coarse_k: 4, ma: 5, ..cfg(ScanMethod::Adc, 8, 4) }).is_err());
    assert!(BenchConfig::from_json(r#"{"m": 8, "bogus": 1}"#).is_err());
}
