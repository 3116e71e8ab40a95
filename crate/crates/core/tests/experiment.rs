mod common;

use std::path::Path;

use cdr_fair::experiment::{
    build_data, compare_reports, evaluate_checkpoint, grid_search, run_dir, run_experiment, DataSource, ExperimentConfig,
    ExperimentMode, RunReport,
};
use cdr_fair::metrics::{EvalReport, EvalSplit, Metric, MetricRow};
use common::{quick_train, small_spec};

fn config(out: &Path, mode: ExperimentMode, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic(small_spec(50, 0)),
        k_core: 2,
        mode,
        train: quick_train(3),
        out_dir: out.to_path_buf(),
        seeds,
        ..Default::default()
    }
}

fn read_report(path: &Path) -> RunReport {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn target_only_reports_zero_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_experiment(&config(dir.path(), ExperimentMode::TargetOnly, vec![0])).unwrap();
    assert!(s.comparison.is_none());
    let r = read_report(&run_dir(dir.path(), 0, ExperimentMode::TargetOnly).join("report.json"));
    assert_eq!(r.lambda, 0.0);
    assert!(r.provenance.contains("lambda = 0"), "{}", r.provenance);
}

#[test]
fn two_seeds_give_per_seed_rows_and_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_experiment(&config(dir.path(), ExperimentMode::CdrVug, vec![0, 1])).unwrap();
    assert_eq!(s.runs.len(), 4);
    let row = s
        .summary
        .iter()
        .find(|r| r.mode == ExperimentMode::CdrVug && r.metric == Metric::NDCG && r.k == 10)
        .unwrap();
    assert_eq!(row.all.values.len(), 2);
    let (a, b) = (row.all.values[0], row.all.values[1]);
    assert!((row.all.mean - (a + b) / 2.0).abs() < 1e-15);
    assert!((row.all.std - (a - b).abs() / 2f64.sqrt()).abs() < 1e-15);
    for seed in [0, 1] {
        for mode in [ExperimentMode::Cdr, ExperimentMode::CdrVug] {
            let d = run_dir(dir.path(), seed, mode);
            for f in ["report.json", "train_log.jsonl", "valid_evals.json", "timing.json", "checkpoint.json"] {
                assert!(d.join(f).exists(), "{}", d.join(f).display());
            }
        }
    }
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn ugf_fields_are_recomputable_from_group_values() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&config(dir.path(), ExperimentMode::KnnVug, vec![3])).unwrap();
    for mode in [ExperimentMode::Cdr, ExperimentMode::KnnVug] {
        let r = read_report(&run_dir(dir.path(), 3, mode).join("report.json"));
        for row in &r.test.rows {
            let (o, n) = (row.overlap.unwrap(), row.nonoverlap.unwrap());
            assert!((row.ugf.unwrap() - (o - n).abs()).abs() <= 1e-12);
        }
    }
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&config(a.path(), ExperimentMode::CdrVug, vec![5])).unwrap();
    run_experiment(&config(b.path(), ExperimentMode::CdrVug, vec![5])).unwrap();
    for mode in [ExperimentMode::Cdr, ExperimentMode::CdrVug] {
        for f in ["report.json", "train_log.jsonl", "checkpoint.json"] {
            let x = std::fs::read(run_dir(a.path(), 5, mode).join(f)).unwrap();
            let y = std::fs::read(run_dir(b.path(), 5, mode).join(f)).unwrap();
            assert!(x == y, "{f} differs for {mode}");
        }
    }
}

#[test]
fn saved_checkpoint_reproduces_the_test_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), ExperimentMode::CdrVug, vec![2]);
    run_experiment(&cfg).unwrap();
    let d = run_dir(dir.path(), 2, ExperimentMode::CdrVug);
    let stored = read_report(&d.join("report.json")).test;
    let again = evaluate_checkpoint(&cfg, 2, ExperimentMode::CdrVug, &d.join("checkpoint.json")).unwrap();
    assert_eq!(stored.to_json().unwrap(), again.to_json().unwrap());
    let other = ExperimentConfig { data: DataSource::Synthetic(small_spec(50, 9)), ..cfg };
    assert!(evaluate_checkpoint(&other, 2, ExperimentMode::CdrVug, &d.join("checkpoint.json")).is_err());
}

fn row(metric: Metric, k: usize, all: f64, ugf: f64) -> MetricRow {
    MetricRow {
        metric,
        k,
        all,
        overlap: Some(all + ugf),
        nonoverlap: Some(all),
        ugf: Some(ugf),
    }
}

fn report(rows: Vec<MetricRow>) -> EvalReport {
    EvalReport {
        split: EvalSplit::Test,
        rows,
        n_all: 10,
        n_overlap: 3,
        n_nonoverlap: 7,
        skipped: 0,
    }
}

#[test]
fn fairness_improvement_is_mean_relative_ugf_reduction() {
    let without = report(vec![
        row(Metric::HR, 10, 0.20, 0.040),
        row(Metric::HR, 20, 0.30, 0.050),
        row(Metric::NDCG, 10, 0.10, 0.020),
        row(Metric::NDCG, 20, 0.12, 0.025),
    ]);
    let with = report(vec![
        row(Metric::HR, 10, 0.21, 0.030),
        row(Metric::HR, 20, 0.30, 0.050),
        row(Metric::NDCG, 10, 0.11, 0.010),
        row(Metric::NDCG, 20, 0.12, 0.020),
    ]);
    let c = compare_reports(&without, &with, ExperimentMode::Cdr, ExperimentMode::CdrVug).unwrap();
    // UGF reductions: 25%, 0%, 50%, 20% → mean 23.75%.
    assert!((c.fairness_improvement - 0.2375).abs() < 1e-12);
    // Accuracy gains: 5%, 0%, 10%, 0% → mean 3.75%.
    assert!((c.accuracy_improvement - 0.0375).abs() < 1e-12);
    assert!((c.fairness_improvement_absolute - 0.00625).abs() < 1e-12);
    assert_eq!(c.fairness.len(), 4);
}

#[test]
fn single_point_grid_returns_that_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), ExperimentMode::CdrVug, vec![0]);
    let g = grid_search(&cfg, &[0.3], &[0.8]).unwrap();
    assert_eq!(g.best, (0.3, 0.8));
    assert_eq!(g.rows.len(), 1);
}

#[test]
fn grid_selects_the_best_validation_row_of_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), ExperimentMode::CdrVug, vec![0]);
    cfg.train.epochs = 2;
    let g = grid_search(&cfg, &[0.0, 1.0], &[0.0, 0.5, 1.0]).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(3).map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 6);
    let max = rows.iter().map(|r| r[2]).fold(f64::MIN, f64::max);
    let best = rows.iter().find(|r| r[2] == max).unwrap();
    assert_eq!((best[0], best[1]), g.best);
}

#[test]
fn file_datasets_load_through_the_same_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let recs = cdr_fair::synth::synth_cdr(&small_spec(30, 4)).unwrap();
    let write = |name: &str, rs: &[cdr_fair::dataset::InteractionRecord]| {
        let text: String = rs.iter().map(|r| format!("{}\t{}\t{}\n", r.user, r.item, r.rating)).collect();
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    };
    let cfg = ExperimentConfig {
        data: DataSource::Files {
            source: write("s.tsv", &recs.source),
            target: write("t.tsv", &recs.target),
            delimiter: cdr_fair::dataset::Delimiter::Auto,
        },
        k_core: 2,
        ..Default::default()
    };
    let from_files = build_data(&cfg, 1).unwrap();
    let synthetic = build_data(&ExperimentConfig { data: DataSource::Synthetic(small_spec(30, 4)), ..cfg.clone() }, 1).unwrap();
    assert_eq!(from_files.cross.overlap, synthetic.cross.overlap);
    assert_eq!(from_files.target_split.test, synthetic.target_split.test);
}

#[test]
fn config_errors_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), ExperimentMode::Cdr, vec![]);
    assert!(run_experiment(&cfg).unwrap_err().is_config_error());
    cfg.seeds = vec![0];
    cfg.train.limiter.gamma2 = 2.0;
    assert!(run_experiment(&cfg).unwrap_err().is_config_error());
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"mode\": \"vug\"}").unwrap();
    assert!(ExperimentConfig::from_json_file(&bad).unwrap_err().is_config_error());
    let good = dir.path().join("good.json");
    std::fs::write(&good, "{\"mode\": \"knn-vug\", \"seeds\": [1, 2]}").unwrap();
    let parsed = ExperimentConfig::from_json_file(&good).unwrap();
    assert_eq!((parsed.mode, parsed.seeds), (ExperimentMode::KnnVug, vec![1, 2]));
}

#[test]
fn shipped_desk_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let cfg = ExperimentConfig::from_json_file(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!((cfg.train.gen_every, cfg.train.refresh_every), (16, 8));
    assert_eq!(cfg.train.gen_adam.lr, 1e-2);
    assert_eq!(cfg.train.main_adam, cdr_fair::params::AdamConfig::default());
    assert_eq!(cfg.seeds.len(), 5);
}
