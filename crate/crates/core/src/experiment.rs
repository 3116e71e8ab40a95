//! End-to-end runs: build data, train each mode, evaluate, write reports,
//! and summarise across seeds. Also the γ1 × γ2 grid search.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cdr::Mode;
use crate::dataset::{load_interactions, prepare, CdrData, Delimiter, DomainStats};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, EvalSplit, Metric, DEFAULT_KS};
use crate::report::{write_atomic, write_json};
use crate::generator::attention_dump;
use crate::params::{Checkpoint, ParameterStore};
use crate::synth::{synth_cdr, SyntheticCdrSpec};
use crate::trainer::{compute_virtuals, fit, EpochTiming, FitResult, GeneratorKind, TrainConfig};

/// The four model variants an experiment can train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentMode {
    TargetOnly,
    Cdr,
    CdrVug,
    KnnVug,
}

impl ExperimentMode {
    pub const ALL: [ExperimentMode; 4] = [Self::TargetOnly, Self::Cdr, Self::CdrVug, Self::KnnVug];

    pub fn name(self) -> &'static str {
        match self {
            Self::TargetOnly => "target-only",
            Self::Cdr => "cdr",
            Self::CdrVug => "cdr-vug",
            Self::KnnVug => "knn-vug",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}` (expected target-only, cdr, cdr-vug or knn-vug)")))
    }

    /// Applies this mode to a training configuration.
    pub fn configure(self, cfg: &TrainConfig) -> TrainConfig {
        let (mode, generator) = match self {
            Self::TargetOnly => (Mode::TargetOnly, cfg.generator),
            Self::Cdr => (Mode::Cdr, cfg.generator),
            Self::CdrVug => (Mode::CdrVug, GeneratorKind::Attention),
            Self::KnnVug => (Mode::CdrVug, GeneratorKind::Knn),
        };
        TrainConfig {
            mode,
            generator,
            ..cfg.clone()
        }
    }

    fn uses_virtual_users(self) -> bool {
        matches!(self, Self::CdrVug | Self::KnnVug)
    }
}

impl std::fmt::Display for ExperimentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Synthetic(SyntheticCdrSpec),
    Files {
        source: PathBuf,
        target: PathBuf,
        #[serde(default = "default_delimiter")]
        delimiter: Delimiter,
    },
}

fn default_delimiter() -> Delimiter {
    Delimiter::Auto
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Ratings at or above this count as positives.
    pub threshold: f64,
    pub k_core: usize,
    pub max_users: Option<usize>,
    pub mode: ExperimentMode,
    /// Also train plain CDR as the "without VUG" reference.
    pub compare: bool,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Write each run's best parameters as `checkpoint.json`.
    pub save_checkpoints: bool,
    /// Top-k attention entries per non-overlapping user to dump (generator mode only).
    pub dump_attention: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticCdrSpec::default()),
            threshold: 3.0,
            k_core: 5,
            max_users: None,
            mode: ExperimentMode::CdrVug,
            compare: true,
            train: TrainConfig::default(),
            ks: DEFAULT_KS.to_vec(),
            out_dir: PathBuf::from("runs"),
            seeds: vec![0],
            save_checkpoints: true,
            dump_attention: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::invalid("K values must be non-empty and positive"));
        }
        if !self.ks.contains(&10) {
            return Err(Error::invalid("K = 10 is required for model selection"));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        self.train.validate()
    }

    /// Modes trained per seed: the configured one, preceded by plain CDR
    /// when a comparison is requested.
    pub fn modes(&self) -> Vec<ExperimentMode> {
        if self.compare && self.mode.uses_virtual_users() {
            vec![ExperimentMode::Cdr, self.mode]
        } else {
            vec![self.mode]
        }
    }
}

/// Builds and splits the dataset. `seed` drives the splits only.
pub fn build_data(cfg: &ExperimentConfig, seed: u64) -> Result<CdrData> {
    let (source, target) = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let r = synth_cdr(spec)?;
            (r.source, r.target)
        }
        DataSource::Files { source, target, delimiter } => {
            (load_interactions(source, *delimiter)?, load_interactions(target, *delimiter)?)
        }
    };
    prepare(source, target, cfg.threshold, cfg.k_core, cfg.max_users, seed)
}

/// Everything written for one (seed, mode) run, minus wall-clock data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub mode: ExperimentMode,
    pub lambda: f64,
    pub provenance: String,
    pub best_epoch: Option<usize>,
    pub best_valid_ndcg10: Option<f64>,
    pub test: EvalReport,
}

fn provenance(mode: ExperimentMode, lambda: f64) -> String {
    match mode {
        ExperimentMode::TargetOnly => "target-only: cross-domain coupling disabled, lambda = 0".to_string(),
        ExperimentMode::Cdr => format!("cdr: true source embeddings for overlapping users, zero for others, lambda = {lambda}"),
        ExperimentMode::CdrVug => format!("cdr-vug: attention-generated virtual users for non-overlapping users, lambda = {lambda}"),
        ExperimentMode::KnnVug => format!("knn-vug: nearest-neighbour virtual users for non-overlapping users, lambda = {lambda}"),
    }
}

/// Trains and tests one mode on prepared data.
pub fn run_single(data: &CdrData, train: &TrainConfig, mode: ExperimentMode, ks: &[usize]) -> Result<(RunReport, FitResult)> {
    let cfg = mode.configure(train);
    let result = fit(data, &cfg).map_err(|e| e.in_stage(&format!("training {mode}")))?;
    let test = evaluate(&result.store.model, &result.virtuals, data, ks, EvalSplit::Test)
        .map_err(|e| e.in_stage(&format!("evaluating {mode}")))?;
    let lambda = result.store.model.effective_lambda();
    Ok((
        RunReport {
            seed: cfg.seed,
            mode,
            lambda,
            provenance: provenance(mode, lambda),
            best_epoch: result.log.best_epoch,
            best_valid_ndcg10: result.log.best_valid_ndcg10,
            test,
        },
        result,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MeanStd {
    /// Sample standard deviation (0 for a single value).
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, values }
    }
}

/// Cross-seed statistics of one metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: ExperimentMode,
    pub metric: Metric,
    #[serde(rename = "K")]
    pub k: usize,
    pub all: MeanStd,
    pub overlap: Option<MeanStd>,
    pub nonoverlap: Option<MeanStd>,
    pub ugf: Option<MeanStd>,
}

/// One column of the with/without comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub name: String,
    pub without: f64,
    pub with: f64,
    /// `with − without` for accuracy, `without − with` for UGF (positive is better).
    pub absolute_gain: f64,
    pub relative_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub without: ExperimentMode,
    pub with: ExperimentMode,
    pub accuracy: Vec<ComparisonEntry>,
    pub fairness: Vec<ComparisonEntry>,
    /// Mean relative accuracy gain over HR and NDCG at every K.
    pub accuracy_improvement: f64,
    /// Mean relative UGF reduction over the UGF columns.
    pub fairness_improvement: f64,
    pub accuracy_improvement_absolute: f64,
    pub fairness_improvement_absolute: f64,
}

fn rel(gain: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        gain / base
    }
}

/// With/without comparison in the layout of a results table: overall HR/NDCG
/// and the UGF of each, averaged as relative changes.
pub fn compare_reports(without: &EvalReport, with: &EvalReport, without_mode: ExperimentMode, with_mode: ExperimentMode) -> Result<Comparison> {
    let mut accuracy = Vec::new();
    let mut fairness = Vec::new();
    for metric in [Metric::HR, Metric::NDCG] {
        for row in without.rows.iter().filter(|r| r.metric == metric) {
            let other = with
                .row(metric, row.k)
                .ok_or_else(|| Error::invalid(format!("{metric:?}@{} missing from report", row.k)))?;
            let gain = other.all - row.all;
            accuracy.push(ComparisonEntry {
                name: format!("{metric:?}@{}", row.k),
                without: row.all,
                with: other.all,
                absolute_gain: gain,
                relative_gain: rel(gain, row.all),
            });
            if let (Some(a), Some(b)) = (row.ugf, other.ugf) {
                fairness.push(ComparisonEntry {
                    name: format!("UGF({metric:?}@{})", row.k),
                    without: a,
                    with: b,
                    absolute_gain: a - b,
                    relative_gain: rel(a - b, a),
                });
            }
        }
    }
    let avg = |xs: &[ComparisonEntry], f: fn(&ComparisonEntry) -> f64| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().map(f).sum::<f64>() / xs.len() as f64
        }
    };
    Ok(Comparison {
        without: without_mode,
        with: with_mode,
        accuracy_improvement: avg(&accuracy, |e| e.relative_gain),
        fairness_improvement: avg(&fairness, |e| e.relative_gain),
        accuracy_improvement_absolute: avg(&accuracy, |e| e.absolute_gain),
        fairness_improvement_absolute: avg(&fairness, |e| e.absolute_gain),
        accuracy,
        fairness,
    })
}

/// Element-wise mean of several reports with identical layout.
pub fn mean_report(reports: &[&EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to average"))?;
    let n = reports.len() as f64;
    let mut out = (*first).clone();
    for (i, row) in out.rows.iter_mut().enumerate() {
        let col = |f: fn(&crate::metrics::MetricRow) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = reports.iter().map(|r| f(&r.rows[i])).collect();
            vals.map(|v| v.iter().sum::<f64>() / n)
        };
        row.all = col(|r| Some(r.all)).unwrap_or(0.0);
        row.overlap = col(|r| r.overlap);
        row.nonoverlap = col(|r| r.nonoverlap);
        row.ugf = col(|r| r.ugf);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub runs: Vec<RunReport>,
    pub summary: Vec<SummaryRow>,
    pub comparison: Option<Comparison>,
    pub dataset: [DomainStats; 2],
}

fn summarise(runs: &[RunReport]) -> Vec<SummaryRow> {
    let mut by_mode: BTreeMap<ExperimentMode, Vec<&RunReport>> = BTreeMap::new();
    for r in runs {
        by_mode.entry(r.mode).or_default().push(r);
    }
    let mut out = Vec::new();
    for (mode, rs) in by_mode {
        for (i, row) in rs[0].test.rows.iter().enumerate() {
            let col = |f: fn(&crate::metrics::MetricRow) -> Option<f64>| -> Option<MeanStd> {
                let vals: Option<Vec<f64>> = rs.iter().map(|r| f(&r.test.rows[i])).collect();
                vals.map(MeanStd::of)
            };
            out.push(SummaryRow {
                mode,
                metric: row.metric,
                k: row.k,
                all: col(|r| Some(r.all)).expect("always present"),
                overlap: col(|r| r.overlap),
                nonoverlap: col(|r| r.nonoverlap),
                ugf: col(|r| r.ugf),
            });
        }
    }
    out
}

/// Run-level wall-clock data, kept apart from the deterministic reports.
#[derive(Debug, Clone, Serialize)]
struct RunTiming<'a> {
    unix_time: u64,
    epochs: &'a [EpochTiming],
}

fn unix_time() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Runs every seed and mode, writing per-run reports and a summary under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    let mut runs = Vec::new();
    let mut stats = None;
    for &seed in &cfg.seeds {
        let data = build_data(cfg, seed).map_err(|e| e.in_stage("data preparation"))?;
        stats.get_or_insert_with(|| data.cross.stats());
        let train = TrainConfig { seed, ..cfg.train.clone() };
        for mode in cfg.modes() {
            log::info!("seed {seed}: training {mode}");
            let (report, fit) = run_single(&data, &train, mode, &cfg.ks)?;
            let dir = run_dir(out, seed, mode);
            let write = || -> Result<()> {
                let log = &fit.log;
                write_json(&dir.join("report.json"), &report)?;
                log.write_steps(&dir.join("train_log.jsonl"))?;
                write_json(&dir.join("valid_evals.json"), &log.evals)?;
                write_json(&dir.join("timing.json"), &RunTiming { unix_time: unix_time(), epochs: &log.epochs })?;
                if cfg.save_checkpoints {
                    fit.store.to_checkpoint(fit.epochs_run).save(dir.join("checkpoint.json"))?;
                }
                if let (Some(k), Some(gen)) = (cfg.dump_attention, &fit.store.generator) {
                    write_json(&dir.join("attention.json"), &attention_dump(gen, &data, &fit.store.model, k)?)?;
                }
                Ok(())
            };
            write().map_err(|e| e.in_stage("writing reports"))?;
            runs.push(report);
        }
    }
    let comparison = match cfg.modes().as_slice() {
        [base, with] => {
            let pick = |m: ExperimentMode| runs.iter().filter(|r| r.mode == m).map(|r| &r.test).collect::<Vec<_>>();
            Some(compare_reports(&mean_report(&pick(*base))?, &mean_report(&pick(*with))?, *base, *with)?)
        }
        _ => None,
    };
    let summary = ExperimentSummary {
        summary: summarise(&runs),
        runs,
        comparison,
        dataset: stats.expect("at least one seed"),
    };
    write_json(&out.join("summary.json"), &summary).map_err(|e| e.in_stage("writing summary"))?;
    Ok(summary)
}

/// Directory of one (seed, mode) run under `out`.
pub fn run_dir(out: &Path, seed: u64, mode: ExperimentMode) -> PathBuf {
    out.join(format!("seed-{seed}")).join(mode.name())
}

/// Re-evaluates a saved checkpoint on the test split of the data built for
/// `seed`. Only the user linkage is checked against the checkpoint, so the
/// caller must pass the seed the checkpoint was trained with.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, seed: u64, mode: ExperimentMode, path: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let data = build_data(cfg, seed).map_err(|e| e.in_stage("data preparation"))?;
    let ck = Checkpoint::load(path).map_err(|e| e.in_stage("loading checkpoint"))?;
    if ck.source_of_target != data.cross.source_of_target() {
        return Err(Error::invalid(format!(
            "checkpoint {} was trained on a different dataset",
            path.display()
        )));
    }
    let store = ParameterStore::from_checkpoint(&ck).map_err(|e| e.in_stage("loading checkpoint"))?;
    let train = mode.configure(&TrainConfig { seed, ..cfg.train.clone() });
    let virtuals = compute_virtuals(&store, &data, &train).map_err(|e| e.in_stage("generating virtual users"))?;
    evaluate(&store.model, &virtuals, &data, &cfg.ks, EvalSplit::Test).map_err(|e| e.in_stage("evaluation"))
}

/// `0, step, 2·step, …, 1` (inclusive, rounded to 10 decimals).
pub fn unit_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid(format!("grid step {step} outside (0, 1]")));
    }
    let n = (1.0 / step).round() as usize;
    Ok((0..=n).map(|i| ((i as f64 * step).min(1.0) * 1e10).round() / 1e10).collect())
}

/// Every (γ1, γ2) pair of the two grids, γ1 outermost.
pub fn grid_schedule(gamma1: &[f64], gamma2: &[f64]) -> Result<Vec<(f64, f64)>> {
    if gamma1.is_empty() || gamma2.is_empty() {
        return Err(Error::invalid("grids must be non-empty"));
    }
    if gamma1.iter().chain(gamma2).any(|g| !(0.0..=1.0).contains(g)) {
        return Err(Error::invalid("grid values must lie in [0, 1]"));
    }
    Ok(gamma1.iter().flat_map(|&a| gamma2.iter().map(move |&b| (a, b))).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub gamma1: f64,
    pub gamma2: f64,
    pub valid_ndcg10: f64,
    pub test_ndcg10: f64,
    pub test_ugf_ndcg10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: (f64, f64),
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("gamma1,gamma2,valid_ndcg10,test_ndcg10,test_ugf_ndcg10\n");
        for r in &self.rows {
            let ugf = r.test_ugf_ndcg10.map(|u| u.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", r.gamma1, r.gamma2, r.valid_ndcg10, r.test_ndcg10, ugf);
        }
        s
    }
}

/// Trains the generator mode at every grid point on one data build (first
/// seed) and selects the point with the highest validation NDCG@10; ties go
/// to the earlier point. Writes `grid.csv` and `grid.json` under `out_dir`.
pub fn grid_search(cfg: &ExperimentConfig, gamma1: &[f64], gamma2: &[f64]) -> Result<GridResult> {
    cfg.validate()?;
    let points = grid_schedule(gamma1, gamma2)?;
    let seed = cfg.seeds[0];
    let data = build_data(cfg, seed).map_err(|e| e.in_stage("data preparation"))?;
    let mode = if cfg.mode.uses_virtual_users() { cfg.mode } else { ExperimentMode::CdrVug };
    let mut rows = Vec::with_capacity(points.len());
    for (g1, g2) in points {
        let mut train = TrainConfig { seed, gamma1: g1, ..cfg.train.clone() };
        train.limiter.gamma2 = g2;
        log::info!("grid point gamma1 = {g1}, gamma2 = {g2}");
        let (report, _) = run_single(&data, &train, mode, &cfg.ks)?;
        let test = report.test.row(Metric::NDCG, 10);
        rows.push(GridRow {
            gamma1: g1,
            gamma2: g2,
            valid_ndcg10: report.best_valid_ndcg10.unwrap_or(0.0),
            test_ndcg10: test.map_or(0.0, |r| r.all),
            test_ugf_ndcg10: test.and_then(|r| r.ugf),
        });
    }
    let result = select_best(rows);
    write_atomic(&cfg.out_dir.join("grid.csv"), result.to_csv().as_bytes()).map_err(|e| e.in_stage("writing grid"))?;
    write_json(&cfg.out_dir.join("grid.json"), &result).map_err(|e| e.in_stage("writing grid"))?;
    Ok(result)
}

/// Highest validation NDCG@10, earliest row on ties.
pub fn select_best(rows: Vec<GridRow>) -> GridResult {
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.valid_ndcg10 > rows[best].valid_ndcg10 {
            best = i;
        }
    }
    GridResult {
        best: rows.get(best).map_or((0.0, 0.0), |r| (r.gamma1, r.gamma2)),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let g = unit_grid(0.1).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!((g[0], g[3], g[10]), (0.0, 0.3, 1.0));
        assert_eq!(grid_schedule(&g, &g).unwrap().len(), 121);
        assert_eq!(grid_schedule(&[0.4], &[0.7]).unwrap(), vec![(0.4, 0.7)]);
        assert!(grid_schedule(&[], &[0.1]).is_err());
        assert!(grid_schedule(&[1.5], &[0.1]).is_err());
    }

    #[test]
    fn selection_takes_maximum_and_first_tie() {
        let row = |a, b, v| GridRow { gamma1: a, gamma2: b, valid_ndcg10: v, test_ndcg10: 0.0, test_ugf_ndcg10: None };
        let r = select_best(vec![row(0.0, 0.0, 0.1), row(0.5, 0.5, 0.3), row(1.0, 1.0, 0.3)]);
        assert_eq!(r.best, (0.5, 0.5));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ExperimentMode::ALL {
            assert_eq!(ExperimentMode::parse(m.name()).unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!(ExperimentMode::parse("vug").is_err());
    }

    #[test]
    fn mean_std_sample_formula() {
        let m = MeanStd::of(vec![1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 2f64.sqrt()));
        assert_eq!(MeanStd::of(vec![5.0]).std, 0.0);
    }
}
