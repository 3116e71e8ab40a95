use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use cdr_fair::dataset::InteractionRecord;
use cdr_fair::experiment::{
    evaluate_checkpoint, grid_search, run_dir, run_experiment, unit_grid, DataSource, ExperimentConfig, ExperimentMode,
};
use cdr_fair::infolab::{bias_experiment, sweep_csv, ChannelSpec};
use cdr_fair::metrics::Metric;
use cdr_fair::report::{write_atomic, write_json};
use cdr_fair::synth::synth_cdr;
use cdr_fair::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cdrfair", version, about = "Fairness-aware cross-domain recommendation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-domain dataset as TSV files.
    Synth(Common),
    /// Train, evaluate and write reports for every seed.
    Train(TrainArgs),
    /// Re-evaluate a saved checkpoint on the test split.
    Eval(EvalArgs),
    /// Grid search over gamma1 and gamma2.
    Grid(GridArgs),
    /// Information-theoretic check of the overlapping-user advantage.
    Infolab(InfolabArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ExperimentMode>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep only the first N users of each domain before filtering.
    #[arg(long)]
    max_users: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Also write the top attention weights of each non-overlapping user.
    #[arg(long)]
    dump_attention: bool,
    /// Number of attention entries per user in the dump.
    #[arg(long, default_value_t = 10)]
    attention_top: usize,
    /// Train only the selected mode, without the plain CDR reference run.
    #[arg(long)]
    no_compare: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate; defaults to the run directory under --out.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    /// Grid spacing on [0, 1] for both gammas.
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    /// Explicit gamma1 values (comma separated), overriding --step.
    #[arg(long, value_delimiter = ',')]
    gamma1_grid: Option<Vec<f64>>,
    /// Explicit gamma2 values (comma separated), overriding --step.
    #[arg(long, value_delimiter = ',')]
    gamma2_grid: Option<Vec<f64>>,
}

#[derive(Args)]
struct InfolabArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "infolab")]
    out: PathBuf,
    /// Flip probability of the source-side binary channel.
    #[arg(long, default_value_t = 0.1)]
    flip_source: f64,
    /// Flip probability of the target-side binary channel.
    #[arg(long, default_value_t = 0.1)]
    flip_target: f64,
    /// Samples drawn for the empirical estimates.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Random channel specs in the sweep.
    #[arg(long, default_value_t = 100)]
    sweep: usize,
    #[arg(long, default_value_t = 8)]
    max_alphabet: usize,
}

fn parse_mode(s: &str) -> std::result::Result<ExperimentMode, String> {
    ExperimentMode::parse(s).map_err(|e| e.to_string())
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        // An unreadable config is a configuration problem, not a runtime one.
        Some(path) => ExperimentConfig::from_json_file(path)
            .map_err(|e| match e {
                Error::Io { .. } => Error::InvalidArgument(e.to_string()),
                other => other,
            })
            .map_err(|e| e.in_stage("reading config"))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(mode) = c.mode {
        cfg.mode = mode;
    }
    if let Some(g) = c.gamma1 {
        cfg.train.gamma1 = g;
    }
    if let Some(g) = c.gamma2 {
        cfg.train.limiter.gamma2 = g;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if c.max_users.is_some() {
        cfg.max_users = c.max_users;
    }
    cfg.validate().map_err(|e| e.in_stage("validating config"))?;
    Ok(cfg)
}

fn to_tsv(records: &[InteractionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}\t{}\t{}", r.user, r.item, r.rating);
    }
    s
}

fn synth(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let DataSource::Synthetic(mut spec) = cfg.data else {
        return Err(Error::InvalidArgument("synth needs a synthetic data section".into()));
    };
    if let Some(seed) = c.seed {
        spec.seed = seed;
    }
    let recs = synth_cdr(&spec).map_err(|e| e.in_stage("synthesis"))?;
    let out = &cfg.out_dir;
    write_atomic(&out.join("source.tsv"), to_tsv(&recs.source).as_bytes())?;
    write_atomic(&out.join("target.tsv"), to_tsv(&recs.target).as_bytes())?;
    write_json(&out.join("synth_spec.json"), &spec)?;
    println!(
        "wrote {} source and {} target interactions to {}",
        recs.source.len(),
        recs.target.len(),
        out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if a.dump_attention {
        cfg.dump_attention = Some(a.attention_top);
    }
    if a.no_compare {
        cfg.compare = false;
    }
    let summary = run_experiment(&cfg)?;
    for row in summary.summary.iter().filter(|r| r.metric == Metric::NDCG && r.k == 10) {
        let ugf = row.ugf.as_ref().map_or("n/a".to_string(), |u| format!("{:.4} ± {:.4}", u.mean, u.std));
        println!(
            "{:<12} NDCG@10 {:.4} ± {:.4}  UGF {}",
            row.mode.name(),
            row.all.mean,
            row.all.std,
            ugf
        );
    }
    if let Some(c) = &summary.comparison {
        println!(
            "{} vs {}: accuracy {:+.2}%, fairness {:+.2}%",
            c.with,
            c.without,
            100.0 * c.accuracy_improvement,
            100.0 * c.fairness_improvement
        );
    }
    println!("reports in {}", cfg.out_dir.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let seed = cfg.seeds[0];
    let path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| run_dir(&cfg.out_dir, seed, cfg.mode).join("checkpoint.json"));
    let report = evaluate_checkpoint(&cfg, seed, cfg.mode, &path)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    Ok(())
}

fn grid(a: &GridArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let g1 = match &a.gamma1_grid {
        Some(g) => g.clone(),
        None => unit_grid(a.step)?,
    };
    let g2 = match &a.gamma2_grid {
        Some(g) => g.clone(),
        None => unit_grid(a.step)?,
    };
    let result = grid_search(&cfg, &g1, &g2)?;
    println!(
        "best gamma1 = {}, gamma2 = {} ({} points, table in {})",
        result.best.0,
        result.best.1,
        result.rows.len(),
        cfg.out_dir.join("grid.csv").display()
    );
    Ok(())
}

fn infolab(a: &InfolabArgs) -> Result<()> {
    let spec = ChannelSpec::binary_symmetric(a.flip_source, a.flip_target, a.samples, a.seed);
    let report = bias_experiment(&spec).map_err(|e| e.in_stage("bias experiment"))?;
    write_json(&a.out.join("bias.json"), &report)?;
    let csv = sweep_csv(a.sweep, a.max_alphabet, a.seed).map_err(|e| e.in_stage("channel sweep"))?;
    write_atomic(&a.out.join("sweep.csv"), csv.as_bytes())?;
    let (o, n) = (&report.overlapping, &report.nonoverlapping);
    println!("mode            I(S;T)   H(T|S)   Bayes    Fano");
    for (name, m) in [("overlapping", o), ("non-overlapping", n)] {
        println!(
            "{name:<15} {:.4}   {:.4}   {:.4}   {:.4}",
            m.exact.mutual_information, m.exact.h_target_given_source, m.bayes_error, m.fano.bound
        );
    }
    println!("reports in {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(c) => synth(c),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Grid(a) => grid(a),
        Command::Infolab(a) => infolab(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
