//! Alternating optimisation of backbone and generator.
//!
//! Each mini-batch runs a MAIN step (BPR on both domains, generator frozen)
//! followed by a GEN step (generator objective, everything else frozen). The
//! virtual embeddings used by the MAIN step come from a cache that is
//! refreshed from the generator on a fixed schedule and are treated as
//! constants unless `end_to_end` is set.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdr::{sample_negatives, CdrModel, Domain, Mode, TrainBatch, VirtualSources};
use crate::dataset::{CdrData, SplitDataset};
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorParams, KeySet, QueryBatch};
use crate::limiter::{constrain_loss, generator_objective, super_loss, LimiterConfig, LossGrad};
use crate::metrics::{evaluate, EvalReport, EvalSplit, DEFAULT_KS};
use crate::params::{AdamConfig, Checkpoint, Grads, Matrix, ParameterStore, Partition, DEFAULT_INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Learned dual-attention generator.
    Attention,
    /// Mean source embedding of the most similar overlapping users; nothing to train.
    Knn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub generator: GeneratorKind,
    /// Neighbours averaged by the kNN generator.
    pub knn_n: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub main_adam: AdamConfig,
    pub gen_adam: AdamConfig,
    pub gamma1: f64,
    pub limiter: LimiterConfig,
    pub lambda: f64,
    pub dim: usize,
    pub init_std: f64,
    /// Query/key projections start as `gen_init_scale·I` plus N(0, gen_init_std²) noise.
    pub gen_init_scale: f64,
    pub gen_init_std: f64,
    pub eval_every: usize,
    /// Evaluations without a better validation NDCG@10 before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Overlapping users supervised per GEN step.
    pub super_batch: usize,
    /// One GEN step after every `gen_every` MAIN steps.
    pub gen_every: usize,
    /// Full rebuild of the virtual-embedding cache every this many epochs.
    pub refresh_every: usize,
    /// Epochs of MAIN-only training before generator steps start.
    pub warmup_epochs: usize,
    /// Lets the BPR loss back-propagate into the generator.
    pub end_to_end: bool,
    /// Overlapping queries never attend to themselves during supervision.
    pub leave_self_out: bool,
    pub max_keys: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::CdrVug,
            generator: GeneratorKind::Attention,
            knn_n: 10,
            epochs: 100,
            batch_size: 2048,
            main_adam: AdamConfig::default(),
            gen_adam: AdamConfig::default(),
            gamma1: 0.5,
            limiter: LimiterConfig::default(),
            lambda: 0.5,
            dim: 64,
            init_std: DEFAULT_INIT_STD,
            gen_init_scale: 1.0,
            gen_init_std: 0.01,
            eval_every: 1,
            patience: 20,
            seed: 0,
            super_batch: 256,
            gen_every: 1,
            refresh_every: 1,
            warmup_epochs: 0,
            end_to_end: false,
            leave_self_out: true,
            max_keys: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("dim", self.dim),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("super_batch", self.super_batch),
            ("gen_every", self.gen_every),
            ("refresh_every", self.refresh_every),
            ("knn_n", self.knn_n),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma1) {
            return Err(Error::invalid(format!("gamma1 = {} outside [0, 1]", self.gamma1)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) || !(self.init_std > 0.0) || !(self.gen_init_std >= 0.0) || !self.gen_init_scale.is_finite() {
            return Err(Error::invalid("lambda and initialisation scales must be finite and non-negative"));
        }
        if self.max_keys == Some(0) {
            return Err(Error::invalid("max_keys must be positive"));
        }
        self.limiter.validate()?;
        self.main_adam.validate()?;
        self.gen_adam.validate()
    }

    fn trains_generator(&self) -> bool {
        self.mode == Mode::CdrVug && self.generator == GeneratorKind::Attention
    }
}

/// Losses of one training step, as written to the JSON-lines log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_cdr: f64,
    pub l_super: Option<f64>,
    pub l_constrain: Option<f64>,
    pub objective: Option<f64>,
}

/// Partition checksums around the two halves of a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecksumTrace {
    pub step: u64,
    pub main_before: u64,
    pub gen_before: u64,
    pub main_after_main: u64,
    pub gen_after_main: u64,
    pub main_after_gen: u64,
    pub gen_after_gen: u64,
    pub gen_step_ran: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub seconds: f64,
    pub main_seconds: f64,
    /// GEN steps plus cache refreshes.
    pub generator_seconds: f64,
    pub seconds_without_generator: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalSnapshot>,
    pub epochs: Vec<EpochTiming>,
    pub best_epoch: Option<usize>,
    pub best_valid_ndcg10: Option<f64>,
}

impl TrainLog {
    pub fn write_steps(&self, path: &std::path::Path) -> Result<()> {
        crate::report::write_json_lines(path, &self.steps)
    }

    /// Mean epoch time, optionally skipping the first `skip` epochs.
    pub fn mean_epoch_seconds(&self, skip: usize) -> f64 {
        let xs: Vec<f64> = self.epochs.iter().skip(skip).map(|e| e.seconds).collect();
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    }
}

/// Training state for one run.
pub struct Trainer<'a> {
    data: &'a CdrData,
    cfg: TrainConfig,
    pub store: ParameterStore,
    pub virtuals: VirtualSources,
    pub log: TrainLog,
    /// Record partition checksums around every step.
    pub trace_checksums: bool,
    pub checksum_trace: Vec<ChecksumTrace>,
    step: u64,
    epoch: usize,
    stashed_gen_grads: Option<Grads>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1))
}

fn batch_triples(split: &SplitDataset, pairs: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize, usize)>> {
    pairs
        .iter()
        .map(|&(u, i)| Ok((u, i, sample_negatives(split, u, 1, rng)?[0])))
        .collect()
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a CdrData, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = CdrModel::new(&data.cross, cfg.dim, cfg.mode, cfg.lambda, cfg.init_std, &mut rng)?;
        let generator = if cfg.trains_generator() {
            Some(GeneratorParams::init(cfg.dim, cfg.gamma1, cfg.gen_init_scale, cfg.gen_init_std, &mut rng)?)
        } else {
            None
        };
        Self::from_store(data, cfg, ParameterStore::new(model, generator), 0)
    }

    /// Continues from a checkpoint; optimiser state and epoch counter are restored.
    pub fn resume(data: &'a CdrData, cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let store = ParameterStore::from_checkpoint(ck)?;
        if store.model.mode != cfg.mode || store.generator.is_some() != cfg.trains_generator() {
            return Err(Error::invalid("checkpoint does not match the configured mode"));
        }
        let mut t = Self::from_store(data, cfg, store, ck.epoch)?;
        t.step = t.store.adam.steps.get(&Partition::Main).copied().unwrap_or(0);
        Ok(t)
    }

    fn from_store(data: &'a CdrData, cfg: TrainConfig, store: ParameterStore, epoch: usize) -> Result<Self> {
        if cfg.mode == Mode::CdrVug && data.cross.overlap.is_empty() {
            return Err(Error::EmptyGroup("overlapping users (needed to generate virtual users)".into()));
        }
        let mut t = Self {
            data,
            cfg,
            store,
            virtuals: VirtualSources::default(),
            log: TrainLog::default(),
            trace_checksums: false,
            checksum_trace: Vec::new(),
            step: 0,
            epoch,
            stashed_gen_grads: None,
        };
        t.refresh_virtuals()?;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.store.to_checkpoint(self.epoch)
    }

    /// Rebuilds every non-overlapping user's virtual embedding.
    pub fn refresh_virtuals(&mut self) -> Result<()> {
        self.virtuals = compute_virtuals(&self.store, self.data, &self.cfg)?;
        Ok(())
    }

    fn gen_active(&self) -> bool {
        self.cfg.trains_generator() && self.epoch >= self.cfg.warmup_epochs
    }

    /// MAIN step, then (in generator mode) a GEN step.
    pub fn train_step(
        &mut self,
        source: &[(usize, usize, usize)],
        target: &[(usize, usize, usize)],
        run_gen: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepRecord> {
        self.step += 1;
        let trace = self.trace_checksums;
        let (main_before, gen_before) = if trace { self.checksums() } else { (0, 0) };

        let l_cdr = self.main_step(source, target)?;
        let (main_after_main, gen_after_main) = if trace { self.checksums() } else { (0, 0) };

        let gen_ran = run_gen && self.gen_active();
        let mut rec = StepRecord {
            step: self.step,
            l_cdr,
            l_super: None,
            l_constrain: None,
            objective: None,
        };
        if gen_ran {
            let (s, c, o) = self.gen_step(rng)?;
            rec.l_super = s;
            rec.l_constrain = c;
            rec.objective = Some(o);
        }
        if trace {
            let (main_after_gen, gen_after_gen) = self.checksums();
            self.checksum_trace.push(ChecksumTrace {
                step: self.step,
                main_before,
                gen_before,
                main_after_main,
                gen_after_main,
                main_after_gen,
                gen_after_gen,
                gen_step_ran: gen_ran,
            });
        }
        Ok(rec)
    }

    fn checksums(&self) -> (u64, u64) {
        (self.store.checksum(Partition::Main), self.store.checksum(Partition::Gen))
    }

    fn main_step(&mut self, source: &[(usize, usize, usize)], target: &[(usize, usize, usize)]) -> Result<f64> {
        let model = &self.store.model;
        let mut grads: Option<Grads> = None;
        let mut loss = 0.0;
        let mut add = |out: crate::cdr::BprOutput, grads: &mut Option<Grads>| {
            loss += out.loss;
            match grads {
                None => *grads = Some(out.grads),
                Some(g) => generator::add_grads(g, &out.grads, 1.0),
            }
            out.virtual_grads
        };
        if model.mode != Mode::TargetOnly && !source.is_empty() {
            let out = model.bpr_loss(&TrainBatch { domain: Domain::Source, triples: source.to_vec() }, &VirtualSources::default())?;
            add(out, &mut grads);
        }
        if !target.is_empty() {
            let e2e = self.cfg.end_to_end && self.gen_active();
            let fresh = if e2e { Some(self.fresh_batch_virtuals(target)?) } else { None };
            let virtuals = fresh.as_ref().map_or(&self.virtuals, |(v, _)| v);
            let batch = TrainBatch { domain: Domain::Target, triples: target.to_vec() };
            let out = if e2e { model.bpr_loss(&batch, virtuals)? } else { model.bpr_loss_detached(&batch, virtuals)? };
            let vgrads = add(out, &mut grads);
            if let Some((virt, users)) = fresh {
                self.stash_virtual_grads(&virt, &users, &vgrads)?;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "L_CDR = {loss} at step {} (MAIN checksum {:016x})",
                self.step,
                self.store.checksum(Partition::Main)
            )));
        }
        match grads {
            Some(g) => self.store.adam_step(&g, &self.cfg.main_adam, Partition::Main)?,
            None => return Err(Error::invalid("empty training step")),
        }
        Ok(loss)
    }

    /// Virtual embeddings computed now for the non-overlapping users of a batch.
    fn fresh_batch_virtuals(&self, target: &[(usize, usize, usize)]) -> Result<(VirtualSources, Vec<usize>)> {
        let source_of = &self.store.model.source_of_target;
        let mut users: Vec<usize> = target.iter().map(|t| t.0).filter(|&u| source_of[u].is_none()).collect();
        users.sort_unstable();
        users.dedup();
        let gen = self.store.generator.as_ref().expect("generator mode");
        let model = &self.store.model;
        let profiles = generator::item_profiles(&self.data.target_split, &model.item_tgt);
        let keys = KeySet::build(&self.data.cross, model, &profiles)?;
        let out = generator::generate_for(gen, model, &profiles, &keys, &users, false, self.cfg.max_keys)?;
        Ok((VirtualSources::new(model.n_target_users(), &users, out.embeddings)?, users))
    }

    fn stash_virtual_grads(
        &mut self,
        virt: &VirtualSources,
        users: &[usize],
        vgrads: &std::collections::BTreeMap<usize, ndarray::Array1<f64>>,
    ) -> Result<()> {
        let gen = self.store.generator.as_ref().expect("generator mode");
        let model = &self.store.model;
        let profiles = generator::item_profiles(&self.data.target_split, &model.item_tgt);
        let keys = KeySet::build(&self.data.cross, model, &profiles)?;
        let q = QueryBatch::for_users(model, &profiles, &keys, users, false);
        let fwd = generator::forward(gen, &keys, &q, self.cfg.max_keys)?;
        debug_assert_eq!(&fwd.output, virt.table());
        let mut d_out = Matrix::zeros(fwd.output.dim());
        for (r, u) in users.iter().enumerate() {
            if let Some(g) = vgrads.get(u) {
                d_out.row_mut(r).assign(g);
            }
        }
        let grads = generator::backward_params(gen, &keys, &q, &fwd, &d_out)?;
        match self.stashed_gen_grads.as_mut() {
            Some(acc) => generator::add_grads(acc, &grads, 1.0),
            None => self.stashed_gen_grads = Some(grads),
        }
        Ok(())
    }

    /// One update of the generator on `γ2·L_super + (1 − γ2)·L_constrain`.
    fn gen_step(&mut self, rng: &mut ChaCha8Rng) -> Result<(Option<f64>, Option<f64>, f64)> {
        let data = self.data;
        let gen = self.store.generator.as_ref().expect("generator mode");
        let model = &self.store.model;
        let cross = &data.cross;
        let profiles = generator::item_profiles(&data.target_split, &model.item_tgt);
        let keys = KeySet::build(cross, model, &profiles)?;

        let n_sup = self.cfg.super_batch.min(cross.overlap.len());
        let sup_rows: Vec<usize> = sorted_sample(rng, cross.overlap.len(), n_sup);
        let n_con = self.cfg.limiter.pair_sample.min(cross.target_nonoverlap.len());
        let con_users: Vec<usize> = if n_con >= 2 {
            sorted_sample(rng, cross.target_nonoverlap.len(), n_con)
                .into_iter()
                .map(|k| cross.target_nonoverlap[k])
                .collect()
        } else {
            Vec::new()
        };

        let mut users: Vec<usize> = sup_rows.iter().map(|&k| cross.overlap[k].1).collect();
        users.extend(&con_users);
        let q = QueryBatch::for_users(model, &profiles, &keys, &users, self.cfg.leave_self_out);
        let fwd = generator::forward(gen, &keys, &q, self.cfg.max_keys)?;
        let d = model.dim();

        let gen_sup = fwd.output.slice(ndarray::s![..n_sup, ..]).to_owned();
        let mut truth = Matrix::zeros((n_sup, d));
        for (r, &k) in sup_rows.iter().enumerate() {
            truth.row_mut(r).assign(&model.user_src.row(cross.overlap[k].0));
        }
        let l_sup = super_loss(&gen_sup, &truth)?;
        let l_con = if con_users.is_empty() {
            LossGrad { value: 0.0, grad: Matrix::zeros((0, d)) }
        } else {
            constrain_loss(&fwd.output.slice(ndarray::s![n_sup.., ..]).to_owned())?
        };
        let obj = generator_objective(&self.cfg.limiter, &l_sup, &l_con);
        if !obj.value.is_finite() {
            return Err(Error::NonFinite(format!(
                "generator objective = {} (L_super {}, L_constrain {}) at step {} (GEN checksum {:016x})",
                obj.value,
                l_sup.value,
                l_con.value,
                self.step,
                self.store.checksum(Partition::Gen)
            )));
        }
        let mut d_out = Matrix::zeros(fwd.output.dim());
        d_out.slice_mut(ndarray::s![..n_sup, ..]).assign(&obj.super_grad);
        d_out.slice_mut(ndarray::s![n_sup.., ..]).assign(&obj.constrain_grad);
        let mut grads = generator::backward_params(gen, &keys, &q, &fwd, &d_out)?;
        if let Some(extra) = self.stashed_gen_grads.take() {
            generator::add_grads(&mut grads, &extra, 1.0);
        }
        self.store.adam_step(&grads, &self.cfg.gen_adam, Partition::Gen)?;
        Ok((
            Some(l_sup.value),
            (!con_users.is_empty()).then_some(l_con.value),
            obj.value,
        ))
    }

    /// One pass over both domains' train positives.
    pub fn run_epoch(&mut self) -> Result<EpochTiming> {
        let start = Instant::now();
        let mut rng = epoch_rng(self.cfg.seed, self.epoch);
        let mut tgt_pairs = self.data.target_split.train_pairs();
        tgt_pairs.shuffle(&mut rng);
        let mut src_pairs = if self.cfg.mode == Mode::TargetOnly {
            Vec::new()
        } else {
            self.data.source_split.train_pairs()
        };
        src_pairs.shuffle(&mut rng);

        let n_steps = tgt_pairs.len().div_ceil(self.cfg.batch_size).max(1);
        let src_chunk = src_pairs.len().div_ceil(n_steps).max(1);
        let mut gen_seconds = 0.0;
        let mut main_seconds = 0.0;
        for s in 0..n_steps {
            let t0 = Instant::now();
            let tgt_end = ((s + 1) * self.cfg.batch_size).min(tgt_pairs.len());
            let tgt = batch_triples(&self.data.target_split, &tgt_pairs[s * self.cfg.batch_size..tgt_end], &mut rng)?;
            let src_range = (s * src_chunk).min(src_pairs.len())..((s + 1) * src_chunk).min(src_pairs.len());
            let src = batch_triples(&self.data.source_split, &src_pairs[src_range], &mut rng)?;
            let run_gen = (s + 1) % self.cfg.gen_every == 0 || s + 1 == n_steps;
            let rec = if self.trace_checksums || !run_gen || !self.gen_active() {
                self.train_step(&src, &tgt, run_gen, &mut rng)?
            } else {
                // Same as train_step, split up to time the two halves.
                self.step += 1;
                let l_cdr = self.main_step(&src, &tgt)?;
                let t1 = Instant::now();
                main_seconds += (t1 - t0).as_secs_f64();
                let (l_super, l_constrain, objective) = self.gen_step(&mut rng)?;
                gen_seconds += t1.elapsed().as_secs_f64();
                self.log.steps.push(StepRecord {
                    step: self.step,
                    l_cdr,
                    l_super,
                    l_constrain,
                    objective: Some(objective),
                });
                continue;
            };
            main_seconds += t0.elapsed().as_secs_f64();
            self.log.steps.push(rec);
        }
        self.epoch += 1;
        if self.cfg.mode == Mode::CdrVug && self.epoch % self.cfg.refresh_every == 0 {
            let t = Instant::now();
            self.refresh_virtuals()?;
            gen_seconds += t.elapsed().as_secs_f64();
        }
        let seconds = start.elapsed().as_secs_f64();
        let timing = EpochTiming {
            epoch: self.epoch,
            seconds,
            main_seconds,
            generator_seconds: gen_seconds,
            seconds_without_generator: seconds - gen_seconds,
        };
        self.log.epochs.push(timing.clone());
        Ok(timing)
    }

    /// Evaluates with freshly generated virtual users. The training cache is
    /// left alone so evaluation never changes the training trajectory.
    pub fn evaluate(&self, split: EvalSplit) -> Result<EvalReport> {
        let virtuals = compute_virtuals(&self.store, self.data, &self.cfg)?;
        evaluate(&self.store.model, &virtuals, self.data, &DEFAULT_KS, split)
    }
}

fn sorted_sample(rng: &mut ChaCha8Rng, len: usize, amount: usize) -> Vec<usize> {
    let mut v = index::sample(rng, len, amount).into_vec();
    v.sort_unstable();
    v
}

/// Virtual embeddings of all non-overlapping target users for the store's
/// mode and generator kind. Empty outside the generator mode.
pub fn compute_virtuals(store: &ParameterStore, data: &CdrData, cfg: &TrainConfig) -> Result<VirtualSources> {
    let model = &store.model;
    if model.mode != Mode::CdrVug {
        return Ok(VirtualSources::default());
    }
    let users = &data.cross.target_nonoverlap;
    let table = match (cfg.generator, &store.generator) {
        (GeneratorKind::Attention, Some(gen)) => {
            let profiles = generator::item_profiles(&data.target_split, &model.item_tgt);
            let keys = KeySet::build(&data.cross, model, &profiles)?;
            generator::generate_for(gen, model, &profiles, &keys, users, false, cfg.max_keys)?.embeddings
        }
        (GeneratorKind::Knn, _) => {
            let mut t = Matrix::zeros((users.len(), model.dim()));
            for (r, &u) in users.iter().enumerate() {
                t.row_mut(r)
                    .assign(&generator::knn_generate(&data.cross, &model.user_tgt, &model.user_src, u, cfg.knn_n)?);
            }
            t
        }
        (GeneratorKind::Attention, None) => return Err(Error::invalid("generator mode without generator parameters")),
    };
    VirtualSources::new(model.n_target_users(), users, table)
}

/// Result of [`fit`]: the best validation checkpoint and the full log.
pub struct FitResult {
    pub store: ParameterStore,
    pub virtuals: VirtualSources,
    pub log: TrainLog,
    pub epochs_run: usize,
}

/// Trains for up to `cfg.epochs` epochs, evaluating on validation every
/// `eval_every` epochs and keeping the parameters with the best NDCG@10.
pub fn fit(data: &CdrData, cfg: &TrainConfig) -> Result<FitResult> {
    let mut t = Trainer::new(data, cfg.clone())?;
    fit_from(&mut t)?;
    let epochs_run = t.epoch();
    Ok(FitResult {
        store: t.store,
        virtuals: t.virtuals,
        log: t.log,
        epochs_run,
    })
}

/// Runs the epoch loop on an existing trainer and leaves it at the best checkpoint.
pub fn fit_from(t: &mut Trainer<'_>) -> Result<()> {
    let cfg = t.config().clone();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut since_best = 0;
    while t.epoch() < cfg.epochs {
        let timing = t.run_epoch()?;
        log::debug!(
            "epoch {} took {:.3}s ({:.3}s generator)",
            timing.epoch,
            timing.seconds,
            timing.generator_seconds
        );
        if t.epoch() % cfg.eval_every != 0 && t.epoch() < cfg.epochs {
            continue;
        }
        let report = t.evaluate(EvalSplit::Valid)?;
        let ndcg = report.ndcg(10);
        log::info!("epoch {}: valid NDCG@10 {:.5}", t.epoch(), ndcg);
        t.log.evals.push(EvalSnapshot { epoch: t.epoch(), report });
        if best.as_ref().is_none_or(|(b, _, _)| ndcg > *b) {
            best = Some((ndcg, t.epoch(), t.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after epoch {}", t.epoch());
                break;
            }
        }
    }
    if let Some((ndcg, epoch, store)) = best {
        t.store = store;
        t.log.best_epoch = Some(epoch);
        t.log.best_valid_ndcg10 = Some(ndcg);
    }
    t.refresh_virtuals()
}
