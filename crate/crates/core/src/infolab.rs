//! Discrete check of why overlapping users are easier to serve.
//!
//! A latent `z` drives one source record and one target record through two
//! emission channels. For an overlapping user both records share the same
//! `z`; for a non-overlapping user the two records come from independent
//! draws, so the source record carries no information about the target one.
//! All quantities are in bits.

use ndarray::{Array1, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Matrix;

const ROW_TOL: f64 = 1e-12;
/// Mutual information below this is reported as exactly 0.
pub const MI_SNAP: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub prior: Vec<f64>,
    /// `|Z| × |V^S|`, row `z` is `p_S(· | z)`.
    pub emit_source: Vec<Vec<f64>>,
    /// `|Z| × |V^T|`.
    pub emit_target: Vec<Vec<f64>>,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    Overlapping,
    Nonoverlapping,
}

fn check_prob(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() || v.iter().any(|p| !p.is_finite() || *p < 0.0) || (v.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidChannel(format!("{what} is not a probability vector")));
    }
    Ok(())
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        check_prob(&self.prior, "prior")?;
        let z = self.prior.len();
        for (name, m) in [("source emission", &self.emit_source), ("target emission", &self.emit_target)] {
            if m.len() != z {
                return Err(Error::InvalidChannel(format!("{name} has {} rows, prior has {z}", m.len())));
            }
            let width = m[0].len();
            for (r, row) in m.iter().enumerate() {
                if row.len() != width {
                    return Err(Error::InvalidChannel(format!("{name} rows differ in length")));
                }
                check_prob(row, &format!("{name} row {r}"))?;
            }
        }
        Ok(())
    }

    pub fn n_latent(&self) -> usize {
        self.prior.len()
    }

    pub fn n_source(&self) -> usize {
        self.emit_source[0].len()
    }

    pub fn n_target(&self) -> usize {
        self.emit_target[0].len()
    }

    /// Uniform binary latent observed through binary symmetric channels.
    pub fn binary_symmetric(flip_source: f64, flip_target: f64, n: usize, seed: u64) -> Self {
        let bsc = |f: f64| vec![vec![1.0 - f, f], vec![f, 1.0 - f]];
        Self {
            prior: vec![0.5, 0.5],
            emit_source: bsc(flip_source),
            emit_target: bsc(flip_target),
            n,
            seed,
        }
    }

    /// A random spec with every alphabet in `2..=max_alphabet`.
    pub fn random(rng: &mut impl Rng, max_alphabet: usize, n: usize) -> Self {
        let max_alphabet = max_alphabet.max(2);
        let z = rng.random_range(2..=max_alphabet);
        let vs = rng.random_range(2..=max_alphabet);
        let vt = rng.random_range(2..=max_alphabet);
        let seed = rng.random();
        Self {
            prior: random_simplex(rng, z),
            emit_source: (0..z).map(|_| random_simplex(rng, vs)).collect(),
            emit_target: (0..z).map(|_| random_simplex(rng, vt)).collect(),
            n,
            seed,
        }
    }

    /// True when all target emission rows coincide, so `z` has no influence
    /// on the target record.
    pub fn target_channel_degenerate(&self) -> bool {
        self.emit_target.windows(2).all(|w| w[0] == w[1])
    }
}

/// A probability vector, renormalised so its entries sum to 1 to within
/// rounding of the final division.
fn random_simplex(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// `spec.n` pairs `(r^S, r^T)`; deterministic in `spec.seed`.
pub fn sample_pairs(spec: &ChannelSpec, mode: PairMode) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    let weighted = |w: &[f64]| WeightedIndex::new(w).map_err(|e| Error::InvalidChannel(e.to_string()));
    let prior = weighted(&spec.prior)?;
    let src: Vec<_> = spec.emit_source.iter().map(|r| weighted(r)).collect::<Result<_>>()?;
    let tgt: Vec<_> = spec.emit_target.iter().map(|r| weighted(r)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n)
        .map(|_| {
            let z = prior.sample(&mut rng);
            let z_t = match mode {
                PairMode::Overlapping => z,
                PairMode::Nonoverlapping => prior.sample(&mut rng),
            };
            (src[z].sample(&mut rng), tgt[z_t].sample(&mut rng))
        })
        .collect())
}

/// Normalised histogram of sampled pairs.
pub fn empirical_joint(pairs: &[(usize, usize)], n_source: usize, n_target: usize) -> Result<Matrix> {
    if pairs.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let mut m = Matrix::zeros((n_source, n_target));
    for &(s, t) in pairs {
        m[[s, t]] += 1.0;
    }
    Ok(m / pairs.len() as f64)
}

/// Exact `p(r^S, r^T)` of the generative model.
pub fn exact_joint(spec: &ChannelSpec, mode: PairMode) -> Result<Matrix> {
    spec.validate()?;
    let (vs, vt) = (spec.n_source(), spec.n_target());
    let mut joint = Matrix::zeros((vs, vt));
    match mode {
        PairMode::Overlapping => {
            for (z, &pz) in spec.prior.iter().enumerate() {
                for s in 0..vs {
                    for t in 0..vt {
                        joint[[s, t]] += pz * spec.emit_source[z][s] * spec.emit_target[z][t];
                    }
                }
            }
        }
        PairMode::Nonoverlapping => {
            let marginal = |m: &Vec<Vec<f64>>, width: usize| -> Vec<f64> {
                (0..width)
                    .map(|r| spec.prior.iter().zip(m).map(|(pz, row)| pz * row[r]).sum())
                    .collect()
            };
            let (ps, pt) = (marginal(&spec.emit_source, vs), marginal(&spec.emit_target, vt));
            for s in 0..vs {
                for t in 0..vt {
                    joint[[s, t]] = ps[s] * pt[t];
                }
            }
        }
    }
    Ok(joint)
}

fn check_joint(joint: &Matrix) -> Result<()> {
    if joint.is_empty() || joint.iter().any(|p| !p.is_finite() || *p < 0.0) || (joint.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidChannel("joint is not a probability table".into()));
    }
    Ok(())
}

fn entropy<'a>(ps: impl IntoIterator<Item = &'a f64>) -> f64 {
    -ps.into_iter().filter(|&&p| p > 0.0).map(|&p| p * p.log2()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoQuantities {
    /// `KL(p(s,t) ‖ p(s)p(t))`, snapped to 0 below [`MI_SNAP`].
    pub mutual_information: f64,
    pub h_target: f64,
    /// `H(S,T) − H(S)`, computed without reference to the MI.
    pub h_target_given_source: f64,
}

pub fn info_quantities(joint: &Matrix) -> Result<InfoQuantities> {
    check_joint(joint)?;
    let ps: Array1<f64> = joint.sum_axis(Axis(1));
    let pt: Array1<f64> = joint.sum_axis(Axis(0));
    let mut mi = 0.0;
    for ((s, t), &p) in joint.indexed_iter() {
        if p > 0.0 {
            mi += p * (p / (ps[s] * pt[t])).log2();
        }
    }
    if mi < MI_SNAP {
        mi = 0.0;
    }
    let h_cond = entropy(joint.iter()) - entropy(ps.iter());
    Ok(InfoQuantities {
        mutual_information: mi,
        h_target: entropy(pt.iter()),
        h_target_given_source: h_cond.max(0.0),
    })
}

/// Error of the optimal predictor of `r^T` from `r^S`: `1 − Σ_s max_t p(s, t)`.
pub fn bayes_error(joint: &Matrix) -> Result<f64> {
    check_joint(joint)?;
    let correct: f64 = joint
        .outer_iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .sum();
    Ok((1.0 - correct).clamp(0.0, 1.0))
}

/// Fano's lower bound on prediction error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanoBound {
    pub raw: f64,
    /// `raw` clamped below at 0.
    pub bound: f64,
}

pub fn fano_bound(h_cond: f64, n_target: usize) -> Result<FanoBound> {
    if n_target < 2 {
        return Err(Error::invalid("Fano bound needs at least 2 target symbols"));
    }
    let raw = (h_cond - 1.0) / (n_target as f64).log2();
    Ok(FanoBound { raw, bound: raw.max(0.0) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: PairMode,
    pub exact: InfoQuantities,
    pub bayes_error: f64,
    pub fano: FanoBound,
    /// Plug-in estimates from `spec.n` samples.
    pub empirical: Option<InfoQuantities>,
    pub empirical_argmax_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub spec: ChannelSpec,
    pub overlapping: ModeReport,
    pub nonoverlapping: ModeReport,
    /// Overlapping MI is zero, so no strict gap is expected.
    pub degenerate: bool,
    pub entropy_gap: f64,
    pub strict_entropy_gap_holds: Option<bool>,
    pub bayes_ordering_holds: bool,
}

/// Fraction of samples where the argmax-of-joint predictor misses `r^T`.
pub fn argmax_predictor_error(joint: &Matrix, pairs: &[(usize, usize)]) -> f64 {
    let best: Vec<usize> = joint
        .outer_iter()
        .map(|row| {
            let mut b = 0;
            for (t, &p) in row.iter().enumerate() {
                if p > row[b] {
                    b = t;
                }
            }
            b
        })
        .collect();
    pairs.iter().filter(|&&(s, t)| best[s] != t).count() as f64 / pairs.len() as f64
}

fn mode_report(spec: &ChannelSpec, mode: PairMode) -> Result<ModeReport> {
    let joint = exact_joint(spec, mode)?;
    let exact = info_quantities(&joint)?;
    let (empirical, empirical_argmax_error) = if spec.n > 0 {
        let pairs = sample_pairs(spec, mode)?;
        let emp = empirical_joint(&pairs, spec.n_source(), spec.n_target())?;
        (Some(info_quantities(&emp)?), Some(argmax_predictor_error(&joint, &pairs)))
    } else {
        (None, None)
    };
    Ok(ModeReport {
        mode,
        exact,
        bayes_error: bayes_error(&joint)?,
        fano: fano_bound(exact.h_target_given_source, spec.n_target())?,
        empirical,
        empirical_argmax_error,
    })
}

/// Both pairing modes side by side. A non-degenerate spec that violates the
/// expected ordering is an error.
pub fn bias_experiment(spec: &ChannelSpec) -> Result<BiasReport> {
    spec.validate()?;
    let overlapping = mode_report(spec, PairMode::Overlapping)?;
    let nonoverlapping = mode_report(spec, PairMode::Nonoverlapping)?;
    let degenerate = overlapping.exact.mutual_information == 0.0;
    let gap = nonoverlapping.exact.h_target_given_source - overlapping.exact.h_target_given_source;
    let strict = (!degenerate).then_some(gap > 0.0);
    let bayes_ok = overlapping.bayes_error <= nonoverlapping.bayes_error + 1e-15;
    if strict == Some(false) || !bayes_ok {
        return Err(Error::invalid(format!(
            "overlapping users not advantaged: entropy gap {gap}, bayes errors {} vs {}",
            overlapping.bayes_error, nonoverlapping.bayes_error
        )));
    }
    Ok(BiasReport {
        spec: spec.clone(),
        overlapping,
        nonoverlapping,
        degenerate,
        entropy_gap: gap,
        strict_entropy_gap_holds: strict,
        bayes_ordering_holds: bayes_ok,
    })
}

/// CSV with one line per (spec, mode) over `n_specs` random specs.
pub fn sweep_csv(n_specs: usize, max_alphabet: usize, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("spec,n_latent,n_source,n_target,mode,mutual_information,h_target,h_target_given_source,bayes_error,fano_raw,fano_bound\n");
    for id in 0..n_specs {
        let spec = ChannelSpec::random(&mut rng, max_alphabet, 0);
        for mode in [PairMode::Overlapping, PairMode::Nonoverlapping] {
            let r = mode_report(&spec, mode)?;
            out.push_str(&format!(
                "{id},{},{},{},{},{},{},{},{},{},{}\n",
                spec.n_latent(),
                spec.n_source(),
                spec.n_target(),
                match mode {
                    PairMode::Overlapping => "overlapping",
                    PairMode::Nonoverlapping => "nonoverlapping",
                },
                r.exact.mutual_information,
                r.exact.h_target,
                r.exact.h_target_given_source,
                r.bayes_error,
                r.fano.raw,
                r.fano.bound
            ));
        }
    }
    Ok(out)
}
