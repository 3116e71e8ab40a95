//! Losses that shape the generator: alignment of generated overlap-user
//! embeddings with their true source embeddings, and a uniformity term that
//! keeps virtual users apart from each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimiterConfig {
    pub gamma2: f64,
    /// Non-overlapping users sampled per generator step for the uniformity term.
    pub pair_sample: usize,
}

impl Default for LimiterConfig {
    fn default() -> Self {
        Self {
            gamma2: 0.5,
            pair_sample: 256,
        }
    }
}

impl LimiterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma2) {
            return Err(Error::invalid(format!("gamma2 = {} outside [0, 1]", self.gamma2)));
        }
        if self.pair_sample < 2 {
            return Err(Error::invalid("uniformity sample size must be at least 2"));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to the generated rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Matrix,
}

/// Mean squared distance between generated and true rows. `truth` is a constant.
pub fn super_loss(generated: &Matrix, truth: &Matrix) -> Result<LossGrad> {
    if generated.nrows() == 0 {
        return Err(Error::EmptyGroup("overlapping users (supervision)".into()));
    }
    if generated.dim() != truth.dim() {
        return Err(Error::ShapeMismatch {
            name: "super_loss truth".into(),
            expected: generated.dim(),
            actual: truth.dim(),
        });
    }
    let n = generated.nrows() as f64;
    let diff = generated - truth;
    let value = diff.iter().map(|x| x * x).sum::<f64>() / n;
    Ok(LossGrad {
        value,
        grad: diff * (2.0 / n),
    })
}

/// `log mean_{i<j} exp(−2‖g_i − g_j‖²)`, computed with log-sum-exp.
pub fn constrain_loss(generated: &Matrix) -> Result<LossGrad> {
    let n = generated.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("uniformity loss needs at least 2 embeddings, got {n}")));
    }
    let mut exps = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = generated
                .row(i)
                .iter()
                .zip(generated.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            exps.push(-2.0 * d2);
        }
    }
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for e in exps.iter_mut() {
        *e = (*e - max).exp();
        z += *e;
    }
    let pairs = exps.len() as f64;
    let value = max + z.ln() - pairs.ln();

    let mut grad = Matrix::zeros(generated.dim());
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let w = -4.0 * exps[k] / z;
            k += 1;
            for c in 0..generated.ncols() {
                let g = w * (generated[[i, c]] - generated[[j, c]]);
                grad[[i, c]] += g;
                grad[[j, c]] -= g;
            }
        }
    }
    Ok(LossGrad { value, grad })
}

/// Generator objective `γ2·L_super + (1 − γ2)·L_constrain`. The two parts
/// usually have gradients on different row sets, so they are returned scaled
/// rather than summed.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub super_grad: Matrix,
    pub constrain_grad: Matrix,
}

pub fn generator_objective(cfg: &LimiterConfig, l_super: &LossGrad, l_constrain: &LossGrad) -> Objective {
    let g = cfg.gamma2;
    Objective {
        value: g * l_super.value + (1.0 - g) * l_constrain.value,
        super_grad: &l_super.grad * g,
        constrain_grad: &l_constrain.grad * (1.0 - g),
    }
}
