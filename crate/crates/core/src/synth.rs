//! Synthetic two-domain interaction data with a controllable share of
//! overlapping users.
//!
//! Every person has a latent preference vector `z`. Domain `D` maps it
//! through `A_D = I + shift·G_D` and scores items by `(A_D z)·v_i / √L` plus
//! Gaussian noise; the person interacts with the top-scoring items. Item
//! factors `v_i` are shared by index across the two domains, so with zero
//! shift and zero noise both domains rank items identically.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionRecord;
use crate::error::{Error, Result};
use crate::params::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCdrSpec {
    pub n_source_users: usize,
    pub n_target_users: usize,
    /// Share of target users that also appear in the source domain.
    pub overlap_ratio: f64,
    pub n_items: usize,
    pub latent_dim: usize,
    pub interactions_per_user: usize,
    /// Standard deviation of the affinity noise.
    pub noise: f64,
    /// Scale of the random part of each domain's transform.
    pub domain_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticCdrSpec {
    fn default() -> Self {
        Self {
            n_source_users: 2000,
            n_target_users: 2000,
            overlap_ratio: 0.3,
            n_items: 500,
            latent_dim: 8,
            interactions_per_user: 20,
            noise: 0.5,
            domain_shift: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticCdrSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap_ratio) {
            return Err(Error::invalid(format!("overlap_ratio = {} outside [0, 1]", self.overlap_ratio)));
        }
        if self.n_target_users == 0 || self.n_items == 0 || self.latent_dim == 0 || self.interactions_per_user == 0 {
            return Err(Error::invalid("synthetic counts must be positive"));
        }
        if self.interactions_per_user > self.n_items {
            return Err(Error::invalid("more interactions per user than items"));
        }
        if self.n_overlap() > self.n_source_users {
            return Err(Error::invalid(format!(
                "{} overlapping users do not fit into {} source users",
                self.n_overlap(),
                self.n_source_users
            )));
        }
        if !(self.noise >= 0.0 && self.domain_shift >= 0.0) {
            return Err(Error::invalid("noise and domain_shift must be non-negative"));
        }
        Ok(())
    }

    pub fn n_overlap(&self) -> usize {
        (self.overlap_ratio * self.n_target_users as f64).round() as usize
    }
}

/// Raw records for the two domains. Ratings are all 5.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecords {
    pub source: Vec<InteractionRecord>,
    pub target: Vec<InteractionRecord>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Indices of the `l` largest affinities, ties to the lower index.
fn top_items(affinity: &[f64], l: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..affinity.len()).collect();
    order.sort_by(|&a, &b| affinity[b].total_cmp(&affinity[a]).then(a.cmp(&b)));
    order.truncate(l);
    order.sort_unstable();
    order
}

struct Domain {
    transform: Matrix,
    prefix: &'static str,
}

/// Draws the two domains. Person ids are shared, so overlapping users are
/// found by id when the datasets are linked.
pub fn synth_cdr(spec: &SyntheticCdrSpec) -> Result<SyntheticRecords> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let l = spec.latent_dim;
    let items = gaussian(&mut rng, spec.n_items, l);
    let mut domain = |prefix| Domain {
        transform: Matrix::eye(l) + gaussian(&mut rng, l, l) * spec.domain_shift,
        prefix,
    };
    let (src, tgt) = (domain("s"), domain("t"));

    let n_overlap = spec.n_overlap();
    let n_target_only = spec.n_target_users - n_overlap;
    let n_source_only = spec.n_source_users - n_overlap;
    let n_people = n_overlap + n_target_only + n_source_only;
    let people = gaussian(&mut rng, n_people, l);
    let scale = 1.0 / (l as f64).sqrt();

    let mut emit = |person: usize, d: &Domain, out: &mut Vec<InteractionRecord>| {
        let pref = d.transform.dot(&people.row(person));
        let affinity: Vec<f64> = items
            .outer_iter()
            .map(|v| pref.dot(&v) * scale + spec.noise * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        for i in top_items(&affinity, spec.interactions_per_user) {
            out.push(InteractionRecord {
                user: format!("p{person}"),
                item: format!("{}{i}", d.prefix),
                rating: 5.0,
                timestamp: None,
            });
        }
    };

    // Persons [0, n_overlap) live in both domains, then target-only, then source-only.
    let mut target = Vec::new();
    let mut source = Vec::new();
    for p in 0..n_overlap + n_target_only {
        emit(p, &tgt, &mut target);
    }
    for p in (0..n_overlap).chain(n_overlap + n_target_only..n_people) {
        emit(p, &src, &mut source);
    }
    // Interleave groups in the target index space.
    shuffle_users(&mut target, &mut rng);
    shuffle_users(&mut source, &mut rng);
    Ok(SyntheticRecords { source, target })
}

/// Reorders whole users so dense indices do not encode group membership.
fn shuffle_users(records: &mut Vec<InteractionRecord>, rng: &mut ChaCha8Rng) {
    let mut blocks: Vec<Vec<InteractionRecord>> = Vec::new();
    for r in records.drain(..) {
        match blocks.last_mut() {
            Some(b) if b[0].user == r.user => b.push(r),
            _ => blocks.push(vec![r]),
        }
    }
    blocks.shuffle(rng);
    records.extend(blocks.into_iter().flatten());
}
