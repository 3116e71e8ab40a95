#![allow(dead_code)]

use cdr_fair::dataset::{prepare, CdrData};
use cdr_fair::synth::{synth_cdr, SyntheticCdrSpec};
use cdr_fair::trainer::TrainConfig;

pub fn small_spec(n_users: usize, seed: u64) -> SyntheticCdrSpec {
    SyntheticCdrSpec {
        n_source_users: n_users,
        n_target_users: n_users,
        n_items: 60,
        latent_dim: 4,
        interactions_per_user: 10,
        seed,
        ..Default::default()
    }
}

pub fn small_data(n_users: usize, seed: u64) -> CdrData {
    let r = synth_cdr(&small_spec(n_users, seed)).unwrap();
    prepare(r.source, r.target, 3.0, 2, None, seed).unwrap()
}

/// A fast configuration for tests on tiny data.
pub fn quick_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        dim: 8,
        super_batch: 16,
        eval_every: 1,
        ..Default::default()
    }
}
