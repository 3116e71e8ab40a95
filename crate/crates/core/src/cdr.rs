//! The backbone cross-domain model: per-domain user and item embeddings with
//! the user's source embedding added into the target-domain score.
//!
//! A target user `u` scores item `i` as `(e_u + λ·ŝ_u) · e_i` where `ŝ_u` is the
//! user's own source embedding when it is overlapping, a generated virtual
//! source embedding in [`Mode::CdrVug`], and zero otherwise.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CrossDomainDataset, SplitDataset};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, sigmoid, softplus};
use crate::params::{init_embeddings, Grads, Matrix, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Cross-domain flow disabled: λ is treated as 0.
    TargetOnly,
    Cdr,
    CdrVug,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::TargetOnly => "target-only",
            Mode::Cdr => "cdr",
            Mode::CdrVug => "cdr-vug",
        })
    }
}

pub const USER_SRC: &str = "user_src";
pub const USER_TGT: &str = "user_tgt";
pub const ITEM_SRC: &str = "item_src";
pub const ITEM_TGT: &str = "item_tgt";

#[derive(Debug, Clone, PartialEq)]
pub struct CdrModel {
    pub mode: Mode,
    pub lambda: f64,
    pub user_src: Matrix,
    pub user_tgt: Matrix,
    pub item_src: Matrix,
    pub item_tgt: Matrix,
    /// For each target user, its source-domain index if overlapping.
    pub source_of_target: Vec<Option<usize>>,
}

/// Virtual source embeddings for some target users.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VirtualSources {
    slot: Vec<Option<usize>>,
    table: Matrix,
}

impl VirtualSources {
    pub fn new(n_target_users: usize, users: &[usize], table: Matrix) -> Result<Self> {
        if users.len() != table.nrows() {
            return Err(Error::invalid("virtual users and table rows differ"));
        }
        let mut slot = vec![None; n_target_users];
        for (row, &u) in users.iter().enumerate() {
            *slot
                .get_mut(u)
                .ok_or_else(|| Error::invalid(format!("virtual user {u} out of range")))? = Some(row);
        }
        Ok(Self { slot, table })
    }

    pub fn get(&self, user: usize) -> Option<ArrayView1<'_, f64>> {
        self.slot.get(user).copied().flatten().map(|r| self.table.row(r))
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Matrix {
        &mut self.table
    }

    /// Row index of `user` in the table.
    pub fn row_of(&self, user: usize) -> Option<usize> {
        self.slot.get(user).copied().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.table.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// (user, positive item, negative item) triples from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub domain: Domain,
    pub triples: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct BprOutput {
    pub loss: f64,
    /// One dense gradient per backbone tensor.
    pub grads: Grads,
    /// Gradient of the loss w.r.t. each consumed virtual source embedding.
    pub virtual_grads: BTreeMap<usize, Array1<f64>>,
}

enum SourceVec<'a> {
    None,
    Own(usize),
    Virtual(ArrayView1<'a, f64>),
}

impl CdrModel {
    pub fn new(cross: &CrossDomainDataset, dim: usize, mode: Mode, lambda: f64, init_std: f64, rng: &mut impl Rng) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite"));
        }
        // Empty domains still get a one-row table so shapes stay valid.
        let rows = |n: usize| n.max(1);
        Ok(Self {
            mode,
            lambda,
            user_src: init_embeddings(rows(cross.source.n_users()), dim, init_std, rng)?,
            user_tgt: init_embeddings(rows(cross.target.n_users()), dim, init_std, rng)?,
            item_src: init_embeddings(rows(cross.source.n_items()), dim, init_std, rng)?,
            item_tgt: init_embeddings(rows(cross.target.n_items()), dim, init_std, rng)?,
            source_of_target: cross.source_of_target(),
        })
    }

    /// Placeholder with empty tables, filled by checkpoint restore.
    pub(crate) fn empty(mode: Mode, lambda: f64, source_of_target: Vec<Option<usize>>) -> Self {
        Self {
            mode,
            lambda,
            user_src: Matrix::zeros((0, 0)),
            user_tgt: Matrix::zeros((0, 0)),
            item_src: Matrix::zeros((0, 0)),
            item_tgt: Matrix::zeros((0, 0)),
            source_of_target,
        }
    }

    pub fn dim(&self) -> usize {
        self.user_tgt.ncols()
    }

    pub fn n_target_users(&self) -> usize {
        self.user_tgt.nrows()
    }

    pub fn n_target_items(&self) -> usize {
        self.item_tgt.nrows()
    }

    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::TargetOnly => 0.0,
            _ => self.lambda,
        }
    }

    fn source_vec<'a>(&self, u: usize, virtual_source: Option<ArrayView1<'a, f64>>) -> SourceVec<'a> {
        if self.effective_lambda() == 0.0 {
            return SourceVec::None;
        }
        match (self.source_of_target[u], virtual_source) {
            (Some(s), _) => SourceVec::Own(s),
            (None, Some(v)) if self.mode == Mode::CdrVug => SourceVec::Virtual(v),
            _ => SourceVec::None,
        }
    }

    fn check_user(&self, u: usize, virtual_source: Option<ArrayView1<'_, f64>>) -> Result<()> {
        if u >= self.n_target_users() {
            return Err(Error::invalid(format!("target user {u} out of range")));
        }
        if let Some(v) = virtual_source {
            if v.len() != self.dim() {
                return Err(Error::ShapeMismatch {
                    name: "virtual_source".into(),
                    expected: (1, self.dim()),
                    actual: (1, v.len()),
                });
            }
        }
        Ok(())
    }

    /// The coupled user vector `e_u + λ·ŝ_u`.
    pub fn user_vector(&self, u: usize, virtual_source: Option<ArrayView1<'_, f64>>) -> Result<Array1<f64>> {
        self.check_user(u, virtual_source)?;
        let mut p = self.user_tgt.row(u).to_owned();
        let lambda = self.effective_lambda();
        let p_slice = p.as_slice_mut().unwrap();
        match self.source_vec(u, virtual_source) {
            SourceVec::None => {}
            SourceVec::Own(s) => axpy(lambda, self.user_src.row(s).as_slice().unwrap(), p_slice),
            SourceVec::Virtual(v) => match v.as_slice() {
                Some(v) => axpy(lambda, v, p_slice),
                None => p_slice.iter_mut().zip(v.iter()).for_each(|(p, v)| *p += lambda * v),
            },
        }
        Ok(p)
    }

    pub fn score(&self, u: usize, i: usize, virtual_source: Option<ArrayView1<'_, f64>>) -> Result<f64> {
        if i >= self.n_target_items() {
            return Err(Error::invalid(format!("target item {i} out of range")));
        }
        let p = self.user_vector(u, virtual_source)?;
        Ok(dot(p.as_slice().unwrap(), self.item_tgt.row(i).as_slice().unwrap()))
    }

    /// Scores of `u` against every target item.
    pub fn target_scores(&self, u: usize, virtual_source: Option<ArrayView1<'_, f64>>) -> Result<Vec<f64>> {
        let p = self.user_vector(u, virtual_source)?;
        let p = p.as_slice().unwrap();
        Ok(self
            .item_tgt
            .outer_iter()
            .map(|e_i| dot(p, e_i.as_slice().unwrap()))
            .collect())
    }

    pub fn recommend_topk(
        &self,
        u: usize,
        k: usize,
        exclude: &[usize],
        virtual_source: Option<ArrayView1<'_, f64>>,
    ) -> Result<Vec<usize>> {
        if k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        Ok(top_k_excluding(&self.target_scores(u, virtual_source)?, k, exclude))
    }

    /// Mean BPR loss `−ln σ(s⁺ − s⁻)` over the batch with gradients for every
    /// tensor the scores touch. Virtual embeddings are inputs, so their
    /// gradients are reported separately.
    pub fn bpr_loss(&self, batch: &TrainBatch, virtuals: &VirtualSources) -> Result<BprOutput> {
        self.bpr_loss_impl(batch, virtuals, true)
    }

    /// [`Self::bpr_loss`] with virtual embeddings treated as constants:
    /// `virtual_grads` stays empty.
    pub fn bpr_loss_detached(&self, batch: &TrainBatch, virtuals: &VirtualSources) -> Result<BprOutput> {
        self.bpr_loss_impl(batch, virtuals, false)
    }

    fn bpr_loss_impl(&self, batch: &TrainBatch, virtuals: &VirtualSources, virtual_grads_wanted: bool) -> Result<BprOutput> {
        if batch.triples.is_empty() {
            return Err(Error::invalid("empty BPR batch"));
        }
        let d = self.dim();
        let n = batch.triples.len() as f64;
        let mut g_user_src = Matrix::zeros(self.user_src.dim());
        let mut g_user_tgt = Matrix::zeros(self.user_tgt.dim());
        let mut g_item_src = Matrix::zeros(self.item_src.dim());
        let mut g_item_tgt = Matrix::zeros(self.item_tgt.dim());
        let mut virtual_grads: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
        let mut loss = 0.0;
        let lambda = self.effective_lambda();

        for &(u, i, j) in &batch.triples {
            match batch.domain {
                Domain::Source => {
                    let e_u = self.user_src.row(u);
                    let (e_i, e_j) = (self.item_src.row(i), self.item_src.row(j));
                    let (e_u, e_i, e_j) = (e_u.as_slice().unwrap(), e_i.as_slice().unwrap(), e_j.as_slice().unwrap());
                    let x = dot(e_u, e_i) - dot(e_u, e_j);
                    loss += softplus(-x);
                    let c = -sigmoid(-x) / n;
                    let gu = g_user_src.row_mut(u).into_slice().unwrap();
                    axpy(c, e_i, gu);
                    axpy(-c, e_j, gu);
                    axpy(c, e_u, g_item_src.row_mut(i).into_slice().unwrap());
                    axpy(-c, e_u, g_item_src.row_mut(j).into_slice().unwrap());
                }
                Domain::Target => {
                    let v = virtuals.get(u);
                    let p = self.user_vector(u, v)?;
                    let p = p.as_slice().unwrap();
                    let (e_i, e_j) = (self.item_tgt.row(i), self.item_tgt.row(j));
                    let (e_i, e_j) = (e_i.as_slice().unwrap(), e_j.as_slice().unwrap());
                    let x = dot(p, e_i) - dot(p, e_j);
                    loss += softplus(-x);
                    let c = -sigmoid(-x) / n;
                    let gu = g_user_tgt.row_mut(u).into_slice().unwrap();
                    axpy(c, e_i, gu);
                    axpy(-c, e_j, gu);
                    let gs: Option<&mut [f64]> = match self.source_vec(u, v) {
                        SourceVec::None => None,
                        SourceVec::Own(s) => Some(g_user_src.row_mut(s).into_slice().unwrap()),
                        SourceVec::Virtual(_) if !virtual_grads_wanted => None,
                        SourceVec::Virtual(_) => Some(
                            virtual_grads
                                .entry(u)
                                .or_insert_with(|| Array1::zeros(d))
                                .as_slice_mut()
                                .unwrap(),
                        ),
                    };
                    if let Some(gs) = gs {
                        axpy(c * lambda, e_i, gs);
                        axpy(-c * lambda, e_j, gs);
                    }
                    axpy(c, p, g_item_tgt.row_mut(i).into_slice().unwrap());
                    axpy(-c, p, g_item_tgt.row_mut(j).into_slice().unwrap());
                }
            }
        }
        let grads = Grads::from([
            (USER_SRC.to_string(), g_user_src),
            (USER_TGT.to_string(), g_user_tgt),
            (ITEM_SRC.to_string(), g_item_src),
            (ITEM_TGT.to_string(), g_item_tgt),
        ]);
        Ok(BprOutput {
            loss: loss / n,
            grads,
            virtual_grads,
        })
    }
}

impl ParamSet for CdrModel {
    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        vec![
            (ITEM_SRC, &self.item_src),
            (ITEM_TGT, &self.item_tgt),
            (USER_SRC, &self.user_src),
            (USER_TGT, &self.user_tgt),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        vec![
            (ITEM_SRC, &mut self.item_src),
            (ITEM_TGT, &mut self.item_tgt),
            (USER_SRC, &mut self.user_src),
            (USER_TGT, &mut self.user_tgt),
        ]
    }
}

/// Indices of the `k` largest scores outside `exclude` (sorted ascending),
/// ordered by score descending then index ascending.
pub fn top_k_excluding(scores: &[f64], k: usize, exclude: &[usize]) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand
}

/// `count` uniform draws (with replacement) from items that are not train
/// positives of `user`.
pub fn sample_negatives(split: &SplitDataset, user: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if split.train[user].len() >= split.n_items {
        return Err(Error::NoNegative(user));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let j = rng.random_range(0..split.n_items);
        if !split.is_train_positive(user, j) {
            out.push(j);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_cross, DomainDataset};
    use crate::params::finite_diff_check;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Source users {a, b}, target users {b, c}: target user 0 overlaps.
    fn tiny(mode: Mode, lambda: f64, d: usize) -> CdrModel {
        let src = DomainDataset::new(vec!["a".into(), "b".into()], vec!["x".into()], vec![(0, 0), (1, 0)]).unwrap();
        let tgt = DomainDataset::new(
            vec!["b".into(), "c".into()],
            vec!["p".into(), "q".into(), "r".into()],
            vec![(0, 0), (1, 1)],
        )
        .unwrap();
        let cross = build_cross(src, tgt);
        CdrModel::new(&cross, d, mode, lambda, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn zero_lambda_is_pure_target_mf() {
        let m = tiny(Mode::Cdr, 0.0, 3);
        let expected = dot(m.user_tgt.row(0).as_slice().unwrap(), m.item_tgt.row(1).as_slice().unwrap());
        assert_eq!(m.score(0, 1, None).unwrap(), expected);
    }

    #[test]
    fn nonoverlap_without_virtual_falls_back_to_zero() {
        let m = tiny(Mode::Cdr, 1.0, 3);
        let expected = dot(m.user_tgt.row(1).as_slice().unwrap(), m.item_tgt.row(2).as_slice().unwrap());
        assert_eq!(m.score(1, 2, None).unwrap(), expected);
    }

    #[test]
    fn overlapping_all_ones_scores_three() {
        let mut m = tiny(Mode::Cdr, 0.5, 2);
        m.user_tgt.fill(1.0);
        m.user_src.fill(1.0);
        m.item_tgt.fill(1.0);
        assert_eq!(m.score(0, 0, None).unwrap(), 3.0);
    }

    #[test]
    fn target_only_ignores_source() {
        let mut cdr = tiny(Mode::Cdr, 0.0, 3);
        let mut only = cdr.clone();
        only.mode = Mode::TargetOnly;
        only.lambda = 0.9;
        for u in 0..2 {
            assert_eq!(cdr.target_scores(u, None).unwrap(), only.target_scores(u, None).unwrap());
        }
        cdr.lambda = 0.9;
        assert_ne!(cdr.score(0, 0, None).unwrap(), only.score(0, 0, None).unwrap());
    }

    #[test]
    fn virtual_source_matching_truth_changes_nothing() {
        let cdr = tiny(Mode::Cdr, 0.7, 3);
        let mut vug = cdr.clone();
        vug.mode = Mode::CdrVug;
        let truth = cdr.user_src.row(1).to_owned();
        for i in 0..3 {
            assert_eq!(cdr.score(0, i, None).unwrap(), vug.score(0, i, Some(truth.view())).unwrap());
        }
    }

    #[test]
    fn virtual_source_dimension_is_checked() {
        let m = tiny(Mode::CdrVug, 0.5, 3);
        let bad = array![1.0, 2.0];
        assert!(matches!(m.score(1, 0, Some(bad.view())), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn topk_orders_and_breaks_ties() {
        assert_eq!(top_k_excluding(&[0.1, 0.9, 0.5], 2, &[]), vec![1, 2]);
        assert_eq!(top_k_excluding(&[0.3; 5], 3, &[]), vec![0, 1, 2]);
        assert!(top_k_excluding(&[0.3, 0.4], 2, &[0, 1]).is_empty());
        assert_eq!(top_k_excluding(&[0.3, 0.4, 0.1], 10, &[1]), vec![0, 2]);
    }

    #[test]
    fn equal_scores_give_ln2() {
        let m = tiny(Mode::Cdr, 0.5, 3);
        let mut same = m.clone();
        same.item_tgt.row_mut(2).assign(&m.item_tgt.row(0));
        let batch = TrainBatch {
            domain: Domain::Target,
            triples: vec![(0, 0, 2)],
        };
        let out = same.bpr_loss(&batch, &VirtualSources::default()).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn large_margin_gives_vanishing_loss() {
        let mut m = tiny(Mode::Cdr, 0.0, 2);
        m.user_tgt.fill(1.0);
        m.item_tgt.row_mut(0).fill(400.0);
        m.item_tgt.row_mut(1).fill(-400.0);
        let batch = TrainBatch {
            domain: Domain::Target,
            triples: vec![(0, 0, 1)],
        };
        assert!(m.bpr_loss(&batch, &VirtualSources::default()).unwrap().loss < 1e-300);
    }

    #[test]
    fn bpr_gradients_match_finite_differences() {
        let mut m = tiny(Mode::CdrVug, 0.6, 4);
        let virtuals =
            VirtualSources::new(2, &[1], init_embeddings(1, 4, 0.5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()).unwrap();
        for domain in [Domain::Target, Domain::Source] {
            let batch = TrainBatch {
                domain,
                triples: vec![(0, 0, 1), (1, 1, 2), (1, 0, 2)],
            };
            let batch = if domain == Domain::Source {
                TrainBatch {
                    domain,
                    triples: vec![(0, 0, 0), (1, 0, 0)],
                }
            } else {
                batch
            };
            let out = m.bpr_loss(&batch, &virtuals).unwrap();
            let err = finite_diff_check(
                |p: &CdrModel| p.bpr_loss(&batch, &virtuals).unwrap().loss,
                &mut m,
                &out.grads,
                1e-5,
                200,
                11,
            )
            .unwrap();
            assert!(err < 1e-7, "{domain:?}: {err}");
        }
    }

    #[test]
    fn virtual_gradient_matches_finite_differences() {
        let m = tiny(Mode::CdrVug, 0.6, 3);
        let table = array![[0.3, -0.2, 0.5]];
        let batch = TrainBatch {
            domain: Domain::Target,
            triples: vec![(1, 1, 2), (1, 0, 2)],
        };
        let out = m.bpr_loss(&batch, &VirtualSources::new(2, &[1], table.clone()).unwrap()).unwrap();
        let analytic = &out.virtual_grads[&1];
        for k in 0..3 {
            let h = 1e-6;
            let mut plus = table.clone();
            plus[[0, k]] += h;
            let mut minus = table.clone();
            minus[[0, k]] -= h;
            let lp = m.bpr_loss(&batch, &VirtualSources::new(2, &[1], plus).unwrap()).unwrap().loss;
            let lm = m.bpr_loss(&batch, &VirtualSources::new(2, &[1], minus).unwrap()).unwrap().loss;
            assert!((analytic[k] - (lp - lm) / (2.0 * h)).abs() < 1e-8);
        }
        let detached = m.bpr_loss_detached(&batch, &VirtualSources::new(2, &[1], table).unwrap()).unwrap();
        assert_eq!(detached.loss, out.loss);
        assert_eq!(detached.grads, out.grads);
        assert!(detached.virtual_grads.is_empty());
    }

    fn split_with(n_items: usize, train: Vec<Vec<usize>>) -> SplitDataset {
        let n_users = train.len();
        SplitDataset {
            n_users,
            n_items,
            ratios: (1.0, 0.0, 0.0),
            valid: vec![vec![]; n_users],
            test: vec![vec![]; n_users],
            train,
            skipped_users: 0,
        }
    }

    #[test]
    fn negatives_avoid_positives() {
        let split = split_with(4, vec![vec![0, 1, 3], vec![0, 1, 2, 3]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_negatives(&split, 0, 50, &mut rng).unwrap().iter().all(|&j| j == 2));
        assert!(matches!(sample_negatives(&split, 1, 1, &mut rng), Err(Error::NoNegative(1))));

        let a = sample_negatives(&split, 0, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_negatives(&split, 0, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negatives_are_uniform() {
        // 10 eligible items, 1e5 draws: each count ~ Binomial(1e5, 0.1).
        let split = split_with(12, vec![vec![3, 7]]);
        let draws = sample_negatives(&split, 0, 100_000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut counts = [0usize; 12];
        for j in draws {
            counts[j] += 1;
        }
        let (mean, sd) = (10_000.0, (100_000.0f64 * 0.1 * 0.9).sqrt());
        for (j, &c) in counts.iter().enumerate() {
            if j == 3 || j == 7 {
                assert_eq!(c, 0);
            } else {
                assert!((c as f64 - mean).abs() < 4.0 * sd, "item {j}: {c}");
            }
        }
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != 3 && *j != 7)
            .map(|(_, &c)| (c as f64 - mean).powi(2) / mean)
            .sum();
        // chi-square with 9 dof: 99.9th percentile is 27.88
        assert!(chi2 < 27.88, "chi2 {chi2}");
    }
}
