//! Virtual source-domain users for non-overlapping target users.
//!
//! For a query user the generator attends over all overlapping users through
//! two softmax channels: one compares target-domain user embeddings, the other
//! compares mean train-item embeddings ("item profiles"). The channels are
//! mixed as `α = γ1·α_user + (1 − γ1)·α_item` and the output is
//! `Σ_u α_u (W_v e^S_u + b_v)` over the overlapping users' source embeddings.
//!
//! Two implementations exist side by side. The per-user functions
//! ([`user_attention_logits`], [`attention_weights`], [`generate_virtual`]) follow
//! the formulas literally and serve as the reference. [`forward`] and
//! [`backward`] compute the same thing for a batch of queries with matrix
//! products and provide gradients for training.

use ndarray::{s, Array1, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::cdr::CdrModel;
use crate::dataset::{CdrData, CrossDomainDataset, SplitDataset};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::params::{Grads, Matrix, ParamSet};

/// Query/key projections of one attention channel. Biases are `1 × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionChannel {
    pub w_q: Matrix,
    pub b_q: Matrix,
    pub w_k: Matrix,
    pub b_k: Matrix,
}

impl AttentionChannel {
    fn identity(d: usize) -> Self {
        Self {
            w_q: Matrix::eye(d),
            b_q: Matrix::zeros((1, d)),
            w_k: Matrix::eye(d),
            b_k: Matrix::zeros((1, d)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub w_v: Matrix,
    pub b_v: Matrix,
    pub user: AttentionChannel,
    pub item: AttentionChannel,
    /// Weight of the user channel; not trained.
    pub gamma1: f64,
}

pub const W_V: &str = "gen.w_v";
pub const B_V: &str = "gen.b_v";
pub const USER_W_Q: &str = "gen.user.w_q";
pub const USER_B_Q: &str = "gen.user.b_q";
pub const USER_W_K: &str = "gen.user.w_k";
pub const USER_B_K: &str = "gen.user.b_k";
pub const ITEM_W_Q: &str = "gen.item.w_q";
pub const ITEM_B_Q: &str = "gen.item.b_q";
pub const ITEM_W_K: &str = "gen.item.w_k";
pub const ITEM_B_K: &str = "gen.item.b_k";

impl GeneratorParams {
    /// All projections identity, all biases zero.
    pub fn identity(d: usize, gamma1: f64) -> Self {
        Self {
            w_v: Matrix::eye(d),
            b_v: Matrix::zeros((1, d)),
            user: AttentionChannel::identity(d),
            item: AttentionChannel::identity(d),
            gamma1,
        }
    }

    /// Query/key projections `scale·I` plus N(0, std²) noise; `W_v` is identity.
    pub fn init(d: usize, gamma1: f64, scale: f64, std: f64, rng: &mut impl Rng) -> Result<Self> {
        check_gamma(gamma1)?;
        let mut p = Self::identity(d, gamma1);
        for w in [&mut p.user.w_q, &mut p.user.w_k, &mut p.item.w_q, &mut p.item.w_k] {
            *w *= scale;
        }
        if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
            for w in [&mut p.user.w_q, &mut p.user.w_k, &mut p.item.w_q, &mut p.item.w_k] {
                w.mapv_inplace(|x| x + normal.sample(rng));
            }
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.w_v.nrows()
    }

    fn channel(&self, c: Channel) -> &AttentionChannel {
        match c {
            Channel::User => &self.user,
            Channel::Item => &self.item,
        }
    }
}

impl ParamSet for GeneratorParams {
    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        vec![
            (B_V, &self.b_v),
            (ITEM_B_K, &self.item.b_k),
            (ITEM_B_Q, &self.item.b_q),
            (ITEM_W_K, &self.item.w_k),
            (ITEM_W_Q, &self.item.w_q),
            (USER_B_K, &self.user.b_k),
            (USER_B_Q, &self.user.b_q),
            (USER_W_K, &self.user.w_k),
            (USER_W_Q, &self.user.w_q),
            (W_V, &self.w_v),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        vec![
            (B_V, &mut self.b_v),
            (ITEM_B_K, &mut self.item.b_k),
            (ITEM_B_Q, &mut self.item.b_q),
            (ITEM_W_K, &mut self.item.w_k),
            (ITEM_W_Q, &mut self.item.w_q),
            (USER_B_K, &mut self.user.b_k),
            (USER_B_Q, &mut self.user.b_q),
            (USER_W_K, &mut self.user.w_k),
            (USER_W_Q, &mut self.user.w_q),
            (W_V, &mut self.w_v),
        ]
    }
}

fn check_gamma(g: f64) -> Result<()> {
    if (0.0..=1.0).contains(&g) {
        Ok(())
    } else {
        Err(Error::invalid(format!("gamma1 = {g} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    User,
    Item,
}

fn project(w: &Matrix, b: &Matrix, x: ArrayView1<'_, f64>) -> Array1<f64> {
    w.dot(&x) + &b.row(0)
}

fn channel_logits(ch: &AttentionChannel, query: ArrayView1<'_, f64>, keys: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let d = ch.w_q.ncols();
    if keys.nrows() == 0 {
        return Err(Error::EmptyGroup("overlapping users (no attention keys)".into()));
    }
    if query.len() != d || keys.ncols() != d {
        return Err(Error::ShapeMismatch {
            name: "attention query/keys".into(),
            expected: (1, d),
            actual: (query.len(), keys.ncols()),
        });
    }
    let q = project(&ch.w_q, &ch.b_q, query);
    let scale = (d as f64).sqrt();
    Ok(keys
        .outer_iter()
        .map(|k| {
            let k = project(&ch.w_k, &ch.b_k, k);
            dot(q.as_slice().unwrap(), k.as_slice().unwrap()) / scale
        })
        .collect())
}

/// `β_u = (W_q e_q + b_q)·(W_k e_u + b_k) / √d` for every key row `e_u`, user channel.
pub fn user_attention_logits(
    params: &GeneratorParams,
    query: ArrayView1<'_, f64>,
    keys: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    channel_logits(&params.user, query, keys)
}

/// Same as [`user_attention_logits`] with the item channel's projections,
/// applied to item profiles.
pub fn item_attention_logits(
    params: &GeneratorParams,
    query: ArrayView1<'_, f64>,
    keys: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    channel_logits(&params.item, query, keys)
}

/// Mean embedding of the user's train-positive target items.
pub fn item_profile(split: &SplitDataset, item_embs: &Matrix, user: usize) -> Result<Array1<f64>> {
    let items = &split.train[user];
    if items.is_empty() {
        return Err(Error::EmptyGroup(format!("train items of target user {user}")));
    }
    let mut g = Array1::zeros(item_embs.ncols());
    for &i in items {
        g += &item_embs.row(i);
    }
    Ok(g / items.len() as f64)
}

/// Item profiles of every target user; rows of users without train items are zero.
pub fn item_profiles(split: &SplitDataset, item_embs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros((split.n_users, item_embs.ncols()));
    for (u, mut row) in out.outer_iter_mut().enumerate() {
        if let Ok(g) = item_profile(split, item_embs, u) {
            row.assign(&g);
        }
    }
    out
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|b| (b - max).exp());
    let z = e.sum();
    e / z
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBreakdown {
    pub beta_user: Array1<f64>,
    pub beta_item: Array1<f64>,
    pub alpha_user: Array1<f64>,
    pub alpha_item: Array1<f64>,
    pub alpha: Array1<f64>,
}

pub fn attention_weights(gamma1: f64, beta_user: Array1<f64>, beta_item: Array1<f64>) -> Result<AttentionBreakdown> {
    check_gamma(gamma1)?;
    if beta_user.is_empty() || beta_user.len() != beta_item.len() {
        return Err(Error::invalid(format!(
            "logit vectors must be non-empty and equal length ({} vs {})",
            beta_user.len(),
            beta_item.len()
        )));
    }
    let alpha_user = softmax(&beta_user);
    let alpha_item = softmax(&beta_item);
    let alpha = gamma1 * &alpha_user + (1.0 - gamma1) * &alpha_item;
    Ok(AttentionBreakdown {
        beta_user,
        beta_item,
        alpha_user,
        alpha_item,
        alpha,
    })
}

/// `Σ_u α_u (W_v e^S_u + b_v)` evaluated term by term.
pub fn generate_virtual(params: &GeneratorParams, alpha: ArrayView1<'_, f64>, values: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let d = params.dim();
    if alpha.len() != values.nrows() || values.ncols() != d {
        return Err(Error::ShapeMismatch {
            name: "attention values".into(),
            expected: (alpha.len(), d),
            actual: values.dim(),
        });
    }
    let mut out = Array1::zeros(d);
    for (a, e) in alpha.iter().zip(values.outer_iter()) {
        out.scaled_add(*a, &project(&params.w_v, &params.b_v, e));
    }
    Ok(out)
}

/// Attention breakdown and generated embedding for one query, reference path.
pub fn generate_one(
    params: &GeneratorParams,
    keys: &KeySet,
    query_user: ArrayView1<'_, f64>,
    query_items: ArrayView1<'_, f64>,
) -> Result<(AttentionBreakdown, Array1<f64>)> {
    let bu = user_attention_logits(params, query_user, keys.user_keys.view())?;
    let bi = item_attention_logits(params, query_items, keys.item_keys.view())?;
    let att = attention_weights(params.gamma1, bu, bi)?;
    let out = generate_virtual(params, att.alpha.view(), keys.values.view())?;
    Ok((att, out))
}

/// Non-learned generator: mean source embedding of the `n` overlapping users
/// whose target embeddings are most cosine-similar to `u_non`'s. Ties go to the
/// earlier overlap entry; `n` larger than the overlap uses everyone.
pub fn knn_generate(
    cross: &CrossDomainDataset,
    target_embs: &Matrix,
    source_embs: &Matrix,
    u_non: usize,
    n: usize,
) -> Result<Array1<f64>> {
    if n == 0 {
        return Err(Error::invalid("N must be at least 1"));
    }
    if cross.overlap.is_empty() {
        return Err(Error::EmptyGroup("overlapping users".into()));
    }
    let q = target_embs.row(u_non);
    let cosines: Vec<f64> = cross
        .overlap
        .iter()
        .map(|&(_, t)| cosine(q, target_embs.row(t)))
        .collect();
    let mut order: Vec<usize> = (0..cosines.len()).collect();
    order.sort_by(|&a, &b| cosines[b].total_cmp(&cosines[a]).then(a.cmp(&b)));
    order.truncate(n);
    let mut out = Array1::zeros(source_embs.ncols());
    for &k in &order {
        out += &source_embs.row(cross.overlap[k].0);
    }
    Ok(out / order.len() as f64)
}

fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Keys and values shared by every query: one row per overlapping user.
#[derive(Debug, Clone)]
pub struct KeySet {
    /// Target indices of the overlapping users, in row order.
    pub target_users: Vec<usize>,
    pub user_keys: Matrix,
    pub item_keys: Matrix,
    pub values: Matrix,
}

impl KeySet {
    /// Keys from the current embeddings; `profiles` are all target users' item profiles.
    pub fn build(cross: &CrossDomainDataset, model: &CdrModel, profiles: &Matrix) -> Result<Self> {
        if cross.overlap.is_empty() {
            return Err(Error::EmptyGroup("overlapping users (no attention keys)".into()));
        }
        let d = model.dim();
        let m = cross.overlap.len();
        let mut user_keys = Matrix::zeros((m, d));
        let mut item_keys = Matrix::zeros((m, d));
        let mut values = Matrix::zeros((m, d));
        let mut target_users = Vec::with_capacity(m);
        for (r, &(s, t)) in cross.overlap.iter().enumerate() {
            user_keys.row_mut(r).assign(&model.user_tgt.row(t));
            item_keys.row_mut(r).assign(&profiles.row(t));
            values.row_mut(r).assign(&model.user_src.row(s));
            target_users.push(t);
        }
        Ok(Self {
            target_users,
            user_keys,
            item_keys,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Key row of a target user, if it is one of the keys.
    pub fn row_of(&self, target_user: usize) -> Option<usize> {
        self.target_users.binary_search(&target_user).ok()
    }
}

/// A batch of queries. `exclude[r]` masks one key for row `r`.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub users: Matrix,
    pub items: Matrix,
    pub exclude: Vec<Option<usize>>,
}

impl QueryBatch {
    /// Queries for the given target users. With `leave_self_out`, an
    /// overlapping query never attends to its own key (unless it is the only key).
    pub fn for_users(model: &CdrModel, profiles: &Matrix, keys: &KeySet, users: &[usize], leave_self_out: bool) -> Self {
        let d = model.dim();
        let mut q_users = Matrix::zeros((users.len(), d));
        let mut q_items = Matrix::zeros((users.len(), d));
        let mut exclude = Vec::with_capacity(users.len());
        for (r, &u) in users.iter().enumerate() {
            q_users.row_mut(r).assign(&model.user_tgt.row(u));
            q_items.row_mut(r).assign(&profiles.row(u));
            exclude.push(if leave_self_out && keys.len() > 1 { keys.row_of(u) } else { None });
        }
        Self {
            users: q_users,
            items: q_items,
            exclude,
        }
    }

    pub fn len(&self) -> usize {
        self.users.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Forward activations kept for [`backward`].
#[derive(Debug, Clone)]
pub struct GeneratorForward {
    pub output: Matrix,
    q_proj: [Matrix; 2],
    k_proj: [Matrix; 2],
    alpha_c: [Matrix; 2],
    alpha: Matrix,
    v_proj: Matrix,
}

impl GeneratorForward {
    /// Mixed attention weights, one row per query.
    pub fn alpha(&self) -> &Matrix {
        &self.alpha
    }

    pub fn channel_alpha(&self, c: Channel) -> &Matrix {
        &self.alpha_c[c as usize]
    }
}

fn affine_rows(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    x.dot(&w.t()) + &b.row(0)
}

fn masked_softmax_rows(logits: &mut Matrix, exclude: &[Option<usize>], max_keys: Option<usize>) {
    let m = logits.ncols();
    for (r, mut row) in logits.outer_iter_mut().enumerate() {
        if let Some(k) = exclude[r] {
            row[k] = f64::NEG_INFINITY;
        }
        if let Some(cap) = max_keys.filter(|&c| c < m) {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &k in &order[cap..] {
                row[k] = f64::NEG_INFINITY;
            }
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|b| (b - max).exp());
        let z = row.sum();
        row /= z;
    }
}

/// Batched generator. `max_keys` optionally keeps only the top-M logits per
/// channel and query.
pub fn forward(params: &GeneratorParams, keys: &KeySet, queries: &QueryBatch, max_keys: Option<usize>) -> Result<GeneratorForward> {
    check_gamma(params.gamma1)?;
    if keys.is_empty() {
        return Err(Error::EmptyGroup("overlapping users (no attention keys)".into()));
    }
    let d = params.dim();
    if queries.users.ncols() != d || keys.values.ncols() != d {
        return Err(Error::ShapeMismatch {
            name: "generator inputs".into(),
            expected: (queries.len(), d),
            actual: queries.users.dim(),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let inputs = [(&queries.users, &keys.user_keys), (&queries.items, &keys.item_keys)];
    let mut q_proj = Vec::with_capacity(2);
    let mut k_proj = Vec::with_capacity(2);
    let mut alpha_c = Vec::with_capacity(2);
    for (c, (q, k)) in [Channel::User, Channel::Item].into_iter().zip(inputs) {
        let ch = params.channel(c);
        let qp = affine_rows(q, &ch.w_q, &ch.b_q);
        let kp = affine_rows(k, &ch.w_k, &ch.b_k);
        let mut a = qp.dot(&kp.t()) * scale;
        masked_softmax_rows(&mut a, &queries.exclude, max_keys);
        q_proj.push(qp);
        k_proj.push(kp);
        alpha_c.push(a);
    }
    let alpha = params.gamma1 * &alpha_c[0] + (1.0 - params.gamma1) * &alpha_c[1];
    let v_proj = affine_rows(&keys.values, &params.w_v, &params.b_v);
    let output = alpha.dot(&v_proj);
    let to_arr = |v: Vec<Matrix>| -> [Matrix; 2] { v.try_into().expect("two channels") };
    Ok(GeneratorForward {
        output,
        q_proj: to_arr(q_proj),
        k_proj: to_arr(k_proj),
        alpha_c: to_arr(alpha_c),
        alpha,
        v_proj,
    })
}

/// Gradients w.r.t. generator inputs (keys, queries and values).
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub query_users: Matrix,
    pub query_items: Matrix,
    pub user_keys: Matrix,
    pub item_keys: Matrix,
    pub values: Matrix,
}

fn col_sums(m: &Matrix) -> Matrix {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// Back-propagates `d_output` (one row per query) to every generator tensor.
pub fn backward(
    params: &GeneratorParams,
    keys: &KeySet,
    queries: &QueryBatch,
    fwd: &GeneratorForward,
    d_output: &Matrix,
) -> Result<(Grads, InputGrads)> {
    let (grads, inputs) = backward_impl(params, keys, queries, fwd, d_output, true)?;
    Ok((grads, inputs.expect("input gradients requested")))
}

/// [`backward`] without the gradients of the inputs, which training never needs.
pub fn backward_params(
    params: &GeneratorParams,
    keys: &KeySet,
    queries: &QueryBatch,
    fwd: &GeneratorForward,
    d_output: &Matrix,
) -> Result<Grads> {
    Ok(backward_impl(params, keys, queries, fwd, d_output, false)?.0)
}

fn backward_impl(
    params: &GeneratorParams,
    keys: &KeySet,
    queries: &QueryBatch,
    fwd: &GeneratorForward,
    d_output: &Matrix,
    with_inputs: bool,
) -> Result<(Grads, Option<InputGrads>)> {
    if d_output.dim() != fwd.output.dim() {
        return Err(Error::ShapeMismatch {
            name: "d_output".into(),
            expected: fwd.output.dim(),
            actual: d_output.dim(),
        });
    }
    let d = params.dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut grads = Grads::new();

    let d_alpha = d_output.dot(&fwd.v_proj.t());
    let d_vproj = fwd.alpha.t().dot(d_output);
    grads.insert(W_V.into(), d_vproj.t().dot(&keys.values));
    grads.insert(B_V.into(), col_sums(&d_vproj));
    let d_values = with_inputs.then(|| d_vproj.dot(&params.w_v));

    let weights = [params.gamma1, 1.0 - params.gamma1];
    let names = [
        [USER_W_Q, USER_B_Q, USER_W_K, USER_B_K],
        [ITEM_W_Q, ITEM_B_Q, ITEM_W_K, ITEM_B_K],
    ];
    let inputs = [(&queries.users, &keys.user_keys), (&queries.items, &keys.item_keys)];
    let mut d_inputs = Vec::with_capacity(4);
    for (c, ch) in [Channel::User, Channel::Item].into_iter().enumerate() {
        let a = &fwd.alpha_c[c];
        let d_a = &d_alpha * weights[c];
        // softmax backward: dβ = α ⊙ (dα − ⟨dα, α⟩); masked entries have α = 0.
        let inner = (&d_a * a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_logits = a * &(&d_a - &inner) * scale;
        let d_qp = d_logits.dot(&fwd.k_proj[c]);
        let d_kp = d_logits.t().dot(&fwd.q_proj[c]);
        let (q, k) = inputs[c];
        let p = params.channel(ch);
        grads.insert(names[c][0].into(), d_qp.t().dot(q));
        grads.insert(names[c][1].into(), col_sums(&d_qp));
        grads.insert(names[c][2].into(), d_kp.t().dot(k));
        grads.insert(names[c][3].into(), col_sums(&d_kp));
        if with_inputs {
            d_inputs.push(d_qp.dot(&p.w_q));
            d_inputs.push(d_kp.dot(&p.w_k));
        }
    }
    let Some(values) = d_values else {
        return Ok((grads, None));
    };
    let mut it = d_inputs.into_iter();
    let (query_users, user_keys, query_items, item_keys) =
        (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok((
        grads,
        Some(InputGrads {
            query_users,
            query_items,
            user_keys,
            item_keys,
            values,
        }),
    ))
}

/// Zero gradients for every generator tensor.
pub fn zero_grads(params: &GeneratorParams) -> Grads {
    params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n.to_string(), Matrix::zeros(t.dim())))
        .collect()
}

/// Generated embeddings for a set of target users (rows follow `users`).
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub users: Vec<usize>,
    pub embeddings: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSets {
    pub nonoverlap: Generated,
    pub overlap: Generated,
}

pub const GENERATION_CHUNK: usize = 1024;

/// Runs the batched generator for `users` in fixed-size chunks.
pub fn generate_for(
    params: &GeneratorParams,
    model: &CdrModel,
    profiles: &Matrix,
    keys: &KeySet,
    users: &[usize],
    leave_self_out: bool,
    max_keys: Option<usize>,
) -> Result<Generated> {
    let mut embeddings = Matrix::zeros((users.len(), params.dim()));
    for (c, chunk) in users.chunks(GENERATION_CHUNK).enumerate() {
        let q = QueryBatch::for_users(model, profiles, keys, chunk, leave_self_out);
        let out = forward(params, keys, &q, max_keys)?.output;
        let start = c * GENERATION_CHUNK;
        embeddings.slice_mut(s![start..start + chunk.len(), ..]).assign(&out);
    }
    Ok(Generated {
        users: users.to_vec(),
        embeddings,
    })
}

/// Virtual embeddings for every non-overlapping target user, and generated
/// embeddings for every overlapping one (the supervision side).
pub fn generate_all(
    params: &GeneratorParams,
    data: &CdrData,
    model: &CdrModel,
    leave_self_out: bool,
    max_keys: Option<usize>,
) -> Result<GeneratedSets> {
    let profiles = item_profiles(&data.target_split, &model.item_tgt);
    let keys = KeySet::build(&data.cross, model, &profiles)?;
    let overlap_users: Vec<usize> = data.cross.overlap.iter().map(|&(_, t)| t).collect();
    Ok(GeneratedSets {
        nonoverlap: generate_for(params, model, &profiles, &keys, &data.cross.target_nonoverlap, leave_self_out, max_keys)?,
        overlap: generate_for(params, model, &profiles, &keys, &overlap_users, leave_self_out, max_keys)?,
    })
}

/// One query's largest attention weights, for inspection dumps.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionDump {
    pub user: String,
    pub top: Vec<AttentionEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionEntry {
    pub overlap_user: String,
    pub alpha: f64,
    pub alpha_user: f64,
    pub alpha_item: f64,
}

/// Top-`k` attention entries of each non-overlapping user.
pub fn attention_dump(params: &GeneratorParams, data: &CdrData, model: &CdrModel, k: usize) -> Result<Vec<AttentionDump>> {
    let profiles = item_profiles(&data.target_split, &model.item_tgt);
    let keys = KeySet::build(&data.cross, model, &profiles)?;
    let target = &data.cross.target;
    let mut out = Vec::new();
    for &u in &data.cross.target_nonoverlap {
        let (att, _) = generate_one(params, &keys, model.user_tgt.row(u), profiles.row(u))?;
        let mut order: Vec<usize> = (0..att.alpha.len()).collect();
        order.sort_by(|&a, &b| att.alpha[b].total_cmp(&att.alpha[a]).then(a.cmp(&b)));
        let top = order
            .into_iter()
            .take(k)
            .map(|r| AttentionEntry {
                overlap_user: target.user_id(keys.target_users[r]).to_string(),
                alpha: att.alpha[r],
                alpha_user: att.alpha_user[r],
                alpha_item: att.alpha_item[r],
            })
            .collect();
        out.push(AttentionDump {
            user: target.user_id(u).to_string(),
            top,
        });
    }
    Ok(out)
}

/// Per-tensor maps of gradients, summed.
pub fn add_grads(into: &mut Grads, other: &Grads, scale: f64) {
    for (name, g) in other {
        match into.get_mut(name) {
            Some(acc) => acc.scaled_add(scale, g),
            None => {
                into.insert(name.clone(), g * scale);
            }
        }
    }
}
