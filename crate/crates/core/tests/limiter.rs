use cdr_fair::limiter::{constrain_loss, generator_objective, super_loss, LimiterConfig, LossGrad};
use cdr_fair::params::Matrix;
use ndarray::array;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| Matrix::from_shape_vec((rows, cols), v).unwrap())
}

fn sized(max_rows: usize) -> impl Strategy<Value = Matrix> {
    (2..=max_rows, 1..=5usize).prop_flat_map(|(r, c)| matrix(r, c))
}

/// Central differences of `f` at every coordinate of `x`.
fn numeric_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix) -> Matrix {
    let h = 1e-6;
    let mut g = Matrix::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut p = x.clone();
        p[[r, c]] += h;
        let mut m = x.clone();
        m[[r, c]] -= h;
        g[[r, c]] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn super_loss_vanishes_on_exact_match(g in sized(8)) {
        let l = super_loss(&g, &g).unwrap();
        prop_assert_eq!(l.value, 0.0);
        prop_assert!(l.grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn super_loss_is_non_negative(g in matrix(4, 3), t in matrix(4, 3)) {
        prop_assert!(super_loss(&g, &t).unwrap().value >= 0.0);
    }

    #[test]
    fn constrain_loss_is_never_positive(g in sized(10)) {
        prop_assert!(constrain_loss(&g).unwrap().value <= 0.0);
    }

    #[test]
    fn coincident_embeddings_give_zero(row in prop::collection::vec(-3.0..3.0f64, 1..6), n in 2..8usize) {
        let d = row.len();
        let g = Matrix::from_shape_fn((n, d), |(_, c)| row[c]);
        let l = constrain_loss(&g).unwrap();
        prop_assert!(l.value.abs() <= 1e-15);
        prop_assert!(l.grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constrain_loss_decreases_with_one_pair_distance(r0 in 0.1..2.0f64, r1 in 0.1..2.0f64) {
        // Point 2 at the origin, point 0 at radius r0 and point 1 rotating at
        // radius r1: only the distance between points 0 and 1 changes, and it
        // grows with the angle.
        let mut prev = f64::INFINITY;
        for step in 0..=20 {
            let theta = std::f64::consts::PI * step as f64 / 20.0;
            let g = array![[r0, 0.0], [r1 * theta.cos(), r1 * theta.sin()], [0.0, 0.0]];
            let v = constrain_loss(&g).unwrap().value;
            prop_assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn super_gradient_matches_finite_differences(g in matrix(3, 4), t in matrix(3, 4)) {
        let a = super_loss(&g, &t).unwrap().grad;
        let n = numeric_grad(|x| super_loss(x, &t).unwrap().value, &g);
        prop_assert!(max_rel_err(&a, &n) < 1e-6);
    }

    #[test]
    fn constrain_gradient_matches_finite_differences(g in sized(6)) {
        let a = constrain_loss(&g).unwrap().grad;
        let n = numeric_grad(|x| constrain_loss(x).unwrap().value, &g);
        prop_assert!(max_rel_err(&a, &n) < 1e-6);
    }

    #[test]
    fn objective_mixes_linearly(gamma2 in 0.0..=1.0f64, s in -5.0..5.0f64, c in -5.0..0.0f64) {
        let cfg = LimiterConfig { gamma2, ..Default::default() };
        let part = |v: f64| LossGrad { value: v, grad: array![[1.0]] };
        let o = generator_objective(&cfg, &part(s), &part(c));
        prop_assert!((o.value - (gamma2 * s + (1.0 - gamma2) * c)).abs() < 1e-12);
        prop_assert_eq!(o.super_grad[[0, 0]], gamma2);
        prop_assert_eq!(o.constrain_grad[[0, 0]], 1.0 - gamma2);
    }
}

#[test]
fn single_unit_pair_gives_minus_two() {
    let l = constrain_loss(&array![[0.0, 0.0], [1.0, 0.0]]).unwrap();
    assert!((l.value + 2.0).abs() < 1e-15);
}

#[test]
fn three_point_value_from_pair_distances() {
    // Squared distances 0, 1, 1: ln((1 + 2e^-2) / 3).
    let l = constrain_loss(&array![[0.0], [0.0], [1.0]]).unwrap();
    assert!((l.value - (-0.859_067_5)).abs() < 1e-7, "{}", l.value);
}

#[test]
fn far_apart_points_do_not_underflow() {
    let l = constrain_loss(&array![[0.0], [100.0]]).unwrap();
    assert_eq!(l.value, -20_000.0);
    assert!(l.grad.iter().all(|x| x.is_finite()));
}

#[test]
fn degenerate_inputs_are_rejected() {
    assert!(constrain_loss(&array![[1.0, 2.0]]).is_err());
    assert!(super_loss(&Matrix::zeros((0, 2)), &Matrix::zeros((0, 2))).is_err());
    assert!(super_loss(&Matrix::zeros((2, 2)), &Matrix::zeros((2, 3))).is_err());
    assert!(LimiterConfig { gamma2: 1.1, ..Default::default() }.validate().is_err());
    assert!(LimiterConfig { pair_sample: 1, ..Default::default() }.validate().is_err());
}
