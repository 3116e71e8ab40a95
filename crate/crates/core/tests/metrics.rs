use cdr_fair::cdr::{top_k_excluding, CdrModel, Mode, VirtualSources};
use cdr_fair::dataset::CdrData;
use cdr_fair::metrics::{evaluate, hit_rate_at_k, ndcg_at_k, ugf, EvalSplit, Metric};
use cdr_fair::params::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force metrics: explicit scores, full sort, textbook formulas.
struct Oracle {
    hr: Vec<Vec<f64>>,
    ndcg: Vec<Vec<f64>>,
    overlapping: Vec<bool>,
}

fn oracle(model: &CdrModel, virtuals: &VirtualSources, data: &CdrData, ks: &[usize]) -> Oracle {
    let ts = &data.target_split;
    let d = model.dim();
    let mut out = Oracle {
        hr: vec![],
        ndcg: vec![],
        overlapping: vec![],
    };
    for u in 0..ts.n_users {
        let relevant = &ts.test[u];
        if relevant.is_empty() {
            continue;
        }
        let mut p = vec![0.0; d];
        for c in 0..d {
            p[c] = model.user_tgt[[u, c]];
            if let Some(s) = model.source_of_target[u] {
                p[c] += model.lambda * model.user_src[[s, c]];
            } else if let Some(v) = virtuals.get(u) {
                p[c] += model.lambda * v[c];
            }
        }
        let mut scored: Vec<(f64, usize)> = (0..ts.n_items)
            .filter(|i| !ts.train[u].contains(i))
            .map(|i| ((0..d).map(|c| p[c] * model.item_tgt[[i, c]]).sum(), i))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut hr = vec![];
        let mut ndcg = vec![];
        for &k in ks {
            let top: Vec<usize> = scored.iter().take(k).map(|x| x.1).collect();
            hr.push(if top.iter().any(|i| relevant.contains(i)) { 1.0 } else { 0.0 });
            let mut dcg = 0.0;
            for (pos, i) in top.iter().enumerate() {
                if relevant.contains(i) {
                    dcg += std::f64::consts::LN_2 / ((pos + 2) as f64).ln();
                }
            }
            let ideal: f64 = (0..k.min(relevant.len()))
                .map(|pos| std::f64::consts::LN_2 / ((pos + 2) as f64).ln())
                .sum();
            ndcg.push(dcg / ideal);
        }
        out.hr.push(hr);
        out.ndcg.push(ndcg);
        out.overlapping.push(model.source_of_target[u].is_some());
    }
    out
}

fn mean_where(xs: &[f64], keep: impl Fn(usize) -> bool) -> f64 {
    let picked: Vec<f64> = xs.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, x)| *x).collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

#[test]
fn evaluation_matches_brute_force_oracle() {
    let spec = cdr_fair::synth::SyntheticCdrSpec {
        n_source_users: 20,
        n_target_users: 20,
        n_items: 50,
        interactions_per_user: 12,
        ..Default::default()
    };
    let ks = [1, 5, 10, 20];
    for seed in 0..5u64 {
        let r = cdr_fair::synth::synth_cdr(&cdr_fair::synth::SyntheticCdrSpec { seed, ..spec.clone() }).unwrap();
        let data = cdr_fair::dataset::prepare(r.source, r.target, 3.0, 1, None, seed).unwrap();
        assert_eq!(data.cross.target.n_users(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = CdrModel::new(&data.cross, 6, Mode::CdrVug, 0.7, 0.5, &mut rng).unwrap();
        let non = &data.cross.target_nonoverlap;
        let table = Matrix::from_shape_simple_fn((non.len(), 6), || rng.random_range(-1.0..1.0));
        let virtuals = VirtualSources::new(20, non, table).unwrap();

        let report = evaluate(&model, &virtuals, &data, &ks, EvalSplit::Test).unwrap();
        let o = oracle(&model, &virtuals, &data, &ks);
        assert_eq!(report.n_all, o.hr.len());
        for (idx, &k) in ks.iter().enumerate() {
            for (metric, values) in [(Metric::HR, &o.hr), (Metric::NDCG, &o.ndcg)] {
                let col: Vec<f64> = values.iter().map(|v| v[idx]).collect();
                let row = report.row(metric, k).unwrap();
                let all = mean_where(&col, |_| true);
                let ov = mean_where(&col, |i| o.overlapping[i]);
                let nn = mean_where(&col, |i| !o.overlapping[i]);
                assert!((row.all - all).abs() <= 1e-12, "{metric:?}@{k}");
                assert!((row.overlap.unwrap() - ov).abs() <= 1e-12);
                assert!((row.nonoverlap.unwrap() - nn).abs() <= 1e-12);
                assert!((row.ugf.unwrap() - (ov - nn).abs()).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn random_scorer_hit_rate_is_k_over_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n_items, n_users, k) = (1000, 500, 10);
    let mut hits = 0.0;
    for _ in 0..n_users {
        let scores: Vec<f64> = (0..n_items).map(|_| rng.random()).collect();
        let positive = rng.random_range(0..n_items);
        let ranked = top_k_excluding(&scores, k, &[]);
        hits += hit_rate_at_k(&ranked, &[positive], k).unwrap();
    }
    let p = k as f64 / n_items as f64;
    let sigma = (p * (1.0 - p) / n_users as f64).sqrt();
    assert!((hits / n_users as f64 - p).abs() <= 3.0 * sigma);
}

proptest! {
    #[test]
    fn metric_ranges_and_ordering(
        perm in Just((0..30usize).collect::<Vec<_>>()).prop_shuffle(),
        relevant in prop::collection::btree_set(0..30usize, 1..5),
        k in 1..30usize,
    ) {
        let relevant: Vec<usize> = relevant.into_iter().collect();
        let hr = hit_rate_at_k(&perm, &relevant, k).unwrap();
        let nd = ndcg_at_k(&perm, &relevant, k).unwrap();
        prop_assert!(hr == 0.0 || hr == 1.0);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&nd));
        prop_assert_eq!(hr == 0.0, nd == 0.0);
        // Both are non-decreasing in K (NDCG only while K ≤ |relevant| keeps the ideal fixed).
        prop_assert!(hit_rate_at_k(&perm, &relevant, k + 1).unwrap() >= hr);
    }

    #[test]
    fn ugf_is_symmetric_and_zero_on_equal_groups(a in prop::collection::vec(0.0..1.0f64, 1..20), b in prop::collection::vec(0.0..1.0f64, 1..20)) {
        prop_assert_eq!(ugf(&a, &b).unwrap(), ugf(&b, &a).unwrap());
        prop_assert_eq!(ugf(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn hand_computed_ndcg() {
    // Hits at positions 1 and 3 with two relevant items.
    let v = ndcg_at_k(&[4, 9, 7], &[4, 7], 3).unwrap();
    let expected = (1.0 + 0.5) / (1.0 + 1.0 / 3f64.log2());
    assert!((v - expected).abs() < 1e-15);
    assert_eq!(hit_rate_at_k(&[4, 9, 7], &[7], 2).unwrap(), 0.0);
    assert!(ugf(&[], &[1.0]).unwrap_err().to_string().contains("overlap"));
}
