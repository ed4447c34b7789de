use std::collections::{BTreeMap, HashSet};

use paal_core::kmeans::{kmeans_fit, sq_dist, DEFAULT_MAX_ITER, DEFAULT_TOL};
use paal_core::metrics::{dice_ce_loss, dsc_per_class, uncertainty_score, Uncertainty};
use paal_core::nn::{LayerSpec, Network, Tensor};
use paal_core::query::{cluster_count, query_weights, weighted_polling, QUERY_EPS};
use proptest::prelude::*;

/// Direct reading of the weight formula: mean over classes of -ln(clip(p)).
#[allow(clippy::manual_clamp)]
fn weight_oracle(row: &[f64]) -> f64 {
    let mut total = 0.0;
    for &p in row {
        let clipped = if p < QUERY_EPS {
            QUERY_EPS
        } else if p > 1.0 {
            1.0
        } else {
            p
        };
        total -= clipped.ln();
    }
    total / row.len() as f64
}

/// Largest k with 2^k <= 4b, plus one, by repeated doubling.
fn cluster_oracle(b: usize) -> usize {
    let target = 4 * b as u128;
    let mut k = 0;
    let mut pow: u128 = 1;
    while pow * 2 <= target {
        pow *= 2;
        k += 1;
    }
    k + 1
}

/// Dice per class from explicit pixel sets.
fn dsc_oracle(pred: &[u8], truth: &[u8], n_fg: usize) -> Vec<f64> {
    (1..=n_fg as u8)
        .map(|c| {
            let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == c).collect();
            let t: HashSet<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
            if p.is_empty() && t.is_empty() {
                1.0
            } else {
                2.0 * p.intersection(&t).count() as f64 / (p.len() + t.len()) as f64
            }
        })
        .collect()
}

fn mask(len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, len)
}

/// Normalised per-pixel distributions `[C, HW]` built from positive weights.
fn distribution(channels: usize, pixels: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, channels * pixels).prop_map(move |raw| {
        let mut out = raw.clone();
        for p in 0..pixels {
            let s: f64 = (0..channels).map(|c| raw[c * pixels + p]).sum();
            for c in 0..channels {
                out[c * pixels + p] = raw[c * pixels + p] / s;
            }
        }
        out
    })
}

/// Cluster assignments, weights and a feasible batch size.
fn polling_instance() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, usize)> {
    (1usize..6, 1usize..40).prop_flat_map(|(k, n)| {
        (
            prop::collection::vec(0..k, n),
            prop::collection::vec(0.0f64..10.0, n),
            1..=n,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-30.0f64..30.0, 3 * 4 * 5)) {
        let net = Network::<f64>::new(&[LayerSpec::ChannelSoftmax], 0).unwrap();
        let x = Tensor::new(vec![1, 3, 4, 5], logits).unwrap();
        let y = net.forward(&x).unwrap().into_output();
        for p in 0..20 {
            let col: Vec<f64> = (0..3).map(|c| y.data()[c * 20 + p]).collect();
            prop_assert!(col.iter().all(|&v| v >= 0.0));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn weights_match_the_formula(rows in prop::collection::vec(prop::collection::vec(-0.5f64..1.5, 1..5), 1..20)) {
        let got = query_weights(&rows, QUERY_EPS);
        for (row, w) in rows.iter().zip(&got) {
            prop_assert!((w - weight_oracle(row)).abs() <= 1e-12);
            prop_assert!(*w >= 0.0);
        }
    }

    #[test]
    fn lower_accuracy_never_lowers_weight(row in prop::collection::vec(0.0f64..1.0, 3), idx in 0usize..3, drop in 0.0f64..1.0) {
        let mut lower = row.clone();
        lower[idx] *= drop;
        let w = query_weights(&[row, lower], QUERY_EPS);
        prop_assert!(w[1] >= w[0]);
    }

    #[test]
    fn cluster_count_matches_reference(b in 1usize..100_000) {
        prop_assert_eq!(cluster_count(b).unwrap(), cluster_oracle(b));
    }

    #[test]
    fn polling_selects_b_distinct((assign, weights, b) in polling_instance()) {
        let ids: Vec<u32> = (0..assign.len() as u32).map(|i| i * 3 + 1).collect();
        let sel = weighted_polling(&ids, &assign, &weights, b).unwrap();
        prop_assert_eq!(sel.ids.len(), b);
        let unique: HashSet<u32> = sel.ids.iter().copied().collect();
        prop_assert_eq!(unique.len(), b);
        prop_assert!(sel.ids.iter().all(|id| ids.contains(id)));
    }

    #[test]
    fn polling_ignores_positive_scaling((assign, weights, b) in polling_instance(), scale in 0.01f64..100.0) {
        let ids: Vec<u32> = (0..assign.len() as u32).collect();
        let scaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        let a = weighted_polling(&ids, &assign, &weights, b).unwrap();
        let c = weighted_polling(&ids, &assign, &scaled, b).unwrap();
        prop_assert_eq!(a.ids, c.ids);
    }

    #[test]
    fn polling_spreads_over_large_clusters((assign, weights, b) in polling_instance()) {
        let ids: Vec<u32> = (0..assign.len() as u32).collect();
        let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
        for &c in &assign {
            *sizes.entry(c).or_default() += 1;
        }
        let k = sizes.len();
        let (lo, hi) = (b / k, b.div_ceil(k));
        // only meaningful when no cluster runs dry
        prop_assume!(sizes.values().all(|&s| s >= hi));
        let sel = weighted_polling(&ids, &assign, &weights, b).unwrap();
        let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
        for id in &sel.ids {
            *taken.entry(assign[*id as usize]).or_default() += 1;
        }
        for c in sizes.keys() {
            let n = taken.get(c).copied().unwrap_or(0);
            prop_assert!(n == lo || n == hi, "cluster {} got {} of b={} over k={}", c, n, b, k);
        }
    }

    #[test]
    fn single_cluster_polling_is_a_sort(weights in prop::collection::vec(0.0f64..5.0, 1..30), frac in 0.0f64..1.0) {
        let n = weights.len();
        let b = ((frac * n as f64) as usize).clamp(1, n);
        let ids: Vec<u32> = (0..n as u32).collect();
        let sel = weighted_polling(&ids, &vec![0; n], &weights, b).unwrap();
        let mut order: Vec<u32> = ids.clone();
        order.sort_by(|&x, &y| weights[y as usize].partial_cmp(&weights[x as usize]).unwrap().then(x.cmp(&y)));
        prop_assert_eq!(sel.ids, order[..b].to_vec());
    }

    #[test]
    fn kmeans_invariants(
        points in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 4..40),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let k = k.min(points.len());
        let m = kmeans_fit(&points, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        for pair in m.inertia_history.windows(2) {
            prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-12, "{:?}", m.inertia_history);
        }
        for (p, &a) in points.iter().zip(&m.assignments) {
            let own = sq_dist(p, &m.centroids[a]);
            prop_assert!(m.centroids.iter().all(|c| own <= sq_dist(p, c)));
        }
        prop_assert_eq!(m.clone(), kmeans_fit(&points, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap());
    }

    #[test]
    fn dice_matches_set_counting(pred in mask(64), truth in mask(64)) {
        let got = dsc_per_class(&pred, &truth, 3).unwrap();
        prop_assert_eq!(&got.0, &dsc_oracle(&pred, &truth, 3));
        prop_assert_eq!(got, dsc_per_class(&truth, &pred, 3).unwrap());
    }

    #[test]
    fn uncertainty_ignores_pixel_order(probs in distribution(4, 9), shift in 1usize..9) {
        let mut rolled = probs.clone();
        for c in 0..4 {
            for p in 0..9 {
                rolled[c * 9 + (p + shift) % 9] = probs[c * 9 + p];
            }
        }
        for kind in [Uncertainty::MaxEntropy, Uncertainty::LeastConf, Uncertainty::Margin, Uncertainty::VarRatio] {
            let a = uncertainty_score(kind, &probs, 4);
            let b = uncertainty_score(kind, &rolled, 4);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{}: {} vs {}", kind, a, b);
        }
    }

    #[test]
    fn segmentation_loss_is_bounded(probs in distribution(4, 8), labels in mask(8)) {
        let t = Tensor::new(vec![1, 4, 2, 4], probs).unwrap();
        let dc = dice_ce_loss(&t, &labels).unwrap();
        prop_assert!(dc.ce >= 0.0);
        prop_assert!((0.0..=1.0).contains(&dc.dice));
        prop_assert!((dc.loss - dc.ce - dc.dice).abs() < 1e-12);
    }
}

#[test]
fn all_ones_weight_is_exactly_zero() {
    let w = query_weights(&[vec![1.0; 3], vec![1.0]], QUERY_EPS);
    assert_eq!(w, vec![0.0, 0.0]);
    assert!(w.iter().all(|v| v.is_sign_positive()));
}

#[test]
fn both_empty_class_scores_one() {
    let zeros = vec![0u8; 64];
    assert_eq!(dsc_per_class(&zeros, &zeros, 3).unwrap().0, vec![1.0; 3]);
}
