use std::collections::HashSet;

use paal_core::active::{
    evaluate, init_pool, query_step, run_active_learning, train_epoch, Learner, Plan, PoolState, RunReport,
    TrainConfig,
};
use paal_core::data::{generate, split_folds, ClassProfile, ClassSpec, Dataset, Fold};
use paal_core::models::image_batch;
use paal_core::nn::Tensor;
use paal_core::query::Strategy;

fn small_dataset(n: usize) -> Dataset {
    generate(5, n, 16, 16, &ClassProfile::default()).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 16,
        early_stop_tolerance: 4,
        iq_patience: 2,
        ap_warmup_epochs: 3,
        warmup_epochs: 2,
        batch_size: 8,
        lr: 3e-3,
        init_ratio: 0.1,
        ..TrainConfig::default()
    }
}

fn params(net: &paal_core::nn::Network) -> Vec<f32> {
    net.params().flat_map(|p| p.value.data().to_vec()).collect()
}

/// Per-sample Dice by explicit pixel counting, averaged over classes and
/// then samples.
fn brute_force_eval(learner: &Learner, ds: &Dataset, ids: &[u32]) -> f64 {
    let mut total = 0.0;
    for &id in ids {
        let s = ds.get(id).unwrap();
        let image: Tensor = image_batch(&[s], ds.h, ds.w).unwrap();
        let probs = learner.seg.forward(&image).unwrap().probs;
        let hw = ds.pixels();
        let pred: Vec<u8> = (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..4 {
                    if probs.data()[c * hw + p] > probs.data()[best * hw + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        let mut per_sample = 0.0;
        for c in 1..=3u8 {
            let (mut both, mut np, mut nt) = (0, 0, 0);
            for (&p, &t) in pred.iter().zip(&s.mask) {
                np += usize::from(p == c);
                nt += usize::from(t == c);
                both += usize::from(p == c && t == c);
            }
            per_sample += if np + nt == 0 { 1.0 } else { 2.0 * both as f64 / (np + nt) as f64 };
        }
        total += per_sample / 3.0;
    }
    total / ids.len() as f64
}

fn strip_timings(mut r: RunReport) -> RunReport {
    for q in &mut r.queries {
        q.wall_ms = 0.0;
    }
    r
}

#[test]
fn segmentation_loss_falls_on_a_tiny_set() {
    let ds = small_dataset(8);
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    let mut learner = Learner::new(&cfg).unwrap();
    let mut rng = paal_core::rng(0);
    let ids: Vec<u32> = (0..8).collect();
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(train_epoch(&mut learner, &ds, &ids, 3e-3, None, &cfg, &mut rng).unwrap().seg);
    }
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
}

#[test]
fn single_sample_epoch_runs() {
    let ds = small_dataset(3);
    let cfg = TrainConfig::default();
    let mut learner = Learner::new(&cfg).unwrap();
    let l = train_epoch(&mut learner, &ds, &[1], 1e-3, Some(1e-3), &cfg, &mut paal_core::rng(1)).unwrap();
    assert!(l.seg.is_finite() && l.ap.unwrap().is_finite());
    assert!(train_epoch(&mut learner, &ds, &[], 1e-3, None, &cfg, &mut paal_core::rng(1)).is_err());
}

#[test]
fn silent_epochs_leave_the_predictor_alone() {
    let ds = small_dataset(12);
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    let mut learner = Learner::new(&cfg).unwrap();
    let before = params(&learner.ap.net);
    let ids: Vec<u32> = (0..12).collect();
    let l = train_epoch(&mut learner, &ds, &ids, 1e-3, None, &cfg, &mut paal_core::rng(2)).unwrap();
    assert_eq!(l.ap, None);
    assert_eq!(params(&learner.ap.net), before);
}

#[test]
fn predictor_training_never_touches_the_segmenter() {
    let ds = small_dataset(12);
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    let ids: Vec<u32> = (0..12).collect();
    let start = Learner::new(&cfg).unwrap();

    let mut with_ap = start.clone();
    let mut without = start.clone();
    train_epoch(&mut with_ap, &ds, &ids, 1e-3, Some(1e-2), &cfg, &mut paal_core::rng(3)).unwrap();
    train_epoch(&mut without, &ds, &ids, 1e-3, None, &cfg, &mut paal_core::rng(3)).unwrap();
    assert_eq!(params(&with_ap.seg.net), params(&without.seg.net));
    assert_ne!(params(&with_ap.ap.net), params(&start.ap.net));

    // perturbing the predictor changes nothing upstream
    let images: Tensor = image_batch(&ds.samples.iter().take(4).collect::<Vec<_>>(), 16, 16).unwrap();
    let reference = start.seg.forward(&images).unwrap().probs;
    let mut perturbed = start.clone();
    for p in perturbed.ap.net.params_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += 0.5);
    }
    assert_eq!(perturbed.seg.forward(&images).unwrap().probs.data(), reference.data());
}

#[test]
fn evaluate_matches_pixel_counting() {
    let ds = small_dataset(20);
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    let mut learner = Learner::new(&cfg).unwrap();
    let ids: Vec<u32> = (0..20).collect();
    for _ in 0..5 {
        train_epoch(&mut learner, &ds, &ids[..10], 3e-3, None, &cfg, &mut paal_core::rng(4)).unwrap();
    }
    let val = &ids[10..];
    let got = evaluate(&learner.seg, &ds, val, 3).unwrap();
    let want = brute_force_eval(&learner, &ds, val);
    assert!((got.mean - want).abs() < 1e-12, "{} vs {want}", got.mean);
    assert!(evaluate(&learner.seg, &ds, &[], 3).is_err());
}

#[test]
fn background_only_model_scores_zero_on_present_class() {
    let profile = ClassProfile {
        classes: vec![ClassSpec {
            occurrence: 1.0,
            axis_min: 3.0,
            axis_max: 5.0,
            intensity: 150.0,
        }],
    };
    let ds = generate(1, 6, 16, 16, &profile).unwrap();
    let cfg = TrainConfig { n_classes: 2, ..TrainConfig::default() };
    let mut learner = Learner::new(&cfg).unwrap();
    let n = learner.seg.net.params().count();
    let (w, b) = (n - 2, n - 1);
    for (i, p) in learner.seg.net.params_mut().enumerate() {
        if i == w {
            p.value.fill(0.0);
        }
        if i == b {
            p.value.data_mut().copy_from_slice(&[5.0, 0.0]);
        }
    }
    let ids: Vec<u32> = (0..6).collect();
    let eval = evaluate(&learner.seg, &ds, &ids, 4).unwrap();
    assert_eq!(eval.per_class, vec![0.0]);
}

fn literal_pool(labeled: Vec<u32>, unlabeled: Vec<u32>, budget: usize, iterations: usize) -> PoolState {
    PoolState {
        initial_labeled: labeled.len(),
        labeled,
        unlabeled,
        val: vec![],
        budget,
        iterations,
        batch: (budget / iterations).max(1),
        t: 1,
        iq_counter: 10,
        best_val_dsc: 0.5,
    }
}

#[test]
fn query_moves_exactly_b_ids() {
    let ds = small_dataset(30);
    let cfg = TrainConfig::default();
    let learner = Learner::new(&cfg).unwrap();
    let mut state = init_pool(&(0..30).collect::<Vec<_>>(), &[], 0.2, 12, 2, 7).unwrap();
    let (l0, u0) = (state.labeled.len(), state.unlabeled.len());
    for strategy in [Strategy::Random, Strategy::PaalFull] {
        let rec = query_step(&mut state, &learner, strategy, &ds, 5, &cfg).unwrap().unwrap();
        assert_eq!(rec.selection.ids.len(), 6);
        assert_eq!(rec.class_counts.len(), 3);
    }
    assert_eq!(state.labeled.len(), l0 + 12);
    assert_eq!(state.unlabeled.len(), u0 - 12);
    assert_eq!(state.t, 3);
    assert_eq!(state.iq_counter, 0);
    // t > T: nothing more happens
    assert!(query_step(&mut state, &learner, Strategy::Random, &ds, 10, &cfg).unwrap().is_none());
    let all: HashSet<u32> = state.labeled.iter().chain(&state.unlabeled).copied().collect();
    assert_eq!(all.len(), 30);
}

#[test]
fn query_clamps_to_the_remaining_pool() {
    let ds = small_dataset(10);
    let cfg = TrainConfig::default();
    let learner = Learner::new(&cfg).unwrap();
    let mut state = literal_pool((0..7).collect(), vec![7, 8, 9], 6, 1);
    assert_eq!(state.batch, 6);
    let rec = query_step(&mut state, &learner, Strategy::MaxEntropy, &ds, 5, &cfg).unwrap().unwrap();
    let mut got = rec.selection.ids.clone();
    got.sort_unstable();
    assert_eq!(got, vec![7, 8, 9]);
    assert!(state.unlabeled.is_empty());
    assert!(query_step(&mut state, &learner, Strategy::MaxEntropy, &ds, 10, &cfg).unwrap().is_none());
}

fn small_run(strategy: Strategy, budget: usize, iterations: usize, seed: u64) -> (RunReport, Fold) {
    let ds = small_dataset(60);
    let fold = split_folds(ds.len(), 2).unwrap().folds[0].clone();
    let cfg = TrainConfig { seed, ..small_config() };
    let r = run_active_learning(&cfg, Plan { budget, iterations }, strategy, &ds, &fold).unwrap();
    (r, fold)
}

#[test]
fn zero_budget_is_plain_supervised_training() {
    let (r, fold) = small_run(Strategy::PaalFull, 0, 3, 0);
    assert!(r.queries.is_empty());
    assert_eq!(r.final_labeled.len(), r.initial_labeled);
    assert_eq!(r.initial_labeled, (0.1 * fold.train.len() as f64).ceil() as usize);
    assert!(r.epochs.iter().all(|e| e.labeled_count == r.initial_labeled && e.iteration == 1));
}

#[test]
fn runs_are_reproducible() {
    let a = strip_timings(small_run(Strategy::Random, 12, 3, 4).0);
    let b = strip_timings(small_run(Strategy::Random, 12, 3, 4).0);
    assert_eq!(a, b);
    let c = strip_timings(small_run(Strategy::Random, 12, 3, 5).0);
    assert_ne!(a.final_labeled, c.final_labeled);
}

#[test]
fn baselines_query_on_the_interval_grid() {
    let (r, fold) = small_run(Strategy::Margin, 12, 3, 1);
    let epochs: Vec<usize> = r.queries.iter().map(|q| q.epoch).collect();
    assert_eq!(epochs, vec![5, 10, 15]);
    assert!(r.queries.iter().all(|q| q.iteration <= 3));
    let labeled: HashSet<u32> = r.final_labeled.iter().copied().collect();
    assert_eq!(labeled.len(), r.initial_labeled + 12);
    assert!(labeled.iter().all(|id| fold.train.contains(id)));
}

#[test]
fn predictor_queries_follow_stagnation() {
    let cfg = small_config();
    let mut total = 0;
    for seed in 0..3 {
        let (r, _) = small_run(Strategy::PaalFull, 12, 4, seed);
        total += r.queries.len();
        let mut last_reset = 0;
        for q in &r.queries {
            assert!(q.iteration <= 4);
            let window: Vec<_> = r.epochs.iter().filter(|e| e.epoch > last_reset && e.epoch <= q.epoch).collect();
            let stale = window.iter().rev().take_while(|e| !e.improved).count();
            assert!(stale >= cfg.iq_patience, "seed {seed}: query at {} after {stale} stale epochs", q.epoch);
            last_reset = q.epoch;
        }
        for (i, e) in r.epochs.iter().enumerate() {
            assert_eq!(e.epoch, i + 1);
            assert_eq!(e.ap_loss.is_some(), e.epoch > cfg.silent_period);
        }
        assert!(!r.calibration.is_empty());
    }
    assert!(total > 0, "no query fired in any run");
}
