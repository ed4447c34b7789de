//! Pool bookkeeping and the incremental-query active learning loop.
//!
//! One run trains the segmentation model every epoch on the labeled set,
//! trains the accuracy predictor next to it (after a short silent period,
//! with detached probabilities and its own optimizer moments), evaluates on
//! the validation split, and asks the oracle for a new batch when the
//! strategy's trigger fires: after `iq_patience` non-improving epochs for the
//! predictor-driven strategies, on a fixed epoch grid for the baselines.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{Dataset, Fold, Sample};
use crate::metrics::{argmax_labels, dice_ce_loss, dsc_per_class, mse_loss};
use crate::models::{image_batch, label_batch, ApModel, SegModel};
use crate::nn::{AdamW, CosineSchedule, Tensor};
use crate::query::{select, QueryContext, Selection, Strategy};
use crate::{derive_seed, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub early_stop_tolerance: usize,
    /// Leading epochs during which only the segmentation model trains.
    pub silent_period: usize,
    /// Non-improving epochs that trigger a predictor-driven query.
    pub iq_patience: usize,
    /// Baselines query every this many epochs.
    pub baseline_query_interval: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    /// Peak predictor learning rate as a multiple of `lr`.
    pub ap_lr_scale: f64,
    /// Predictor warm-up, counted from the end of the silent period.
    pub ap_warmup_epochs: usize,
    pub weight_decay: f64,
    pub init_ratio: f64,
    /// Classes including background.
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 120,
            early_stop_tolerance: 15,
            silent_period: 5,
            iq_patience: 10,
            baseline_query_interval: 5,
            batch_size: 16,
            eval_batch_size: 64,
            lr: 1e-3,
            lr_min: 1e-6,
            warmup_epochs: 10,
            ap_lr_scale: 30.0,
            ap_warmup_epochs: 30,
            weight_decay: 1e-4,
            init_ratio: 0.05,
            n_classes: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.silent_period >= self.max_epochs {
            return Err(Error::invalid("silent_period must be shorter than max_epochs"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if self.baseline_query_interval == 0 {
            return Err(Error::invalid("baseline_query_interval must be positive"));
        }
        if !(self.init_ratio > 0.0 && self.init_ratio < 1.0) {
            return Err(Error::invalid(format!("init_ratio {} outside (0, 1)", self.init_ratio)));
        }
        if !(self.ap_lr_scale.is_finite() && self.ap_lr_scale > 0.0) {
            return Err(Error::invalid("ap_lr_scale must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("n_classes counts background and must be >= 2"));
        }
        CosineSchedule::new(self.lr, self.lr_min, self.warmup_epochs, self.max_epochs)?;
        self.ap_schedule()?;
        Ok(())
    }

    pub fn n_fg(&self) -> usize {
        self.n_classes - 1
    }

    /// Predictor schedule, indexed by epochs since the silent period ended.
    pub fn ap_schedule(&self) -> Result<CosineSchedule> {
        CosineSchedule::new(
            self.lr * self.ap_lr_scale,
            self.lr_min,
            self.ap_warmup_epochs,
            self.max_epochs - self.silent_period,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    pub labeled: Vec<u32>,
    pub unlabeled: Vec<u32>,
    pub val: Vec<u32>,
    /// Maximum number of queried samples.
    pub budget: usize,
    /// Maximum number of query iterations `T`.
    pub iterations: usize,
    /// Per-iteration batch `floor(budget / T)`, at least 1.
    pub batch: usize,
    /// Next query iteration, starting at 1.
    pub t: usize,
    pub iq_counter: usize,
    pub best_val_dsc: f64,
    pub initial_labeled: usize,
}

impl PoolState {
    pub fn queried(&self) -> usize {
        self.labeled.len() - self.initial_labeled
    }

    /// Whether another query may still happen.
    pub fn budget_open(&self) -> bool {
        self.t <= self.iterations && self.queried() < self.budget && !self.unlabeled.is_empty()
    }

    pub fn train_size(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }
}

/// Draws `ceil(init_ratio * N)` initial labels from the training ids.
pub fn init_pool(
    train: &[u32],
    val: &[u32],
    init_ratio: f64,
    budget: usize,
    iterations: usize,
    seed: u64,
) -> Result<PoolState> {
    if !(init_ratio > 0.0 && init_ratio < 1.0) {
        return Err(Error::invalid(format!("init_ratio {init_ratio} outside (0, 1)")));
    }
    if iterations == 0 {
        return Err(Error::invalid("at least one query iteration is required"));
    }
    let n = train.len();
    // ratios like 0.05 * 1000 land a hair above the integer
    let m = ((init_ratio * n as f64) - 1e-9).ceil().max(1.0) as usize;
    if m > n || budget > n - m {
        return Err(Error::invalid(format!(
            "budget {budget} exceeds the {} samples left after {m} initial labels",
            n.saturating_sub(m)
        )));
    }
    let mut ids = train.to_vec();
    ids.shuffle(&mut crate::rng(seed));
    let unlabeled = ids.split_off(m);
    let mut unlabeled_sorted = unlabeled;
    unlabeled_sorted.sort_unstable();
    Ok(PoolState {
        labeled: ids,
        unlabeled: unlabeled_sorted,
        val: val.to_vec(),
        budget,
        iterations,
        batch: (budget / iterations).max(1),
        t: 1,
        iq_counter: 0,
        best_val_dsc: f64::NEG_INFINITY,
        initial_labeled: m,
    })
}

/// Resets the counter on a strict improvement, otherwise counts up.
pub fn iq_update(state: &mut PoolState, val_dsc: f64) -> bool {
    let improved = val_dsc > state.best_val_dsc;
    if improved {
        state.best_val_dsc = val_dsc;
        state.iq_counter = 0;
    } else {
        state.iq_counter += 1;
    }
    improved
}

/// Whether `strategy` queries after `epoch` (1-based).
pub fn query_due(strategy: Strategy, state: &PoolState, epoch: usize, cfg: &TrainConfig) -> bool {
    if !state.budget_open() {
        return false;
    }
    if strategy.uses_predictor() {
        state.iq_counter >= cfg.iq_patience
    } else {
        epoch.is_multiple_of(cfg.baseline_query_interval)
    }
}

/// Segmentation model, accuracy predictor and their shared update rule.
#[derive(Debug, Clone)]
pub struct Learner {
    pub seg: SegModel,
    pub ap: ApModel,
    pub opt: AdamW,
}

impl Learner {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(Learner {
            seg: SegModel::new(1, cfg.n_classes, derive_seed(cfg.seed, 1))?,
            ap: ApModel::new(1, cfg.n_classes, derive_seed(cfg.seed, 2))?,
            opt: AdamW {
                weight_decay: cfg.weight_decay,
                ..AdamW::default()
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub seg: f64,
    /// `None` while the predictor is silent or not used.
    pub ap: Option<f64>,
}

/// Per-class Dice of each sample's argmax prediction.
fn dsc_targets(probs: &Tensor, samples: &[&Sample], n_fg: usize) -> Result<Vec<f64>> {
    let channels = probs.shape()[1];
    let mut out = Vec::with_capacity(samples.len() * n_fg);
    for (i, s) in samples.iter().enumerate() {
        let pred = argmax_labels(probs.item(i), channels);
        out.extend(dsc_per_class(&pred, &s.mask, n_fg)?.0);
    }
    Ok(out)
}

/// One shuffled pass over the labeled ids. The predictor trains only when
/// `ap_lr` is given, on the segmentation probabilities of the same batch.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    learner: &mut Learner,
    dataset: &Dataset,
    labeled: &[u32],
    lr: f64,
    ap_lr: Option<f64>,
    cfg: &TrainConfig,
    rng: &mut crate::Rng,
) -> Result<EpochLosses> {
    if labeled.is_empty() {
        return Err(Error::invalid("train_epoch on an empty labeled set"));
    }
    let mut order = labeled.to_vec();
    order.shuffle(rng);
    let (mut seg_sum, mut ap_sum) = (0.0, 0.0);
    for chunk in order.chunks(cfg.batch_size) {
        let samples = lookup(dataset, chunk)?;
        let images: Tensor = image_batch(&samples, dataset.h, dataset.w)?;
        let labels = label_batch(&samples);

        let out = learner.seg.forward(&images)?;
        let dc = dice_ce_loss(&out.probs, &labels)?;
        learner.seg.net.zero_grad();
        let end = learner.seg.logits_end();
        learner.seg.net.backward_from(&out.acts, end, &dc.grad)?;
        learner.opt.step(learner.seg.net.params_mut(), lr)?;
        seg_sum += dc.loss * chunk.len() as f64;

        if let Some(ap_lr) = ap_lr {
            let targets = dsc_targets(&out.probs, &samples, cfg.n_fg())?;
            let acts = learner.ap.forward(&images, &out.probs)?;
            let (loss, grad) = mse_loss(acts.output(), &targets)?;
            learner.ap.net.zero_grad();
            learner.ap.net.backward(&acts, &grad)?;
            learner.opt.step(learner.ap.net.params_mut(), ap_lr)?;
            ap_sum += loss * chunk.len() as f64;
        }
    }
    let n = order.len() as f64;
    let losses = EpochLosses {
        seg: seg_sum / n,
        ap: ap_lr.map(|_| ap_sum / n),
    };
    if !losses.seg.is_finite() || losses.ap.is_some_and(|l| !l.is_finite()) {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(losses)
}

fn lookup<'a>(dataset: &'a Dataset, ids: &[u32]) -> Result<Vec<&'a Sample>> {
    ids.iter()
        .map(|&id| dataset.get(id).ok_or_else(|| Error::invalid(format!("unknown sample id {id}"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean Dice of each foreground class over samples.
    pub per_class: Vec<f64>,
    /// Mean over classes, then over samples.
    pub mean: f64,
}

/// Foreground Dice of the argmax prediction on every id.
pub fn evaluate(seg: &SegModel, dataset: &Dataset, ids: &[u32], batch: usize) -> Result<Evaluation> {
    if ids.is_empty() {
        return Err(Error::invalid("evaluate on an empty set"));
    }
    let n_fg = seg.n_classes - 1;
    let mut per_class = vec![0.0; n_fg];
    let mut mean = 0.0;
    for chunk in ids.chunks(batch.max(1)) {
        let samples = lookup(dataset, chunk)?;
        let images: Tensor = image_batch(&samples, dataset.h, dataset.w)?;
        let probs = seg.forward(&images)?.probs;
        for (i, s) in samples.iter().enumerate() {
            let pred = argmax_labels(probs.item(i), seg.n_classes);
            let dsc = dsc_per_class(&pred, &s.mask, n_fg)?;
            mean += dsc.mean();
            for (acc, v) in per_class.iter_mut().zip(&dsc.0) {
                *acc += v;
            }
        }
    }
    let n = ids.len() as f64;
    per_class.iter_mut().for_each(|v| *v /= n);
    Ok(Evaluation {
        per_class,
        mean: mean / n,
    })
}

/// Model outputs over a set of pool ids, in id order.
#[derive(Debug, Clone)]
pub struct PoolInference {
    pub ids: Vec<u32>,
    pub probs: Option<Tensor>,
    pub features: Vec<Vec<f64>>,
    pub predicted: Option<Vec<Vec<f64>>>,
    /// Per-class Dice of the argmax prediction against ground truth.
    pub actual: Vec<Vec<f64>>,
}

/// Batched inference; the predictor runs only when `ap` is given.
pub fn infer_pool(
    seg: &SegModel,
    ap: Option<&ApModel>,
    dataset: &Dataset,
    ids: &[u32],
    keep_probs: bool,
    batch: usize,
) -> Result<PoolInference> {
    let n_fg = seg.n_classes - 1;
    let mut features = Vec::with_capacity(ids.len());
    let mut predicted = ap.map(|_| Vec::with_capacity(ids.len()));
    let mut actual = Vec::with_capacity(ids.len());
    let mut probs_data = Vec::new();
    for chunk in ids.chunks(batch.max(1)) {
        let samples = lookup(dataset, chunk)?;
        let images: Tensor = image_batch(&samples, dataset.h, dataset.w)?;
        let out = seg.forward(&images)?;
        for i in 0..chunk.len() {
            features.push(out.features.item(i).iter().map(|&v| v as f64).collect());
        }
        let targets = dsc_targets(&out.probs, &samples, n_fg)?;
        actual.extend(targets.chunks(n_fg.max(1)).map(<[f64]>::to_vec));
        if let (Some(ap), Some(pred)) = (ap, predicted.as_mut()) {
            let o2 = ap.forward(&images, &out.probs)?.into_output();
            for i in 0..chunk.len() {
                pred.push(o2.item(i).iter().map(|&v| v as f64).collect());
            }
        }
        if keep_probs {
            probs_data.extend_from_slice(out.probs.data());
        }
    }
    let probs = if keep_probs && !ids.is_empty() {
        Some(Tensor::new(
            vec![ids.len(), seg.n_classes, dataset.h, dataset.w],
            probs_data,
        )?)
    } else {
        None
    };
    Ok(PoolInference {
        ids: ids.to_vec(),
        probs,
        features,
        predicted,
        actual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub selection: Selection,
    /// Number of queried images containing each foreground class.
    pub class_counts: Vec<usize>,
    pub wall_ms: f64,
}

/// Selects, labels (ground-truth lookup) and moves one batch into the
/// labeled set. An empty pool or closed budget leaves the state unchanged
/// and returns `None`.
pub fn query_step(
    state: &mut PoolState,
    learner: &Learner,
    strategy: Strategy,
    dataset: &Dataset,
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<Option<QueryRecord>> {
    if !state.budget_open() {
        return Ok(None);
    }
    let started = Instant::now();
    let b = state
        .batch
        .min(state.unlabeled.len())
        .min(state.budget - state.queried());
    let ap = strategy.uses_predictor().then_some(&learner.ap);
    let pool = infer_pool(
        &learner.seg,
        ap,
        dataset,
        &state.unlabeled,
        strategy.needs_probs(),
        cfg.eval_batch_size,
    )?;
    let labeled_features = if strategy == Strategy::Coreset {
        Some(infer_pool(&learner.seg, None, dataset, &state.labeled, false, cfg.eval_batch_size)?.features)
    } else {
        None
    };
    let ctx = QueryContext {
        ids: pool.ids,
        probs: pool.probs,
        features: Some(pool.features),
        predicted: pool.predicted,
        labeled_features,
        b,
        seed: derive_seed(cfg.seed, 1000 + state.t as u64),
    };
    let selection = select(strategy, &ctx)?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;

    let mut class_counts = vec![0usize; cfg.n_fg()];
    for &id in &selection.ids {
        let s = dataset.get(id).ok_or_else(|| Error::invalid(format!("unknown sample id {id}")))?;
        for (c, count) in class_counts.iter_mut().enumerate() {
            if s.contains(c as u8 + 1) {
                *count += 1;
            }
        }
    }
    let chosen: std::collections::HashSet<u32> = selection.ids.iter().copied().collect();
    state.unlabeled.retain(|id| !chosen.contains(id));
    state.labeled.extend_from_slice(&selection.ids);
    let record = QueryRecord {
        iteration: state.t,
        epoch,
        selection,
        class_counts,
        wall_ms,
    };
    state.t += 1;
    state.iq_counter = 0;
    Ok(Some(record))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Query iteration counter `t` during this epoch.
    pub iteration: usize,
    pub labeled_count: usize,
    pub lr: f64,
    pub seg_loss: f64,
    pub ap_loss: Option<f64>,
    pub val_dsc: Vec<f64>,
    pub val_dsc_mean: f64,
    pub improved: bool,
    /// Counter after this epoch's update, before any query reset.
    pub iq_counter: usize,
    pub queried: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRow {
    pub sample_id: u32,
    /// Foreground class, 1-based.
    pub class: usize,
    pub predicted: f64,
    pub actual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub strategy: Strategy,
    pub train_size: usize,
    pub initial_labeled: usize,
    pub budget: usize,
    pub iterations: usize,
    pub batch: usize,
    pub epochs: Vec<EpochRecord>,
    pub queries: Vec<QueryRecord>,
    /// Predictor output against real Dice on the final unlabeled pool.
    pub calibration: Vec<CalibrationRow>,
    pub best_val_dsc: f64,
    pub final_labeled: Vec<u32>,
}

impl RunReport {
    /// Best validation mean Dice seen during the run.
    pub fn final_dsc(&self) -> f64 {
        self.best_val_dsc
    }

    pub fn queried_class_counts(&self) -> Vec<usize> {
        let n = self.queries.first().map_or(0, |q| q.class_counts.len());
        let mut total = vec![0; n];
        for q in &self.queries {
            for (t, c) in total.iter_mut().zip(&q.class_counts) {
                *t += c;
            }
        }
        total
    }
}

/// Budget and iteration count of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plan {
    pub budget: usize,
    pub iterations: usize,
}

/// Runs the whole loop until the budget is spent and validation has
/// stalled for `early_stop_tolerance` epochs (counted from the later of the
/// last improvement and the last query), or `max_epochs` pass.
pub fn run_active_learning(
    cfg: &TrainConfig,
    plan: Plan,
    strategy: Strategy,
    dataset: &Dataset,
    fold: &Fold,
) -> Result<RunReport> {
    cfg.validate()?;
    let schedule = CosineSchedule::new(cfg.lr, cfg.lr_min, cfg.warmup_epochs, cfg.max_epochs)?;
    let ap_schedule = cfg.ap_schedule()?;
    let mut state = init_pool(
        &fold.train,
        &fold.val,
        cfg.init_ratio,
        plan.budget,
        plan.iterations,
        derive_seed(cfg.seed, 3),
    )?;
    let mut learner = Learner::new(cfg)?;
    let mut rng = crate::rng(derive_seed(cfg.seed, 4));
    let mut epochs = Vec::new();
    let mut queries = Vec::new();
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr(epoch);
        let ap_lr = (strategy.uses_predictor() && epoch > cfg.silent_period)
            .then(|| ap_schedule.lr(epoch - cfg.silent_period));
        let losses = train_epoch(&mut learner, dataset, &state.labeled, lr, ap_lr, cfg, &mut rng)?;
        let eval = evaluate(&learner.seg, dataset, &state.val, cfg.eval_batch_size)?;
        let improved = iq_update(&mut state, eval.mean);
        stale = if improved { 0 } else { stale + 1 };
        let mut record = EpochRecord {
            epoch,
            iteration: state.t,
            labeled_count: state.labeled.len(),
            lr,
            seg_loss: losses.seg,
            ap_loss: losses.ap,
            val_dsc: eval.per_class,
            val_dsc_mean: eval.mean,
            improved,
            iq_counter: state.iq_counter,
            queried: false,
        };
        if query_due(strategy, &state, epoch, cfg) {
            if let Some(q) = query_step(&mut state, &learner, strategy, dataset, epoch, cfg)? {
                record.queried = true;
                queries.push(q);
                stale = 0;
            }
        }
        epochs.push(record);
        if !state.budget_open() && stale >= cfg.early_stop_tolerance {
            break;
        }
    }

    let calibration = if strategy.uses_predictor() && !state.unlabeled.is_empty() {
        let pool = infer_pool(
            &learner.seg,
            Some(&learner.ap),
            dataset,
            &state.unlabeled,
            false,
            cfg.eval_batch_size,
        )?;
        let predicted = pool.predicted.expect("predictor ran");
        pool.ids
            .iter()
            .zip(predicted.iter().zip(&pool.actual))
            .flat_map(|(&id, (p, a))| {
                p.iter().zip(a).enumerate().map(move |(c, (&pv, &av))| CalibrationRow {
                    sample_id: id,
                    class: c + 1,
                    predicted: pv,
                    actual: av,
                })
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(RunReport {
        strategy,
        train_size: state.train_size(),
        initial_labeled: state.initial_labeled,
        budget: state.budget,
        iterations: state.iterations,
        batch: state.batch,
        epochs,
        queries,
        calibration,
        best_val_dsc: state.best_val_dsc,
        final_labeled: state.labeled,
    })
}
