//! Sample selection: the weighted polling strategy and the baselines.
//!
//! Every selector returns exactly `b` distinct ids drawn from the unlabeled
//! pool. Ties are always broken towards the lowest sample id (or cluster
//! index) so that selections are reproducible.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::kmeans::{kmeans_fit, sq_dist, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::metrics::{uncertainty_score, Uncertainty};
use crate::nn::Tensor;
use crate::{Error, Result};

/// Accuracy predictions are clipped to `[QUERY_EPS, 1]` before the log.
pub const QUERY_EPS: f64 = 1e-6;
/// `entropy_kmeans` keeps this many candidates per query slot.
pub const ENTROPY_KMEANS_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Random,
    MaxEntropy,
    LeastConf,
    Margin,
    VarRatio,
    KmeansDiversity,
    EntropyKmeans,
    Coreset,
    PaalApOnly,
    PaalFull,
}

impl Strategy {
    pub const ALL: [Strategy; 10] = [
        Strategy::Random,
        Strategy::MaxEntropy,
        Strategy::LeastConf,
        Strategy::Margin,
        Strategy::VarRatio,
        Strategy::KmeansDiversity,
        Strategy::EntropyKmeans,
        Strategy::Coreset,
        Strategy::PaalApOnly,
        Strategy::PaalFull,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::MaxEntropy => "max_entropy",
            Strategy::LeastConf => "least_conf",
            Strategy::Margin => "margin",
            Strategy::VarRatio => "var_ratio",
            Strategy::KmeansDiversity => "kmeans_diversity",
            Strategy::EntropyKmeans => "entropy_kmeans",
            Strategy::Coreset => "coreset",
            Strategy::PaalApOnly => "paal_ap_only",
            Strategy::PaalFull => "paal_full",
        }
    }

    /// Strategies driven by the accuracy predictor (trained AP, IQ trigger).
    pub fn uses_predictor(&self) -> bool {
        matches!(self, Strategy::PaalApOnly | Strategy::PaalFull)
    }

    pub fn needs_probs(&self) -> bool {
        matches!(
            self,
            Strategy::MaxEntropy | Strategy::LeastConf | Strategy::Margin | Strategy::VarRatio | Strategy::EntropyKmeans
        )
    }

    pub fn needs_features(&self) -> bool {
        matches!(
            self,
            Strategy::KmeansDiversity | Strategy::EntropyKmeans | Strategy::Coreset | Strategy::PaalFull
        )
    }

    fn uncertainty(&self) -> Option<Uncertainty> {
        match self {
            Strategy::MaxEntropy => Some(Uncertainty::MaxEntropy),
            Strategy::LeastConf => Some(Uncertainty::LeastConf),
            Strategy::Margin => Some(Uncertainty::Margin),
            Strategy::VarRatio => Some(Uncertainty::VarRatio),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy '{s}'")))
    }
}

/// Everything a selector may look at, aligned to `ids`.
#[derive(Debug, Clone, Default)]
pub struct QueryContext {
    pub ids: Vec<u32>,
    /// Class probabilities `[N, C, H, W]`.
    pub probs: Option<Tensor>,
    /// Pooled features, one row per sample.
    pub features: Option<Vec<Vec<f64>>>,
    /// Predicted per-class accuracies, one row per sample.
    pub predicted: Option<Vec<Vec<f64>>>,
    /// Features of the already-labeled samples.
    pub labeled_features: Option<Vec<Vec<f64>>>,
    pub b: usize,
    pub seed: u64,
}

impl QueryContext {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The selected ids plus per-pick diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub ids: Vec<u32>,
    /// Cluster of each pick, when the strategy clusters.
    pub clusters: Vec<Option<usize>>,
    /// Score or weight of each pick, when the strategy ranks.
    pub weights: Vec<Option<f64>>,
}

impl Selection {
    fn plain(ids: Vec<u32>) -> Self {
        let n = ids.len();
        Selection {
            ids,
            clusters: vec![None; n],
            weights: vec![None; n],
        }
    }
}

/// Mean negative log of the clipped predicted accuracies of each sample.
pub fn query_weights(predicted: &[Vec<f64>], eps: f64) -> Vec<f64> {
    predicted
        .iter()
        .map(|row| {
            if row.is_empty() {
                return 0.0;
            }
            let s: f64 = row.iter().map(|&p| -p.clamp(eps, 1.0).ln()).sum();
            // -ln(1) is -0.0; report a clean zero
            (s / row.len() as f64) + 0.0
        })
        .collect()
}

/// `floor(log2(4b) + 1)`, computed exactly on integers.
pub fn cluster_count(b: usize) -> Result<usize> {
    if b == 0 {
        return Err(Error::invalid("cluster_count needs b >= 1"));
    }
    // floor(log2(4b)) = 2 + floor(log2(b))
    Ok(2 + (usize::BITS - 1 - b.leading_zeros()) as usize + 1)
}

/// Descending by weight, ties to the lower id.
fn by_weight_then_id(a: (f64, u32), b: (f64, u32)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Round-robin over clusters, each turn taking the cluster's heaviest
/// unselected sample.
///
/// Clusters are visited in order of their heaviest member (descending, ties
/// by cluster index). Positions index `ids`, `assignments` and `weights`.
pub fn weighted_polling(ids: &[u32], assignments: &[usize], weights: &[f64], b: usize) -> Result<Selection> {
    let n = ids.len();
    if assignments.len() != n || weights.len() != n {
        return Err(Error::invalid("weighted_polling inputs are not aligned"));
    }
    if b > n {
        return Err(Error::invalid(format!("cannot select {b} of {n} samples")));
    }
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (pos, &c) in assignments.iter().enumerate() {
        queues[c].push(pos);
    }
    for q in &mut queues {
        q.sort_by(|&x, &y| by_weight_then_id((weights[x], ids[x]), (weights[y], ids[y])));
    }
    let mut order: Vec<usize> = (0..k).filter(|&c| !queues[c].is_empty()).collect();
    order.sort_by(|&x, &y| {
        let wx = weights[queues[x][0]];
        let wy = weights[queues[y][0]];
        wy.partial_cmp(&wx).unwrap_or(Ordering::Equal).then(x.cmp(&y))
    });

    let mut next = vec![0usize; k];
    let mut sel = Selection {
        ids: Vec::with_capacity(b),
        clusters: Vec::with_capacity(b),
        weights: Vec::with_capacity(b),
    };
    while sel.ids.len() < b {
        for &c in &order {
            if sel.ids.len() == b {
                break;
            }
            if let Some(&pos) = queues[c].get(next[c]) {
                next[c] += 1;
                sel.ids.push(ids[pos]);
                sel.clusters.push(Some(c));
                sel.weights.push(Some(weights[pos]));
            }
        }
    }
    Ok(sel)
}

/// Greedy k-center: repeatedly take the candidate farthest from everything
/// labeled or already chosen.
///
/// With nothing labeled, the first pick is the candidate farthest from the
/// candidates' centroid.
pub fn coreset_select(labeled: &[Vec<f64>], unlabeled: &[Vec<f64>], ids: &[u32], b: usize) -> Result<Selection> {
    let n = unlabeled.len();
    if ids.len() != n {
        return Err(Error::invalid("coreset inputs are not aligned"));
    }
    if b > n {
        return Err(Error::invalid(format!("cannot select {b} of {n} samples")));
    }
    if n == 0 {
        return Ok(Selection::plain(Vec::new()));
    }
    let mut min_d: Vec<f64> = if labeled.is_empty() {
        let dim = unlabeled[0].len();
        let mut centroid = vec![0.0; dim];
        for p in unlabeled {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        unlabeled.iter().map(|p| sq_dist(p, &centroid)).collect()
    } else {
        unlabeled
            .iter()
            .map(|p| labeled.iter().map(|l| sq_dist(p, l)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let mut chosen = vec![false; n];
    let mut sel = Vec::with_capacity(b);
    let mut dist = Vec::with_capacity(b);
    for round in 0..b {
        let pick = (0..n)
            .filter(|&i| !chosen[i])
            .min_by(|&x, &y| by_weight_then_id((min_d[x], ids[x]), (min_d[y], ids[y])))
            .expect("b <= n");
        chosen[pick] = true;
        sel.push(ids[pick]);
        dist.push(Some(min_d[pick].sqrt()));
        if round == 0 && labeled.is_empty() {
            // distances now measured from the first pick, not the centroid
            for (d, p) in min_d.iter_mut().zip(unlabeled) {
                *d = sq_dist(p, &unlabeled[pick]);
            }
        } else {
            for (d, p) in min_d.iter_mut().zip(unlabeled) {
                *d = d.min(sq_dist(p, &unlabeled[pick]));
            }
        }
    }
    Ok(Selection {
        clusters: vec![None; sel.len()],
        ids: sel,
        weights: dist,
    })
}

/// Top `b` positions by score, descending, ties to the lower id.
fn top_by_score(ids: &[u32], scores: &[f64], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&x, &y| by_weight_then_id((scores[x], ids[x]), (scores[y], ids[y])));
    order.truncate(b);
    order
}

/// K-means with `K = b` over the candidates; each centroid claims its
/// nearest still-unclaimed candidate.
fn kmeans_diversity(ids: &[u32], features: &[Vec<f64>], b: usize, seed: u64) -> Result<Selection> {
    if b == 0 {
        return Ok(Selection::plain(Vec::new()));
    }
    let model = kmeans_fit(features, b, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let mut taken = vec![false; ids.len()];
    let mut sel = Selection {
        ids: Vec::with_capacity(b),
        clusters: Vec::with_capacity(b),
        weights: Vec::with_capacity(b),
    };
    for (c, centroid) in model.centroids.iter().enumerate() {
        let pos = (0..ids.len())
            .filter(|&i| !taken[i])
            .min_by(|&x, &y| {
                let dx = sq_dist(&features[x], centroid);
                let dy = sq_dist(&features[y], centroid);
                dx.partial_cmp(&dy).unwrap_or(Ordering::Equal).then(ids[x].cmp(&ids[y]))
            })
            .expect("b <= n");
        taken[pos] = true;
        sel.ids.push(ids[pos]);
        sel.clusters.push(Some(c));
        sel.weights.push(None);
    }
    Ok(sel)
}

fn uncertainty_scores(ctx: &QueryContext, kind: Uncertainty) -> Result<Vec<f64>> {
    let probs = ctx
        .probs
        .as_ref()
        .ok_or_else(|| Error::MissingInput("class probabilities".into()))?;
    if probs.batch() != ctx.len() || probs.shape().len() < 2 {
        return Err(Error::shape("query probabilities", &[ctx.len()], probs.shape()));
    }
    let channels = probs.shape()[1];
    Ok((0..ctx.len())
        .map(|i| uncertainty_score(kind, probs.item(i), channels))
        .collect())
}

fn features(ctx: &QueryContext) -> Result<&[Vec<f64>]> {
    let f = ctx
        .features
        .as_deref()
        .ok_or_else(|| Error::MissingInput("pooled features".into()))?;
    if f.len() != ctx.len() {
        return Err(Error::shape("query features", &[ctx.len()], &[f.len()]));
    }
    Ok(f)
}

fn predicted_weights(ctx: &QueryContext) -> Result<Vec<f64>> {
    let p = ctx
        .predicted
        .as_deref()
        .ok_or_else(|| Error::MissingInput("predicted accuracies".into()))?;
    if p.len() != ctx.len() {
        return Err(Error::shape("predicted accuracies", &[ctx.len()], &[p.len()]));
    }
    Ok(query_weights(p, QUERY_EPS))
}

/// Runs `strategy` over the pool described by `ctx`.
pub fn select(strategy: Strategy, ctx: &QueryContext) -> Result<Selection> {
    let (n, b) = (ctx.len(), ctx.b);
    if b > n {
        return Err(Error::invalid(format!("cannot select {b} of {n} samples")));
    }
    let pick = |positions: Vec<usize>, scores: &[f64]| Selection {
        ids: positions.iter().map(|&p| ctx.ids[p]).collect(),
        clusters: vec![None; positions.len()],
        weights: positions.iter().map(|&p| Some(scores[p])).collect(),
    };
    match strategy {
        Strategy::Random => {
            let mut ids = ctx.ids.clone();
            ids.shuffle(&mut crate::rng(ctx.seed));
            ids.truncate(b);
            Ok(Selection::plain(ids))
        }
        Strategy::MaxEntropy | Strategy::LeastConf | Strategy::Margin | Strategy::VarRatio => {
            let kind = strategy.uncertainty().expect("uncertainty strategy");
            let scores = uncertainty_scores(ctx, kind)?;
            Ok(pick(top_by_score(&ctx.ids, &scores, b), &scores))
        }
        Strategy::KmeansDiversity => kmeans_diversity(&ctx.ids, features(ctx)?, b, ctx.seed),
        Strategy::EntropyKmeans => {
            let feats = features(ctx)?;
            let scores = uncertainty_scores(ctx, Uncertainty::MaxEntropy)?;
            let keep = top_by_score(&ctx.ids, &scores, (ENTROPY_KMEANS_FACTOR * b).min(n));
            let ids: Vec<u32> = keep.iter().map(|&p| ctx.ids[p]).collect();
            let sub: Vec<Vec<f64>> = keep.iter().map(|&p| feats[p].clone()).collect();
            let mut sel = kmeans_diversity(&ids, &sub, b, ctx.seed)?;
            sel.weights = sel
                .ids
                .iter()
                .map(|id| Some(scores[ctx.ids.iter().position(|x| x == id).expect("candidate")]))
                .collect();
            Ok(sel)
        }
        Strategy::Coreset => {
            let labeled = ctx.labeled_features.as_deref().unwrap_or(&[]);
            coreset_select(labeled, features(ctx)?, &ctx.ids, b)
        }
        Strategy::PaalApOnly => {
            let w = predicted_weights(ctx)?;
            Ok(pick(top_by_score(&ctx.ids, &w, b), &w))
        }
        Strategy::PaalFull => {
            let w = predicted_weights(ctx)?;
            let feats = features(ctx)?;
            if b == 0 {
                return Ok(Selection::plain(Vec::new()));
            }
            let k = cluster_count(b)?.min(n);
            let model = kmeans_fit(feats, k, ctx.seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
            weighted_polling(&ctx.ids, &model.assignments, &w, b)
        }
    }
}
