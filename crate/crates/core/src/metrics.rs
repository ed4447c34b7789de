//! Dice similarity, the segmentation and accuracy-predictor losses, and the
//! per-sample uncertainty scores used by the baseline selectors.

use std::fmt;
use std::str::FromStr;

use crate::nn::{softmax_backward, Scalar, Tensor};
use crate::{Error, Result};

/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
const LOG_FLOOR: f64 = 1e-12;

/// Per-foreground-class Dice scores, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDsc(pub Vec<f64>);

impl ClassDsc {
    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

/// Hard Dice per foreground class `1..=n_fg`. A class absent from both
/// masks scores 1.
pub fn dsc_per_class(pred: &[u8], truth: &[u8], n_fg: usize) -> Result<ClassDsc> {
    if pred.len() != truth.len() {
        return Err(Error::shape("dsc_per_class", &[truth.len()], &[pred.len()]));
    }
    let mut inter = vec![0usize; n_fg + 1];
    let mut pred_n = vec![0usize; n_fg + 1];
    let mut true_n = vec![0usize; n_fg + 1];
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p as usize, t as usize);
        if p > n_fg || t > n_fg {
            return Err(Error::invalid(format!("label {} outside 0..={n_fg}", p.max(t))));
        }
        pred_n[p] += 1;
        true_n[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    let scores = (1..=n_fg)
        .map(|c| {
            let denom = pred_n[c] + true_n[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / denom as f64
            }
        })
        .collect();
    Ok(ClassDsc(scores))
}

/// Per-pixel argmax over the channel axis of one `[C, H*W]` item; ties go to
/// the lowest class.
pub fn argmax_labels<T: Scalar>(probs: &[T], channels: usize) -> Vec<u8> {
    let hw = probs.len() / channels;
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..channels {
                if probs[c * hw + p] > probs[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Value and logit-gradient of the segmentation loss.
#[derive(Debug, Clone)]
pub struct DiceCe<T = f32> {
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    /// Gradient w.r.t. the pre-softmax logits.
    pub grad: Tensor<T>,
}

/// Mean pixel cross-entropy plus `1 - mean soft Dice` over the foreground
/// classes, equally weighted.
///
/// `probs` is the softmax output `[B, C, H, W]`; `labels` holds `B*H*W`
/// class indices. Soft Dice sums intersections and volumes over the whole
/// batch.
pub fn dice_ce_loss<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<DiceCe<T>> {
    let shape = probs.shape();
    if shape.len() < 2 {
        return Err(Error::shape("dice_ce_loss", &[0, 0, 0, 0], shape));
    }
    let (b, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    if labels.len() != b * hw {
        return Err(Error::shape("dice_ce_loss labels", &[b * hw], &[labels.len()]));
    }
    if c < 2 {
        return Err(Error::invalid("dice_ce_loss needs background plus at least one class"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::invalid(format!("label {l} outside 0..{c}")));
    }
    let n_pix = (b * hw) as f64;
    let n_fg = (c - 1) as f64;
    let p = probs.data();
    let at = |bi: usize, k: usize, px: usize| (bi * c + k) * hw + px;

    let mut ce = 0.0;
    let mut inter = vec![0.0f64; c];
    let mut volume = vec![0.0f64; c];
    for bi in 0..b {
        for px in 0..hw {
            let y = labels[bi * hw + px] as usize;
            ce -= p[at(bi, y, px)].as_f64().max(LOG_FLOOR).ln();
            for k in 1..c {
                let pk = p[at(bi, k, px)].as_f64();
                volume[k] += pk;
                if k == y {
                    inter[k] += pk;
                    volume[k] += 1.0;
                }
            }
        }
    }
    ce /= n_pix;
    let ratio: Vec<f64> = (0..c)
        .map(|k| (2.0 * inter[k] + DICE_SMOOTH) / (volume[k] + DICE_SMOOTH))
        .collect();
    let dice = 1.0 - ratio[1..].iter().sum::<f64>() / n_fg;

    // d(loss)/d(probs); the CE part is folded in after the softmax pullback
    // because (p - onehot)/N is its exact logit gradient.
    let mut gp = vec![T::zero(); p.len()];
    for bi in 0..b {
        for px in 0..hw {
            let y = labels[bi * hw + px] as usize;
            for k in 1..c {
                let denom = volume[k] + DICE_SMOOTH;
                let g = if k == y { 1.0 } else { 0.0 };
                let d = -(2.0 * g * denom - (2.0 * inter[k] + DICE_SMOOTH)) / (denom * denom) / n_fg;
                gp[at(bi, k, px)] = T::of(d);
            }
        }
    }
    let gp = Tensor::new(shape.to_vec(), gp)?;
    let mut grad = softmax_backward(probs, &gp);
    for bi in 0..b {
        for px in 0..hw {
            let y = labels[bi * hw + px] as usize;
            for k in 0..c {
                let onehot = if k == y { 1.0 } else { 0.0 };
                let i = at(bi, k, px);
                let v = grad.data()[i].as_f64() + (p[i].as_f64() - onehot) / n_pix;
                grad.data_mut()[i] = T::of(v);
            }
        }
    }
    Ok(DiceCe {
        loss: ce + dice,
        ce,
        dice,
        grad,
    })
}

/// Mean squared error over all entries and its gradient.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &[f64]) -> Result<(f64, Tensor<T>)> {
    if pred.len() != target.len() {
        return Err(Error::shape("mse_loss", pred.shape(), &[target.len()]));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p.as_f64() - t;
            loss += d * d;
            T::of(2.0 * d / n)
        })
        .collect();
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Pixel-level uncertainty measures, averaged over the image. Higher means
/// more uncertain for every kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Uncertainty {
    /// `-sum_c p_c ln p_c`
    MaxEntropy,
    /// `1 - max_c p_c`
    LeastConf,
    /// `-(p_(1) - p_(2))`
    Margin,
    /// Fraction of pixels whose top probability fails a 0.5 majority.
    VarRatio,
}

impl Uncertainty {
    pub fn as_str(&self) -> &'static str {
        match self {
            Uncertainty::MaxEntropy => "max_entropy",
            Uncertainty::LeastConf => "least_conf",
            Uncertainty::Margin => "margin",
            Uncertainty::VarRatio => "var_ratio",
        }
    }
}

impl fmt::Display for Uncertainty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Uncertainty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "max_entropy" => Uncertainty::MaxEntropy,
            "least_conf" => Uncertainty::LeastConf,
            "margin" => Uncertainty::Margin,
            "var_ratio" => Uncertainty::VarRatio,
            other => return Err(Error::invalid(format!("unknown uncertainty kind '{other}'"))),
        })
    }
}

/// Scores one sample's `[C, H*W]` probability block.
pub fn uncertainty_score<T: Scalar>(kind: Uncertainty, probs: &[T], channels: usize) -> f64 {
    let hw = probs.len() / channels;
    if hw == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for px in 0..hw {
        let pixel = (0..channels).map(|c| probs[c * hw + px].as_f64());
        total += match kind {
            Uncertainty::MaxEntropy => pixel.filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>(),
            Uncertainty::LeastConf => 1.0 - pixel.fold(f64::NEG_INFINITY, f64::max),
            Uncertainty::Margin => {
                let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for p in pixel {
                    if p > first {
                        second = first;
                        first = p;
                    } else if p > second {
                        second = p;
                    }
                }
                if channels < 2 {
                    second = 0.0;
                }
                -(first - second)
            }
            Uncertainty::VarRatio => {
                if pixel.fold(f64::NEG_INFINITY, f64::max) > 0.5 {
                    0.0
                } else {
                    1.0
                }
            }
        };
    }
    total / hw as f64
}
