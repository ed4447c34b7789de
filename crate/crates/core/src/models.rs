//! The toy segmentation network and the accuracy predictor.
//!
//! The segmentation model is three same-padded 3x3 convolutions ending in a
//! per-pixel softmax; its second hidden activation is tapped and pooled into
//! a 16-dimensional feature vector used for clustering. The accuracy
//! predictor sees the image stacked with the (detached) class probabilities
//! and regresses per-foreground-class Dice through a sigmoid head.

use crate::data::Sample;
use crate::nn::{Activations, LayerSpec, Network, Scalar, Tensor};
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 16;
pub const FEATURE_TAP: &str = "features";
const HIDDEN: usize = 8;

/// Builds a `[B, 1, H, W]` batch scaled into `[0, 1]`.
pub fn image_batch<T: Scalar>(samples: &[&Sample], h: usize, w: usize) -> Result<Tensor<T>> {
    let hw = h * w;
    let mut data = Vec::with_capacity(samples.len() * hw);
    for s in samples {
        if s.image.len() != hw {
            return Err(Error::shape("image_batch", &[hw], &[s.image.len()]));
        }
        data.extend(s.image.iter().map(|&v| T::of(v as f64 / 255.0)));
    }
    Tensor::new(vec![samples.len(), 1, h, w], data)
}

/// Concatenated label masks of a batch.
pub fn label_batch(samples: &[&Sample]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.mask.iter().copied()).collect()
}

#[derive(Debug, Clone)]
pub struct SegModel<T = f32> {
    pub net: Network<T>,
    pub in_channels: usize,
    /// Output classes including background.
    pub n_classes: usize,
}

/// Output of one segmentation pass.
#[derive(Debug, Clone)]
pub struct SegOutput<T = f32> {
    /// Per-pixel class probabilities `[B, C_out, H, W]`.
    pub probs: Tensor<T>,
    /// Pooled tapped activation `[B, FEATURE_DIM]`.
    pub features: Tensor<T>,
    pub acts: Activations<T>,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(in_channels: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid("segmentation needs background plus one class"));
        }
        let net = Network::new(
            &[
                LayerSpec::Conv2d { in_ch: in_channels, out_ch: HIDDEN },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_ch: HIDDEN, out_ch: FEATURE_DIM },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_ch: FEATURE_DIM, out_ch: n_classes },
                LayerSpec::ChannelSoftmax,
            ],
            seed,
        )?
        .with_tap(FEATURE_TAP, 3)?;
        Ok(SegModel {
            net,
            in_channels,
            n_classes,
        })
    }

    /// Index of the softmax layer; losses hand back logit gradients, so
    /// backprop starts just below it.
    pub fn logits_end(&self) -> usize {
        self.net.layers().len() - 1
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<SegOutput<T>> {
        check_images(images, self.in_channels, "seg_forward")?;
        let acts = self.net.forward(images)?;
        let tapped = self.net.tapped(&acts, FEATURE_TAP).expect("feature tap registered");
        let features = global_avg_pool(tapped);
        Ok(SegOutput {
            probs: acts.output().clone(),
            features,
            acts,
        })
    }
}

/// Probabilities and pooled features for a batch of images.
pub fn seg_forward<T: Scalar>(model: &SegModel<T>, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let out = model.forward(images)?;
    Ok((out.probs, out.features))
}

fn check_images<T: Scalar>(images: &Tensor<T>, channels: usize, ctx: &str) -> Result<()> {
    match *images.shape() {
        [b, c, h, w] if c == channels && b > 0 && h > 0 && w > 0 => Ok(()),
        _ => Err(Error::shape(ctx, &[images.batch(), channels, 0, 0], images.shape())),
    }
}

fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let hw: usize = x.shape()[2..].iter().product();
    let inv = T::of(1.0 / hw as f64);
    let data = x.data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(vec![b, c], data).expect("pooled shape")
}

/// Stacks image channels first, probability channels after.
pub fn concat_channels<T: Scalar>(image: &Tensor<T>, probs: &Tensor<T>) -> Result<Tensor<T>> {
    let (is, ps) = (image.shape(), probs.shape());
    if is.len() != 4 || ps.len() != 4 || is[0] != ps[0] || is[2..] != ps[2..] {
        return Err(Error::shape("concat_channels", is, ps));
    }
    let b = is[0];
    let mut shape = is.to_vec();
    shape[1] = is[1] + ps[1];
    let mut data = Vec::with_capacity(image.len() + probs.len());
    for i in 0..b {
        data.extend_from_slice(image.item(i));
        data.extend_from_slice(probs.item(i));
    }
    Tensor::new(shape, data)
}

#[derive(Debug, Clone)]
pub struct ApModel<T = f32> {
    pub net: Network<T>,
    pub in_channels: usize,
    pub n_classes: usize,
}

impl<T: Scalar> ApModel<T> {
    /// Predictor for `n_classes - 1` foreground Dice scores.
    pub fn new(in_channels: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid("accuracy predictor needs at least one foreground class"));
        }
        let net = Network::new(
            &[
                LayerSpec::Conv2d { in_ch: in_channels + n_classes, out_ch: HIDDEN },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { in_dim: HIDDEN, out_dim: n_classes - 1 },
                LayerSpec::Sigmoid,
            ],
            seed,
        )?;
        Ok(ApModel {
            net,
            in_channels,
            n_classes,
        })
    }

    pub fn n_fg(&self) -> usize {
        self.n_classes - 1
    }

    /// Forward pass keeping activations for training. `probs` is copied into
    /// the input, so nothing flows back into the segmentation model.
    pub fn forward(&self, image: &Tensor<T>, probs: &Tensor<T>) -> Result<Activations<T>> {
        check_images(image, self.in_channels, "ap_forward image")?;
        check_images(probs, self.n_classes, "ap_forward probs")?;
        self.net.forward(&concat_channels(image, probs)?)
    }
}

/// Predicted per-class Dice `[B, C_fg]`.
pub fn ap_forward<T: Scalar>(ap: &ApModel<T>, image: &Tensor<T>, probs: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(ap.forward(image, probs)?.into_output())
}
