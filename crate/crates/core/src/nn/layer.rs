use rand::Rng as _;

use super::scalar::{gemm, View};
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Trainable parameter with its gradient and AdamW moments.
#[derive(Debug, Clone)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
            m: self.m.cast(),
            v: self.v.cast(),
            step: self.step,
        }
    }
}

/// Layer kinds understood by the engine. Convolutions are always 3x3,
/// stride 1, zero "same" padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d { in_ch: usize, out_ch: usize },
    Dense { in_dim: usize, out_dim: usize },
    Relu,
    Sigmoid,
    /// Softmax over axis 1, independently at every spatial position.
    ChannelSoftmax,
    /// Spatial mean per channel: `[B, C, H, W] -> [B, C]`.
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Relu => "ReLU",
            LayerSpec::Sigmoid => "Sigmoid",
            LayerSpec::ChannelSoftmax => "ChannelSoftmax",
            LayerSpec::GlobalAvgPool => "GlobalAvgPool",
        }
    }
}

pub(crate) const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone)]
pub struct Layer<T = f32> {
    pub spec: LayerSpec,
    /// `[weight, bias]` for Conv2d/Dense, empty otherwise.
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> Layer<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: LayerSpec, rng: &mut crate::Rng) -> Self {
        let params = match spec {
            LayerSpec::Conv2d { in_ch, out_ch } => {
                let fan_in = in_ch * TAPS;
                let fan_out = out_ch * TAPS;
                vec![
                    Param::new(glorot(&[out_ch, in_ch, KERNEL, KERNEL], fan_in, fan_out, rng)),
                    Param::new(Tensor::zeros(&[out_ch])),
                ]
            }
            LayerSpec::Dense { in_dim, out_dim } => vec![
                Param::new(glorot(&[out_dim, in_dim], in_dim, out_dim, rng)),
                Param::new(Tensor::zeros(&[out_dim])),
            ],
            _ => Vec::new(),
        };
        Layer { spec, params }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            spec: self.spec,
            params: self.params.iter().map(Param::cast).collect(),
        }
    }

    pub fn forward(&self, index: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let ctx = || format!("layer {index} ({})", self.spec.name());
        match self.spec {
            LayerSpec::Conv2d { in_ch, out_ch } => {
                let (b, c, h, w) = dims4(x).ok_or_else(|| Error::shape(ctx(), &[0, in_ch, 0, 0], x.shape()))?;
                if c != in_ch {
                    return Err(Error::shape(ctx(), &[b, in_ch, h, w], x.shape()));
                }
                Ok(conv_forward(x, &self.params[0].value, &self.params[1].value, b, in_ch, out_ch, h, w))
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                if x.shape().len() != 2 || x.shape()[1] != in_dim {
                    return Err(Error::shape(ctx(), &[x.batch(), in_dim], x.shape()));
                }
                let b = x.batch();
                let wt = self.params[0].value.data();
                let bias = self.params[1].value.data();
                let mut out = Vec::with_capacity(b * out_dim);
                for _ in 0..b {
                    out.extend_from_slice(bias);
                }
                gemm(
                    b,
                    in_dim,
                    out_dim,
                    View::rows(x.data(), in_dim),
                    View::transposed(wt, in_dim),
                    T::one(),
                    &mut out,
                );
                Tensor::new(vec![b, out_dim], out)
            }
            LayerSpec::Relu => Ok(map(x, |v| if v > T::zero() { v } else { T::zero() })),
            LayerSpec::Sigmoid => Ok(map(x, |v| T::one() / (T::one() + (-v).exp()))),
            LayerSpec::ChannelSoftmax => {
                if x.shape().len() < 2 {
                    return Err(Error::shape(ctx(), &[x.batch(), 0], x.shape()));
                }
                Ok(channel_softmax(x))
            }
            LayerSpec::GlobalAvgPool => {
                let (b, c, h, w) = dims4(x).ok_or_else(|| Error::shape(ctx(), &[0, 0, 0, 0], x.shape()))?;
                let hw = h * w;
                let inv = T::of(1.0 / hw as f64);
                let data = x
                    .data()
                    .chunks_exact(hw)
                    .map(|plane| plane.iter().copied().sum::<T>() * inv)
                    .collect();
                Tensor::new(vec![b, c], data)
            }
        }
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Tensor<T>, y: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        if gy.shape() != y.shape() {
            return Err(Error::shape(
                format!("backward of {}", self.spec.name()),
                y.shape(),
                gy.shape(),
            ));
        }
        let gx = match self.spec {
            LayerSpec::Conv2d { in_ch, out_ch } => {
                let (b, _, h, w) = dims4(x).expect("checked in forward");
                let (wp, rest) = self.params.split_at_mut(1);
                conv_backward(x, gy, &mut wp[0], &mut rest[0], b, in_ch, out_ch, h, w)
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                let b = x.batch();
                let (wp, rest) = self.params.split_at_mut(1);
                let weight = &mut wp[0];
                gemm(
                    out_dim,
                    b,
                    in_dim,
                    View::transposed(gy.data(), out_dim),
                    View::rows(x.data(), in_dim),
                    T::one(),
                    weight.grad.data_mut(),
                );
                let gb = rest[0].grad.data_mut();
                for row in gy.data().chunks_exact(out_dim) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g = *g + v;
                    }
                }
                let mut gx = vec![T::zero(); b * in_dim];
                gemm(
                    b,
                    out_dim,
                    in_dim,
                    View::rows(gy.data(), out_dim),
                    View::rows(weight.value.data(), in_dim),
                    T::zero(),
                    &mut gx,
                );
                Tensor::new(vec![b, in_dim], gx)?
            }
            LayerSpec::Relu => zip_map(x, gy, |xv, g| if xv > T::zero() { g } else { T::zero() }),
            LayerSpec::Sigmoid => zip_map(y, gy, |yv, g| g * yv * (T::one() - yv)),
            LayerSpec::ChannelSoftmax => softmax_backward(y, gy),
            LayerSpec::GlobalAvgPool => {
                let hw: usize = x.shape()[2..].iter().product();
                let inv = T::of(1.0 / hw as f64);
                let mut data = Vec::with_capacity(x.len());
                for &g in gy.data() {
                    data.extend(std::iter::repeat_n(g * inv, hw));
                }
                Tensor::new(x.shape().to_vec(), data)?
            }
        };
        Ok(gx)
    }
}

fn glorot<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut crate::Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-limit..limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}

fn dims4<T: Scalar>(x: &Tensor<T>) -> Option<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Some((b, c, h, w)),
        _ => None,
    }
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Spatial size of a `[B, C, ...]` tensor (1 for `[B, C]`).
fn plane<T: Scalar>(x: &Tensor<T>) -> usize {
    x.shape()[2..].iter().product()
}

pub(crate) fn channel_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.shape()[1];
    let hw = plane(x);
    let mut out = vec![T::zero(); x.len()];
    for (xi, oi) in x.data().chunks_exact(c * hw).zip(out.chunks_exact_mut(c * hw)) {
        for p in 0..hw {
            let mut mx = T::neg_infinity();
            for k in 0..c {
                mx = mx.max(xi[k * hw + p]);
            }
            let mut sum = T::zero();
            for k in 0..c {
                let e = (xi[k * hw + p] - mx).exp();
                oi[k * hw + p] = e;
                sum = sum + e;
            }
            for k in 0..c {
                oi[k * hw + p] = oi[k * hw + p] / sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Vector-Jacobian product of the per-pixel softmax: `dz = y * (g - <y, g>)`.
pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let c = y.shape()[1];
    let hw = plane(y);
    let mut out = vec![T::zero(); y.len()];
    for ((yi, gi), oi) in y
        .data()
        .chunks_exact(c * hw)
        .zip(gy.data().chunks_exact(c * hw))
        .zip(out.chunks_exact_mut(c * hw))
    {
        for p in 0..hw {
            let mut dot = T::zero();
            for k in 0..c {
                dot = dot + yi[k * hw + p] * gi[k * hw + p];
            }
            for k in 0..c {
                oi[k * hw + p] = yi[k * hw + p] * (gi[k * hw + p] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("same shape")
}

/// Unfolds one `[C, H, W]` image into `[C*9, H*W]` patch columns.
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let src = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((ci * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    // dst[x] = srow[x + kx - 1]
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..w - 1].copy_from_slice(&srow[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-column gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((ci * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, &s) in drow[..w - 1].iter_mut().zip(&src[1..]) {
                                *d = *d + s;
                            }
                        }
                        1 => {
                            for (d, &s) in drow.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                        _ => {
                            for (d, &s) in drow[1..].iter_mut().zip(&src[..w - 1]) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    b: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
) -> Tensor<T> {
    let hw = h * w;
    let k = in_ch * TAPS;
    let mut cols = vec![T::zero(); k * hw];
    let mut out = vec![T::zero(); b * out_ch * hw];
    for (xi, oi) in x.data().chunks_exact(in_ch * hw).zip(out.chunks_exact_mut(out_ch * hw)) {
        im2col(xi, in_ch, h, w, &mut cols);
        for (plane, &bv) in oi.chunks_exact_mut(hw).zip(bias.data()) {
            plane.fill(bv);
        }
        gemm(
            out_ch,
            k,
            hw,
            View::rows(weight.data(), k),
            View::rows(&cols, hw),
            T::one(),
            oi,
        );
    }
    Tensor::new(vec![b, out_ch, h, w], out).expect("conv output shape")
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    weight: &mut Param<T>,
    bias: &mut Param<T>,
    b: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
) -> Tensor<T> {
    let hw = h * w;
    let k = in_ch * TAPS;
    let mut cols = vec![T::zero(); k * hw];
    let mut gcols = vec![T::zero(); k * hw];
    let mut gx = vec![T::zero(); b * in_ch * hw];
    for ((xi, gi), gxi) in x
        .data()
        .chunks_exact(in_ch * hw)
        .zip(gy.data().chunks_exact(out_ch * hw))
        .zip(gx.chunks_exact_mut(in_ch * hw))
    {
        im2col(xi, in_ch, h, w, &mut cols);
        // dW += dY * cols^T
        gemm(
            out_ch,
            hw,
            k,
            View::rows(gi, hw),
            View::transposed(&cols, hw),
            T::one(),
            weight.grad.data_mut(),
        );
        for (g, plane) in bias.grad.data_mut().iter_mut().zip(gi.chunks_exact(hw)) {
            *g = *g + plane.iter().copied().sum::<T>();
        }
        // dcols = W^T * dY
        gemm(
            k,
            out_ch,
            hw,
            View::transposed(weight.value.data(), k),
            View::rows(gi, hw),
            T::zero(),
            &mut gcols,
        );
        col2im(&gcols, in_ch, h, w, gxi);
    }
    Tensor::new(vec![b, in_ch, h, w], gx).expect("conv input shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(spec: LayerSpec) -> Layer<f64> {
        Layer::init(spec, &mut crate::rng(1))
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f64>::from_vec(vec![-1.0, 0.0, 2.0]);
        let y = layer(LayerSpec::Relu).forward(0, &x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let mut l = layer(LayerSpec::Dense { in_dim: 3, out_dim: 3 });
        l.params[0].value = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.5, -2.0, 7.0]).unwrap();
        assert_eq!(l.forward(0, &x).unwrap().data(), x.data());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        let y = layer(LayerSpec::ChannelSoftmax).forward(0, &x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn conv_matches_direct_correlation() {
        let l = layer(LayerSpec::Conv2d { in_ch: 2, out_ch: 3 });
        let mut rng = crate::rng(9);
        let (h, w) = (4, 5);
        let x = Tensor::new(
            vec![1, 2, h, w],
            (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = l.forward(0, &x).unwrap();
        let wt = l.params[0].value.data();
        for co in 0..3 {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wt[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                    * x.data()[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    let got = y.data()[(co * h + yy) * w + xx];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = crate::rng(4);
        let (c, h, w) = (2, 3, 4);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cv: Vec<f64> = (0..c * 9 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; c * 9 * h * w];
        im2col(&x, c, h, w, &mut cols);
        let mut back = vec![0.0; c * h * w];
        col2im(&cv, c, h, w, &mut back);
        let lhs: f64 = cols.iter().zip(&cv).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn global_avg_pool_is_channel_mean() {
        let x = Tensor::new(vec![1, 2, 1, 3], vec![1.0, 2.0, 6.0, -1.0, -1.0, 5.0]).unwrap();
        let y = layer(LayerSpec::GlobalAvgPool).forward(0, &x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert!((y.data()[0] - 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_wrong_channel_count() {
        let l = layer(LayerSpec::Conv2d { in_ch: 2, out_ch: 3 });
        let err = l.forward(4, &Tensor::zeros(&[1, 3, 4, 4])).unwrap_err();
        assert!(err.to_string().contains("layer 4 (Conv2d)"), "{err}");
    }
}
