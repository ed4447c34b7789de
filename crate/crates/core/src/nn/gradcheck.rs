use super::{Activations, LayerSpec, Network, Scalar, Tensor};
use crate::Result;

/// Denominator floor for the relative error, so that components whose true
/// gradient is (numerically) zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Analytic and central-difference gradients of every parameter, flattened
/// in parameter order.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Entries whose `±eps` probe flipped some ReLU on or off. The loss is
    /// not differentiable along such a probe, so the difference quotient
    /// says nothing about the derivative there.
    pub kinked: Vec<bool>,
}

impl GradCheck {
    /// Relative error of every entry, kinked ones included.
    pub fn rel_errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.analytic.iter().zip(&self.numeric).map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
            (a - n).abs() / denom
        })
    }

    /// Worst relative error over the smooth entries.
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors()
            .zip(&self.kinked)
            .filter(|(_, &k)| !k)
            .map(|(e, _)| e)
            .fold(0.0, f64::max)
    }

    pub fn kinked_fraction(&self) -> f64 {
        if self.kinked.is_empty() {
            return 0.0;
        }
        self.kinked.iter().filter(|&&k| k).count() as f64 / self.kinked.len() as f64
    }
}

/// Compares backprop against central differences of `loss`.
///
/// The network and input are promoted to `f64` first, so the comparison
/// exercises the same layer code without `f32` rounding swamping the
/// difference quotient. `loss` maps the network output to the scalar loss
/// and its gradient w.r.t. that output.
pub fn gradient_check<T, L>(net: &Network<T>, input: &Tensor<T>, loss: L, eps: f64) -> Result<GradCheck>
where
    T: Scalar,
    L: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    let mut net: Network<f64> = net.cast();
    let input: Tensor<f64> = input.cast();

    let acts = net.forward(&input)?;
    let base = relu_pattern(&net, &acts);
    let (_, grad_out) = loss(acts.output());
    net.zero_grad();
    net.backward(&acts, &grad_out)?;
    let analytic: Vec<f64> = net.params().flat_map(|p| p.grad.data().to_vec()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut kinked = Vec::with_capacity(analytic.len());
    let n_params = net.params().count();
    for pi in 0..n_params {
        let len = net.params().nth(pi).expect("param index").value.len();
        for j in 0..len {
            let orig = param_value(&mut net, pi, j, None);
            param_value(&mut net, pi, j, Some(orig + eps));
            let up = net.forward(&input)?;
            param_value(&mut net, pi, j, Some(orig - eps));
            let down = net.forward(&input)?;
            param_value(&mut net, pi, j, Some(orig));
            kinked.push(relu_pattern(&net, &up) != base || relu_pattern(&net, &down) != base);
            numeric.push((loss(up.output()).0 - loss(down.output()).0) / (2.0 * eps));
        }
    }
    Ok(GradCheck {
        analytic,
        numeric,
        kinked,
    })
}

/// On/off state of every ReLU output.
fn relu_pattern(net: &Network<f64>, acts: &Activations<f64>) -> Vec<bool> {
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.spec == LayerSpec::Relu)
        .flat_map(|(i, _)| acts.layer_output(i).data().iter().map(|&v| v > 0.0))
        .collect()
}

/// Worst relative error between analytic and finite-difference gradients.
pub fn finite_diff_check<T, L>(net: &Network<T>, input: &Tensor<T>, loss: L, eps: f64) -> Result<f64>
where
    T: Scalar,
    L: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    Ok(gradient_check(net, input, loss, eps)?.max_rel_error())
}

fn param_value(net: &mut Network<f64>, pi: usize, j: usize, set: Option<f64>) -> f64 {
    let p = net.params_mut().nth(pi).expect("param index");
    let slot = &mut p.value.data_mut()[j];
    if let Some(v) = set {
        *slot = v;
    }
    *slot
}

/// `0.5 * sum((y - target)^2)`; a convenient quadratic loss for checks.
pub fn half_squared_error(target: &Tensor<f64>) -> impl Fn(&Tensor<f64>) -> (f64, Tensor<f64>) + '_ {
    move |y| {
        let diff: Vec<f64> = y.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
        (loss, Tensor::new(y.shape().to_vec(), diff).expect("same shape"))
    }
}
