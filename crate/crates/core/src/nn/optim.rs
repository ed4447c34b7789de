use super::layer::Param;
use super::Scalar;
use crate::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamW {
    /// One update of every parameter. Gradients are left in place; a
    /// non-finite gradient aborts before anything is modified.
    pub fn step<'a, T: Scalar>(&self, params: impl IntoIterator<Item = &'a mut Param<T>>, lr: f64) -> Result<()> {
        let params: Vec<&mut Param<T>> = params.into_iter().collect();
        if params.iter().any(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite("AdamW gradient".into()));
        }
        for p in params {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = 1.0 - lr * self.weight_decay;
            let Param { value, grad, m, v, .. } = p;
            for (((x, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.as_f64();
                let mn = self.beta1 * mi.as_f64() + (1.0 - self.beta1) * g;
                let vn = self.beta2 * vi.as_f64() + (1.0 - self.beta2) * g * g;
                *mi = T::of(mn);
                *vi = T::of(vn);
                let update = (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *x = T::of(x.as_f64() * decay - lr * update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_param(v: f64, g: f64) -> Param<f64> {
        let mut p = Param::new(Tensor::from_vec(vec![v]));
        p.grad = Tensor::from_vec(vec![g]);
        p
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut p = scalar_param(0.7, 0.0);
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        opt.step([&mut p], 1e-3).unwrap();
        assert_eq!(p.value.data()[0], 0.7);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn zero_grad_applies_decoupled_decay() {
        let mut p = scalar_param(2.0, 0.0);
        AdamW::default().step([&mut p], 1e-3).unwrap();
        assert!((p.value.data()[0] - 2.0 * (1.0 - 1e-7)).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let (lr, wd, eps) = (1e-3, 1e-4, 1e-8);
        let mut p = scalar_param(1.0, 1.0);
        AdamW::default().step([&mut p], lr).unwrap();
        // bias-corrected m = v = 1 at step 1
        let expected = 1.0 - lr * 1.0 / (1.0f64.sqrt() + eps) - lr * wd * 1.0;
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(p.grad.data(), &[1.0]);
    }

    #[test]
    fn non_finite_grad_is_rejected_untouched() {
        let mut a = scalar_param(1.0, 1.0);
        let mut b = scalar_param(1.0, f64::NAN);
        assert!(AdamW::default().step([&mut a, &mut b], 1e-3).is_err());
        assert_eq!(a.value.data(), &[1.0]);
        assert_eq!(a.step, 0);
    }
}
