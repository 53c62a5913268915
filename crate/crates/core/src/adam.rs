//! Adam optimizer with bias-corrected moment estimates.
//!
//! Update rule per step `t` (all elementwise):
//!
//! ```text
//! m    = b1*m + (1-b1)*g
//! v    = b2*v + (1-b2)*g^2
//! lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t)
//! p    = p - lr_t * m / (sqrt(v) + eps)
//! ```
//!
//! State is kept per parameter, aligned by index with the parameter list
//! the optimizer was built for. A step validates every gradient before
//! mutating anything, so a NaN gradient leaves parameters and moments
//! untouched.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct Adam<S> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    step: u32,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    /// Optimizer over parameters with the given shapes, in order.
    pub fn new(lr: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            lr: S::from_f64_c(lr),
            beta1: S::from_f64_c(ADAM_BETA1),
            beta2: S::from_f64_c(ADAM_BETA2),
            eps: S::from_f64_c(ADAM_EPS),
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update. `params[i]` pairs with `grads[i]` and with the
    /// shape `i` this optimizer was built with.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam_step: expected {} parameter/gradient pairs, got {}/{}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::contract(format!(
                    "adam_step: shape mismatch at parameter {i}: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
            g.check_finite(&format!("adam_step: gradient of parameter {i}"))?;
        }

        self.step += 1;
        let t = self.step as i32;
        let one = S::one();
        let bias1 = one - self.beta1.powi(t);
        let bias2 = one - self.beta2.powi(t);
        let lr_t = self.lr * bias2.sqrt() / bias1;

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let ps = p.data_mut();
            let gs = g.data();
            let ms = m.data_mut();
            let vs = v.data_mut();
            for j in 0..ps.len() {
                let gj = gs[j];
                ms[j] = self.beta1 * ms[j] + (one - self.beta1) * gj;
                vs[j] = self.beta2 * vs[j] + (one - self.beta2) * gj * gj;
                ps[j] = ps[j] - lr_t * ms[j] / (vs[j].sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param<S: Scalar>(v: f64) -> Tensor<S> {
        Tensor::from_vec(vec![1], vec![S::from_f64_c(v)], "p").unwrap()
    }

    #[test]
    fn first_step_moves_by_roughly_lr_times_sign() {
        let mut adam = Adam::<f64>::new(0.1, &[vec![1]]);
        let mut p = scalar_param(1.0);
        let g = scalar_param(1.0);
        adam.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters_untouched() {
        let mut adam = Adam::<f32>::new(0.1, &[vec![3]]);
        let mut p = Tensor::from_vec(vec![3], vec![1.0f32, -2.0, 0.5], "p").unwrap();
        let before = p.data().to_vec();
        let g = Tensor::zeros(&[3]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn nan_gradient_fails_before_any_mutation() {
        let mut adam = Adam::<f32>::new(0.1, &[vec![1], vec![1]]);
        let mut p0 = scalar_param(1.0);
        let mut p1 = scalar_param(2.0);
        let g0 = scalar_param(0.5);
        let mut g1 = scalar_param(0.0);
        g1.data_mut()[0] = f32::NAN;
        let err = adam.step(&mut [&mut p0, &mut p1], &[&g0, &g1]).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert_eq!(p0.data()[0], 1.0);
        assert_eq!(p1.data()[0], 2.0);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn descends_a_parabola_matching_an_independent_reference() {
        // Reference written directly from the update equations, kept apart
        // from the implementation under test.
        let (lr, b1, b2, eps) = (0.1f64, 0.9, 0.999, 1e-8);
        let (mut xr, mut mr, mut vr) = (1.0f64, 0.0, 0.0);
        let mut reference = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * xr;
            mr = b1 * mr + (1.0 - b1) * g;
            vr = b2 * vr + (1.0 - b2) * g * g;
            let lr_t = lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
            xr -= lr_t * mr / (vr.sqrt() + eps);
            reference.push(xr);
        }

        let mut adam = Adam::<f64>::new(lr, &[vec![1]]);
        let mut p = scalar_param(1.0);
        let mut prev = 1.0f64;
        for step in 0..10 {
            let g = scalar_param(2.0 * p.data()[0]);
            adam.step(&mut [&mut p], &[&g]).unwrap();
            let x = p.data()[0];
            assert!((x - reference[step]).abs() < 1e-12);
            assert!(x.abs() < prev.abs(), "|x| must decrease strictly");
            prev = x;
        }
    }

    #[test]
    fn mismatched_shapes_are_a_contract_error() {
        let mut adam = Adam::<f32>::new(0.1, &[vec![2]]);
        let mut p = scalar_param(1.0);
        let g = scalar_param(1.0);
        let err = adam.step(&mut [&mut p], &[&g]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
