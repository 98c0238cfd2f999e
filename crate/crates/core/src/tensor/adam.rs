use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor4<T>>,
    pub v: Vec<Tensor4<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor4<T>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor4::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor4<T>], grads: &[Tensor4<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                layer: "adam".into(),
                expected: format!("{} parameter tensors", self.m.len()),
                actual: format!("{} params, {} grads", params.len(), grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::ShapeMismatch {
                    layer: format!("adam parameter {i}"),
                    expected: self.m[i].shape().to_string(),
                    actual: format!("param {}, grad {}", p.shape(), g.shape()),
                });
            }
            g.ensure_finite(&format!("gradient of parameter {i}"))?;
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = b1 * md[k] + (T::one() - b1) * gk;
                vd[k] = b2 * vd[k] + (T::one() - b2) * gk * gk;
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                pd[k] = pd[k] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn one(v: f64) -> Vec<Tensor4<f64>> {
        vec![Tensor4::scalar(v)]
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![Tensor4::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &p);
        st.step(&mut p, &[Tensor4::zeros(Shape::new(1, 1, 1, 3))]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = one(1.0);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        st.step(&mut p, &one(1.0)).unwrap();
        // m = 0.1, v = 0.001; mhat = 1, vhat = 1; step = lr * 1 / (1 + 1e-8)
        let m: f64 = 0.1 / (1.0 - 0.9);
        let v: f64 = 0.001 / (1.0 - 0.999);
        let want = 1.0 - 0.0002 * m / (v.sqrt() + 1e-8);
        assert_eq!(p[0].value(), want);
        assert!((p[0].value() - 0.9998).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_step_converges_to_lr() {
        let mut p = one(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let mut last = 0.0;
        for _ in 0..1000 {
            let before = p[0].value();
            st.step(&mut p, &one(1.0)).unwrap();
            last = before - p[0].value();
        }
        assert!((last - 0.0002).abs() < 0.01 * 0.0002, "delta {last}");
    }

    #[test]
    fn mismatches_and_non_finite_rejected() {
        let mut p = one(1.0);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(st.step(&mut p, &[Tensor4::zeros(Shape::new(1, 1, 1, 2))]).is_err());
        assert!(st.step(&mut p, &one(f64::INFINITY)).is_err());
        assert!(st.step(&mut p, &[]).is_err());
        assert_eq!(st.step, 0);
    }
}
