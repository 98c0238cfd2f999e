use super::graph::{Graph, NodeId};
use super::{Scalar, Tensor4};
use crate::error::{invalid, Error, Result};

fn eval<T, F>(f: &F, x: &Tensor4<T>) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let out = f(&mut g, xi)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Graph(format!(
            "gradient check needs a scalar function, got {}",
            v.shape()
        )));
    }
    let v = v.value();
    if !v.is_finite() {
        return Err(Error::NonFinite("function value during gradient check".into()));
    }
    Ok(v)
}

/// Central finite-difference gradient of a scalar graph function.
pub fn numeric_gradient<T, F>(f: F, x: &Tensor4<T>, step: T) -> Result<Tensor4<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    if !(step > T::zero()) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Tensor4::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let lo = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (hi - lo) / (step + step);
    }
    Ok(out)
}

/// Max over elements of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`
/// for the gradient of `f` with respect to its input.
pub fn gradient_check<T, F>(f: F, x: &Tensor4<T>, step: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xi = g.variable(x.clone());
    let out = f(&mut g, xi)?;
    let analytic = g.backward(out)?.get_or_zeros(xi, x.shape());
    let numeric = numeric_gradient(&f, x, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn max_relative_error<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| {
            let (p, q) = (p.as_f64(), q.as_f64());
            (p - q).abs() / p.abs().max(q.abs()).max(1e-12)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor4::from_fn(Shape::new(1, 2, 3, 3), |[_, c, h, w]| (c + h * w) as f64 * 0.1);
        let err = gradient_check(
            |g, x| {
                let s = g.sum_all(x);
                g.weighted_sum(&[(s, 3.0)])
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor4::scalar(0.0f64);
        let r = gradient_check(
            |g, x| {
                let labels = crate::tensor::Labels::new(1, 1, 1, vec![0], false)?;
                // log(0) at x - step
                let p = g.relu(x);
                let l = g.nll(p, &labels, 0.0)?;
                Ok(l)
            },
            &x,
            1e-3,
        );
        assert!(r.is_err());
    }

    #[test]
    fn non_positive_step_rejected() {
        let x = Tensor4::scalar(1.0f64);
        assert!(gradient_check(|g, x| Ok(g.sum_all(x)), &x, 0.0).is_err());
    }
}
