//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so gradients near zero are
/// compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), step, tol)
}

/// Checks gradients with respect to every tensor in `inputs`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars)?;
        if out.shape().iter().product::<usize>() != 1 {
            return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
        }
        g.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect::<Vec<_>>()
    };

    let eval = |which: usize, probe: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| g.constant(if i == which { probe.clone() } else { t.clone() }))
            .collect();
        let v = f(&g, &vars)?.item();
        if !v.is_finite() {
            let op = g.first_non_finite().unwrap_or("unknown");
            return Err(Error::NonFinite { op: op.to_string() });
        }
        Ok(v)
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for (which, x) in inputs.iter().enumerate() {
        let mut grad = Tensor::zeros(x.shape());
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = eval(which, &probe)?;
            probe.data_mut()[i] = orig - step;
            let down = eval(which, &probe)?;
            probe.data_mut()[i] = orig;
            let n = (up - down) / (2.0 * step);
            grad.data_mut()[i] = n;
            let err = relative_error(analytic[which].data()[i], n);
            if err > max_rel_error {
                max_rel_error = err;
                worst = (which, i);
            }
        }
        numeric.push(grad);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact_with_dyadic_step() {
        let x = Tensor::new(&[2, 3], vec![1., -2., 3., 0., 5., -1.]).unwrap();
        let report = grad_check(|_, v| v.sum_all(), &x, 2f64.powi(-17), 0.0).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn sum_with_decimal_step() {
        let x = Tensor::new(&[3], vec![0.3, -1.7, 2.2]).unwrap();
        let report = grad_check(|_, v| v.sum_all(), &x, 1e-5, 1e-9).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn softmax_then_weighted_sum() {
        let x = Tensor::new(&[2, 3], vec![0.1, -0.4, 1.3, 2.0, 0.0, -1.0]).unwrap();
        let w = Tensor::new(&[2, 3], vec![1., 2., 3., -1., 0.5, 4.]).unwrap();
        let report = grad_check(
            |g, v| v.softmax().mul(g.constant(w.clone()))?.sum_all(),
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn squash_norm_at_unit_vector() {
        let x = Tensor::new(&[3], vec![0.6, 0.0, 0.8]).unwrap();
        let report = grad_check(|_, v| v.squash(1e-12).l2_norm(0), &x, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn nan_is_reported_with_op_name() {
        let x = Tensor::new(&[2], vec![f64::NAN, 0.0]).unwrap();
        let err = grad_check(|_, v| v.softmax().sum_all(), &x, 1e-5, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
