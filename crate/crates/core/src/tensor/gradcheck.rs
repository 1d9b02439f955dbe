//! Central-difference gradient verification.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Gradients smaller than this are compared in absolute terms. Round-off in
/// the difference quotient is about `1e-16 * |f| / h`, i.e. 1e-10 for an
/// objective of magnitude 10 at `h = 1e-5`, which exact zeros must absorb.
const ABS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    pub(crate) fn from_pairs(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> Self {
        let mut worst = (0.0, 0);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = relative_error(*a, *n);
            if err > worst.0 {
                worst = (err, i);
            }
        }
        GradCheckReport {
            max_rel_error: worst.0,
            worst_index: worst.1,
            analytic,
            numeric,
            tol,
        }
    }

    /// Merges several reports, keeping the worst error.
    pub fn worst_of(reports: impl IntoIterator<Item = GradCheckReport>) -> Option<GradCheckReport> {
        reports
            .into_iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares backward gradients of `f` at `theta` against
/// `(f(theta + h e_i) - f(theta - h e_i)) / 2h` for every coordinate.
///
/// `f` receives a fresh graph and the input node, and returns a scalar.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'static>, Var) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut graph = Graph::new();
    let x = graph.input(theta.clone())?;
    let loss = f(&mut graph, x)?;
    let grads = graph.backward(loss)?;
    let analytic = grads
        .wrt(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; theta.len()]);

    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(point)?;
        let out = f(&mut g, x)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        Ok(v)
    };
    let mut numeric = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus.data_mut()[i] += h;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(GradCheckReport::from_pairs(analytic, numeric, tol))
}

/// Same check over stored parameters: every coordinate of each id in `ids`.
///
/// The store is perturbed in place and restored before returning.
pub fn grad_check_params<F>(store: &mut ParamStore, ids: &[ParamId], f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let grads = {
        let mut graph = Graph::with_params(store);
        let loss = f(&mut graph)?;
        graph.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        Ok(v)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &id in ids {
        let len = store.value(id).len();
        match grads.param(id) {
            Some(t) => analytic.extend_from_slice(t.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, len)),
        }
        for i in 0..len {
            let original = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = original + h;
            let up = eval(store);
            store.get_mut(id).value.data_mut()[i] = original - h;
            let down = eval(store);
            store.get_mut(id).value.data_mut()[i] = original;
            numeric.push((up? - down?) / (2.0 * h));
        }
    }
    Ok(GradCheckReport::from_pairs(analytic, numeric, tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::vector(vec![0.3, -1.7, 2.0]);
        let report = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                let s = g.scale(sq, 3.0)?;
                g.sum(s)
            },
            &theta,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!((report.analytic[1] - 6.0 * -1.7).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let theta = Tensor::vector(vec![1.0]);
        assert!(grad_check(|g, x| g.sum(x), &theta, 0.0, 1e-6).is_err());
    }

    #[test]
    fn tiny_tolerance_fails_on_curved_objective() {
        let theta = Tensor::vector(vec![0.4, 1.3]);
        let report = grad_check(|g, x| { let e = g.exp(x)?; g.sum(e) }, &theta, 1e-5, 1e-12).unwrap();
        assert!(!report.passed());
    }
}
