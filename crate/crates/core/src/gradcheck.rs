//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Checks `f` against central differences at `inputs`, returning the
/// maximum relative error over all input coordinates (∞ if any evaluation
/// fails or is non-finite).
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Option<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let y = f(&mut tape, &vars).ok()?;
        tape.scalar_value(y).ok().filter(|v| v.is_finite())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let Ok(y) = f(&mut tape, &vars) else {
        return f64::INFINITY;
    };
    let Ok(grads) = tape.backward(y) else {
        return f64::INFINITY;
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let plus = eval(&probe);
            probe[i].data_mut()[j] = x0 - eps;
            let minus = eval(&probe);
            probe[i].data_mut()[j] = x0;
            let (Some(p), Some(m)) = (plus, minus) else {
                return f64::INFINITY;
            };
            let numeric = (p - m) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Outcome of a parameter-space gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Gradient check over every scalar of every trainable parameter in `store`.
/// `f` must be deterministic (no dropout) and build its loss on the tape it
/// is given, reading parameters through [`Tape::param`].
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64) -> ParamCheck
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut report = ParamCheck {
        max_relative_error: f64::INFINITY,
        worst_param: String::new(),
        worst_index: 0,
        analytic: f64::NAN,
        numeric: f64::NAN,
        coordinates: 0,
    };
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let Ok(y) = f(&mut tape, &work) else {
        return report;
    };
    if tape.backward_into(y, &mut work).is_err() {
        return report;
    }
    drop(tape);
    let analytic: Vec<Tensor> = work.iter().map(|(_, p)| p.grad.clone()).collect();

    let eval = |s: &ParamStore| -> Option<f64> {
        let mut tape = Tape::new();
        let y = f(&mut tape, s).ok()?;
        tape.scalar_value(y).ok().filter(|v| v.is_finite())
    };

    report.max_relative_error = 0.0;
    let ids: Vec<_> = work.ids().collect();
    for id in ids {
        if !work.get(id).trainable {
            continue;
        }
        for j in 0..work.value(id).len() {
            let x0 = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = x0 + eps;
            let plus = eval(&work);
            work.value_mut(id).data_mut()[j] = x0 - eps;
            let minus = eval(&work);
            work.value_mut(id).data_mut()[j] = x0;
            report.coordinates += 1;
            let a = analytic[id.index()].data()[j];
            let (Some(p), Some(m)) = (plus, minus) else {
                report.max_relative_error = f64::INFINITY;
                report.worst_param = work.get(id).name.clone();
                report.worst_index = j;
                return report;
            };
            let n = (p - m) / (2.0 * eps);
            let e = relative_error(a, n);
            if e > report.max_relative_error {
                report.max_relative_error = e;
                report.worst_param = work.get(id).name.clone();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x.clone()],
            DEFAULT_EPS,
        );
        assert!(err < 1e-6, "{err}");

        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.2))),
            &[Tensor::vector(vec![0.3, -0.7])],
            DEFAULT_EPS,
        );
        assert_eq!(err, 0.0);
    }

    #[test]
    fn failing_function_reports_infinity() {
        let err = grad_check(|t, v| t.log(v[0]), &[Tensor::scalar(-1.0)], DEFAULT_EPS);
        assert!(err.is_infinite());
    }
}
