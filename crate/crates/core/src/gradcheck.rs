//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Worst disagreement found by [`grad_check_many`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks `d f / d x` for a scalar-valued `f` built on a fresh graph.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, h: S) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), h).map(|r| r.max_rel_error)
}

/// Multi-input form of [`grad_check`]; every input is probed.
pub fn grad_check_many<S, F>(f: F, xs: &[Tensor<S>], h: S) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    if !(h > S::zero()) {
        return Err(Error::Parameter(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = xs
        .iter()
        .map(|x| g.leaf(x.detached().with_requires_grad()))
        .collect();
    let y = f(&mut g, &vars)?;
    let y0 = g.item(y)?;
    if !y0.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {y0} at the base point")));
    }
    g.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| match g.grad(v) {
            Some(gr) => gr.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; x.numel()],
        })
        .collect();

    let eval = |inputs: &[Tensor<S>]| -> Result<S> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        g.item(y)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor<S>> = xs.iter().map(Tensor::detached).collect();
    for (t, an) in analytic.iter().enumerate() {
        for i in 0..xs[t].numel() {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[t].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "probing input {t} coordinate {i}: f(x+h)={up}, f(x-h)={down}"
                )));
            }
            let numeric = (up - down).as_f64() / (2.0 * h.as_f64());
            let err = (an[i] - numeric).abs() / 1f64.max(an[i].abs()).max(numeric.abs());
            if report.worst.is_none() || err > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst: Some((t, i)),
                    analytic: an[i],
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // Exact up to rounding; single precision alone costs ~1e-5 at h = 1e-3.
        let x = Tensor::<f64>::from_f64(&[4], &[0.3, -1.2, 2.0, 0.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.square(x);
                Ok(g.sum(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        // f = sum(x) / sum(x) is 0/0 once the probe drives sum(x) to zero.
        let x = Tensor::<f64>::from_f64(&[2], &[1.0, 0.0]).unwrap();
        let res = grad_check(
            |g, x| {
                let s = g.sum(x);
                g.div_scalar(s, s)
            },
            &x,
            1.0,
        );
        match res {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("coordinate 0"), "{msg}"),
            other => panic!("expected a non-finite diagnostic, got {other:?}"),
        }
    }
}
