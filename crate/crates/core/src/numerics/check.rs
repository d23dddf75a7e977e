//! Gradient verification against central differences.

use super::graph::{Graph, ValueId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst-coordinate comparison of analytic vs numeric gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
}

/// Checks the reverse-mode gradient of a scalar-valued function against
/// central differences at step `eps`.
///
/// Returns the max over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// The closure must be deterministic (no dropout) and produce a scalar.
pub fn grad_check<Func>(f: Func, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    Func: Fn(&mut Graph<f64>, ValueId) -> Result<ValueId>,
{
    Ok(grad_check_detailed(f, x, eps)?.max_rel_error)
}

pub fn grad_check_detailed<Func>(f: Func, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    Func: Fn(&mut Graph<f64>, ValueId) -> Result<ValueId>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xid = g.leaf(t.clone(), false);
        let out = f(&mut g, xid)?;
        scalar_output(&g, out)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let xid = g.leaf(x.clone(), true);
    let out = f(&mut g, xid)?;
    let base = scalar_output(&g, out)?;
    if !base.is_finite() {
        return Err(Error::numeric("grad_check: function value is not finite"));
    }
    g.backward(out)?;
    let analytic: Vec<f64> = match g.grad(xid) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; x.len()],
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(format!(
                "grad_check: non-finite values near coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}

fn scalar_output(g: &Graph<f64>, out: ValueId) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::contract(format!(
            "grad_check requires a scalar-valued function, got output shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_tight() {
        // f(x) = sum x^2, df/dx = 2x; exact for central differences.
        let x = Tensor::new(&[5], vec![0.3, -1.2, 2.5, 0.0, -0.7]).unwrap();
        let err = grad_check(
            |g, xid| {
                let sq = g.mul(xid, xid)?;
                let m = g.mean_all(sq);
                Ok(g.affine(m, 5.0, 0.0))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|g, xid| g.add(xid, xid), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
