//! Finite-difference gradient oracle.
//!
//! Independent of the backward rules it checks: the numeric side only ever
//! evaluates forward passes on perturbed copies of the input.

use super::graph::{Graph, NodeId};
use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares the analytic gradient of a scalar-valued function against
/// central differences and returns the maximum relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// The closure builds the function on a fresh graph from the given input
/// node; it is called once for the analytic pass and twice per element for
/// the numeric one, so keep inputs small.
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xid = g.leaf(x.clone(), true)?;
    let out = f(&mut g, xid)?;
    let fval = g.real(out)?.item()?;
    if !fval.is_finite() {
        return Err(Error::NonFinite { op: "grad_check forward" });
    }
    g.backward(out)?;
    let analytic = g.grad(xid)?;

    let mut eval = |xp: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.leaf(xp.clone(), false)?;
        let out = f(&mut g, id)?;
        let v = g.real(out)?.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check probe" });
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + eps;
        let fp = eval(&xp)?;
        xp.data_mut()[i] = orig - eps;
        let fm = eval(&xp)?;
        xp.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_analytic() {
        // f(x) = sum(x^2) at [1, 2]: analytic gradient [2, 4]
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn modulus_based_norm() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..16).map(|_| rng.random_range(0.2..1.0)).collect();
        let x = Tensor::from_vec(&[4, 4], data).unwrap();
        let err = grad_check(
            |g, x| {
                let spec = g.fft2(x)?;
                let m = g.modulus(spec)?;
                let sq = g.mul(m, m)?;
                g.sum(sq)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let x = Tensor::from_vec(&[1], vec![700.0]).unwrap();
        // exp overflows f64 at ~709.78; sigmoid is fine, so force it with mul chains
        let r = grad_check(
            |g, x| {
                let mut y = x;
                for _ in 0..40 {
                    y = g.mul(y, y)?;
                }
                g.sum(y)
            },
            &x,
            DEFAULT_EPS,
        );
        assert!(r.is_err());
    }
}
