// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};

/// Outcome of a gradient check: worst relative error plus every element
/// that exceeded the tolerance, as (parameter index, element index, error).
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub failures: Vec<(usize, usize, f64)>,
    pub tolerance: f64,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-7 {
        // Both effectively zero; compare absolutely at the same scale.
        (a - b).abs() / 1e-7
    } else {
        (a - b).abs() / denom
    }
}

/// Compare analytic gradients against central finite differences of a
/// deterministic scalar-valued closure, in f64.
///
/// `closure` evaluates the loss at the given parameter values; `analytic`
/// holds the gradient under test, one vector per parameter tensor.
pub fn finite_diff_check<F>(
    mut closure: F,
    params: &mut [Vec<f64>],
    analytic: &[Vec<f64>],
    h: f64,
    tolerance: f64,
) -> Result<FiniteDiffReport>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "finite_diff_check: {} params vs {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    let base1 = closure(params)?;
    let base2 = closure(params)?;
    if base1 != base2 {
        return Err(Error::Nondeterministic(format!(
            "closure returned {base1} then {base2} at the same point"
        )));
    }

    let mut max_rel = 0.0f64;
    let mut failures = Vec::new();
    for pi in 0..params.len() {
        if params[pi].len() != analytic[pi].len() {
            return Err(Error::Shape(format!(
                "finite_diff_check: param {pi} length {} vs gradient length {}",
                params[pi].len(),
                analytic[pi].len()
            )));
        }
        for ei in 0..params[pi].len() {
            let orig = params[pi][ei];
            params[pi][ei] = orig + h;
            let up = closure(params)?;
            params[pi][ei] = orig - h;
            let down = closure(params)?;
            params[pi][ei] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = rel_err(analytic[pi][ei], fd);
            if err > max_rel {
                max_rel = err;
            }
            if err > tolerance {
                failures.push((pi, ei, err));
            }
        }
    }
    Ok(FiniteDiffReport {
        max_rel_err: max_rel,
        failures,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_is_exact() {
        // y = w . x with fixed x: gradient is x itself.
        let x = vec![0.3, -1.2, 2.5];
        let mut params = vec![vec![0.7, 0.1, -0.4]];
        let analytic = vec![x.clone()];
        let xc = x.clone();
        let report = finite_diff_check(
            move |p| Ok(p[0].iter().zip(&xc).map(|(w, xi)| w * xi).sum()),
            &mut params,
            &analytic,
            1e-4,
            1e-10,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut params = vec![vec![1.0]];
        let analytic = vec![vec![3.0]]; // true gradient is 2.0
        let report = finite_diff_check(
            |p| Ok(p[0][0] * p[0][0]),
            &mut params,
            &analytic,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn detects_nondeterminism() {
        let mut calls = 0u32;
        let mut params = vec![vec![1.0]];
        let analytic = vec![vec![1.0]];
        let res = finite_diff_check(
            move |_| {
                calls += 1;
                Ok(calls as f64)
            },
            &mut params,
            &analytic,
            1e-5,
            1e-4,
        );
        assert!(matches!(res, Err(Error::Nondeterministic(_))));
    }
}
