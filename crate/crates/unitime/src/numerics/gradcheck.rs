//! Finite-difference gradient checking.
//!
//! The checker re-evaluates a scalar function with central differences,
//! element by element, and compares against the tape's analytic gradients.
//! It never inspects how backward computed anything, only forward values,
//! which keeps it an independent oracle.

use crate::error::Result;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Default central-difference step for f64 checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check: the largest relative error found and where.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub input: usize,
    pub element: usize,
}

/// Compares analytic and numeric gradients of a scalar-valued function of
/// `inputs`. `f` must rebuild the same computation for every call: it gets a
/// fresh tape and one `Var` per input, and returns the scalar output.
pub fn check<F>(inputs: &[Tensor], f: F, step: f64) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut report = CheckReport {
        max_rel_err: 0.0,
        input: 0,
        element: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            // near-zero gradients are compared absolutely
            let rel = if (a - numeric).abs() < 1e-8 { 0.0 } else { rel };
            if rel > report.max_rel_err {
                report = CheckReport {
                    max_rel_err: rel,
                    input: i,
                    element: e,
                };
            }
        }
    }
    Ok(report)
}

/// `check` with the default step, panicking when the tolerance is exceeded.
/// Intended for use inside tests.
pub fn assert_grads_close<F>(inputs: &[Tensor], f: F, tol: f64)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = check(inputs, f, DEFAULT_STEP).expect("gradient check failed to evaluate");
    assert!(
        report.max_rel_err < tol,
        "gradient mismatch: rel err {:.3e} at input {} element {} (tol {:.1e})",
        report.max_rel_err,
        report.input,
        report.element,
        tol
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng::for_stream(11, rng::Stream::Init);
        let a = Tensor::randn(&[4, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3, 2], 1.0, &mut r);
        assert_grads_close(
            &[a, b],
            |tape, vs| {
                let c = tape.matmul(vs[0], vs[1])?;
                let m0 = tape.mean(c, 0)?;
                tape.mean(m0, 0)
            },
            1e-4,
        );
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x.mul_scalar(2) has gradient 2; pretend the function is x^2 by
        // evaluating something inconsistent between value and grad is not
        // possible through the public API, so instead verify the checker
        // notices a genuinely nonlinear function's curvature error at a
        // too-large step.
        let x = Tensor::vector(&[1.0, 2.0]);
        let report = check(
            &[x],
            |tape, vs| {
                let sq = tape.mul(vs[0], vs[0])?;
                let cube = tape.mul(sq, vs[0])?;
                tape.mean(cube, 0)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "cubic should check out at h=1e-5");
        let coarse = check(
            &[Tensor::vector(&[1.0, 2.0])],
            |tape, vs| {
                let sq = tape.mul(vs[0], vs[0])?;
                let cube = tape.mul(sq, vs[0])?;
                tape.mean(cube, 0)
            },
            0.5,
        )
        .unwrap();
        assert!(
            coarse.max_rel_err > 1e-3,
            "a coarse step must expose truncation error, got {:.3e}",
            coarse.max_rel_err
        );
    }
}
