//! Finite-difference gradient verification.
//!
//! `grad_check` treats the closure as a black-box scalar function of its
//! tensor inputs, compares reverse-mode gradients against central
//! differences, and reports the worst component. The error is relative to
//! the larger gradient magnitude, floored at one, so tiny gradients are
//! compared absolutely instead of amplifying roundoff.

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};

/// Maximum relative gradient error of `f` at the given input point.
///
/// `f` must be deterministic (no dropout) and smooth at the evaluation
/// point; `step` is the central-difference half-width.
pub fn grad_check<F>(f: F, points: &[Tensor], step: Real) -> Real
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    assert!(step > 0.0, "grad_check step must be positive");

    // Reverse-mode gradients.
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars);
    out.backward();
    let analytic: Vec<Tensor> = vars.iter().map(Var::grad).collect();

    let eval = |pts: &[Tensor]| -> Real {
        let tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
        f(&tape, &vars).value().item()
    };

    let mut worst: Real = 0.0;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for ci in 0..point.len() {
            let orig = point.data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let up = eval(&work);
            work[pi].data_mut()[ci] = orig - step;
            let down = eval(&work);
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi].data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
