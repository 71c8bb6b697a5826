//! Finite-difference validation of the reverse pass.
//!
//! Runs in f64: central differences at eps ~1e-5 lose too many digits in f32
//! to separate a real gradient bug from roundoff.

use crate::error::TensorError;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Worst observed disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks d(loss)/d(input) for every tensor in `inputs` against central
/// differences.
///
/// `build` receives a fresh tape plus one [`ValueId`] per input (in order)
/// and must return a scalar loss. It is re-invoked for every perturbed
/// evaluation, so it must be a pure function of the tape inputs.
///
/// Relative error uses `|a - n| / max(|a|, |n|, 1e-8)`. Inputs should stay
/// clear of non-differentiable points (relu kinks, pooling ties): central
/// differences straddle them and produce spurious errors that say nothing
/// about the reverse pass.
pub fn grad_check_multi<F>(
    build: F,
    inputs: &[Tensor<f64>],
    epsilon: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId, TensorError>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(TensorError::BadEpsilon { eps: epsilon });
    }

    let eval = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<ValueId>, ValueId), TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = tensors.iter().map(|t| tape.parameter(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss)?.numel() != 1 {
            return Err(TensorError::NotScalar {
                numel: tape.value(loss)?.numel(),
            });
        }
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (j, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[j]).cloned();
        for i in 0..input.numel() {
            let orig = input.data()[i];

            work[j].data_mut()[i] = orig + epsilon;
            let (t_plus, _, l_plus) = eval(&work)?;
            let f_plus = t_plus.value(l_plus)?.item()?;

            work[j].data_mut()[i] = orig - epsilon;
            let (t_minus, _, l_minus) = eval(&work)?;
            let f_minus = t_minus.value(l_minus)?.item()?;

            work[j].data_mut()[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    worst: (j, i),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(
    build: F,
    input: &Tensor<f64>,
    epsilon: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, ValueId) -> Result<ValueId, TensorError>,
{
    grad_check_multi(
        |tape, ids| build(tape, ids[0]),
        std::slice::from_ref(input),
        epsilon,
    )
}
