//! Finite-difference spot checks of every differentiable tape op plus the
//! composed fusion unit, runnable by name from the command line.

use pfseg_core::{grad_check_multi, IntTensor, Tensor, TensorError, VOID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CliError;

/// Central-difference step; small enough to expose real gradient bugs in
/// f64 without drowning them in roundoff.
const EPS: f64 = 1e-5;

/// Pass bar for every op.
pub const TOLERANCE: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so relu's kink cannot straddle the
/// difference stencil.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

type Trial = fn(&mut ChaCha8Rng) -> Result<f64, TensorError>;

fn conv_trial(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let stride = if rng.random::<bool>() { 1 } else { 2 };
    let x = rand_t(rng, &[1, 2, 5, 5]);
    let w = rand_t(rng, &[3, 2, 3, 3]);
    let b = rand_t(rng, &[3]);
    let report = grad_check_multi(
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), stride, 1)?;
            let t = tape.tanh(y)?;
            tape.sum_all(t)
        },
        &[x, w, b],
        EPS,
    )?;
    Ok(report.max_rel_err)
}

fn relu_trial(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let x = rand_off_zero(rng, &[2, 3, 4, 4]);
    let report = grad_check_multi(
        |tape, ids| {
            let y = tape.relu(ids[0])?;
            tape.sum_all(y)
        },
        &[x],
        EPS,
    )?;
    Ok(report.max_rel_err)
}

fn tanh_trial(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let x = rand_t(rng, &[2, 3, 4, 4]);
    let report = grad_check_multi(
        |tape, ids| {
            let y = tape.tanh(ids[0])?;
            tape.sum_all(y)
        },
        &[x],
        EPS,
    )?;
    Ok(report.max_rel_err)
}

fn add_trial(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let a = rand_t(rng, &[1, 2, 4, 4]);
    let b = rand_t(rng, &[1, 2, 4, 4]);
    let report = grad_check_multi(
        |tape, ids| {
            let y = tape.add(ids[0], ids[1])?;
            let t = tape.tanh(y)?;
            tape.sum_all(t)
        },
        &[a, b],
        EPS,
    )?;
    Ok(report.max_rel_err)
}

fn mul_trial(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let a = rand_t(rng, &[1, 2, 4, 4]);
    let b = rand_t(rng, &[1, 2, 4, 4]);
    let report = grad_check_multi(
        |tape, ids| {
            let y = tape.mul(ids[0], ids[1])?;
            tape.sum_all(y)
        },
        &[a, b],
        EPS,
    )?;
    Ok(report.max_rel_err)
}

fn scale_trial(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let x = rand_t(rng, &[1, 3, 4, 4]);
    let factor: f64 = rng.random_range(-2.0..2.0);
    let report = grad_check_multi(
        |tape, ids| {
            let y = tape.scale(ids[0], factor)?;
            let t = tape.tanh(y)?;
            tape.sum_all(t)
        },
        &[x],
        EPS,
    )?;
    Ok(report.max_rel_err)
}

fn concat_trial(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let a = rand_t(rng, &[1, 2, 4, 4]);
    let b = rand_t(rng, &[1, 3, 4, 4]);
    let report = grad_check_multi(
        |tape, ids| {
            let y = tape.concat_channels(ids[0], ids[1])?;
            let t = tape.tanh(y)?;
            tape.sum_all(t)
        },
        &[a, b],
        EPS,
    )?;
    Ok(report.max_rel_err)
}

fn pool_trial(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    // Continuous draws make pooling ties vanishingly unlikely, so the
    // argmax stays put under the difference stencil.
    let x = rand_t(rng, &[1, 2, 6, 6]);
    let report = grad_check_multi(
        |tape, ids| {
            let (y, _) = tape.max_pool2d(ids[0])?;
            let t = tape.tanh(y)?;
            tape.sum_all(t)
        },
        &[x],
        EPS,
    )?;
    Ok(report.max_rel_err)
}

fn unpool_trial(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    // The index map comes from pooling an untracked constant; the checked
    // input is the pooled-resolution tensor being scattered.
    let guide = rand_t(rng, &[1, 2, 6, 6]);
    let x = rand_t(rng, &[1, 2, 3, 3]);
    let report = grad_check_multi(
        move |tape, ids| {
            let g = tape.constant(guide.clone());
            let (_, map) = tape.max_pool2d(g)?;
            let y = tape.max_unpool2d(ids[0], &map)?;
            let t = tape.tanh(y)?;
            tape.sum_all(t)
        },
        &[x],
        EPS,
    )?;
    Ok(report.max_rel_err)
}

fn sum_trial(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let x = rand_t(rng, &[2, 2, 3, 3]);
    let report = grad_check_multi(
        |tape, ids| {
            let t = tape.tanh(ids[0])?;
            tape.sum_all(t)
        },
        &[x],
        EPS,
    )?;
    Ok(report.max_rel_err)
}

fn softmax_trial(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let logits = rand_t(rng, &[1, 4, 4, 4]);
    let labels: Vec<u8> = (0..16)
        .map(|i| {
            if i % 7 == 0 {
                VOID
            } else {
                rng.random_range(0..4)
            }
        })
        .collect();
    let gt = IntTensor::new(vec![1, 4, 4], labels).expect("label extents fixed");
    let report = grad_check_multi(
        move |tape, ids| {
            let (loss, _) = tape.softmax_cross_entropy(ids[0], &gt)?;
            Ok(loss)
        },
        &[logits],
        EPS,
    )?;
    Ok(report.max_rel_err)
}

fn fusion_trial(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let e0 = rand_t(rng, &[1, 2, 4, 4]);
    let e1 = rand_t(rng, &[1, 2, 4, 4]);
    let w_x0 = rand_t(rng, &[2, 2, 3, 3]);
    let w_x1 = rand_t(rng, &[2, 2, 3, 3]);
    let w_y1 = rand_t(rng, &[2, 2, 3, 3]);
    let report = grad_check_multi(
        |tape, ids| {
            let a0 = tape.conv2d(ids[0], ids[2], None, 1, 1)?;
            let a1 = tape.conv2d(ids[1], ids[3], None, 1, 1)?;
            let s = tape.add(a0, a1)?;
            let a = tape.tanh(s)?;
            let y = tape.conv2d(a, ids[4], None, 1, 1)?;
            tape.sum_all(y)
        },
        &[e0, e1, w_x0, w_x1, w_y1],
        EPS,
    )?;
    Ok(report.max_rel_err)
}

/// Every checkable op, in the order they are reported.
pub const OPS: &[(&str, Trial)] = &[
    ("conv", conv_trial),
    ("relu", relu_trial),
    ("tanh", tanh_trial),
    ("add", add_trial),
    ("mul", mul_trial),
    ("scale", scale_trial),
    ("concat", concat_trial),
    ("pool", pool_trial),
    ("unpool", unpool_trial),
    ("sum", sum_trial),
    ("softmax", softmax_trial),
    ("fusion", fusion_trial),
];

/// Worst relative error per selected op over `trials` random draws.
pub fn run(op: &str, trials: usize, seed: u64) -> Result<Vec<(&'static str, f64)>, CliError> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let selected: Vec<&(&str, Trial)> = if op == "all" {
        OPS.iter().collect()
    } else {
        let found = OPS.iter().find(|(name, _)| *name == op);
        match found {
            Some(entry) => vec![entry],
            None => {
                let names: Vec<&str> = OPS.iter().map(|(n, _)| *n).collect();
                return Err(CliError::Usage(format!(
                    "unknown op `{op}`; expected all or one of {}",
                    names.join("|")
                )));
            }
        }
    };
    let mut out = Vec::with_capacity(selected.len());
    for (name, trial) in selected {
        // Per-op stream: adding ops never perturbs another op's draws.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ splitmix(name));
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let err = trial(&mut rng)
                .map_err(|e| CliError::Numeric(format!("gradient check `{name}`: {e}")))?;
            worst = worst.max(err);
        }
        out.push((*name, worst));
    }
    Ok(out)
}

/// Stable tiny hash so each op name owns a distinct RNG stream.
fn splitmix(name: &str) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
    }
    h
}
