use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Bindings, NodeId, Result, Session, Tape};
use crate::exec::Execution;

/// Below this magnitude the comparison switches from relative to absolute
/// error.
pub const ABSOLUTE_SWITCH: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub step: f64,
    /// Check at most this many randomly chosen components per parameter.
    /// `None` checks every component.
    pub max_per_param: Option<usize>,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_per_param: None,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_error: f64,
    /// Parameter label and flat index of the worst component.
    pub worst: Option<(String, usize)>,
    pub components_checked: usize,
}

/// Compares backward gradients against central differences
/// `(L(p + h) - L(p - h)) / 2h` for every parameter component. Dropout masks
/// are ordinary bindings, so they stay frozen across the probes.
pub fn finite_diff_check(tape: &Tape, bindings: &Bindings<'_>, step: f64) -> Result<FdReport> {
    finite_diff_check_with(
        tape,
        bindings,
        &FdOptions {
            step,
            ..FdOptions::default()
        },
    )
}

pub fn finite_diff_check_with(
    tape: &Tape,
    bindings: &Bindings<'_>,
    opts: &FdOptions,
) -> Result<FdReport> {
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(AutodiffError::InvalidStep(opts.step));
    }
    let mut session = Session::new(tape, bindings);
    session.forward()?;
    let grads = session.backward()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probes: Vec<(NodeId, usize, usize, f64)> = Vec::new();
    for (slot, &param) in tape.params().iter().enumerate() {
        let n = grads.as_slice()[slot].len();
        let picks: Vec<usize> = match opts.max_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let flat = grads.as_slice()[slot]
            .as_slice_memory_order()
            .expect("contiguous grads");
        for i in picks {
            probes.push((param, slot, i, flat[i]));
        }
    }

    let h = opts.step;
    let results = opts.execution.map(&probes, |&(param, _, i, analytic)| {
        let plus = perturbed_loss(tape, bindings, param, i, h)?;
        let minus = perturbed_loss(tape, bindings, param, i, -h)?;
        let numeric = (plus - minus) / (2.0 * h);
        Ok::<_, AutodiffError>(component_error(analytic, numeric))
    });

    let mut report = FdReport {
        max_error: 0.0,
        worst: None,
        components_checked: probes.len(),
    };
    for (probe, err) in probes.iter().zip(results) {
        let err = err?;
        if err > report.max_error || err.is_nan() {
            report.max_error = err;
            report.worst = Some((tape.label(probe.0).to_string(), probe.2));
        }
    }
    Ok(report)
}

fn perturbed_loss(
    tape: &Tape,
    base: &Bindings<'_>,
    param: NodeId,
    i: usize,
    delta: f64,
) -> Result<f64> {
    let mut b = base.clone();
    let value = b.get_mut(param).expect("parameter bound");
    let flat = value
        .as_slice_memory_order_mut()
        .expect("contiguous parameter");
    flat[i] += delta;
    let mut s = Session::new(tape, &b);
    s.forward()?;
    s.loss()
}

/// Relative error, or absolute error when both magnitudes are tiny.
pub fn component_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABSOLUTE_SWITCH {
        diff
    } else {
        diff / scale
    }
}
