//! Central finite-difference verification of the analytic gradients.

use std::sync::Arc;

use serde::Serialize;

use crate::encoder::Model;
use crate::error::Result;
use crate::params::ParamId;
use crate::rng::SeededRng;
use crate::tape::{GradBuffer, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Coordinates sampled per parameter group (all when the group is smaller).
    pub samples_per_group: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples_per_group: 64,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub path: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Groups exceeding the tolerance, with both gradient values.
    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(move |g| g.max_rel_err > self.tolerance)
    }
}

/// Two-sided difference quotient.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// The scalar loss used for gradient checking: cross-entropy of the clip's
/// class logits against class 0. It routes through every encoder component.
pub fn gradcheck_loss(model: &Model, clip: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = model.logits_tape(&mut tape, clip)?;
    let loss = tape.cross_entropy(logits, Arc::new(vec![0]))?;
    Ok(tape.value(loss).data()[0])
}

/// Relative error with an absolute floor: tiny gradients are dominated by
/// difference-quotient noise, so the denominator never drops below 1e-3.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-3)
}

/// Runs the full check: analytic gradients from one backward pass, compared
/// coordinate-by-coordinate against central differences on a seeded subsample
/// of each parameter.
pub fn finite_difference_check(
    model: &mut Model,
    clip: &Tensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let logits = model.logits_tape(&mut tape, clip)?;
    let loss = tape.cross_entropy(logits, Arc::new(vec![0]))?;
    let analytic = tape.backward(loss, model.params.len())?;
    drop(tape);
    check_against(model, clip, &analytic, opts)
}

/// Compares supplied analytic gradients against central differences.
pub fn check_against(
    model: &mut Model,
    clip: &Tensor,
    analytic: &GradBuffer,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = SeededRng::derive(opts.seed, "gradcheck");
    let mut groups = Vec::with_capacity(model.params.len());
    let mut max_rel_err: f64 = 0.0;
    let paths: Vec<String> = model.params.paths().map(str::to_string).collect();

    for (i, path) in paths.iter().enumerate() {
        let id = ParamId(i);
        if !model.params.get(id).trainable {
            continue;
        }
        let numel = model.params.get(id).value.numel();
        let coords = rng.sample_indices(numel, opts.samples_per_group);
        let mut group = GroupReport {
            path: path.clone(),
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for coord in coords {
            let original = model.params.get(id).value.data()[coord];
            let mut eval_at = |x: f64| -> Result<f64> {
                model.params.get_mut(id).value.data_mut()[coord] = x;
                gradcheck_loss(model, clip)
            };
            let plus = eval_at(original + opts.step)?;
            let minus = eval_at(original - opts.step)?;
            model.params.get_mut(id).value.data_mut()[coord] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[coord]);
            let err = relative_error(a, numeric);
            if err > group.max_rel_err {
                group.max_rel_err = err;
                group.worst_coord = coord;
                group.analytic = a;
                group.numeric = numeric;
            }
        }
        max_rel_err = max_rel_err.max(group.max_rel_err);
        groups.push(group);
    }
    Ok(GradCheckReport {
        groups,
        max_rel_err,
        tolerance: opts.tolerance,
        passed: max_rel_err <= opts.tolerance,
    })
}
