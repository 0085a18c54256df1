//! Analytic gradients against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::Fault;
use super::loss::LossKind;
use super::trainer::sample_gradient;
use crate::error::Result;
use crate::net::{forward, init_params, MgNOConfig, MgNOParams, NetShape};
use crate::tensor::Field;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative deviation, as a fraction of the loss
/// value. Central differences at step `1e−5` carry rounding noise of about
/// `1e−10·|L|`; entries whose gradient is below the floor are compared
/// absolutely at that scale instead of amplifying the noise.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDeviation {
    pub name: String,
    pub entries: usize,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub loss: f64,
    /// Absolute denominator floor used, `GRADCHECK_FLOOR · |loss|`.
    pub floor: f64,
    pub groups: Vec<GroupDeviation>,
    pub max_deviation: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_deviation < tolerance
    }
}

pub fn relative_deviation(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares every trainable entry of `params` for the loss
/// `loss(forward(x), target)`. Frozen tensors are skipped.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    params: &MgNOParams,
    cfg: &MgNOConfig,
    x: &Field,
    target: &Field,
    loss: LossKind,
    h: f64,
    step: f64,
    fault: Option<Fault>,
) -> Result<GradCheckReport> {
    let (loss_value, analytic) = sample_gradient(params, cfg, x, target, loss, h, fault)?;
    let eval = |p: &MgNOParams| -> Result<f64> { loss.value_sq(&forward(x, p, cfg)?, target, h) };
    let floor = GRADCHECK_FLOOR * loss_value.abs();
    let mut work = params.clone();
    let mut groups = Vec::new();
    let n_slots = work.slots(cfg).len();
    for s in 0..n_slots {
        let (name, frozen, len) = {
            let slots = work.slots(cfg);
            (slots[s].name.clone(), slots[s].frozen, slots[s].data.len())
        };
        if frozen {
            continue;
        }
        let mut worst: f64 = 0.0;
        for i in 0..len {
            let orig = work.slots(cfg)[s].data[i];
            work.slots(cfg)[s].data[i] = orig + step;
            let plus = eval(&work)?;
            work.slots(cfg)[s].data[i] = orig - step;
            let minus = eval(&work)?;
            work.slots(cfg)[s].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_deviation(analytic[s][i], numeric, floor));
        }
        groups.push(GroupDeviation { name, entries: len, max_deviation: worst });
    }
    let max_deviation = groups.iter().map(|g| g.max_deviation).fold(0.0, f64::max);
    Ok(GradCheckReport { step, loss: loss_value, floor, groups, max_deviation })
}

/// A 2-layer, 4-channel, two-level network on a random `size × size`
/// input and target. Zero-initialized mixing weights and biases are
/// randomized so every path carries gradient.
pub fn gradcheck_problem(size: usize, seed: u64) -> Result<(MgNOParams, MgNOConfig, Field, Field)> {
    let mut shape = NetShape::new(2, 4, 2);
    shape.seed = seed;
    let cfg = shape.config()?;
    cfg.check_grid(size, size)?;
    let mut params = init_params(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for slot in params.slots(&cfg) {
        if !slot.frozen {
            slot.data.iter_mut().filter(|v| **v == 0.0).for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    let x = Field::from_fn(1, size, size, |_, _, _| rng.gen_range(-1.0..1.0));
    let target = Field::from_fn(1, size, size, |_, _, _| rng.gen_range(-1.0..1.0));
    Ok((params, cfg, x, target))
}
