use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Field;

/// Number of factors in the multiscale product.
pub const MULTISCALE_TERMS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coefficient {
    /// `∏_k (1 + ½cos(a_k π(x₁+x₂)))(1 + ½sin(a_k π(x₂−3x₁)))` on `[−1,1]²`.
    MultiscaleTrig {
        /// Fixed frequencies instead of random draws.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frequencies: Option<Vec<f64>>,
    },
    /// Thresholded box-blurred noise taking the values `a_min`/`a_max`.
    TwoPhaseApprox {
        a_min: f64,
        a_max: f64,
        radius: usize,
    },
    Constant {
        value: f64,
    },
}

impl Coefficient {
    pub fn validate(&self) -> Result<()> {
        match self {
            Coefficient::MultiscaleTrig { frequencies: Some(f) } if f.iter().any(|v| !v.is_finite()) => {
                Err(invalid("multiscale frequencies must be finite"))
            }
            Coefficient::TwoPhaseApprox { a_min, a_max, radius } => {
                if !(*a_min > 0.0 && a_max > a_min && a_max.is_finite()) {
                    Err(invalid(format!("two-phase needs 0 < a_min < a_max, got {a_min} and {a_max}")))
                } else if *radius == 0 {
                    Err(invalid("two-phase radius must be at least 1"))
                } else {
                    Ok(())
                }
            }
            Coefficient::Constant { value } if !(*value > 0.0 && value.is_finite()) => {
                Err(invalid(format!("constant coefficient must be positive, got {value}")))
            }
            _ => Ok(()),
        }
    }

    /// Realizes the coefficient on a `d × d` interior grid.
    pub fn sample(&self, d: usize, seed: u64) -> Result<Field> {
        self.validate()?;
        Ok(match self {
            Coefficient::MultiscaleTrig { frequencies: Some(f) } => multiscale_trig_with(d, f),
            Coefficient::MultiscaleTrig { frequencies: None } => gen_multiscale_trig(d, seed)?,
            Coefficient::TwoPhaseApprox { a_min, a_max, radius } => {
                gen_two_phase_approx(d, seed, *a_min, *a_max, *radius)?
            }
            Coefficient::Constant { value } => Field::filled(1, d, d, *value),
        })
    }

    /// Guaranteed range of the realized values.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Coefficient::MultiscaleTrig { frequencies } => {
                let k = frequencies.as_ref().map_or(MULTISCALE_TERMS, Vec::len) as i32;
                (0.5f64.powi(2 * k), 1.5f64.powi(2 * k))
            }
            Coefficient::TwoPhaseApprox { a_min, a_max, .. } => (*a_min, *a_max),
            Coefficient::Constant { value } => (*value, *value),
        }
    }
}

/// `a_k ~ U[2^{k−1}, 1.5·2^{k−1}]` for `k = 1..=6`.
pub fn multiscale_frequencies(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..MULTISCALE_TERMS)
        .map(|k| {
            let lo = (1u64 << k) as f64;
            rng.gen_range(lo..=1.5 * lo)
        })
        .collect()
}

pub fn gen_multiscale_trig(d: usize, seed: u64) -> Result<Field> {
    if d < 8 {
        return Err(invalid(format!("multiscale coefficient needs d >= 8, got {d}")));
    }
    Ok(multiscale_trig_with(d, &multiscale_frequencies(seed)))
}

/// The product formula for given frequencies; `x₁` runs along columns,
/// `x₂` along rows, both over the interior nodes of `[−1,1]`.
pub fn multiscale_trig_with(d: usize, frequencies: &[f64]) -> Field {
    let pi = std::f64::consts::PI;
    let coord = |i: usize| -1.0 + 2.0 * (i + 1) as f64 / (d + 1) as f64;
    Field::from_fn(1, d, d, |_, y, x| {
        let (x1, x2) = (coord(x), coord(y));
        frequencies
            .iter()
            .map(|a| (1.0 + 0.5 * (a * pi * (x1 + x2)).cos()) * (1.0 + 0.5 * (a * pi * (x2 - 3.0 * x1)).sin()))
            .product()
    })
}

/// Uniform noise, averaged over `(2r+1)²` windows clipped to the grid, then
/// split at zero into `a_max` (positive) and `a_min` (otherwise).
pub fn gen_two_phase_approx(d: usize, seed: u64, a_min: f64, a_max: f64, radius: usize) -> Result<Field> {
    Coefficient::TwoPhaseApprox { a_min, a_max, radius }.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // Summed-area table for O(1) window sums.
    let mut sat = vec![0.0; (d + 1) * (d + 1)];
    for y in 0..d {
        for x in 0..d {
            sat[(y + 1) * (d + 1) + x + 1] =
                noise[y * d + x] + sat[y * (d + 1) + x + 1] + sat[(y + 1) * (d + 1) + x] - sat[y * (d + 1) + x];
        }
    }
    Ok(Field::from_fn(1, d, d, |_, y, x| {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(d));
        let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(d));
        let s = sat[y1 * (d + 1) + x1] - sat[y0 * (d + 1) + x1] - sat[y1 * (d + 1) + x0] + sat[y0 * (d + 1) + x0];
        if s > 0.0 {
            a_max
        } else {
            a_min
        }
    }))
}
