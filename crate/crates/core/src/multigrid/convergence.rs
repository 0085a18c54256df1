use serde::{Deserialize, Serialize};

use super::{apply_wmg, MgConfig, MgWeights};
use crate::error::{shape, Result};
use crate::tensor::{conv2d, BoundaryMode, Field, Kernel};

/// Error history of the iteration `u⁽ˡ⁺¹⁾ = W_Mg(f, u⁽ˡ⁾)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// `‖u* − u⁽ˡ⁾‖_A` for `l = 0..=iterations` (entry 0 is the zero guess).
    pub energy_errors: Vec<f64>,
    /// `‖u* − u⁽ˡ⁾‖₂` on the same schedule.
    pub l2_errors: Vec<f64>,
    /// Geometric mean of the last `window` energy-error ratios.
    pub rho: f64,
    /// Number of ratios that entered `rho`.
    pub window: usize,
    /// Fewer than three ratios were available for the fit.
    pub low_confidence: bool,
    /// The error grew for three consecutive iterations; the run stopped.
    pub diverged: bool,
}

impl ConvergenceReport {
    pub fn iterations(&self) -> usize {
        self.energy_errors.len() - 1
    }

    /// Estimate of the constant `c` in the bound `1 − 1/c`.
    pub fn implied_constant(&self) -> f64 {
        1.0 / (1.0 - self.rho)
    }
}

/// `√⟨e, A ∗ e⟩`; negative quadratic forms (possible for non-SPD stencils) clamp to 0.
pub fn energy_norm(e: &Field, a: &Kernel, mode: BoundaryMode) -> Result<f64> {
    let ae = conv2d(e, a, mode, 1)?;
    Ok(e.dot(&ae).max(0.0).sqrt())
}

/// Iterates `W_Mg` against `f = A ∗ u_star` and fits the contraction factor
/// from the last `window` error ratios.
pub fn estimate_contraction(
    f: &Field,
    u_star: &Field,
    w: &MgWeights,
    cfg: &MgConfig,
    iters: usize,
    window: usize,
) -> Result<ConvergenceReport> {
    if u_star.dims() != (cfg.channels[0], f.height(), f.width()) {
        return Err(shape("u_star must match the W_Mg output shape"));
    }
    let a = &w.a[0];
    let mut energy = vec![energy_norm(u_star, a, cfg.boundary)?];
    let mut l2 = vec![u_star.norm()];
    let mut u: Option<Field> = None;
    let mut growth = 0;
    let mut diverged = false;
    for _ in 0..iters {
        let next = apply_wmg(f, u.as_ref(), w, cfg)?;
        let e = u_star.sub(&next)?;
        let en = energy_norm(&e, a, cfg.boundary)?;
        growth = if en > *energy.last().unwrap() { growth + 1 } else { 0 };
        energy.push(en);
        l2.push(e.norm());
        u = Some(next);
        if growth >= 3 || !en.is_finite() {
            diverged = true;
            break;
        }
    }
    let ratios: Vec<f64> = energy.windows(2).filter(|p| p[0] > 0.0).map(|p| p[1] / p[0]).collect();
    let used = ratios.len().min(window.max(1));
    let rho = if used == 0 {
        0.0
    } else {
        let tail = &ratios[ratios.len() - used..];
        if tail.iter().any(|r| *r == 0.0) {
            0.0
        } else {
            (tail.iter().map(|r| r.ln()).sum::<f64>() / used as f64).exp()
        }
    };
    Ok(ConvergenceReport {
        energy_errors: energy,
        l2_errors: l2,
        rho,
        window: used,
        low_confidence: used < 3,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{classical_poisson, classical_poisson_config, classical_poisson_weights};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_truth(d: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(1, d, d, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_truth_reports_zero_rate() {
        let (cfg, w) = classical_poisson(3, 15).unwrap();
        let zero = Field::zeros(1, 15, 15);
        let rep = estimate_contraction(&zero, &zero, &w, &cfg, 4, 3).unwrap();
        assert!(rep.energy_errors.iter().all(|e| *e == 0.0));
        assert_eq!(rep.rho, 0.0);
    }

    #[test]
    fn smoothing_reduces_energy_error() {
        // 8x8 grid, single level: plain smoothing iterations.
        let cfg = classical_poisson_config(1, 1);
        let w = classical_poisson_weights(&cfg);
        let truth = random_truth(8, 1);
        let f = conv2d(&truth, &w.a[0], BoundaryMode::DirichletZero, 1).unwrap();
        let rep = estimate_contraction(&f, &truth, &w, &cfg, 5, 5).unwrap();
        for pair in rep.energy_errors.windows(2) {
            assert!(pair[1] < pair[0]);
        }
    }

    #[test]
    fn smooth_truth_converges_no_slower_than_random() {
        let d = 31;
        let (cfg, w) = classical_poisson(4, d).unwrap();
        let h = 1.0 / (d as f64 + 1.0);
        let pi = std::f64::consts::PI;
        let smooth =
            Field::from_fn(1, d, d, |_, i, j| (pi * (i + 1) as f64 * h).sin() * (pi * (j + 1) as f64 * h).sin());
        let rough = random_truth(d, 2);
        let rate = |u: &Field| {
            let f = conv2d(u, &w.a[0], BoundaryMode::DirichletZero, 1).unwrap();
            // Fit on the tail: the smoother wipes out rough error in the first
            // cycle, so early ratios favour the random start.
            estimate_contraction(&f, u, &w, &cfg, 10, 3).unwrap().rho
        };
        assert!(rate(&smooth) <= rate(&rough));
    }

    #[test]
    fn single_iteration_is_low_confidence() {
        let (cfg, w) = classical_poisson(3, 15).unwrap();
        let truth = random_truth(15, 4);
        let f = conv2d(&truth, &w.a[0], BoundaryMode::DirichletZero, 1).unwrap();
        let rep = estimate_contraction(&f, &truth, &w, &cfg, 1, 5).unwrap();
        assert_eq!(rep.window, 1);
        assert!(rep.low_confidence);
        assert!((rep.rho - rep.energy_errors[1] / rep.energy_errors[0]).abs() < 1e-15);
    }
}
