//! Fixed stencils that turn `W_Mg` into a V-cycle for the 5-point
//! Dirichlet Poisson problem on an `(2^k − 1)²` interior grid.
//!
//! `A` is the linear finite element stiffness stencil, `B` a damped
//! Jacobi-type smoother, and `R`/`P` the linear-interpolation transfer pair
//! (`P` is `R`'s stencil placed in the top-left 3×3 of the 4×4 slot, which
//! makes it the exact transpose of the unpadded stride-2 restriction).

use super::{kernel_shapes, Cycle, MgConfig, MgWeights, PROLONG_KERNEL};
use crate::error::Result;
use crate::tensor::{BoundaryMode, Kernel};

/// Descent and ascent smoothing steps on every level above the coarsest.
pub const CLASSICAL_SMOOTHING_STEPS: usize = 4;

pub fn laplacian_stencil() -> Kernel {
    Kernel::from_stencil([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]])
}

pub fn smoother_stencil() -> Kernel {
    let s = 1.0 / 64.0;
    Kernel::from_stencil([[0.0, s, 0.0], [s, 12.0 * s, s], [0.0, s, 0.0]])
}

pub fn transfer_stencil() -> Kernel {
    Kernel::from_stencil([[0.0, 0.5, 0.5], [0.5, 1.0, 0.5], [0.5, 0.5, 0.0]])
}

/// Single-channel V-cycle configuration. The coarsest level is only
/// smoothed, so it gets `coarse_iters` steps; [`classical_poisson`] sizes
/// that from the coarsest grid.
pub fn classical_poisson_config(levels: usize, coarse_iters: usize) -> MgConfig {
    let mut pre = vec![CLASSICAL_SMOOTHING_STEPS; levels];
    let mut post = vec![CLASSICAL_SMOOTHING_STEPS; levels];
    if let Some(last) = pre.last_mut() {
        *last = coarse_iters;
    }
    if let Some(last) = post.last_mut() {
        *last = 0;
    }
    MgConfig {
        levels,
        channels: vec![1; levels],
        pre_iters: pre,
        post_iters: post,
        cycle: Cycle::V,
        boundary: BoundaryMode::DirichletZero,
        restrict_boundary: BoundaryMode::NoPad,
        input_channels: 1,
        lift_kernel: 3,
        dirichlet_ring: false,
    }
}

/// Classical stencils laid out for `cfg`: `K⁰ = δ`, every `A^ℓ` the
/// Laplacian, every `B^{ℓ,i}` the same smoother, `R = P` the transfer stencil.
pub fn classical_poisson_weights(cfg: &MgConfig) -> MgWeights {
    let a = laplacian_stencil();
    let b = smoother_stencil();
    let r = transfer_stencil();
    let p = r.embed_top_left(PROLONG_KERNEL, PROLONG_KERNEL).expect("3x3 fits in 4x4");
    let shapes = kernel_shapes(cfg);
    MgWeights {
        lift: Kernel::delta(1, cfg.lift_kernel),
        a: shapes.a.iter().map(|_| a.clone()).collect(),
        pre: shapes.pre.iter().map(|v| vec![b.clone(); v.len()]).collect(),
        post: shapes.post.iter().map(|v| vec![b.clone(); v.len()]).collect(),
        restrict: shapes.restrict.iter().map(|_| r.clone()).collect(),
        prolong: shapes.prolong.iter().map(|_| p.clone()).collect(),
    }
}

/// Configuration and weights for a `d × d` interior grid with `levels`
/// levels. `d + 1` must be divisible by `2^(levels−1)`.
pub fn classical_poisson(levels: usize, d: usize) -> Result<(MgConfig, MgWeights)> {
    let probe = classical_poisson_config(levels, 1);
    probe.validate()?;
    let sizes = probe.level_sizes(d, d)?;
    let coarse = sizes.last().expect("at least one level").0;
    let cfg = classical_poisson_config(levels, (coarse + 1) * (coarse + 1));
    let w = classical_poisson_weights(&cfg);
    Ok((cfg, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_stencils() {
        let (cfg, w) = classical_poisson(4, 63).unwrap();
        w.validate(&cfg).unwrap();
        assert_eq!(w.a[0].weights(), &[0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0]);
        assert_eq!(w.pre[0][0].get(0, 0, 1, 1), 12.0 / 64.0);
        assert_eq!(w.pre[0][0].get(0, 0, 0, 1), 1.0 / 64.0);
        assert_eq!(w.restrict[0].weights(), &[0.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 0.0]);
        assert_eq!(w.prolong[0].get(0, 0, 1, 1), 1.0);
        assert_eq!(w.prolong[0].get(0, 0, 3, 3), 0.0);
        assert_eq!(cfg.pre_iters, vec![4, 4, 4, 64]);
    }

    #[test]
    fn even_grid_rejected() {
        assert!(classical_poisson(4, 64).is_err());
        assert!(classical_poisson(6, 63).is_ok());
    }
}
