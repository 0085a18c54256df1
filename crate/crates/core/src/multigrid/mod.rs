//! The multi-channel V-cycle operator `W_Mg`.
//!
//! Every step of the cycle is a convolution: smoothing is
//! `u ← u + B ∗ (f − A ∗ u)`, restriction is a stride-2 convolution of the
//! residual, prolongation is the matching stride-2 transposed convolution.
//! With fixed stencils ([`classical`]) the operator is a Poisson solver;
//! with learned stencils it is the linear map inside each network layer.

pub mod classical;
mod convergence;
mod manifest;

pub use classical::{classical_poisson, classical_poisson_config, classical_poisson_weights};
pub use convergence::{energy_norm, estimate_contraction, ConvergenceReport};
pub use manifest::{load_weights, save_weights, KernelEntry, WeightsManifest, WEIGHTS_FORMAT};

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Eager, Value};
use crate::error::{invalid, shape, Result};
use crate::tensor::{conv2d, BoundaryMode, Field, Kernel};

/// Kernel extent of the prolongation (transposed) convolution.
pub const PROLONG_KERNEL: usize = 4;
/// Kernel extent of `A`, `B` and `R`.
pub const STENCIL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cycle {
    /// Post-smoothing after every prolongation.
    V,
    /// Post-smoothing skipped.
    Backslash,
}

fn default_lift_kernel() -> usize {
    STENCIL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MgConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub pre_iters: Vec<usize>,
    pub post_iters: Vec<usize>,
    pub cycle: Cycle,
    /// Padding of the `A`, `B` and `K⁰` convolutions.
    pub boundary: BoundaryMode,
    /// Padding of the restriction (and, transposed, the prolongation).
    pub restrict_boundary: BoundaryMode,
    pub input_channels: usize,
    /// Extent of the lifting kernel `K⁰`.
    #[serde(default = "default_lift_kernel")]
    pub lift_kernel: usize,
    /// Treat the outermost stored ring of the finest grid as Dirichlet
    /// boundary nodes: updates never write to it.
    #[serde(default)]
    pub dirichlet_ring: bool,
}

impl MgConfig {
    /// `levels` levels of `channels` channels each, `pre`/`post` smoothing
    /// steps per level, zero-padded everywhere.
    pub fn uniform(levels: usize, channels: usize, input_channels: usize, pre: usize, post: usize) -> Self {
        Self {
            levels,
            channels: vec![channels; levels],
            pre_iters: vec![pre; levels],
            post_iters: vec![post; levels],
            cycle: if post == 0 { Cycle::Backslash } else { Cycle::V },
            boundary: BoundaryMode::DirichletZero,
            restrict_boundary: BoundaryMode::DirichletZero,
            input_channels,
            lift_kernel: STENCIL,
            dirichlet_ring: false,
        }
    }

    pub fn with_boundary(mut self, mode: BoundaryMode) -> Self {
        self.boundary = mode;
        self.restrict_boundary = mode;
        self
    }

    pub fn output_channels(&self) -> usize {
        self.channels[0]
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.levels;
        if j == 0 {
            return Err(invalid("multigrid needs at least one level"));
        }
        if self.channels.len() != j || self.pre_iters.len() != j || self.post_iters.len() != j {
            return Err(invalid(format!(
                "per-level lists must have length {j} (channels {}, pre {}, post {})",
                self.channels.len(),
                self.pre_iters.len(),
                self.post_iters.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.input_channels == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        if self.cycle == Cycle::Backslash && self.post_iters.iter().any(|&n| n != 0) {
            return Err(invalid("backslash cycle requires zero post-smoothing iterations"));
        }
        if self.boundary == BoundaryMode::NoPad {
            return Err(invalid("smoothing convolutions must be padded"));
        }
        if self.lift_kernel == 0 || self.lift_kernel % 2 == 0 {
            return Err(invalid("lifting kernel extent must be odd"));
        }
        Ok(())
    }

    /// Grid extents `(h, w)` at every level for an `h × w` finest grid.
    pub fn level_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let mut sizes = vec![(h, w)];
        for level in 1..self.levels {
            let (ph, pw) = sizes[level - 1];
            let next = |n: usize| -> Option<usize> {
                if self.restrict_boundary.is_padded() {
                    (n % 2 == 0 && n >= 2).then_some(n / 2)
                } else {
                    (n % 2 == 1 && n >= 3).then_some((n - 1) / 2)
                }
            };
            match (next(ph), next(pw)) {
                (Some(a), Some(b)) => sizes.push((a, b)),
                _ => {
                    let rule = if self.restrict_boundary.is_padded() {
                        format!("divisible by 2^{}", self.levels - 1)
                    } else {
                        format!("of the form m·2^{} − 1", self.levels - 1)
                    };
                    return Err(shape(format!(
                        "{h}x{w} grid does not support {} levels: extents must be {rule}",
                        self.levels
                    )));
                }
            }
        }
        Ok(sizes)
    }
}

/// All kernels of one `W_Mg`. Generic over the kernel handle so the same
/// structure carries stored kernels or backend variables.
#[derive(Debug, Clone, PartialEq)]
pub struct MgWeights<K = Kernel> {
    /// `K⁰`: `n_1 × c_f`.
    pub lift: K,
    /// `A^ℓ`: `n_ℓ × n_ℓ × 3 × 3`.
    pub a: Vec<K>,
    /// `B^{ℓ,i}` for the descent.
    pub pre: Vec<Vec<K>>,
    /// `B^{ℓ,i}` for the ascent (V-cycle only).
    pub post: Vec<Vec<K>>,
    /// `R_ℓ^{ℓ+1}`: `n_{ℓ+1} × n_ℓ × 3 × 3`, one per level transition.
    pub restrict: Vec<K>,
    /// `P_{ℓ+1}^ℓ`: `n_ℓ × n_{ℓ+1} × 4 × 4`, one per level transition.
    pub prolong: Vec<K>,
}

impl<K> MgWeights<K> {
    pub fn map<T>(&self, mut f: impl FnMut(&K) -> T) -> MgWeights<T> {
        MgWeights {
            lift: f(&self.lift),
            a: self.a.iter().map(&mut f).collect(),
            pre: self.pre.iter().map(|v| v.iter().map(&mut f).collect()).collect(),
            post: self.post.iter().map(|v| v.iter().map(&mut f).collect()).collect(),
            restrict: self.restrict.iter().map(&mut f).collect(),
            prolong: self.prolong.iter().map(&mut f).collect(),
        }
    }

    pub fn try_map<T>(&self, mut f: impl FnMut(&K) -> Result<T>) -> Result<MgWeights<T>> {
        Ok(MgWeights {
            lift: f(&self.lift)?,
            a: self.a.iter().map(&mut f).collect::<Result<_>>()?,
            pre: self.pre.iter().map(|v| v.iter().map(&mut f).collect::<Result<_>>()).collect::<Result<_>>()?,
            post: self.post.iter().map(|v| v.iter().map(&mut f).collect::<Result<_>>()).collect::<Result<_>>()?,
            restrict: self.restrict.iter().map(&mut f).collect::<Result<_>>()?,
            prolong: self.prolong.iter().map(&mut f).collect::<Result<_>>()?,
        })
    }

    /// Every kernel with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &K)> {
        let mut out = vec![("lift".to_string(), &self.lift)];
        for (l, k) in self.a.iter().enumerate() {
            out.push((format!("a{l}"), k));
        }
        for (l, ks) in self.pre.iter().enumerate() {
            for (i, k) in ks.iter().enumerate() {
                out.push((format!("pre{l}_{i}"), k));
            }
        }
        for (l, ks) in self.post.iter().enumerate() {
            for (i, k) in ks.iter().enumerate() {
                out.push((format!("post{l}_{i}"), k));
            }
        }
        for (l, k) in self.restrict.iter().enumerate() {
            out.push((format!("restrict{l}"), k));
        }
        for (l, k) in self.prolong.iter().enumerate() {
            out.push((format!("prolong{l}"), k));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut K)> {
        let mut out = vec![("lift".to_string(), &mut self.lift)];
        for (l, k) in self.a.iter_mut().enumerate() {
            out.push((format!("a{l}"), k));
        }
        for (l, ks) in self.pre.iter_mut().enumerate() {
            for (i, k) in ks.iter_mut().enumerate() {
                out.push((format!("pre{l}_{i}"), k));
            }
        }
        for (l, ks) in self.post.iter_mut().enumerate() {
            for (i, k) in ks.iter_mut().enumerate() {
                out.push((format!("post{l}_{i}"), k));
            }
        }
        for (l, k) in self.restrict.iter_mut().enumerate() {
            out.push((format!("restrict{l}"), k));
        }
        for (l, k) in self.prolong.iter_mut().enumerate() {
            out.push((format!("prolong{l}"), k));
        }
        out
    }
}

/// Kernel shapes `(out, in, kh, kw)` required by `cfg`, in [`MgWeights::named`] order.
pub fn kernel_shapes(cfg: &MgConfig) -> MgWeights<(usize, usize, usize, usize)> {
    let n = &cfg.channels;
    let j = cfg.levels;
    MgWeights {
        lift: (n[0], cfg.input_channels, cfg.lift_kernel, cfg.lift_kernel),
        a: (0..j).map(|l| (n[l], n[l], STENCIL, STENCIL)).collect(),
        pre: (0..j).map(|l| vec![(n[l], n[l], STENCIL, STENCIL); cfg.pre_iters[l]]).collect(),
        post: (0..j)
            .map(|l| {
                let steps = if cfg.cycle == Cycle::V && l + 1 < j { cfg.post_iters[l] } else { 0 };
                vec![(n[l], n[l], STENCIL, STENCIL); steps]
            })
            .collect(),
        restrict: (0..j.saturating_sub(1)).map(|l| (n[l + 1], n[l], STENCIL, STENCIL)).collect(),
        prolong: (0..j.saturating_sub(1)).map(|l| (n[l], n[l + 1], PROLONG_KERNEL, PROLONG_KERNEL)).collect(),
    }
}

impl MgWeights<Kernel> {
    pub fn zeros(cfg: &MgConfig) -> Self {
        kernel_shapes(cfg).map(|&(o, i, kh, kw)| Kernel::zeros(o, i, kh, kw))
    }

    pub fn validate(&self, cfg: &MgConfig) -> Result<()> {
        cfg.validate()?;
        let want = kernel_shapes(cfg).named().into_iter().map(|(n, s)| (n, *s)).collect::<Vec<_>>();
        let have = self.named().into_iter().map(|(n, k)| (n, k.dims())).collect::<Vec<_>>();
        if want != have {
            return Err(shape(format!("weights do not match config: expected {want:?}, found {have:?}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, k)| k.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, k)| k.weights().iter().all(|w| w.is_finite()))
    }
}

/// One smoothing step `u + B ∗ (f − A ∗ u)`; `u = None` stands for zero.
fn smooth_step<B: Backend>(
    be: &mut B,
    u: Option<&B::Var>,
    f: &B::Var,
    a: &B::Var,
    b: &B::Var,
    mode: BoundaryMode,
    mask: bool,
) -> Result<B::Var> {
    let residual = match u {
        Some(u) => {
            let au = be.conv2d(u, a, mode, 1)?;
            be.sub(f, &au)?
        }
        None => f.clone(),
    };
    let mut incr = be.conv2d(&residual, b, mode, 1)?;
    if mask {
        incr = be.mask_ring(&incr)?;
    }
    match u {
        Some(u) => be.add(u, &incr),
        None => Ok(incr),
    }
}

/// Runs one `W_Mg` cycle on any backend. `u0 = None` starts from zero.
pub fn apply_wmg_with<B: Backend>(
    be: &mut B,
    f: &B::Var,
    u0: Option<&B::Var>,
    w: &MgWeights<B::Var>,
    cfg: &MgConfig,
) -> Result<B::Var> {
    cfg.validate()?;
    let (h, w_ext) = {
        let field = be.field(f)?;
        if field.channels() != cfg.input_channels {
            return Err(shape(format!("W_Mg expects {} input channels, got {}", cfg.input_channels, field.channels())));
        }
        (field.height(), field.width())
    };
    let sizes = cfg.level_sizes(h, w_ext)?;
    if let Some(u0) = u0 {
        let dims = be.field(u0)?.dims();
        if dims != (cfg.channels[0], h, w_ext) {
            return Err(shape(format!("initial guess {dims:?} does not match ({}, {h}, {w_ext})", cfg.channels[0])));
        }
    }
    let j = cfg.levels;
    let mode = cfg.boundary;
    let mut rhs = vec![be.conv2d(f, &w.lift, mode, 1)?];
    let mut settled: Vec<Option<B::Var>> = Vec::with_capacity(j);
    let mut u = u0.cloned();
    for level in 0..j {
        let mask = cfg.dirichlet_ring && level == 0;
        for b in &w.pre[level] {
            u = Some(smooth_step(be, u.as_ref(), &rhs[level], &w.a[level], b, mode, mask)?);
        }
        if level + 1 < j {
            let residual = match &u {
                Some(u) => {
                    let au = be.conv2d(u, &w.a[level], mode, 1)?;
                    be.sub(&rhs[level], &au)?
                }
                None => rhs[level].clone(),
            };
            rhs.push(be.conv2d(&residual, &w.restrict[level], cfg.restrict_boundary, 2)?);
        }
        settled.push(u.take());
    }
    let mut coarse = settled.pop().flatten();
    for level in (0..j - 1).rev() {
        let mask = cfg.dirichlet_ring && level == 0;
        let fine = settled.pop().flatten();
        let (fh, fw) = sizes[level];
        let mut u = match coarse {
            Some(c) => {
                let mut corr = be.prolong(&c, &w.prolong[level], cfg.restrict_boundary, fh, fw)?;
                if mask {
                    corr = be.mask_ring(&corr)?;
                }
                Some(match fine {
                    Some(fine) => be.add(&fine, &corr)?,
                    None => corr,
                })
            }
            None => fine,
        };
        if cfg.cycle == Cycle::V {
            for b in &w.post[level] {
                u = Some(smooth_step(be, u.as_ref(), &rhs[level], &w.a[level], b, mode, mask)?);
            }
        }
        coarse = u;
    }
    match coarse {
        Some(u) => Ok(u),
        None => Ok(be.constant(Value::Field(Field::zeros(cfg.channels[0], h, w_ext)))),
    }
}

fn eager_weights(w: &MgWeights) -> MgWeights<Rc<Value>> {
    w.map(|k| Rc::new(Value::Kernel(k.clone())))
}

/// Applies `W_Mg` to `f`, starting from `u0` (zero when `None`).
pub fn apply_wmg(f: &Field, u0: Option<&Field>, w: &MgWeights, cfg: &MgConfig) -> Result<Field> {
    w.validate(cfg)?;
    let mut be = Eager;
    let fv = Rc::new(Value::Field(f.clone()));
    let u0v = u0.map(|u| Rc::new(Value::Field(u.clone())));
    let out = apply_wmg_with(&mut be, &fv, u0v.as_ref(), &eager_weights(w), cfg)?;
    Ok(out.as_field()?.clone())
}

/// `u + B ∗ (f − A ∗ u)` with stride-1 convolutions padded per `mode`.
pub fn smooth(u: &Field, f: &Field, a: &Kernel, b: &Kernel, mode: BoundaryMode) -> Result<Field> {
    u.check_same_shape(f, "smooth")?;
    let residual = f.sub(&conv2d(u, a, mode, 1)?)?;
    u.add(&conv2d(&residual, b, mode, 1)?)
}

/// `R ∗₂ (f − A ∗ u)`: the residual carried to the next coarser grid.
pub fn restrict_residual(
    f: &Field,
    u: &Field,
    a: &Kernel,
    r: &Kernel,
    boundary: BoundaryMode,
    restrict_boundary: BoundaryMode,
) -> Result<Field> {
    u.check_same_shape(f, "restrict_residual")?;
    let residual = f.sub(&conv2d(u, a, boundary, 1)?)?;
    conv2d(&residual, r, restrict_boundary, 2)
}
