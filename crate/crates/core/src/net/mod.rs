//! The MgNO network: `L` hidden layers `σ(W_Mg h + B h + b·1)` followed by
//! an activation-free output `W_Mg`.

mod checkpoint;

pub use checkpoint::{load_model, save_model, CheckpointMeta, CHECKPOINT_FORMAT};

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Activation, Backend, Eager, Value};
use crate::error::{invalid, shape, Result};
use crate::multigrid::{apply_wmg_with, kernel_shapes, Cycle, MgConfig, MgWeights};
use crate::tensor::{BoundaryMode, Field, Kernel, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MgNOConfig {
    pub layers: usize,
    pub width: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    /// One `W_Mg` configuration per hidden layer, then the output layer.
    pub wmg: Vec<MgConfig>,
    /// Output ring pinned to zero; freezes the first layer's `B` at zero.
    #[serde(default)]
    pub boundary_preserving: bool,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

/// Compact description that expands into an [`MgNOConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub layers: usize,
    pub width: usize,
    pub levels: usize,
    /// Pre-smoothing steps per level.
    pub pre: usize,
    /// Post-smoothing steps per level; 0 selects the backslash cycle.
    #[serde(default)]
    pub post: usize,
    #[serde(default = "default_boundary")]
    pub boundary: BoundaryMode,
    #[serde(default = "default_boundary")]
    pub restrict_boundary: BoundaryMode,
    #[serde(default = "one")]
    pub input_channels: usize,
    #[serde(default = "one")]
    pub output_channels: usize,
    #[serde(default)]
    pub boundary_preserving: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_boundary() -> BoundaryMode {
    BoundaryMode::DirichletZero
}

fn one() -> usize {
    1
}

impl NetShape {
    pub fn new(layers: usize, width: usize, levels: usize) -> Self {
        Self {
            layers,
            width,
            levels,
            pre: 1,
            post: 0,
            boundary: BoundaryMode::DirichletZero,
            restrict_boundary: BoundaryMode::DirichletZero,
            input_channels: 1,
            output_channels: 1,
            boundary_preserving: false,
            seed: 0,
        }
    }

    pub fn config(&self) -> Result<MgNOConfig> {
        let layer = |c_in: usize, width: usize| {
            let mut m = MgConfig::uniform(self.levels, width, c_in, self.pre, self.post);
            m.boundary = self.boundary;
            m.restrict_boundary = self.restrict_boundary;
            m.cycle = if self.post == 0 { Cycle::Backslash } else { Cycle::V };
            m.dirichlet_ring = self.boundary_preserving;
            m
        };
        let mut wmg: Vec<MgConfig> = (0..self.layers)
            .map(|l| layer(if l == 0 { self.input_channels } else { self.width }, self.width))
            .collect();
        wmg.push(layer(self.width, self.output_channels));
        let cfg = MgNOConfig {
            layers: self.layers,
            width: self.width,
            input_channels: self.input_channels,
            output_channels: self.output_channels,
            wmg,
            boundary_preserving: self.boundary_preserving,
            activation: Activation::Gelu,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl MgNOConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.input_channels == 0 || self.output_channels == 0 {
            return Err(invalid("layers, width and channel counts must be positive"));
        }
        if self.wmg.len() != self.layers + 1 {
            return Err(invalid(format!(
                "need {} W_Mg configs ({} hidden + output), got {}",
                self.layers + 1,
                self.layers,
                self.wmg.len()
            )));
        }
        for (l, m) in self.wmg.iter().enumerate() {
            m.validate()?;
            let (c_in, c_out) = if l == 0 {
                (self.input_channels, self.width)
            } else if l < self.layers {
                (self.width, self.width)
            } else {
                (self.width, self.output_channels)
            };
            if m.input_channels != c_in || m.output_channels() != c_out {
                return Err(invalid(format!(
                    "layer {l} W_Mg maps {} -> {} channels, expected {c_in} -> {c_out}",
                    m.input_channels,
                    m.output_channels()
                )));
            }
            if self.boundary_preserving && (m.boundary != BoundaryMode::DirichletZero || !m.dirichlet_ring) {
                return Err(invalid("boundary-preserving networks need zero-padded W_Mg with dirichlet_ring"));
            }
        }
        Ok(())
    }

    /// Grid extents every layer can handle.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        for m in &self.wmg {
            m.level_sizes(h, w)?;
        }
        Ok(())
    }

    fn mix_frozen(&self, layer: usize) -> bool {
        self.boundary_preserving && layer == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<K = Kernel, M = Matrix, V = Vec<f64>> {
    pub wmg: MgWeights<K>,
    /// Channel mix `B^ℓ`.
    pub mix: M,
    /// Bias `b^ℓ`.
    pub bias: V,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgNOParams<K = Kernel, M = Matrix, V = Vec<f64>> {
    pub layers: Vec<Layer<K, M, V>>,
    pub output: MgWeights<K>,
}

/// A parameter tensor as seen by the optimizer.
pub struct ParamSlot<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    pub frozen: bool,
}

impl<K, M, V> MgNOParams<K, M, V> {
    /// Converts every tensor, in [`MgNOParams::slots`] order.
    pub fn try_map<K2, M2, V2>(
        &self,
        mut fk: impl FnMut(&K) -> Result<K2>,
        mut fm: impl FnMut(&M) -> Result<M2>,
        mut fv: impl FnMut(&V) -> Result<V2>,
    ) -> Result<MgNOParams<K2, M2, V2>> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(Layer { wmg: l.wmg.try_map(&mut fk)?, mix: fm(&l.mix)?, bias: fv(&l.bias)? });
        }
        Ok(MgNOParams { layers, output: self.output.try_map(&mut fk)? })
    }
}

impl<T> MgNOParams<T, T, T> {
    /// Every tensor with its name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (n, k) in layer.wmg.named() {
                out.push((format!("layer{l}.{n}"), k));
            }
            out.push((format!("layer{l}.mix"), &layer.mix));
            out.push((format!("layer{l}.bias"), &layer.bias));
        }
        for (n, k) in self.output.named() {
            out.push((format!("output.{n}"), k));
        }
        out
    }
}

impl MgNOParams {
    fn as_values(&self) -> MgNOParams<Value, Value, Value> {
        self.try_map(
            |k| Ok(Value::Kernel(k.clone())),
            |m| Ok(Value::Matrix(m.clone())),
            |v| Ok(Value::Vector(v.clone())),
        )
        .expect("infallible")
    }

    /// Mutable views of every tensor, in the same order as
    /// [`MgNOParams::named`] on the value form.
    pub fn slots(&mut self, cfg: &MgNOConfig) -> Vec<ParamSlot<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (n, k) in layer.wmg.named_mut() {
                out.push(ParamSlot { name: format!("layer{l}.{n}"), data: k.weights_mut(), frozen: false });
            }
            out.push(ParamSlot {
                name: format!("layer{l}.mix"),
                data: layer.mix.data_mut(),
                frozen: cfg.mix_frozen(l),
            });
            out.push(ParamSlot { name: format!("layer{l}.bias"), data: &mut layer.bias, frozen: false });
        }
        for (n, k) in self.output.named_mut() {
            out.push(ParamSlot { name: format!("output.{n}"), data: k.weights_mut(), frozen: false });
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.as_values().named().iter().all(|(_, v)| v.data().iter().all(|x| x.is_finite()))
    }

    pub fn validate(&self, cfg: &MgNOConfig) -> Result<()> {
        cfg.validate()?;
        if self.layers.len() != cfg.layers {
            return Err(shape(format!("checkpoint has {} layers, config {}", self.layers.len(), cfg.layers)));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.wmg.validate(&cfg.wmg[l])?;
            let n = cfg.width;
            if layer.mix.rows() != n || layer.mix.cols() != cfg.wmg[l].input_channels || layer.bias.len() != n {
                return Err(shape(format!("layer {l} channel mix does not match width {n}")));
            }
        }
        self.output.validate(&cfg.wmg[cfg.layers])
    }
}

/// Draws kernels uniformly in `±1/√fan_in` (`fan_in = in·k_h·k_w`);
/// channel mixes and biases start at zero.
pub fn init_params(cfg: &MgNOConfig) -> Result<MgNOParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |m: &MgConfig| {
        kernel_shapes(m).map(|&(o, i, kh, kw)| {
            let s = 1.0 / ((i * kh * kw) as f64).sqrt();
            let w = (0..o * i * kh * kw).map(|_| rng.gen_range(-s..=s)).collect();
            Kernel::new(o, i, kh, kw, w).expect("finite draws")
        })
    };
    let layers = (0..cfg.layers)
        .map(|l| Layer {
            wmg: draw(&cfg.wmg[l]),
            mix: Matrix::zeros(cfg.width, cfg.wmg[l].input_channels),
            bias: vec![0.0; cfg.width],
        })
        .collect();
    let output = draw(&cfg.wmg[cfg.layers]);
    Ok(MgNOParams { layers, output })
}

/// Number of trainable scalars (the frozen `B¹` excluded).
pub fn param_count(cfg: &MgNOConfig) -> Result<usize> {
    cfg.validate()?;
    let kernels =
        |m: &MgConfig| kernel_shapes(m).named().iter().map(|(_, &(o, i, kh, kw))| o * i * kh * kw).sum::<usize>();
    let mut total = kernels(&cfg.wmg[cfg.layers]);
    for l in 0..cfg.layers {
        total += kernels(&cfg.wmg[l]) + cfg.width;
        if !cfg.mix_frozen(l) {
            total += cfg.width * cfg.wmg[l].input_channels;
        }
    }
    Ok(total)
}

/// Network forward pass on any backend.
pub fn forward_with<B: Backend>(
    be: &mut B,
    u: &B::Var,
    p: &MgNOParams<B::Var, B::Var, B::Var>,
    cfg: &MgNOConfig,
) -> Result<B::Var> {
    let mut h = u.clone();
    for (l, layer) in p.layers.iter().enumerate() {
        let w = apply_wmg_with(be, &h, None, &layer.wmg, &cfg.wmg[l])?;
        let mut mixed = be.channel_mix(&h, &layer.mix, &layer.bias)?;
        if cfg.boundary_preserving {
            // Bias basis restricted to interior nodes.
            mixed = be.mask_ring(&mixed)?;
        }
        let pre = be.add(&w, &mixed)?;
        h = be.activation(&pre, cfg.activation)?;
    }
    apply_wmg_with(be, &h, None, &p.output, &cfg.wmg[cfg.layers])
}

pub fn forward(u: &Field, p: &MgNOParams, cfg: &MgNOConfig) -> Result<Field> {
    p.validate(cfg)?;
    if u.channels() != cfg.input_channels {
        return Err(shape(format!("network expects {} input channels, got {}", cfg.input_channels, u.channels())));
    }
    let mut be = Eager;
    let vars = p.try_map(
        |k| Ok(Rc::new(Value::Kernel(k.clone()))),
        |m| Ok(Rc::new(Value::Matrix(m.clone()))),
        |v| Ok(Rc::new(Value::Vector(v.clone()))),
    )?;
    let x = Rc::new(Value::Field(u.clone()));
    let out = forward_with(&mut be, &x, &vars, cfg)?;
    Ok(out.as_field()?.clone())
}

/// Affine input standardization and output scale fitted on training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub input_mean: f64,
    pub input_std: f64,
    pub output_scale: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self { input_mean: 0.0, input_std: 1.0, output_scale: 1.0 }
    }
}

impl Normalizer {
    /// Mean/std of all input samples and RMS of all outputs.
    pub fn fit(inputs: &[Field], outputs: &[Field]) -> Result<Self> {
        let n: usize = inputs.iter().map(|f| f.data().len()).sum();
        let m: usize = outputs.iter().map(|f| f.data().len()).sum();
        if n == 0 || m == 0 {
            return Err(invalid("cannot fit normalization on empty data"));
        }
        let mean = inputs.iter().flat_map(|f| f.data()).sum::<f64>() / n as f64;
        let var = inputs.iter().flat_map(|f| f.data()).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let rms = (outputs.iter().map(|f| f.norm_sq()).sum::<f64>() / m as f64).sqrt();
        Ok(Self {
            input_mean: mean,
            input_std: if var > 0.0 { var.sqrt() } else { 1.0 },
            output_scale: if rms > 0.0 { rms } else { 1.0 },
        })
    }

    pub fn encode_input(&self, a: &Field) -> Field {
        let mut out = a.clone();
        out.data_mut().iter_mut().for_each(|v| *v = (*v - self.input_mean) / self.input_std);
        out
    }

    pub fn encode_output(&self, u: &Field) -> Field {
        u.scale(1.0 / self.output_scale)
    }

    pub fn decode_output(&self, y: &Field) -> Field {
        y.scale(self.output_scale)
    }
}

/// A configured network with its parameters and data scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: MgNOConfig,
    pub params: MgNOParams,
    pub normalizer: Normalizer,
    /// Interior grid the parameters were trained on.
    pub grid: Option<(usize, usize)>,
}

impl Model {
    pub fn init(config: MgNOConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Self { config, params, normalizer: Normalizer::default(), grid: None })
    }

    /// Physical-units prediction for coefficient field `a`.
    pub fn predict(&self, a: &Field) -> Result<Field> {
        let y = forward(&self.normalizer.encode_input(a), &self.params, &self.config)?;
        Ok(self.normalizer.decode_output(&y))
    }

    /// Same network on a grid `2^extra` times finer: every `W_Mg` gains
    /// `extra` levels whose kernels are copies of trained ones.
    pub fn refined(&self, extra: usize, tying: Tying) -> Result<Model> {
        if extra == 0 {
            return Ok(self.clone());
        }
        let mut config = self.config.clone();
        for m in &mut config.wmg {
            *m = refine_config(m, extra, tying);
        }
        let mut layers = Vec::with_capacity(self.params.layers.len());
        for (l, layer) in self.params.layers.iter().enumerate() {
            layers.push(Layer {
                wmg: refine_weights(&layer.wmg, &self.config.wmg[l], extra, tying),
                mix: layer.mix.clone(),
                bias: layer.bias.clone(),
            });
        }
        let output = refine_weights(&self.params.output, &self.config.wmg[self.config.layers], extra, tying);
        let grid = self.grid.map(|(h, w)| (h << extra, w << extra));
        let model = Model { config, params: MgNOParams { layers, output }, normalizer: self.normalizer, grid };
        model.params.validate(&model.config)?;
        Ok(model)
    }
}

/// Which trained level the added levels copy their kernels from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tying {
    /// New levels sit above the old finest level and copy its kernels.
    #[default]
    Finest,
    /// New levels sit below the old coarsest level and copy its kernels.
    Coarsest,
}

fn refine_config(m: &MgConfig, extra: usize, tying: Tying) -> MgConfig {
    let mut out = m.clone();
    out.levels += extra;
    let grow = |v: &Vec<usize>| {
        let at = if tying == Tying::Finest { 0 } else { v.len() - 1 };
        let mut r = v.clone();
        for _ in 0..extra {
            r.insert(at, v[at]);
        }
        r
    };
    out.channels = grow(&m.channels);
    out.pre_iters = grow(&m.pre_iters);
    out.post_iters = grow(&m.post_iters);
    out
}

fn refine_weights(w: &MgWeights, m: &MgConfig, extra: usize, tying: Tying) -> MgWeights {
    let j = m.levels;
    // Source level of every refined level, and of every refined transfer.
    let (level, transfer): (Vec<usize>, Vec<usize>) = match tying {
        Tying::Finest => (
            (0..j + extra).map(|l| l.saturating_sub(extra)).collect(),
            (0..j + extra - 1).map(|l| l.saturating_sub(extra)).collect(),
        ),
        Tying::Coarsest => (
            (0..j + extra).map(|l| l.min(j - 1)).collect(),
            (0..j + extra - 1).map(|l| l.min(j.saturating_sub(2))).collect(),
        ),
    };
    let post = |l: usize| {
        // The old coarsest level has no post kernels; borrow the level above.
        let src = &w.post[l];
        if src.is_empty() && l > 0 {
            w.post[l - 1].clone()
        } else {
            src.clone()
        }
    };
    let refined = refine_config(m, extra, tying);
    let shapes = kernel_shapes(&refined);
    MgWeights {
        lift: w.lift.clone(),
        a: level.iter().map(|&l| w.a[l].clone()).collect(),
        pre: level.iter().map(|&l| w.pre[l].clone()).collect(),
        post: level.iter().zip(&shapes.post).map(|(&l, s)| if s.is_empty() { Vec::new() } else { post(l) }).collect(),
        restrict: transfer.iter().map(|&l| w.restrict[l].clone()).collect(),
        prolong: transfer.iter().map(|&l| w.prolong[l].clone()).collect(),
    }
}

#[cfg(test)]
mod tests;
