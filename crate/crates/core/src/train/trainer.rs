use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::{Fault, NodeId, Tape};
use super::loss::{rel_h1, rel_l2, LossKind};
use super::optim::{cosine_lr, Adam, AdamConfig};
use crate::backend::{Backend, Value};
use crate::darcy::Dataset;
use crate::error::{invalid, shape, Error, Result};
use crate::net::{forward_with, init_params, Layer, MgNOConfig, MgNOParams, Model, Normalizer};
use crate::tensor::Field;

fn default_batch() -> usize {
    8
}
fn default_lr_max() -> f64 {
    5e-4
}
fn default_lr_min() -> f64 {
    2.5e-6
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub loss: LossKind,
    /// Fit input standardization and output scale on the training set.
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: default_batch(),
            lr_max: default_lr_max(),
            lr_min: default_lr_min(),
            adam: AdamConfig::default(),
            loss: LossKind::RelH1,
            normalize: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(invalid(format!("need 0 <= lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean squared relative loss over the epoch's batches.
    pub train_loss: f64,
    pub val_l2: Option<f64>,
    pub val_h1: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.epochs {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }

    /// Same history with wall-clock times zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainHistory {
        let mut out = self.clone();
        out.epochs.iter_mut().for_each(|r| r.seconds = 0.0);
        out
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Relative errors of `model` on every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub mean_l2: f64,
    pub median_l2: f64,
    pub mean_h1: f64,
    pub median_h1: f64,
    pub per_sample_l2: Vec<f64>,
    pub per_sample_h1: Vec<f64>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Metrics> {
    check_data(&model.config, data)?;
    let pairs: Vec<(f64, f64)> = data
        .inputs
        .par_iter()
        .zip(&data.outputs)
        .map(|(a, u)| {
            let pred = model.predict(a)?;
            Ok((rel_l2(&pred, u)?, rel_h1(&pred, u, data.h)?))
        })
        .collect::<Result<_>>()?;
    let (l2, h1): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let n = l2.len() as f64;
    Ok(Metrics {
        samples: l2.len(),
        mean_l2: l2.iter().sum::<f64>() / n,
        median_l2: median(&l2),
        mean_h1: h1.iter().sum::<f64>() / n,
        median_h1: median(&h1),
        per_sample_l2: l2,
        per_sample_h1: h1,
    })
}

fn check_data(cfg: &MgNOConfig, data: &Dataset) -> Result<()> {
    if data.inputs.is_empty() || data.inputs.len() != data.outputs.len() {
        return Err(invalid(format!(
            "dataset needs matching non-empty inputs/outputs, got {} and {}",
            data.inputs.len(),
            data.outputs.len()
        )));
    }
    let (c, h, w) = data.inputs[0].dims();
    if c != cfg.input_channels {
        return Err(shape(format!("model takes {} input channels, data has {c}", cfg.input_channels)));
    }
    cfg.check_grid(h, w)?;
    for (a, u) in data.inputs.iter().zip(&data.outputs) {
        if a.dims() != (c, h, w) || u.dims() != (cfg.output_channels, h, w) {
            return Err(shape(format!(
                "sample shapes {:?} -> {:?} do not match {:?} -> {:?}",
                a.dims(),
                u.dims(),
                (c, h, w),
                (cfg.output_channels, h, w)
            )));
        }
    }
    Ok(())
}

/// Puts the parameters on `tape`; the frozen first-layer mix becomes a constant.
fn record_params(tape: &mut Tape, p: &MgNOParams, cfg: &MgNOConfig) -> MgNOParams<NodeId, NodeId, NodeId> {
    let layers = p
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let wmg = layer.wmg.map(|k| tape.param(Value::Kernel(k.clone())));
            let mix = Value::Matrix(layer.mix.clone());
            let mix = if cfg.boundary_preserving && l == 0 { tape.constant(mix) } else { tape.param(mix) };
            let bias = tape.param(Value::Vector(layer.bias.clone()));
            Layer { wmg, mix, bias }
        })
        .collect();
    let output = p.output.map(|k| tape.param(Value::Kernel(k.clone())));
    MgNOParams { layers, output }
}

/// Loss and gradient (in slot order) for one normalized sample.
pub(crate) fn sample_gradient(
    p: &MgNOParams,
    cfg: &MgNOConfig,
    x: &Field,
    target: &Field,
    loss: LossKind,
    h: f64,
    fault: Option<Fault>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let vars = record_params(&mut tape, p, cfg);
    let xin = tape.constant(Value::Field(x.clone()));
    let out = forward_with(&mut tape, &xin, &vars, cfg)?;
    let l = match loss {
        LossKind::RelL2 => tape.rel_l2_sq(out, target)?,
        LossKind::RelH1 => tape.rel_h1_sq(out, target, h)?,
    };
    let value = tape.scalar(l)?;
    let grads = tape.backward(l)?;
    let flat = vars
        .named()
        .into_iter()
        .map(|(_, id)| match grads.get(*id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; tape.value(id).data().len()],
        })
        .collect();
    Ok((value, flat))
}

/// Worker pool capped by `MGNO_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("MGNO_THREADS") {
        let n: usize = v.parse().map_err(|_| invalid(format!("MGNO_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(invalid("MGNO_THREADS must be at least 1"));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| invalid(format!("cannot start worker pool: {e}")))
}

/// Initializes parameters from `cfg` and trains them.
pub fn train(
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &MgNOConfig,
    tcfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    let model = Model { config: cfg.clone(), params: init_params(cfg)?, normalizer: Normalizer::default(), grid: None };
    train_model(model, data, val, tcfg, |_, _| Ok(()))
}

/// Trains `model` in place of its current parameters. `on_epoch` sees the
/// model after every epoch (checkpointing hooks in here).
pub fn train_model(
    mut model: Model,
    data: &Dataset,
    val: Option<&Dataset>,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, &EpochRecord) -> Result<()>,
) -> Result<(Model, TrainHistory)> {
    tcfg.validate()?;
    model.params.validate(&model.config)?;
    check_data(&model.config, data)?;
    if let Some(v) = val {
        check_data(&model.config, v)?;
    }
    model.grid = data.grid();
    if tcfg.normalize {
        model.normalizer = Normalizer::fit(&data.inputs, &data.outputs)?;
    }
    let norm = model.normalizer;
    let xs: Vec<Field> = data.inputs.iter().map(|a| norm.encode_input(a)).collect();
    let ts: Vec<Field> = data.outputs.iter().map(|u| norm.encode_output(u)).collect();

    let pool = thread_pool()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut adam = Adam::new(tcfg.adam);
    let batches = data.inputs.len().div_ceil(tcfg.batch_size);
    let total_steps = tcfg.epochs * batches;
    let mut order: Vec<usize> = (0..data.inputs.len()).collect();
    let mut history = TrainHistory::default();
    let mut step = 0;
    for epoch in 1..=tcfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = tcfg.lr_max;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let params = &model.params;
            let cfg = &model.config;
            let results: Vec<(f64, Vec<Vec<f64>>)> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| sample_gradient(params, cfg, &xs[i], &ts[i], tcfg.loss, data.h, None))
                    .collect::<Result<_>>()
            })?;
            // Serial reduction in batch order keeps runs bitwise reproducible.
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            let mut grads: Vec<Vec<f64>> = results[0].1.iter().map(|g| vec![0.0; g.len()]).collect();
            for (l, g) in &results {
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.iter_mut().zip(gi) {
                        *a += v;
                    }
                }
            }
            loss *= scale;
            grads.iter_mut().flatten().for_each(|v| *v *= scale);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
            }
            lr = cosine_lr(step, total_steps, tcfg.lr_max, tcfg.lr_min);
            let cfg = model.config.clone();
            adam.step(&mut model.params.slots(&cfg), &grads, lr)
                .map_err(|e| Error::NonFinite(format!("{e} (epoch {epoch}, batch {b})")))?;
            epoch_loss += loss;
            step += 1;
        }
        let (val_l2, val_h1) = match val {
            Some(v) => {
                let m = pool.install(|| evaluate(&model, v))?;
                (Some(m.mean_l2), Some(m.mean_h1))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_l2,
            val_h1,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&model, &record)?;
        history.epochs.push(record);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetShape;
    use rand::Rng;

    fn toy_data(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Field> = (0..n).map(|_| Field::from_fn(1, d, d, |_, _, _| rng.gen_range(0.5..1.5))).collect();
        let outputs = inputs
            .iter()
            .map(|a| {
                Field::from_fn(1, d, d, |_, y, x| {
                    a.get(0, y, x) * ((y + 1) * (d - y) * (x + 1) * (d - x)) as f64 / 100.0
                })
            })
            .collect();
        Dataset { inputs, outputs, h: 1.0 / (d as f64 + 1.0) }
    }

    fn tiny() -> MgNOConfig {
        NetShape { pre: 1, post: 1, ..NetShape::new(1, 4, 2) }.config().unwrap()
    }

    #[test]
    fn overfits_one_sample() {
        let data = toy_data(1, 8, 1);
        let mut tcfg = TrainConfig::new(200);
        tcfg.batch_size = 1;
        tcfg.lr_max = 1e-2;
        tcfg.lr_min = 1e-4;
        let (_, hist) = train(&data, None, &tiny(), &tcfg).unwrap();
        let first = hist.epochs[0].train_loss;
        let last = hist.epochs.last().unwrap().train_loss;
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = toy_data(3, 8, 2);
        let mut tcfg = TrainConfig::new(2);
        tcfg.lr_max = 0.0;
        tcfg.lr_min = 0.0;
        let cfg = tiny();
        let (model, _) = train(&data, None, &cfg, &tcfg).unwrap();
        assert_eq!(model.params, init_params(&cfg).unwrap());
    }

    #[test]
    fn identical_seeds_identical_history() {
        let data = toy_data(5, 8, 3);
        let mut tcfg = TrainConfig::new(3);
        tcfg.batch_size = 2;
        tcfg.seed = 11;
        let (m1, h1) = train(&data, Some(&data), &tiny(), &tcfg).unwrap();
        let (m2, h2) = train(&data, Some(&data), &tiny(), &tcfg).unwrap();
        assert_eq!(h1.without_timing(), h2.without_timing());
        assert_eq!(m1, m2);
        tcfg.loss = LossKind::RelL2;
        let (_, h3) = train(&data, Some(&data), &tiny(), &tcfg).unwrap();
        assert_ne!(h1.without_timing(), h3.without_timing());
    }

    #[test]
    fn final_validation_matches_evaluate() {
        let data = toy_data(4, 8, 4);
        let (model, hist) = train(&data, Some(&data), &tiny(), &TrainConfig::new(2)).unwrap();
        let m = evaluate(&model, &data).unwrap();
        let last = hist.epochs.last().unwrap();
        assert!((m.mean_l2 - last.val_l2.unwrap()).abs() < 1e-10);
        assert!((m.mean_h1 - last.val_h1.unwrap()).abs() < 1e-10);
    }

    #[test]
    fn mismatched_grid_is_a_shape_error() {
        let data = toy_data(2, 6, 5);
        let cfg = NetShape::new(1, 2, 3).config().unwrap();
        assert!(train(&data, None, &cfg, &TrainConfig::new(1)).is_err());
    }

    #[test]
    fn history_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(2, 8, 6);
        let (_, hist) = train(&data, Some(&data), &tiny(), &TrainConfig::new(2)).unwrap();
        hist.write_csv(dir.path().join("h.csv")).unwrap();
        hist.write_json(dir.path().join("h.json")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("h.csv")).unwrap();
        assert!(csv.starts_with("epoch,train_loss,val_l2,val_h1,lr,seconds"));
        assert_eq!(csv.lines().count(), 3);
        let back: TrainHistory =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("h.json")).unwrap()).unwrap();
        assert_eq!(back, hist);
    }
}
