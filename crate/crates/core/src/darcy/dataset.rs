use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coefficient::Coefficient;
use super::solver::{solve_reference, SolveStats};
use crate::error::{invalid, shape, Error, Result};
use crate::mgt::{stack_fields, Tensor};
use crate::tensor::Field;

pub const DATASET_FORMAT: &str = "mgno-darcy/1";
pub const DEFAULT_TOL: f64 = 1e-10;

fn default_tol() -> f64 {
    DEFAULT_TOL
}

/// Sample counts per split, taken in order from the front of the dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: usize,
    #[serde(default)]
    pub val: usize,
    #[serde(default)]
    pub test: usize,
}

impl Split {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// What to generate: a coefficient family on a `d × d` interior grid of
/// spacing `h = 1/(d+1)`, with forcing `f ≡ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub coefficient: Coefficient,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Defaults to every sample in the training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl CoefficientSpec {
    pub fn new(coefficient: Coefficient, d: usize, seed: u64) -> Self {
        Self { coefficient, d, seed, tol: DEFAULT_TOL, split: None }
    }

    /// Parses and validates; errors name the offending field.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Format(format!("spec field `{}`: {}", e.path(), e.inner())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.coefficient.validate()?;
        if self.d < 8 {
            return Err(invalid(format!("spec field `d`: grid size must be at least 8, got {}", self.d)));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(invalid(format!("spec field `tol`: must lie in (0, 1), got {}", self.tol)));
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.d + 1) as f64
    }

    pub fn split_for(&self, n: usize) -> Result<Split> {
        match self.split {
            Some(s) if s.total() != n => {
                Err(invalid(format!("spec field `split`: sizes sum to {} but {n} samples requested", s.total())))
            }
            Some(s) => Ok(s),
            None => Ok(Split { train: n, val: 0, test: 0 }),
        }
    }
}

/// Coefficient/solution pairs on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Field>,
    pub outputs: Vec<Field>,
    pub h: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Grid side, or `None` when empty.
    pub fn grid(&self) -> Option<(usize, usize)> {
        self.inputs.first().map(|f| (f.height(), f.width()))
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset { inputs: self.inputs[range.clone()].to_vec(), outputs: self.outputs[range].to_vec(), h: self.h }
    }

    /// `(train, val, test)` in storage order.
    pub fn split(&self, s: &Split) -> Result<(Dataset, Dataset, Dataset)> {
        if s.total() != self.len() {
            return Err(shape(format!("split covers {} samples, dataset has {}", s.total(), self.len())));
        }
        let (a, b) = (s.train, s.train + s.val);
        Ok((self.slice(0..a), self.slice(a..b), self.slice(b..self.len())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format: String,
    pub spec: CoefficientSpec,
    pub samples: usize,
    pub d: usize,
    pub h: f64,
    pub tol: f64,
    /// True when the coefficient family is an approximation of the named one.
    pub approx: bool,
    pub split: Split,
    pub seeds: Vec<u64>,
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl DatasetMeta {
    pub fn parse(text: &str) -> Result<Self> {
        let meta: Self = serde_json::from_str(text)?;
        if meta.format != DATASET_FORMAT {
            return Err(Error::Format(format!("expected format {DATASET_FORMAT}, found {}", meta.format)));
        }
        meta.spec.validate()?;
        let n = meta.samples;
        if meta.seeds.len() != n || meta.residuals.len() != n || meta.iterations.len() != n || meta.split.total() != n {
            return Err(Error::Format(format!("per-sample metadata does not cover {n} samples")));
        }
        if meta.d != meta.spec.d {
            return Err(Error::Format(format!("grid size {} disagrees with spec {}", meta.d, meta.spec.d)));
        }
        Ok(meta)
    }
}

/// Per-sample seeds drawn from the master seed.
pub fn sample_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Integrity checks of one solved sample: residual within tolerance,
/// coefficient positive and within the family's bounds, `u ≥ 0`, and the
/// maximum of `u` attained off the outermost ring of nodes.
pub fn check_sample(a: &Field, u: &Field, stats: &SolveStats, spec: &CoefficientSpec) -> Result<()> {
    if !(stats.relative_residual <= spec.tol) {
        return Err(invalid(format!("residual {:.3e} above tolerance {:.1e}", stats.relative_residual, spec.tol)));
    }
    let (lo, hi) = spec.coefficient.bounds();
    if let Some(v) = a.data().iter().find(|v| !(**v > 0.0 && **v >= lo && **v <= hi)) {
        return Err(invalid(format!("coefficient value {v} outside [{lo}, {hi}]")));
    }
    let min = u.data().iter().copied().fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        return Err(invalid(format!("solution minimum {min} is negative")));
    }
    let (d_h, d_w) = (u.height(), u.width());
    let arg = u.data().iter().enumerate().fold(0, |best, (i, v)| if *v > u.data()[best] { i } else { best });
    let (y, x) = (arg / d_w, arg % d_w);
    if y == 0 || x == 0 || y + 1 == d_h || x + 1 == d_w {
        return Err(invalid(format!("solution maximum lies on the outer ring at ({y}, {x})")));
    }
    Ok(())
}

/// Generates `n` samples in parallel. Output is independent of the worker count.
pub fn build_dataset(n: usize, spec: &CoefficientSpec) -> Result<(Dataset, DatasetMeta)> {
    if n == 0 {
        return Err(invalid("need at least one sample"));
    }
    spec.validate()?;
    let split = spec.split_for(n)?;
    let seeds = sample_seeds(spec.seed, n);
    let (d, h) = (spec.d, spec.h());
    let solved: Vec<(Field, Field, SolveStats)> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let wrap = |e: Error| invalid(format!("sample {i} (seed {seed}): {e}"));
            let a = spec.coefficient.sample(d, seed).map_err(wrap)?;
            let f = Field::filled(1, d, d, 1.0);
            let (u, stats) = solve_reference(&a, &f, h, spec.tol).map_err(wrap)?;
            check_sample(&a, &u, &stats, spec).map_err(wrap)?;
            Ok((a, u, stats))
        })
        .collect::<Result<_>>()?;
    let meta = DatasetMeta {
        format: DATASET_FORMAT.into(),
        spec: spec.clone(),
        samples: n,
        d,
        h,
        tol: spec.tol,
        approx: matches!(spec.coefficient, Coefficient::TwoPhaseApprox { .. }),
        split,
        seeds,
        residuals: solved.iter().map(|s| s.2.relative_residual).collect(),
        iterations: solved.iter().map(|s| s.2.iterations).collect(),
    };
    let mut data = Dataset { inputs: Vec::with_capacity(n), outputs: Vec::with_capacity(n), h };
    for (a, u, _) in solved {
        data.inputs.push(a);
        data.outputs.push(u);
    }
    Ok((data, meta))
}

pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset, meta: &DatasetMeta) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    stack_fields(&data.inputs)?.write(dir.join("inputs.mgt"))?;
    stack_fields(&data.outputs)?.write(dir.join("outputs.mgt"))?;
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(dir.join("meta.json"), text)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Dataset, DatasetMeta)> {
    let dir = dir.as_ref();
    let meta = DatasetMeta::parse(&fs::read_to_string(dir.join("meta.json"))?)?;
    let want = [meta.samples, 1, meta.d, meta.d];
    let read = |name: &str| -> Result<Vec<Field>> {
        let t = Tensor::read(dir.join(name))?;
        if t.dims != want {
            return Err(shape(format!("{name} has dims {:?}, metadata implies {want:?}", t.dims)));
        }
        t.into_fields()
    };
    let data = Dataset { inputs: read("inputs.mgt")?, outputs: read("outputs.mgt")?, h: meta.h };
    Ok((data, meta))
}
