//! Execution backends for the operator code.
//!
//! The multigrid operator and the network are written once against
//! [`Backend`]. [`Eager`] evaluates immediately; the tape in
//! [`crate::train::graph`] records the same calls for reverse-mode
//! differentiation.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::tensor::{self, BoundaryMode, Field, Kernel, Matrix};

/// Any value that flows through a backend.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Field(Field),
    Kernel(Kernel),
    Matrix(Matrix),
    Vector(Vec<f64>),
    Scalar(f64),
}

impl Value {
    pub fn as_field(&self) -> Result<&Field> {
        match self {
            Value::Field(f) => Ok(f),
            other => Err(shape(format!("expected field, found {}", other.kind()))),
        }
    }

    pub fn as_kernel(&self) -> Result<&Kernel> {
        match self {
            Value::Kernel(k) => Ok(k),
            other => Err(shape(format!("expected kernel, found {}", other.kind()))),
        }
    }

    pub fn as_matrix(&self) -> Result<&Matrix> {
        match self {
            Value::Matrix(m) => Ok(m),
            other => Err(shape(format!("expected matrix, found {}", other.kind()))),
        }
    }

    pub fn as_vector(&self) -> Result<&[f64]> {
        match self {
            Value::Vector(v) => Ok(v),
            other => Err(shape(format!("expected vector, found {}", other.kind()))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Value::Field(_) => "field",
            Value::Kernel(_) => "kernel",
            Value::Matrix(_) => "matrix",
            Value::Vector(_) => "vector",
            Value::Scalar(_) => "scalar",
        }
    }

    /// Flat view of the stored numbers.
    pub fn data(&self) -> &[f64] {
        match self {
            Value::Field(f) => f.data(),
            Value::Kernel(k) => k.weights(),
            Value::Matrix(m) => m.data(),
            Value::Vector(v) => v,
            Value::Scalar(s) => std::slice::from_ref(s),
        }
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        match self {
            Value::Field(f) => f.data_mut(),
            Value::Kernel(k) => k.weights_mut(),
            Value::Matrix(m) => m.data_mut(),
            Value::Vector(v) => v,
            Value::Scalar(s) => std::slice::from_mut(s),
        }
    }

    /// A zero value of the same kind and shape.
    pub fn zeros_like(&self) -> Value {
        let mut v = self.clone();
        v.data_mut().fill(0.0);
        v
    }
}

/// Pointwise nonlinearity between network layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    /// Test hook: makes the network affine so superposition can be checked.
    Identity,
}

pub trait Backend {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Value;

    /// Registers a value that is not differentiated through.
    fn constant(&mut self, v: Value) -> Self::Var;

    fn conv2d(&mut self, x: &Self::Var, k: &Self::Var, mode: BoundaryMode, stride: usize) -> Result<Self::Var>;

    /// See [`tensor::prolong`].
    fn prolong(
        &mut self,
        x: &Self::Var,
        k: &Self::Var,
        mode: BoundaryMode,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self::Var>;

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    fn activation(&mut self, x: &Self::Var, act: Activation) -> Result<Self::Var>;

    fn channel_mix(&mut self, x: &Self::Var, m: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    /// Zeroes the outermost ring of every channel.
    fn mask_ring(&mut self, x: &Self::Var) -> Result<Self::Var>;

    fn field<'a>(&'a self, v: &'a Self::Var) -> Result<&'a Field> {
        self.value(v).as_field()
    }
}

/// Immediate evaluation; variables are shared immutable values.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type Var = Rc<Value>;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Value {
        v
    }

    fn constant(&mut self, v: Value) -> Self::Var {
        Rc::new(v)
    }

    fn conv2d(&mut self, x: &Self::Var, k: &Self::Var, mode: BoundaryMode, stride: usize) -> Result<Self::Var> {
        let out = tensor::conv2d(x.as_field()?, k.as_kernel()?, mode, stride)?;
        Ok(Rc::new(Value::Field(out)))
    }

    fn prolong(
        &mut self,
        x: &Self::Var,
        k: &Self::Var,
        mode: BoundaryMode,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self::Var> {
        let out = tensor::prolong(x.as_field()?, k.as_kernel()?, mode, out_h, out_w)?;
        Ok(Rc::new(Value::Field(out)))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        Ok(Rc::new(Value::Field(a.as_field()?.add(b.as_field()?)?)))
    }

    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        Ok(Rc::new(Value::Field(a.as_field()?.sub(b.as_field()?)?)))
    }

    fn activation(&mut self, x: &Self::Var, act: Activation) -> Result<Self::Var> {
        Ok(match act {
            Activation::Gelu => Rc::new(Value::Field(tensor::gelu(x.as_field()?))),
            Activation::Identity => x.clone(),
        })
    }

    fn channel_mix(&mut self, x: &Self::Var, m: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        let out = tensor::channel_mix(x.as_field()?, m.as_matrix()?, b.as_vector()?)?;
        Ok(Rc::new(Value::Field(out)))
    }

    fn mask_ring(&mut self, x: &Self::Var) -> Result<Self::Var> {
        Ok(Rc::new(Value::Field(x.as_field()?.mask_ring())))
    }
}
