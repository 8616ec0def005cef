//! Named, ordered parameter storage.
//!
//! Every learnable array in the model lives in one [`Params`] table. The
//! insertion order is fixed by construction, which gives the optimizer, the
//! checkpoint writer and the graph binding a single canonical ordering —
//! nothing downstream iterates a hash map.

use alloc::string::String;
use alloc::vec::Vec;

use crate::fmath;
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;
use crate::Rng;

/// Index of a parameter inside its [`Params`] table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: &str, value: Matrix) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name"
        );
        self.names.push(String::from(name));
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn add_ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::from_fn(rows, cols, |_, _| 1.0))
    }

    pub fn add_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut Rng) -> ParamId {
        let mut m = Matrix::zeros(rows, cols);
        for x in m.data_mut().iter_mut() {
            *x = normal(rng, std);
        }
        self.add(name, m)
    }

    /// Glorot-style init for a linear map applied as `x @ w`.
    pub fn add_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        let std = fmath::sqrt(2.0 / (fan_in + fan_out) as f64);
        self.add_normal(name, fan_in, fan_out, std, rng)
    }

    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> ParamId {
        use rand::Rng as _;
        let mut m = Matrix::zeros(rows, cols);
        for x in m.data_mut().iter_mut() {
            *x = rng.gen_range(lo..hi);
        }
        self.add(name, m)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Record every parameter as a tracked leaf; the returned vector is
    /// indexed by [`ParamId::index`].
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.values.iter().map(|m| g.leaf(m.clone())).collect()
    }

    /// Record every parameter as an untracked constant (inference).
    pub fn bind_const(&self, g: &mut Graph) -> Vec<Var> {
        self.values.iter().map(|m| g.constant(m.clone())).collect()
    }
}

/// One Box-Muller draw; the uniform inputs come from the shared generator so
/// results are reproducible across platforms.
pub fn normal(rng: &mut Rng, std: f64) -> f64 {
    use rand::Rng as _;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    fmath::sqrt(-2.0 * fmath::ln(u1)) * fmath::cos(2.0 * core::f64::consts::PI * u2) * std
}
