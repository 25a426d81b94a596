use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Matrix;

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, id: usize) -> &Matrix {
        &self.values[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// Registers parameters with seeded scaled-uniform initialization
/// (`U(-1/√fan_in, 1/√fan_in)`), zero biases and unit layer-norm gains.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn weight(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        self.store.push(name, m)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.store.push(name, Matrix::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.store.push(name, Matrix::filled(rows, cols, 1.0))
    }
}
