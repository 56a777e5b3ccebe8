//! Named parameter tensors and their per-pass binding to a tape.

use std::collections::HashMap;

use medseg_autograd::{Mat, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pid(usize);

/// All trainable tensors of a model, keyed by module path
/// (`"text.layer0.attn.wq"`), in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Mat) -> Pid {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Pid(self.values.len() - 1)
    }

    pub fn get(&self, p: Pid) -> &Mat {
        &self.values[p.0]
    }

    pub fn get_mut(&mut self, p: Pid) -> &mut Mat {
        &mut self.values[p.0]
    }

    pub fn pid(&self, name: &str) -> Option<Pid> {
        self.index.get(name).map(|&i| Pid(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.pid(name).map(|p| self.get(p))
    }

    pub fn name(&self, p: Pid) -> &str {
        &self.names[p.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn pids(&self) -> impl Iterator<Item = Pid> {
        (0..self.values.len()).map(Pid)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Records every parameter on `tape`, as a leaf when `trainable(name)`
    /// holds and as a constant otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| if trainable(n) { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Binding { vars }
    }

    /// Binds everything as constants, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        self.bind(tape, |_| false)
    }
}

/// Tape handles of every parameter for one forward pass.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Uses caller-recorded vars, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, p: Pid) -> Var {
        self.vars[p.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Registers parameters with seeded initial values.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Pid {
        self.store.add(name, Mat::zeros((rows, cols)))
    }

    pub fn filled(&mut self, name: &str, value: Mat) -> Pid {
        self.store.add(name, value)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Pid {
        let d = Normal::new(0.0, std).expect("valid std");
        let m = Mat::from_shape_fn((rows, cols), |_| d.sample(&mut self.rng));
        self.store.add(name, m)
    }

    /// Weight of a `fan_in → fan_out` map, Glorot-normal scaled.
    pub fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> Pid {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        self.normal(name, rows, cols, std)
    }
}
