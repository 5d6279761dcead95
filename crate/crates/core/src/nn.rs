//! Binding a [`ParamStore`] onto a [`Tape`] plus the layer helpers built on it.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ConvGeometry, Gradients, Tape, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// Batch statistics observed by one normalization layer during a training pass.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub struct Session<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    mode: Mode,
    bound: RefCell<BTreeMap<String, Var>>,
    record_stats: Cell<bool>,
    frozen: Cell<bool>,
    detached: RefCell<BTreeMap<String, Var>>,
    observed: RefCell<Vec<BnObservation>>,
}

impl<'a> Session<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            bound: RefCell::new(BTreeMap::new()),
            record_stats: Cell::new(true),
            frozen: Cell::new(false),
            detached: RefCell::new(BTreeMap::new()),
            observed: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape variable for a named parameter, bound on first use.
    ///
    /// Panics when the name is unknown; parameter names are fixed at init.
    pub fn param(&self, name: &str) -> Var {
        if self.frozen.get() {
            if let Some(&v) = self.detached.borrow().get(name) {
                return v;
            }
            self.frozen.set(false);
            let v = self.tape.detach(self.param(name));
            self.frozen.set(true);
            self.detached.borrow_mut().insert(name.to_string(), v);
            return v;
        }
        if let Some(&v) = self.bound.borrow().get(name) {
            return v;
        }
        let tensor = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.tape.var(tensor);
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Uses an existing tape variable for a named parameter.
    pub fn bind(&self, name: &str, v: Var) {
        self.bound.borrow_mut().insert(name.to_string(), v);
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.get(name).is_some()
    }

    /// Runs `f` without recording normalization statistics.
    pub fn without_stats<T>(&self, f: impl FnOnce() -> T) -> T {
        let prev = self.record_stats.replace(false);
        let out = f();
        self.record_stats.set(prev);
        out
    }

    /// Runs `f` with every parameter read as a stop-gradient copy.
    pub fn with_frozen_params<T>(&self, f: impl FnOnce() -> T) -> T {
        let prev = self.frozen.replace(true);
        let out = f();
        self.frozen.set(prev);
        out
    }

    pub fn take_observations(&self) -> Vec<BnObservation> {
        std::mem::take(&mut self.observed.borrow_mut())
    }

    /// Gradient per bound parameter; parameters never touched are omitted.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn conv(&self, name: &str, x: Var, geom: ConvGeometry) -> Var {
        let bias = format!("{name}.bias");
        let b = self.has_param(&bias).then(|| self.param(&bias));
        self.tape.conv3d(x, self.param(&format!("{name}.weight")), b, geom)
    }

    pub fn conv_transpose(&self, name: &str, x: Var, geom: ConvGeometry) -> Var {
        let bias = format!("{name}.bias");
        let b = self.has_param(&bias).then(|| self.param(&bias));
        self.tape.conv_transpose3d(x, self.param(&format!("{name}.weight")), b, geom)
    }

    pub fn batch_norm(&self, name: &str, x: Var) -> Var {
        let gamma = self.param(&format!("{name}.gamma"));
        let beta = self.param(&format!("{name}.beta"));
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.tape.batch_norm(x, gamma, beta, BN_EPS);
                if self.record_stats.get() {
                    let shape = self.tape.shape(x);
                    let count = shape[0] * shape[2..].iter().product::<usize>();
                    self.observed.borrow_mut().push(BnObservation { name: name.to_string(), mean, var, count });
                }
                y
            }
            Mode::Eval => {
                let mean = self.store.buffer(&format!("{name}.running_mean")).expect("running mean");
                let var = self.store.buffer(&format!("{name}.running_var")).expect("running var");
                self.tape.batch_norm_fixed(x, gamma, beta, mean.data(), var.data(), BN_EPS)
            }
        }
    }

    pub fn linear(&self, name: &str, x: Var) -> Var {
        self.tape.linear(x, self.param(&format!("{name}.weight")), self.param(&format!("{name}.bias")))
    }
}

/// Folds observed batch statistics into the running buffers.
pub fn apply_bn_observations(store: &mut ParamStore, observations: &[BnObservation], momentum: f64) {
    for obs in observations {
        let unbiased = if obs.count > 1 { obs.count as f64 / (obs.count - 1) as f64 } else { 1.0 };
        if let Some(rm) = store.buffer_mut(&format!("{}.running_mean", obs.name)) {
            for (r, m) in rm.data_mut().iter_mut().zip(&obs.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
        }
        if let Some(rv) = store.buffer_mut(&format!("{}.running_var", obs.name)) {
            for (r, v) in rv.data_mut().iter_mut().zip(&obs.var) {
                *r = (1.0 - momentum) * *r + momentum * v * unbiased;
            }
        }
    }
}

// Initializers.

pub fn kaiming(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| normal.sample(rng)).collect())
}

pub fn init_conv(store: &mut ParamStore, rng: &mut impl Rng, name: &str, shape: [usize; 5], bias: bool) {
    let fan_in = shape[1] * shape[2] * shape[3] * shape[4];
    store.insert(format!("{name}.weight"), kaiming(rng, &shape, fan_in));
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(&[shape[0]]));
    }
}

/// Transposed-convolution weights are `[Cin, Cout, k...]`; fan-in counts the
/// output-side taps that feed each output element.
pub fn init_conv_transpose(store: &mut ParamStore, rng: &mut impl Rng, name: &str, shape: [usize; 5], bias: bool) {
    let fan_in = shape[0] * shape[2] * shape[3] * shape[4];
    store.insert(format!("{name}.weight"), kaiming(rng, &shape, fan_in));
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(&[shape[1]]));
    }
}

pub fn init_batch_norm(store: &mut ParamStore, name: &str, channels: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
    store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
    store.insert_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0));
}

pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, out: usize, inp: usize) {
    let normal = Normal::new(0.0, (1.0 / inp as f64).sqrt()).expect("finite std");
    let w = (0..out * inp).map(|_| normal.sample(rng)).collect();
    store.insert(format!("{name}.weight"), Tensor::from_vec(&[out, inp], w));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
}
