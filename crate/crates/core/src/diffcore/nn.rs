//! Parameter storage, dense layers and the Adam optimizer.

use rand::Rng;

use super::matrix::Matrix;
use super::tape::{Gradients, NodeId, Tape, TapeError};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamIdx(pub usize);

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

/// Parameter node ids of a store bound onto a tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    /// Wraps nodes that stand in for a store's tensors, in store order.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Self(nodes)
    }

    pub fn node(&self, p: ParamIdx) -> NodeId {
        self.0[p.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> ParamIdx {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamIdx(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, p: ParamIdx) -> &Matrix {
        &self.tensors[p.0]
    }

    pub fn get_mut(&mut self, p: ParamIdx) -> &mut Matrix {
        &mut self.tensors[p.0]
    }

    pub fn name(&self, p: ParamIdx) -> &str {
        &self.names[p.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Places every tensor on the tape without copying. Untrainable bindings
    /// are constants, so backward never computes their gradients.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|m| {
                    if trainable {
                        tape.parameter_ref(m)
                    } else {
                        tape.constant_ref(m)
                    }
                })
                .collect(),
        )
    }

    /// Places copies of every tensor on the tape as constants, for tapes that
    /// must not borrow the store.
    pub fn bind_copies(&self, tape: &mut Tape<'_>) -> Bound {
        Bound(self.tensors.iter().map(|m| tape.constant(m.clone())).collect())
    }

    /// Gradients for every tensor, zeros where the root does not depend on it.
    pub fn grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Matrix> {
        bound.0.iter().map(|&id| grads.wrt(id)).collect()
    }

    /// `self ← rho·self + (1 − rho)·online`, element-wise.
    pub fn polyak_from(&mut self, online: &ParamStore, rho: f64) {
        for (t, o) in self.tensors.iter_mut().zip(&online.tensors) {
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = rho * *a + (1.0 - rho) * b;
            }
        }
    }
}

/// Fully connected layer `y = x·W + b`, `W` stored `in × out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamIdx,
    pub bias: ParamIdx,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform `±1/√fan_in` initialisation for weights and biases.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self::with_bound(store, name, fan_in, fan_out, bound, rng)
    }

    pub fn with_bound<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let w = Matrix::from_vec(
            fan_in,
            fan_out,
            (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
        );
        let b = Matrix::from_vec(
            1,
            fan_out,
            (0..fan_out).map(|_| rng.random_range(-bound..=bound)).collect(),
        );
        Self {
            weight: store.push(format!("{name}.weight"), w),
            bias: store.push(format!("{name}.bias"), b),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &Bound, x: NodeId) -> Result<NodeId, TapeError> {
        tape.affine(x, bound.node(self.weight), bound.node(self.bias))
    }
}

/// Stack of [`Linear`] layers with relu between them; the last layer is
/// linear unless `relu_output` is set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_output: bool,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        relu_output: bool,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, relu_output }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &Bound, x: NodeId) -> Result<NodeId, TapeError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i < last || self.relu_output {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Matrix>, v: Vec<Matrix>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p -= self.lr * update;
            }
        }
    }
}
