//! Parameter storage and the layers the networks are assembled from.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::image::Tensor;
use crate::scalar::Scalar;

/// Slope of the leaky ReLU used after every normalized convolution.
pub const LEAKY_SLOPE: f64 = 0.2;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct ParamEntry<T> {
    name: String,
    value: Arc<Tensor<T>>,
    trainable: bool,
}

/// Named tensors owned by a network. Frozen entries never receive
/// gradients.
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<ParamEntry<T>>,
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(0);

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Distinguishes stores sharing one tape.
    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

fn uniform_tensor<T: Scalar, R: Rng>(rng: &mut R, c: usize, h: usize, w: usize, bound: f64) -> Tensor<T> {
    let data = (0..c * h * w)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(c, h, w, data).expect("sizes match")
}

/// Square convolution with zero padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// Kaiming-uniform weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            uniform_tensor(rng, out_channels, in_channels, kernel * kernel, bound),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(out_channels, 1, 1)));
        Self {
            w,
            b,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.kernel, self.stride)
    }
}

/// `conv3x3 → instance norm → leaky ReLU`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ConvBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Self {
        // The normalization absorbs any conv bias.
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), in_channels, out_channels, 3, stride, false);
        let gamma_init = Tensor::from_vec(out_channels, 1, 1, vec![T::one(); out_channels]).expect("sizes");
        let gamma = store.add(format!("{name}.norm.gamma"), gamma_init);
        let beta = store.add(format!("{name}.norm.beta"), Tensor::zeros(out_channels, 1, 1));
        Self { conv, gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.conv.forward(tape, store, x);
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.instance_norm(y, g, b, T::of(NORM_EPS));
        tape.leaky_relu(y, T::of(LEAKY_SLOPE))
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }
}

/// Convolutional LSTM cell with 3×3 gate kernels.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub gates: Conv2d,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        hidden: usize,
    ) -> Self {
        let gates = Conv2d::new(store, rng, &format!("{name}.gates"), in_channels + hidden, 4 * hidden, 3, 1, true);
        // Forget-gate bias of 1 keeps early iterations from discarding state.
        if let Some(b) = gates.b {
            let t = store.value_mut(b);
            for v in &mut t.data[hidden..2 * hidden] {
                *v = T::one();
            }
        }
        Self { gates, hidden }
    }

    /// One step. `state` is `(hidden, cell)`; `None` means zeros.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        state: Option<(Var, Var)>,
    ) -> (Var, Var) {
        let (h, w) = {
            let v = tape.value(x);
            (v.height, v.width)
        };
        let (h_prev, c_prev) = match state {
            Some(s) => s,
            None => {
                let z = tape.constant(Tensor::zeros(self.hidden, h, w));
                (z, z)
            }
        };
        let xh = tape.concat(&[x, h_prev]);
        let gates = self.gates.forward(tape, store, xh);
        let n = self.hidden;
        let i = tape.slice_channels(gates, 0, n);
        let f = tape.slice_channels(gates, n, n);
        let o = tape.slice_channels(gates, 2 * n, n);
        let g = tape.slice_channels(gates, 3 * n, n);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let o = tape.sigmoid(o);
        let g = tape.tanh(g);
        let fc = tape.mul(f, c_prev);
        let ig = tape.mul(i, g);
        let c = tape.add(fc, ig);
        let tc = tape.tanh(c);
        let h_new = tape.mul(o, tc);
        (h_new, c)
    }
}
