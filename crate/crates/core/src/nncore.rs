//! Dense feed-forward networks with hand-written backpropagation, the Adam
//! optimizer and an exponential learning-rate schedule.
//!
//! Batches are row-major: a batch of `n` inputs is an `n × in_dim` matrix and
//! every affine layer computes `H = A·Wᵀ + b` with `W` stored as
//! `out × in`. The activation is applied after every layer except the last.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative evaluated at the pre-activation `z`. ReLU uses 0 at the kink.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One affine map `x ↦ W·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
    activation: Activation,
}

/// Gradients of a scalar loss with respect to every layer of a [`DenseNet`]
/// and with respect to the input batch.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<Dense>,
    pub input: Array2<f64>,
}

impl NetGrads {
    /// Flattens the parameter gradients in the same order as
    /// [`DenseNet::flat_params`]. The input gradient is not included.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layers.iter().map(Dense::num_params).sum());
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|&g| g == 0.0))
    }
}

impl DenseNet {
    /// Builds a network from explicit layers, checking that dimensions chain
    /// and all parameters are finite.
    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "a network needs at least one layer".into(),
            ));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(
                    "layer bias",
                    layer.out_dim(),
                    layer.bias.len(),
                ));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.in_dim() != layer.out_dim() {
                    return Err(Error::shape(
                        "layer chaining",
                        layer.out_dim(),
                        next.in_dim(),
                    ));
                }
            }
            if !layer
                .weight
                .iter()
                .chain(layer.bias.iter())
                .all(|v| v.is_finite())
            {
                return Err(Error::NonFiniteInput("network parameters"));
            }
        }
        Ok(DenseNet { layers, activation })
    }

    /// He-initialized network with `depth` affine layers; every hidden layer
    /// has `width` units. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        depth: usize,
        width: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 || in_dim == 0 || out_dim == 0 || (depth > 1 && width == 0) {
            return Err(Error::InvalidArgument(format!(
                "network dims must be positive (in={in_dim}, depth={depth}, width={width}, out={out_dim})"
            )));
        }
        let mut dims = Vec::with_capacity(depth + 1);
        dims.push(in_dim);
        dims.extend(std::iter::repeat_n(width, depth - 1));
        dims.push(out_dim);

        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive std");
                Dense {
                    weight: Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(rng)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(DenseNet {
            layers,
            activation: Activation::Relu,
        })
    }

    /// Single affine layer with identity weight and zero bias.
    pub fn identity(dim: usize) -> Self {
        DenseNet {
            layers: vec![Dense {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
            }],
            activation: Activation::Relu,
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Largest hidden dimension (0 for a single-layer net).
    pub fn width(&self) -> usize {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Dense::out_dim)
            .max()
            .unwrap_or(0)
    }

    /// Layer output sizes, starting with the input dimension.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// Parameters flattened layer by layer: weight (row-major), then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("flat parameters", self.num_params(), flat.len()));
        }
        let mut rest = flat;
        for layer in &mut self.layers {
            for slot in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *slot = rest[0];
                rest = &rest[1..];
            }
        }
        Ok(())
    }

    /// Largest absolute parameter entry.
    pub fn max_abs_param(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape("network input columns", self.in_dim(), x.ncols()));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput("network forward"));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = affine(&self.layers[0], x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(|z| self.activation.apply(z));
            h = affine(layer, h.view());
        }
        Ok(h)
    }

    /// Pre-activations of every layer; the last entry is the network output.
    fn pre_activations(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        pre.push(affine(&self.layers[0], x));
        for layer in &self.layers[1..] {
            let act = pre.last().unwrap().mapv(|z| self.activation.apply(z));
            pre.push(affine(layer, act.view()));
        }
        pre
    }

    /// Forward pass that also returns what [`DenseNet::backward_from`] needs.
    pub fn forward_traced(&self, x: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(&x)?;
        Ok(Trace {
            pre: self.pre_activations(x),
        })
    }

    /// Gradients of `sum(forward(x) ⊙ upstream)` with respect to all
    /// parameters and the input.
    pub fn backward(&self, x: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<NetGrads> {
        let trace = self.forward_traced(x)?;
        self.backward_from(x, &trace, upstream)
    }

    pub fn backward_from(
        &self,
        x: ArrayView2<f64>,
        trace: &Trace,
        upstream: ArrayView2<f64>,
    ) -> Result<NetGrads> {
        let out = trace.output();
        if upstream.dim() != out.dim() {
            return Err(Error::shape(
                "upstream gradient",
                format!("{:?}", out.dim()),
                format!("{:?}", upstream.dim()),
            ));
        }
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input_act = if i == 0 {
                x.to_owned()
            } else {
                trace.pre[i - 1].mapv(|z| self.activation.apply(z))
            };
            let grad_w = delta.t().dot(&input_act);
            let grad_b = delta.sum_axis(Axis(0));
            let mut next = delta.dot(&layer.weight);
            if i > 0 {
                Zip::from(&mut next)
                    .and(&trace.pre[i - 1])
                    .for_each(|g, &z| *g *= self.activation.derivative(z));
            }
            grads.push(Dense {
                weight: grad_w,
                bias: grad_b,
            });
            delta = next;
        }
        grads.reverse();
        Ok(NetGrads {
            layers: grads,
            input: delta,
        })
    }
}

/// Intermediate values of a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pre: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("non-empty network")
    }
}

fn affine(layer: &Dense, a: ArrayView2<f64>) -> Array2<f64> {
    let mut h = a.dot(&layer.weight.t());
    h += &layer.bias;
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    hyper: AdamHyper,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self::with_hyper(num_params, AdamHyper::default())
    }

    pub fn with_hyper(num_params: usize, hyper: AdamHyper) -> Self {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

/// One bias-corrected Adam update. Nothing is modified when the gradient is
/// rejected.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    rate: f64,
    block: &str,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam step",
            params.len(),
            format!("grads {} / state {}", grads.len(), state.m.len()),
        ));
    }
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {rate}"
        )));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            block: block.to_string(),
        });
    }
    let AdamHyper { beta1, beta2, eps } = state.hyper;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= rate * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Applies one Adam step to every parameter of `net`.
pub fn adam_step_net(
    net: &mut DenseNet,
    grads: &NetGrads,
    state: &mut AdamState,
    rate: f64,
    block: &str,
) -> Result<()> {
    let mut params = net.flat_params();
    adam_step(&mut params, &grads.flat(), state, rate, block)?;
    net.set_flat_params(&params)
}

/// Per-epoch exponential decay: `rate(e) = base · decay^e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
}

impl LrSchedule {
    pub fn new(base: f64, decay: f64) -> Result<Self> {
        let s = LrSchedule { base, decay };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base >= 0.0 && self.base.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "base learning rate must be finite and non-negative, got {}",
                self.base
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "learning-rate decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.base * self.decay.powi(epoch.min(i32::MAX as usize) as i32)
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    schedule.rate_at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(rng: &mut ChaCha8Rng, dims: &[usize]) -> DenseNet {
        let normal = Normal::new(0.0, 0.7).unwrap();
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weight: Array2::from_shape_simple_fn((w[1], w[0]), || normal.sample(rng)),
                bias: Array1::from_shape_simple_fn(w[1], || normal.sample(rng)),
            })
            .collect();
        DenseNet::from_layers(layers, Activation::Relu).unwrap()
    }

    /// Straight-line scalar evaluation of the layer recursion.
    fn scalar_forward(net: &DenseNet, x: &Array2<f64>) -> Vec<Vec<f64>> {
        let n_layers = net.layers().len();
        (0..x.nrows())
            .map(|i| {
                let mut a: Vec<f64> = x.row(i).to_vec();
                for (li, layer) in net.layers().iter().enumerate() {
                    let mut z = vec![0.0; layer.out_dim()];
                    for (o, zo) in z.iter_mut().enumerate() {
                        let mut s = layer.bias[o];
                        for (k, ak) in a.iter().enumerate() {
                            s += layer.weight[[o, k]] * ak;
                        }
                        *zo = if li + 1 < n_layers { s.max(0.0) } else { s };
                    }
                    a = z;
                }
                a
            })
            .collect()
    }

    #[test]
    fn identity_net_passes_input_through() {
        let net = DenseNet::identity(3);
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        assert_eq!(net.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let mut layer = Dense::zeros(2, 3);
        layer.bias = array![1.0, -2.0, 0.5];
        let net = DenseNet::from_layers(vec![Dense::zeros(2, 2), layer], Activation::Relu).unwrap();
        let x = array![[1.0, 2.0], [-3.0, 7.0], [0.0, 0.0]];
        let out = net.forward(x.view()).unwrap();
        for row in out.rows() {
            assert_eq!(row, array![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn forward_matches_scalar_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let net = random_net(&mut rng, &[4, 6, 5, 3]);
            let x = Array2::from_shape_simple_fn((7, 4), || rng.gen_range(-2.0..2.0));
            let out = net.forward(x.view()).unwrap();
            let oracle = scalar_forward(&net, &x);
            for (i, row) in oracle.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert!((out[[i, j]] - v).abs() <= 1e-12 * (1.0 + v.abs()));
                }
            }
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = DenseNet::identity(2);
        let x = array![[1.0, 2.0, 3.0]];
        assert!(matches!(net.forward(x.view()), Err(Error::Shape { .. })));
        let x = array![[1.0, f64::NAN]];
        assert!(matches!(net.forward(x.view()), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn from_layers_rejects_broken_chain() {
        let err = DenseNet::from_layers(vec![Dense::zeros(2, 3), Dense::zeros(4, 1)], Activation::Relu);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_backward_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = random_net(&mut rng, &[3, 2]);
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0], [2.0, 2.0, -2.0], [0.0, 1.0, 1.0]];
        let ones = Array2::ones((4, 2));
        let g = net.backward(x.view(), ones.view()).unwrap();
        let col_sums = x.sum_axis(Axis(0));
        for o in 0..2 {
            for k in 0..3 {
                assert_eq!(g.layers[0].weight[[o, k]], col_sums[k]);
            }
            assert_eq!(g.layers[0].bias[o], 4.0);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = random_net(&mut rng, &[3, 4, 2]);
        let x = Array2::from_shape_simple_fn((5, 3), || rng.gen_range(-1.0..1.0));
        let g = net.backward(x.view(), Array2::zeros((5, 2)).view()).unwrap();
        assert!(g.is_zero());
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_upstream_shape() {
        let net = DenseNet::identity(2);
        let x = array![[1.0, 2.0]];
        let bad = Array2::zeros((2, 2));
        assert!(matches!(net.backward(x.view(), bad.view()), Err(Error::Shape { .. })));
    }

    #[test]
    fn last_layer_scaling_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut net = random_net(&mut rng, &[3, 5, 2]);
        let x = Array2::from_shape_simple_fn((6, 3), || rng.gen_range(-1.0..1.0));
        let before = net.forward(x.view()).unwrap();
        let s = 4.0;
        let last = net.layers.last_mut().unwrap();
        last.weight *= s;
        last.bias *= s;
        let after = net.forward(x.view()).unwrap();
        assert_eq!(after, before * s);
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = random_net(&mut rng, &[3, 4, 2]);
        let mut other = DenseNet::init(3, 2, 4, 2, &mut rng).unwrap();
        other.set_flat_params(&net.flat_params()).unwrap();
        assert_eq!(other, net);
        assert_eq!(net.depth(), 2);
        assert_eq!(net.width(), 4);
        assert_eq!(net.dims(), vec![3, 4, 2]);
    }

    #[test]
    fn he_init_shapes_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = DenseNet::init(20, 3, 16, 8, &mut rng).unwrap();
        assert_eq!(net.dims(), vec![20, 16, 16, 8]);
        assert!(net.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert!(DenseNet::init(20, 0, 16, 8, &mut rng).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut params = vec![1.0, -2.0, 3.0];
        let mut state = AdamState::new(3);
        adam_step(&mut params, &[0.0; 3], &mut state, 0.1, "test").unwrap();
        assert_eq!(params, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut theta = [0.0];
        let mut state = AdamState::new(1);
        adam_step(&mut theta, &[1.0], &mut state, 0.1, "theta").unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((theta[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_two_steps_match_scalar_recursion() {
        // independent scalar re-implementation
        let (b1, b2, eps, rate) = (0.9_f64, 0.999_f64, 1e-8_f64, 0.05_f64);
        let gs = [0.7, -1.3];
        let (mut th, mut m, mut v) = (0.25_f64, 0.0_f64, 0.0_f64);
        for (k, g) in gs.iter().enumerate() {
            let t = (k + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            th -= rate * mh / (vh.sqrt() + eps);
        }
        let mut theta = [0.25];
        let mut state = AdamState::new(1);
        for g in gs {
            adam_step(&mut theta, &[g], &mut state, rate, "theta").unwrap();
        }
        assert!((theta[0] - th).abs() <= 1e-12);
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_without_mutation() {
        let mut params = vec![1.0, 2.0];
        let mut state = AdamState::new(2);
        let err = adam_step(&mut params, &[0.5, f64::INFINITY], &mut state, 0.1, "shared").unwrap_err();
        match err {
            Error::NonFiniteGradient { block } => assert_eq!(block, "shared"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(params, vec![1.0, 2.0]);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn lr_schedule_values() {
        let s = LrSchedule::new(0.001, 0.95).unwrap();
        assert_eq!(lr_at(&s, 0), 0.001);
        assert!((lr_at(&s, 2) - 0.0009025).abs() < 1e-15);
        let flat = LrSchedule::new(0.001, 1.0).unwrap();
        assert_eq!(flat.rate_at(0), 0.001);
        assert_eq!(flat.rate_at(12345), 0.001);
        assert!(LrSchedule::new(0.001, 0.0).is_err());
        assert!(LrSchedule::new(-1.0, 0.9).is_err());
    }
}
