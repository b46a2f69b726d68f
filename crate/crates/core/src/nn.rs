//! Dense feed-forward networks with hand-derived reverse-mode gradients.
//!
//! Everything runs in `f64` on one sample at a time. Batches are handled by the
//! callers, which loop over samples and accumulate into a [`GradientSet`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Selu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Selu => {
                if z > 0.0 {
                    SELU_SCALE * z
                } else {
                    SELU_SCALE * SELU_ALPHA * z.exp_m1()
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Selu => {
                if z > 0.0 {
                    SELU_SCALE
                } else {
                    SELU_SCALE * SELU_ALPHA * z.exp()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    /// Initial weight variance for a layer with `fan_in` inputs feeding this activation.
    fn init_variance(self, fan_in: usize) -> f64 {
        match self {
            Activation::Selu => 1.0 / fan_in as f64,
            _ => 2.0 / fan_in as f64,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "selu" => Ok(Activation::Selu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// One affine layer followed by an elementwise activation.
///
/// `weights` is row-major with shape `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.in_dim + col]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Activations cached by [`DenseNet::forward`] for the matching backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients with the same layout as the owning [`DenseNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNet) -> Self {
        GradientSet {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    /// Flattened in the same order as [`DenseNet::params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.iter().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| g == 0.0)
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= factor);
            l.bias.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x = 0.0);
            l.bias.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn matches(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }
}

/// Network with the same activation on every layer, weights drawn from
/// `N(0, 2/in)` (or `N(0, 1/in)` for SELU) and zero biases.
pub fn init_net(dims: &[usize], activation: Activation, seed: u64) -> Result<DenseNet> {
    let acts = vec![activation; dims.len().saturating_sub(1)];
    DenseNet::new(dims, &acts, seed)
}

impl DenseNet {
    pub fn new(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(dims, activations, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs at least two dimensions, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config("network dimensions must be >= 1".into()));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::Dimension {
                context: "activation list",
                expected: dims.len() - 1,
                got: activations.len(),
            });
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (in_dim, out_dim) = (w[0], w[1]);
                let std = activation.init_variance(in_dim).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                Layer {
                    in_dim,
                    out_dim,
                    activation,
                    weights: (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect(),
                    bias: vec![0.0; out_dim],
                }
            })
            .collect();
        Ok(DenseNet { layers })
    }

    /// Builds a network from explicit layers, checking shapes and finiteness.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let net = DenseNet { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Config(format!("layer {k} has a zero dimension")));
            }
            if l.weights.len() != l.in_dim * l.out_dim {
                return Err(Error::Dimension {
                    context: "layer weights",
                    expected: l.in_dim * l.out_dim,
                    got: l.weights.len(),
                });
            }
            if l.bias.len() != l.out_dim {
                return Err(Error::Dimension {
                    context: "layer bias",
                    expected: l.out_dim,
                    got: l.bias.len(),
                });
            }
            if k > 0 && self.layers[k - 1].out_dim != l.in_dim {
                return Err(Error::Dimension {
                    context: "layer chaining",
                    expected: self.layers[k - 1].out_dim,
                    got: l.in_dim,
                });
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "layer {k} has non-finite parameters"
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    /// Mutable access to one parameter by its index in [`DenseNet::params`].
    pub fn param_mut(&mut self, mut k: usize) -> Option<&mut f64> {
        for l in &mut self.layers {
            let w = l.weights.len();
            let n = w + l.bias.len();
            if k < n {
                return Some(if k < w {
                    &mut l.weights[k]
                } else {
                    &mut l.bias[k - w]
                });
            }
            k -= n;
        }
        None
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension {
                context: "parameter vector",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().unwrap();
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite network input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(x)?;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
        };
        let mut current = x.to_vec();
        for l in &self.layers {
            let pre = affine(l, &current);
            let next = pre.iter().map(|&z| l.activation.apply(z)).collect();
            tape.inputs.push(std::mem::replace(&mut current, next));
            tape.pre_activations.push(pre);
        }
        Ok((current, tape))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut current = x.to_vec();
        for l in &self.layers {
            current = affine(l, &current)
                .into_iter()
                .map(|z| l.activation.apply(z))
                .collect();
        }
        Ok(current)
    }

    /// Sign of every pre-activation feeding a ReLU or SELU, i.e. which side
    /// of each kink the forward pass landed on.
    pub fn kink_pattern(&self, tape: &Tape, out: &mut Vec<bool>) {
        for (l, z) in self.layers.iter().zip(&tape.pre_activations) {
            if matches!(l.activation, Activation::Relu | Activation::Selu) {
                out.extend(z.iter().map(|&v| v > 0.0));
            }
        }
    }

    /// Gradients of `upstream . y` with respect to parameters and input.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<(GradientSet, Vec<f64>)> {
        let mut grads = GradientSet::zeros_like(self);
        let input_grad = self.backward_into(tape, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Like [`DenseNet::backward`] but adds the parameter gradients into `grads`.
    pub fn backward_into(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grads: &mut GradientSet,
    ) -> Result<Vec<f64>> {
        if tape.inputs.len() != self.layers.len()
            || tape
                .inputs
                .iter()
                .zip(&self.layers)
                .any(|(x, l)| x.len() != l.in_dim)
        {
            return Err(Error::Config("tape does not match network".into()));
        }
        if !grads.matches(self) {
            return Err(Error::Config("gradient set does not match network".into()));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension {
                context: "upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut delta_out = upstream.to_vec();
        for (k, l) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[k];
            let pre = &tape.pre_activations[k];
            let g = &mut grads.layers[k];
            let mut delta_in = vec![0.0; l.in_dim];
            for o in 0..l.out_dim {
                let d = delta_out[o] * l.activation.derivative(pre[o]);
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = o * l.in_dim;
                let w_row = &l.weights[row..row + l.in_dim];
                let g_row = &mut g.weights[row..row + l.in_dim];
                for i in 0..l.in_dim {
                    g_row[i] += d * input[i];
                    delta_in[i] += w_row[i] * d;
                }
            }
            delta_out = delta_in;
        }
        Ok(delta_out)
    }
}

#[inline]
fn affine(l: &Layer, x: &[f64]) -> Vec<f64> {
    (0..l.out_dim)
        .map(|o| {
            let row = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
            l.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer bound to one network. Moments are stored flat in [`DenseNet::params`] order.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, net: &DenseNet) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let n = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => net.param_count(),
        };
        Ok(OptimizerState {
            kind,
            lr,
            first: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Refuses (and leaves the net untouched) on non-finite gradients.
    pub fn step(&mut self, net: &mut DenseNet, grads: &GradientSet) -> Result<()> {
        if !grads.matches(net) {
            return Err(Error::Config("gradient set does not match network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Numerical("non-finite gradient, step refused".into()));
        }
        if self.kind == OptimizerKind::Adam && self.first.len() != net.param_count() {
            return Err(Error::Config(
                "optimizer state does not match network".into(),
            ));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
                    let params = l.weights.iter_mut().chain(l.bias.iter_mut());
                    for (p, gv) in params.zip(g.weights.iter().chain(&g.bias)) {
                        *p -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let mut k = 0;
                for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
                    let params = l.weights.iter_mut().chain(l.bias.iter_mut());
                    for (p, &gv) in params.zip(g.weights.iter().chain(&g.bias)) {
                        let m = &mut self.first[k];
                        let v = &mut self.second[k];
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gv;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        k += 1;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn optimizer_step(
    net: &mut DenseNet,
    grads: &GradientSet,
    state: &mut OptimizerState,
) -> Result<()> {
    state.step(net, grads)
}

/// Central finite-difference gradient of `f` at `p`.
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = p.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let plus = f(&probe);
        probe[k] = orig - h;
        let minus = f(&probe);
        probe[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!(
                "objective is non-finite near coordinate {k}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(n: usize, activation: Activation) -> Layer {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Layer {
            in_dim: n,
            out_dim: n,
            activation,
            weights,
            bias: vec![0.0; n],
        }
    }

    #[test]
    fn init_shapes_and_zero_bias() {
        let net = init_net(&[4, 3, 1], Activation::Relu, 1).unwrap();
        assert_eq!(net.layers().len(), 2);
        assert_eq!(net.layers()[0].weights.len(), 12);
        assert_eq!(net.layers()[0].bias, vec![0.0; 3]);
        assert_eq!(net.layers()[1].weights.len(), 3);
        assert_eq!(net.layers()[1].bias, vec![0.0]);
        assert_eq!(net.dims(), vec![4, 3, 1]);
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_net(&[], Activation::Relu, 0).is_err());
        assert!(init_net(&[3], Activation::Relu, 0).is_err());
        assert!(init_net(&[3, 0], Activation::Relu, 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_net(&[5, 7, 2], Activation::Tanh, 42).unwrap();
        let b = init_net(&[5, 7, 2], Activation::Tanh, 42).unwrap();
        let c = init_net(&[5, 7, 2], Activation::Tanh, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn selu_init_variance() {
        let net = init_net(&[32, 128], Activation::Selu, 9).unwrap();
        let w = &net.layers()[0].weights;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 1.0 / 32.0;
        assert!((var - target).abs() / target < 0.2, "variance {var}");
    }

    #[test]
    fn identity_and_relu_forward() {
        let net = DenseNet::from_layers(vec![identity_layer(3, Activation::Identity)]).unwrap();
        let (y, _) = net.forward(&[1.5, -2.0, 0.25]).unwrap();
        assert_eq!(y, vec![1.5, -2.0, 0.25]);

        let net = DenseNet::from_layers(vec![identity_layer(2, Activation::Relu)]).unwrap();
        assert_eq!(net.predict(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn selu_closed_form() {
        assert_eq!(Activation::Selu.apply(0.0), 0.0);
        let floor = Activation::Selu.apply(-50.0);
        assert!((floor + 1.758_099_340_847_376_6).abs() < 1e-12, "{floor}");
        assert!((Activation::Selu.apply(1.0) - SELU_SCALE).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = init_net(&[3, 2], Activation::Relu, 0).unwrap();
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            net.forward(&[1.0, f64::NAN, 0.0]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = init_net(&[4, 6, 3], Activation::Tanh, 5).unwrap();
        let (_, tape) = net.forward(&[0.1, -0.3, 0.7, 1.1]).unwrap();
        let (g, ig) = net.backward(&tape, &[0.0; 3]).unwrap();
        assert!(g.is_zero());
        assert!(ig.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_input_grad_is_transpose_product() {
        let net = init_net(&[3, 2], Activation::Identity, 11).unwrap();
        let (_, tape) = net.forward(&[0.5, 0.2, -0.4]).unwrap();
        let up = [1.5, -0.5];
        let (_, ig) = net.backward(&tape, &up).unwrap();
        let l = &net.layers()[0];
        for (i, g) in ig.iter().enumerate() {
            assert_eq!(*g, l.weight(0, i) * up[0] + l.weight(1, i) * up[1]);
        }
    }

    #[test]
    fn backward_rejects_mismatched_tape() {
        let a = init_net(&[3, 2], Activation::Relu, 0).unwrap();
        let b = init_net(&[4, 2], Activation::Relu, 0).unwrap();
        let (_, tape) = b.forward(&[0.0; 4]).unwrap();
        assert!(a.backward(&tape, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn sgd_step() {
        let mut net = DenseNet::from_layers(vec![Layer {
            in_dim: 1,
            out_dim: 1,
            activation: Activation::Identity,
            weights: vec![1.0],
            bias: vec![0.0],
        }])
        .unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, &net).unwrap();
        let mut g = GradientSet::zeros_like(&net);
        g.layers[0].weights[0] = 2.0;
        opt.step(&mut net, &g).unwrap();
        assert!((net.layers()[0].weights[0] - 0.8).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for &gv in &[1e-3, 0.5, 250.0, -7.0] {
            let mut net = init_net(&[1, 1], Activation::Identity, 3).unwrap();
            let before = net.params();
            let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.01, &net).unwrap();
            let mut g = GradientSet::zeros_like(&net);
            g.layers[0].weights[0] = gv;
            opt.step(&mut net, &g).unwrap();
            let delta = net.params()[0] - before[0];
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
            let expected = -0.01 * gv / (gv.abs() + ADAM_EPS);
            assert!(
                (delta - expected).abs() < 1e-15,
                "g={gv}: {delta} vs {expected}"
            );
            assert_eq!(net.params()[1], before[1]);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut net = init_net(&[3, 4, 2], Activation::Selu, 8).unwrap();
            let before = net.clone();
            let mut opt = OptimizerState::new(kind, 0.05, &net).unwrap();
            let g = GradientSet::zeros_like(&net);
            for _ in 0..3 {
                opt.step(&mut net, &g).unwrap();
            }
            assert_eq!(net, before);
        }
    }

    #[test]
    fn non_finite_gradient_refused() {
        let mut net = init_net(&[2, 2], Activation::Relu, 1).unwrap();
        let before = net.clone();
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.01, &net).unwrap();
        let mut g = GradientSet::zeros_like(&net);
        g.layers[0].bias[1] = f64::INFINITY;
        assert!(matches!(opt.step(&mut net, &g), Err(Error::Numerical(_))));
        assert_eq!(net, before);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);

        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);

        let p = [0.3, -1.2, 2.0, 0.0];
        let g = finite_diff_grad(|p| p.iter().map(|v| v.exp()).sum(), &p, 1e-5).unwrap();
        for (gk, pk) in g.iter().zip(&p) {
            assert!((gk - pk.exp()).abs() / pk.exp() < 1e-6);
        }

        assert!(finite_diff_grad(|p| p[0].ln(), &[0.0], 1e-5).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut net = init_net(&[3, 5, 2], Activation::Relu, 4).unwrap();
        let mut p = net.params();
        assert_eq!(p.len(), net.param_count());
        p.iter_mut().for_each(|v| *v += 1.0);
        net.set_params(&p).unwrap();
        assert_eq!(net.params(), p);
        assert!(net.set_params(&p[1..]).is_err());
    }
}
