//! Small fully connected Q-networks with hand-derived backpropagation.
//!
//! Hidden layers use ReLU. The output layer is linear and is laid out as
//! one block per action: a single scalar for regression heads, or `m`
//! logits for categorical heads. Batches are `(examples, features)`.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{ensure_finite, Error, Result};
use crate::support::ProbVector;

const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// One scalar Q-value per action.
    Scalar,
    /// `atoms` logits per action, read through a softmax.
    Categorical { atoms: usize },
}

impl Head {
    pub fn width(&self) -> usize {
        match self {
            Head::Scalar => 1,
            Head::Categorical { atoms } => *atoms,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(inputs, outputs)`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Dense>,
    head: Head,
    num_actions: usize,
}

/// Activations recorded during a forward pass: the input, each hidden
/// layer after ReLU, and the raw output.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("trace always holds the input")
    }

    /// Last hidden layer; the input if there are no hidden layers.
    pub fn penultimate(&self) -> &Array2<f64> {
        &self.activations[self.activations.len() - 2]
    }
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter());
        out.extend(l.bias.iter());
    }
    out
}

impl Network {
    /// He-uniform initialised network: weights drawn from
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        num_actions: usize,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(input_dim, hidden, num_actions, head)?;
        for layer in &mut net.layers {
            let limit = (6.0 / layer.weights.nrows() as f64).sqrt();
            layer
                .weights
                .mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        Ok(net)
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], num_actions: usize, head: Head) -> Result<Self> {
        if input_dim == 0 || num_actions == 0 || hidden.contains(&0) || head.width() == 0 {
            return Err(Error::InvalidParameter {
                name: "layer_dims",
                reason: "all dimensions must be positive".into(),
            });
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_actions * head.width());
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weights: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self {
            layers,
            head,
            num_actions,
        })
    }

    /// Build from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<Dense>, num_actions: usize, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter {
                name: "layers",
                reason: "need at least one layer".into(),
            });
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.ncols() {
                return Err(Error::Shape {
                    expected: format!("layer {i} bias of length {}", l.weights.ncols()),
                    got: l.bias.len().to_string(),
                });
            }
            if i > 0 && layers[i - 1].weights.ncols() != l.weights.nrows() {
                return Err(Error::Shape {
                    expected: format!("layer {i} fan-in {}", layers[i - 1].weights.ncols()),
                    got: l.weights.nrows().to_string(),
                });
            }
        }
        let out = layers.last().unwrap().weights.ncols();
        if out != num_actions * head.width() {
            return Err(Error::Shape {
                expected: format!("{} outputs", num_actions * head.width()),
                got: out.to_string(),
            });
        }
        Ok(Self {
            layers,
            head,
            num_actions,
        })
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weights.nrows()];
        dims.extend(self.layers.iter().map(|l| l.weights.ncols()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.ncols()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape {
                expected: format!("{} parameters", self.num_params()),
                got: flat.len().to_string(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.params_flat() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: format!("{} input features", self.input_dim()),
                got: x.ncols().to_string(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    /// Forward pass keeping every activation for a later backward pass.
    pub fn trace(&self, x: ArrayView2<f64>) -> Result<Trace> {
        self.check_batch(&x)?;
        Ok(self.trace_unchecked(x))
    }

    pub(crate) fn trace_unchecked(&self, x: ArrayView2<f64>) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = activations[i].dot(&layer.weights);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(z);
        }
        Trace { activations }
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        a
    }

    /// Per-action outputs for one state.
    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, state.len()), state).expect("row view");
        let out = self.forward_batch(x)?;
        ensure_finite(out.as_slice().unwrap(), "network output")?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Backpropagate `upstream = dL/d(output)` through a recorded trace.
    pub fn backward(&self, trace: &Trace, upstream: ArrayView2<f64>) -> Result<Gradients> {
        let out = trace.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Shape {
                expected: format!("{:?}", out.dim()),
                got: format!("{:?}", upstream.dim()),
            });
        }
        let mut delta = upstream.to_owned();
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let input = &trace.activations[i];
            let dw = input.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            grads.push(Dense {
                weights: dw,
                bias: db,
            });
            if i > 0 {
                let mut prev = delta.dot(&self.layers[i].weights.t());
                // ReLU subgradient is 0 at exactly 0.
                Zip::from(&mut prev)
                    .and(input)
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0
                        }
                    });
                delta = prev;
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Single-example convenience wrapper around [`Network::backward`].
    pub fn backward_single(&self, state: &[f64], upstream: &[f64]) -> Result<Gradients> {
        let x = ArrayView2::from_shape((1, state.len()), state).expect("row view");
        let trace = self.trace(x)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).map_err(|_| Error::Shape {
            expected: format!("{} upstream values", self.output_dim()),
            got: upstream.len().to_string(),
        })?;
        self.backward(&trace, up)
    }

    /// Activations of the last hidden layer for a batch of states.
    pub fn penultimate_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.layers.len() < 2 {
            return Err(Error::InvalidParameter {
                name: "layer_dims",
                reason: "network has no hidden layer".into(),
            });
        }
        self.check_batch(&x)?;
        let mut a = x.to_owned();
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut z = a.dot(&layer.weights);
            z += &layer.bias;
            z.mapv_inplace(|v| v.max(0.0));
            a = z;
        }
        Ok(a)
    }

    pub fn penultimate_features(&self, state: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, state.len()), state).expect("row view");
        Ok(self.penultimate_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Write the binary parameter record: a version byte, then little-endian
    /// `u64` header fields (head kind, atoms, actions, layer count, dims),
    /// then every parameter as a little-endian `f64`.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&[FORMAT_VERSION])?;
        let (kind, atoms) = match self.head {
            Head::Scalar => (0u64, 1u64),
            Head::Categorical { atoms } => (1, atoms as u64),
        };
        let dims = self.layer_dims();
        let mut header = vec![kind, atoms, self.num_actions as u64, dims.len() as u64];
        header.extend(dims.iter().map(|&d| d as u64));
        for v in header {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.params_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: "<network>".into(),
            reason: reason.into(),
        };
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {}", version[0])));
        }
        let read_u64 = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let kind = read_u64(&mut r)?;
        let atoms = read_u64(&mut r)? as usize;
        let num_actions = read_u64(&mut r)? as usize;
        let n_dims = read_u64(&mut r)? as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(bad("implausible layer count"));
        }
        let dims = (0..n_dims)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let head = match kind {
            0 => Head::Scalar,
            1 => Head::Categorical { atoms },
            k => return Err(bad(&format!("unknown head kind {k}"))),
        };
        let mut net = Network::zeros(dims[0], &dims[1..n_dims - 1], num_actions, head)?;
        if net.layer_dims() != dims {
            return Err(bad("layer dims inconsistent with head"));
        }
        let mut flat = vec![0.0; net.num_params()];
        let mut b = [0u8; 8];
        for v in flat.iter_mut() {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        net.set_params_flat(&flat)?;
        Ok(net)
    }
}

// exp of a max-shifted logit. Shifts below -500 lead to subnormals further
// down the backward pass, which are slow; they are flushed to zero.
#[inline]
fn shifted_exp(d: f64) -> f64 {
    if d < -500.0 {
        0.0
    } else {
        d.exp()
    }
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| shifted_exp(l - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy `-sum_i target_i log softmax(logits)_i` and its gradient
/// with respect to the logits, `softmax(logits) - target`.
pub fn ce_loss_and_grad(logits: &[f64], target: &ProbVector) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() {
        return Err(Error::Shape {
            expected: format!("{} logits", target.len()),
            got: logits.len().to_string(),
        });
    }
    ensure_finite(logits, "logits")?;
    Ok(ce_raw(logits, target.probs()))
}

pub(crate) fn ce_raw(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut grad: Vec<f64> = logits.iter().map(|l| shifted_exp(l - max)).collect();
    let total: f64 = grad.iter().sum();
    let lse = max + total.ln();
    let mut loss = 0.0;
    for ((g, &l), &t) in grad.iter_mut().zip(logits).zip(target) {
        if t > 0.0 {
            loss -= t * (l - lse);
        }
        *g = *g / total - t;
    }
    (loss, grad)
}

/// Writes `scale * (softmax(logits) - target)` into `out` without
/// computing the loss.
pub(crate) fn ce_grad_into(logits: &[f64], target: &[f64], scale: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = shifted_exp(l - max);
        total += *o;
    }
    let inv = 1.0 / total;
    for (o, &t) in out.iter_mut().zip(target) {
        *o = scale * (*o * inv - t);
    }
}

/// Squared error `(pred - target)^2` and its derivative in `pred`.
pub fn mse_loss_and_grad(pred: f64, target: f64) -> Result<(f64, f64)> {
    if !pred.is_finite() || !target.is_finite() {
        return Err(Error::NonFinite("MSE input"));
    }
    let diff = pred - target;
    Ok((diff * diff, 2.0 * diff))
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Dense>,
    second: Vec<Dense>,
    step: u64,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl AdamState {
    pub fn new(net: &Network, learning_rate: f64, epsilon: f64) -> Self {
        let zeros = Gradients::zeros_like(net).layers;
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            learning_rate,
            epsilon,
            beta1: 0.9,
            beta2: 0.999,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to `net` in place.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(Error::Shape {
                expected: format!("{} gradient layers", net.layers.len()),
                got: grads.layers.len().to_string(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients"));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.learning_rate, self.epsilon);
        // Moments decaying under long runs of near-zero gradient are
        // flushed before they reach the subnormal range.
        let flush = |x: f64| if x.abs() < 1e-150 { 0.0 } else { x };
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            let g = flush(g);
            *m = flush(b1 * *m + (1.0 - b1) * g);
            *v = flush(b2 * *v + (1.0 - b2) * g * g);
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            Zip::from(&mut layer.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .and(&g.weights)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        if !net.all_finite() {
            return Err(Error::NonFinite("parameters after Adam step"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{central_difference, relative_error};
    use crate::support::Support;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_categorical_net_is_uniform() {
        let s = Support::new(-10.0, 10.0, 51).unwrap();
        let net = Network::zeros(3, &[4], 2, Head::Categorical { atoms: 51 }).unwrap();
        let out = net.forward(&[0.3, -1.0, 2.0]).unwrap();
        for a in 0..2 {
            let p = softmax(&out[a * 51..(a + 1) * 51]);
            assert!(p.iter().all(|&x| (x - 1.0 / 51.0).abs() < 1e-15));
            let q = s.mean_of(&p);
            assert!(q.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scalar_net_returns_bias() {
        let mut net = Network::zeros(2, &[3], 2, Head::Scalar).unwrap();
        let last = net.layers.len() - 1;
        net.layers[last].bias = array![1.5, -0.5];
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![1.5, -0.5]);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = Network::zeros(2, &[3], 2, Head::Scalar).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.forward(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let mut r = rng(1);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..31).map(|_| r.random_range(-30.0..30.0)).collect();
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let c = r.random_range(-1e3..1e3);
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ce_matched_uniform() {
        let s = Support::new(0.0, 1.0, 8).unwrap();
        let (loss, grad) = ce_loss_and_grad(&[0.7; 8], &s.uniform()).unwrap();
        assert!((loss - (8f64).ln()).abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn ce_confident_correct_is_near_zero() {
        let s = Support::new(0.0, 1.0, 4).unwrap();
        let (loss, _) = ce_loss_and_grad(&[0.0, 200.0, 0.0, 0.0], &s.one_hot(1)).unwrap();
        assert!(loss < 1e-12);
        assert!(ce_loss_and_grad(&[0.0, f64::NAN, 0.0, 0.0], &s.one_hot(1)).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let s = Support::new(-1.0, 1.0, 9).unwrap();
        let mut r = rng(4);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..9).map(|_| r.random_range(-3.0..3.0)).collect();
            let raw: Vec<f64> = (0..9).map(|_| r.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            let target = ProbVector::new(raw.iter().map(|x| x / total).collect(), &s).unwrap();
            let (loss, grad) = ce_loss_and_grad(&logits, &target).unwrap();
            assert!(loss >= target.entropy() - 1e-12);
            assert!(grad.iter().sum::<f64>().abs() < 1e-12);
            let fd = central_difference(
                &mut |l: &[f64]| ce_loss_and_grad(l, &target).unwrap().0,
                &logits,
                1e-6,
            );
            for (a, b) in grad.iter().zip(&fd) {
                assert!(relative_error(*a, *b) < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss_and_grad(3.0, 3.0).unwrap(), (0.0, 0.0));
        assert_eq!(mse_loss_and_grad(1.0, 0.0).unwrap(), (1.0, 2.0));
        assert!(mse_loss_and_grad(f64::INFINITY, 0.0).is_err());
        let mut r = rng(6);
        for _ in 0..100 {
            let (p, t) = (r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
            let (_, g) = mse_loss_and_grad(p, t).unwrap();
            let fd = central_difference(&mut |x: &[f64]| (x[0] - t).powi(2), &[p], 1e-6);
            assert!((g - fd[0]).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Network::new(3, &[5, 4], 2, Head::Scalar, &mut rng(2)).unwrap();
        let g = net.backward_single(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_layer_gradient_is_outer_product() {
        let net = Network::new(3, &[], 2, Head::Scalar, &mut rng(3)).unwrap();
        let x = [0.5, -1.0, 2.0];
        let up = [0.25, -3.0];
        let g = net.backward_single(&x, &up).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(g.layers[0].weights[[i, j]], x[i] * up[j]);
            }
        }
        assert_eq!(g.layers[0].bias.to_vec(), up.to_vec());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng(10);
        for _ in 0..20 {
            let mut net = Network::new(4, &[6, 5], 3, Head::Scalar, &mut r).unwrap();
            // random biases keep pre-activations away from the ReLU kink at 0
            let theta: Vec<f64> = (0..net.num_params()).map(|_| r.random_range(-1.0..1.0)).collect();
            net.set_params_flat(&theta).unwrap();
            let x: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            // loss = sum_k w_k * out_k^2 / 2, upstream = w_k * out_k
            let out = net.forward(&x).unwrap();
            let up: Vec<f64> = out.iter().zip(&w).map(|(o, w)| o * w).collect();
            let g = net.backward_single(&x, &up).unwrap().flat();
            let theta = net.params_flat();
            let fd = central_difference(
                &mut |p: &[f64]| {
                    net.set_params_flat(p).unwrap();
                    let o = net.forward(&x).unwrap();
                    o.iter().zip(&w).map(|(o, w)| 0.5 * w * o * o).sum()
                },
                &theta,
                1e-6,
            );
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() / a.abs().max(b.abs()).max(1e-5) < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn adam_zero_gradient_from_fresh_state_is_noop() {
        let mut net = Network::new(2, &[3], 2, Head::Scalar, &mut rng(5)).unwrap();
        let before = net.clone();
        let mut opt = AdamState::new(&net, 1e-3, 1e-8);
        let zero = Gradients::zeros_like(&net);
        opt.step(&mut net, &zero).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut net = Network::zeros(1, &[], 1, Head::Scalar).unwrap();
        let mut opt = AdamState::new(&net, 0.01, 1e-8);
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[[0, 0]] = 3.0;
        g.layers[0].bias[0] = -0.5;
        opt.step(&mut net, &g).unwrap();
        assert!((net.layers[0].weights[[0, 0]] + 0.01).abs() < 1e-9);
        assert!((net.layers[0].bias[0] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let mut net = Network::zeros(1, &[], 1, Head::Scalar).unwrap();
        let lr = 1e-3;
        let mut opt = AdamState::new(&net, lr, 1e-8);
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].bias[0] = 0.7;
        let mut prev = 0.0;
        for _ in 0..5000 {
            opt.step(&mut net, &g).unwrap();
            let now = net.layers[0].bias[0];
            let delta = prev - now;
            assert!((delta - lr).abs() < 1e-6);
            prev = now;
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut net = Network::zeros(1, &[], 1, Head::Scalar).unwrap();
        let mut opt = AdamState::new(&net, 1e-3, 1e-8);
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].bias[0] = f64::NAN;
        assert!(opt.step(&mut net, &g).is_err());
    }

    #[test]
    fn penultimate_features() {
        // identity hidden layer
        let mut net = Network::zeros(3, &[3], 1, Head::Scalar).unwrap();
        net.layers[0].weights = Array2::eye(3);
        assert_eq!(
            net.penultimate_features(&[1.0, -2.0, 0.5]).unwrap(),
            vec![1.0, 0.0, 0.5]
        );
        let zero = Network::zeros(3, &[4], 1, Head::Scalar).unwrap();
        assert_eq!(zero.penultimate_features(&[0.0; 3]).unwrap(), vec![0.0; 4]);

        let mut r = rng(12);
        let net = Network::new(5, &[7, 6], 2, Head::Scalar, &mut r).unwrap();
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let feats = net.penultimate_features(&x).unwrap();
        let mut a = x.clone();
        for layer in &net.layers()[..2] {
            let mut z = vec![0.0; layer.weights.ncols()];
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = layer.bias[j];
                for (i, ai) in a.iter().enumerate() {
                    *zj += ai * layer.weights[[i, j]];
                }
                *zj = zj.max(0.0);
            }
            a = z;
        }
        for (f, e) in feats.iter().zip(&a) {
            assert!((f - e).abs() < 1e-12);
        }
        let no_hidden = Network::zeros(3, &[], 1, Head::Scalar).unwrap();
        assert!(no_hidden.penultimate_features(&[0.0; 3]).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let net = Network::new(4, &[8, 6], 3, Head::Categorical { atoms: 11 }, &mut rng(7)).unwrap();
        let mut buf = Vec::new();
        net.save(&mut buf).unwrap();
        assert_eq!(buf[0], 1);
        let back = Network::load(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.param_hash(), net.param_hash());
        buf[0] = 9;
        assert!(Network::load(buf.as_slice()).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        let a = Network::new(4, &[8], 2, Head::Scalar, &mut rng(99)).unwrap();
        let b = Network::new(4, &[8], 2, Head::Scalar, &mut rng(99)).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
    }
}
