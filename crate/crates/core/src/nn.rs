//! Minimal dense feed-forward classifier.
//!
//! All parameters live in one flat [`ParamVector`]. Layer `l` occupies a
//! contiguous slice holding its row-major `(out, in)` weight matrix followed by
//! its `out` biases. Gradients share the same layout, so clipping, noising and
//! projection operate on plain vectors.

use std::ops::{Index, IndexMut};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Flat vector of model parameters or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter_mut()
            .zip(&other.0)
            .for_each(|(s, o)| *s += a * o);
    }

    pub fn add_assign(&mut self, other: &ParamVector) {
        self.axpy(1.0, other);
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// One labelled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

impl Example {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Example { x, y }
    }
}

/// Hidden-layer nonlinearity. The output layer is always softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    #[default]
    UniformFanIn,
    Zeros,
}

/// Number of parameters of a dense net with the given layer widths.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    activation: Activation,
    params: ParamVector,
}

impl DenseNet {
    /// Builds a network with layer widths `dims = [d, hidden.., C]`.
    pub fn new(dims: &[usize], activation: Activation, init: Init, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("a network needs at least input and output widths"));
        }
        if dims.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        let mut params = ParamVector::zeros(param_count(dims));
        if init == Init::UniformFanIn {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut offset = 0;
            for w in dims.windows(2) {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit)
                    .map_err(|e| Error::config(e.to_string()))?;
                for v in &mut params.as_mut_slice()[offset..offset + fan_in * fan_out] {
                    *v = dist.sample(&mut rng);
                }
                offset += fan_in * fan_out + fan_out;
            }
        }
        Ok(DenseNet {
            dims: dims.to_vec(),
            activation,
            params,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::new(dims, Activation::Relu, Init::Zeros, 0)
    }

    /// Wraps an existing parameter vector.
    pub fn from_params(dims: &[usize], activation: Activation, params: ParamVector) -> Result<Self> {
        let mut net = Self::new(dims, activation, Init::Zeros, 0)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("dims validated non-empty")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::input(format!(
                "parameter vector has length {}, model expects {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// `theta <- theta - lr * step`
    pub fn apply_update(&mut self, lr: f64, step: &ParamVector) {
        self.params.axpy(-lr, step);
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::input(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("input features must be finite"));
        }
        Ok(())
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        self.check_input(&ex.x)?;
        if ex.y >= self.num_classes() {
            return Err(Error::input(format!(
                "label {} out of range for {} classes",
                ex.y,
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Runs all layers, keeping pre-activations and activations per layer.
    /// `acts[0]` is the input; the last entry of `pre` holds the logits.
    fn trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n_layers = self.dims.len() - 1;
        let theta = self.params.as_slice();
        let mut acts = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        acts.push(x.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = &theta[offset..offset + fan_in * fan_out];
            let b = &theta[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let input = &acts[l];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    b[o] + row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>()
                })
                .collect();
            if l + 1 < n_layers {
                acts.push(z.iter().map(|&v| self.activation.apply(v)).collect());
            }
            pre.push(z);
            offset += fan_in * fan_out + fan_out;
        }
        (pre, acts)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (mut pre, _) = self.trace(x);
        Ok(pre.pop().expect("at least one layer"))
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.logits(x)?;
        let lse = log_sum_exp(&z);
        Ok(z.iter().map(|v| (v - lse).exp()).collect())
    }

    /// Predicted class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let z = self.logits(x)?;
        Ok(argmax(&z))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::input("loss of an empty batch"));
        }
        let mut total = 0.0;
        for ex in batch {
            self.check_example(ex)?;
            let (mut pre, _) = self.trace(&ex.x);
            let z = pre.pop().expect("at least one layer");
            total += log_sum_exp(&z) - z[ex.y];
        }
        Ok(total / batch.len() as f64)
    }

    /// Adds `scale * d loss(ex) / d theta` into `out`.
    fn backprop_into(&self, ex: &Example, scale: f64, out: &mut [f64]) {
        let n_layers = self.dims.len() - 1;
        let theta = self.params.as_slice();
        let (pre, acts) = self.trace(&ex.x);

        let logits = &pre[n_layers - 1];
        let lse = log_sum_exp(logits);
        let mut delta: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
        delta[ex.y] -= 1.0;

        let mut offsets = Vec::with_capacity(n_layers);
        let mut acc = 0;
        for w in self.dims.windows(2) {
            offsets.push(acc);
            acc += w[0] * w[1] + w[1];
        }

        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let input = &acts[l];
            {
                let (gw, gb) = out[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    let d = scale * delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                    row.iter_mut().zip(input).for_each(|(g, xi)| *g += d * xi);
                }
            }
            if l > 0 {
                let w = &theta[off..off + fan_in * fan_out];
                let z_prev = &pre[l - 1];
                let a_prev = &acts[l];
                let mut next = vec![0.0; fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    next.iter_mut().zip(row).for_each(|(n, wi)| *n += wi * d);
                }
                for i in 0..fan_in {
                    next[i] *= self.activation.derivative(z_prev[i], a_prev[i]);
                }
                delta = next;
            }
        }
    }

    /// Exact gradient of [`DenseNet::loss`] (the batch mean) w.r.t. all parameters.
    pub fn grad(&self, batch: &[Example]) -> Result<ParamVector> {
        if batch.is_empty() {
            return Err(Error::input("gradient of an empty batch"));
        }
        for ex in batch {
            self.check_example(ex)?;
        }
        let mut out = vec![0.0; self.num_params()];
        let scale = 1.0 / batch.len() as f64;
        for ex in batch {
            self.backprop_into(ex, scale, &mut out);
        }
        Ok(ParamVector(out))
    }

    /// One gradient per example, in batch order.
    pub fn per_example_grads(&self, batch: &[Example]) -> Result<Vec<ParamVector>> {
        if batch.is_empty() {
            return Err(Error::input("per-example gradients of an empty batch"));
        }
        for ex in batch {
            self.check_example(ex)?;
        }
        Ok(batch
            .par_iter()
            .map(|ex| {
                let mut out = vec![0.0; self.num_params()];
                self.backprop_into(ex, 1.0, &mut out);
                ParamVector(out)
            })
            .collect())
    }

    /// Fraction of examples whose argmax prediction equals the label.
    pub fn accuracy(&self, data: &[Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::input("accuracy of an empty dataset"));
        }
        let hits = data
            .par_iter()
            .map(|ex| -> Result<usize> {
                self.check_example(ex)?;
                Ok(usize::from(self.predict(&ex.x)? == ex.y))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(hits as f64 / data.len() as f64)
    }
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(net: &DenseNet, n: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = (0..net.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                Example::new(x, rng.random_range(0..net.num_classes()))
            })
            .collect()
    }

    /// Straight-line forward pass for a 4-2-3 net, written without loops over layers.
    fn forward_423_by_hand(theta: &[f64], x: &[f64]) -> Vec<f64> {
        // layer 1: W1 (2x4) at 0..8, b1 at 8..10
        let h0 = (theta[0] * x[0] + theta[1] * x[1] + theta[2] * x[2] + theta[3] * x[3] + theta[8]).max(0.0);
        let h1 = (theta[4] * x[0] + theta[5] * x[1] + theta[6] * x[2] + theta[7] * x[3] + theta[9]).max(0.0);
        // layer 2: W2 (3x2) at 10..16, b2 at 16..19
        let z0 = theta[10] * h0 + theta[11] * h1 + theta[16];
        let z1 = theta[12] * h0 + theta[13] * h1 + theta[17];
        let z2 = theta[14] * h0 + theta[15] * h1 + theta[18];
        let (e0, e1, e2) = (z0.exp(), z1.exp(), z2.exp());
        let s = e0 + e1 + e2;
        vec![e0 / s, e1 / s, e2 / s]
    }

    #[test]
    fn param_count_matches_layout() {
        assert_eq!(param_count(&[4, 2, 3]), 4 * 2 + 2 + 2 * 3 + 3);
        let net = DenseNet::new(&[16, 8, 4], Activation::Relu, Init::UniformFanIn, 1).unwrap();
        assert_eq!(net.num_params(), 16 * 8 + 8 + 8 * 4 + 4);
    }

    #[test]
    fn init_respects_fan_in_bound_and_zero_biases() {
        let net = DenseNet::new(&[9, 4, 2], Activation::Relu, Init::UniformFanIn, 3).unwrap();
        let p = net.params().as_slice();
        assert!(p[..36].iter().all(|v| v.abs() <= 1.0 / 3.0));
        assert!(p[36..40].iter().all(|&v| v == 0.0));
        assert!(p[40..48].iter().all(|v| v.abs() <= 0.5));
        assert!(p[48..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_net_is_uniform() {
        let net = DenseNet::zeros(&[5, 7, 4]).unwrap();
        let p = net.forward(&[0.3, -1.0, 2.0, 0.0, 9.0]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logit_dominates() {
        // single layer 3 -> 3 with identity weights, large bias on class 0
        let mut theta = vec![0.0; param_count(&[3, 3])];
        theta[0] = 1.0;
        theta[4] = 1.0;
        theta[8] = 1.0;
        theta[9] = 50.0;
        let net = DenseNet::from_params(&[3, 3], Activation::Relu, theta.into()).unwrap();
        let p = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert!(p[0] > 0.99);
    }

    #[test]
    fn forward_matches_hand_evaluation() {
        let net = DenseNet::new(&[4, 2, 3], Activation::Relu, Init::UniformFanIn, 42).unwrap();
        // bias the hidden units so at least one is active regardless of sign
        let mut theta = net.params().clone();
        theta[8] = 0.3;
        theta[9] = -0.05;
        theta[16] = 0.1;
        let net = DenseNet::from_params(&[4, 2, 3], Activation::Relu, theta.clone()).unwrap();
        for x in [[0.5, -0.2, 0.9, 0.1], [1.0, 1.0, -1.0, 0.0], [-0.7, 0.3, 0.2, 0.8]] {
            let got = net.forward(&x).unwrap();
            let want = forward_423_by_hand(theta.as_slice(), &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-14, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn forward_rejects_bad_dimension() {
        let net = DenseNet::zeros(&[3, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Input(_))));
    }

    #[test]
    fn loss_examples() {
        // uniform prediction over 10 classes
        let net = DenseNet::zeros(&[2, 10]).unwrap();
        let batch = vec![Example::new(vec![0.5, 0.5], 3)];
        assert!((net.loss(&batch).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(net.loss(&[]), Err(Error::Input(_))));

        // two examples with known true-class probabilities: logits (ln 3, 0) -> p = 3/4
        let mut theta = vec![0.0; param_count(&[1, 2])];
        theta[2] = 3f64.ln();
        let net = DenseNet::from_params(&[1, 2], Activation::Relu, theta.into()).unwrap();
        let batch = vec![Example::new(vec![0.0], 0), Example::new(vec![0.0], 1)];
        let (p1, p2): (f64, f64) = (0.75, 0.25);
        let want = -(p1.ln() + p2.ln()) / 2.0;
        assert!((net.loss(&batch).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let mut theta = vec![0.0; param_count(&[1, 3])];
        theta[3] = 800.0;
        let net = DenseNet::from_params(&[1, 3], Activation::Relu, theta.into()).unwrap();
        let batch = vec![Example::new(vec![0.2], 0)];
        assert_eq!(net.loss(&batch).unwrap(), 0.0);
        assert!(net.grad(&batch).unwrap().norm() < 1e-6);
    }

    #[test]
    fn grad_is_mean_of_singletons() {
        let net = DenseNet::new(&[6, 5, 3], Activation::Relu, Init::UniformFanIn, 7).unwrap();
        let batch = random_batch(&net, 2, 9);
        let g = net.grad(&batch).unwrap();
        let mut avg = net.grad(&batch[..1]).unwrap();
        avg.add_assign(&net.grad(&batch[1..]).unwrap());
        avg.scale(0.5);
        for (a, b) in g.iter().zip(avg.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn per_example_grads_consistency() {
        let net = DenseNet::new(&[6, 5, 3], Activation::Tanh, Init::UniformFanIn, 7).unwrap();
        let batch = random_batch(&net, 8, 11);
        let per = net.per_example_grads(&batch).unwrap();
        assert_eq!(per.len(), 8);
        let mut mean = ParamVector::zeros(net.num_params());
        for g in &per {
            mean.axpy(1.0 / 8.0, g);
        }
        let g = net.grad(&batch).unwrap();
        for (a, b) in g.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-10);
        }

        let single = net.per_example_grads(&batch[..1]).unwrap();
        assert_eq!(single[0], net.grad(&batch[..1]).unwrap());

        let dup = vec![batch[2].clone(), batch[2].clone()];
        let per = net.per_example_grads(&dup).unwrap();
        assert_eq!(per[0], per[1]);
        assert!(net.per_example_grads(&[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        // logits = x, so the argmax of a one-hot x is its hot index
        let mut theta = vec![0.0; param_count(&[3, 3])];
        theta[0] = 1.0;
        theta[4] = 1.0;
        theta[8] = 1.0;
        let net = DenseNet::from_params(&[3, 3], Activation::Relu, theta.into()).unwrap();
        let hot = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        let correct: Vec<_> = (0..3).map(|c| Example::new(hot(c), c)).collect();
        assert_eq!(net.accuracy(&correct).unwrap(), 1.0);
        let half = vec![
            Example::new(hot(0), 0),
            Example::new(hot(1), 1),
            Example::new(hot(0), 2),
            Example::new(hot(2), 1),
        ];
        assert_eq!(net.accuracy(&half).unwrap(), 0.5);

        // zero net predicts class 0 everywhere; labels never 0 -> exactly 0
        let zero = DenseNet::zeros(&[2, 10]).unwrap();
        let data: Vec<_> = (0..50).map(|i| Example::new(vec![0.1, 0.2], 1 + i % 9)).collect();
        assert_eq!(zero.accuracy(&data).unwrap(), 0.0);
        let balanced: Vec<_> = (0..1000).map(|i| Example::new(vec![0.1, 0.2], i % 10)).collect();
        assert!((zero.accuracy(&balanced).unwrap() - 0.1).abs() < 1e-12);
        assert!(zero.accuracy(&[]).is_err());
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let net = DenseNet::zeros(&[2, 3]).unwrap();
        let bad = vec![Example::new(vec![0.0, 0.0], 3)];
        assert!(matches!(net.grad(&bad), Err(Error::Input(_))));
    }

    #[test]
    fn same_seed_same_params() {
        let a = DenseNet::new(&[8, 4, 2], Activation::Relu, Init::UniformFanIn, 5).unwrap();
        let b = DenseNet::new(&[8, 4, 2], Activation::Relu, Init::UniformFanIn, 5).unwrap();
        assert_eq!(a.params(), b.params());
    }

    proptest! {
        #[test]
        fn softmax_is_normalized(seed in 0u64..1000, x in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let net = DenseNet::new(&[4, 6, 5], Activation::Relu, Init::UniformFanIn, seed).unwrap();
            let mut theta = net.params().clone();
            theta.scale(20.0);
            let net = DenseNet::from_params(&[4, 6, 5], Activation::Relu, theta).unwrap();
            let p = net.forward(&x).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
