//! Dense networks with exact reverse-mode gradients, fan-in uniform
//! initialization, sinusoidal time embeddings and an Adam optimizer.
//!
//! Every network in the crate (encoder, heads, critics) is a [`DenseNet`]: an
//! ordered stack of affine layers, each followed by an elementwise activation.
//! A forward pass returns a [`Trace`] holding the layer inputs and
//! pre-activations; [`DenseNet::backward`] consumes it to produce parameter
//! gradients and the gradient with respect to the input batch.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::error::{config, usage, Error, Result};
use crate::rng::Rng;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// x * sigmoid(x), smooth and self-gated.
    Silu,
    Identity,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Shape (out, in).
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Layer sizes plus activations: `sizes = [in, h1, ..., out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub sizes: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl NetSpec {
    pub fn new(sizes: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        Self { sizes, hidden, output }
    }

    /// Hidden layers use SiLU, the output layer is affine.
    pub fn mlp(sizes: Vec<usize>) -> Self {
        Self::new(sizes, Activation::Silu, Activation::Identity)
    }
}

#[derive(Debug)]
pub struct DenseNet {
    layers: Vec<Layer>,
    id: u64,
    generation: u64,
}

impl Clone for DenseNet {
    fn clone(&self) -> Self {
        Self { layers: self.layers.clone(), id: fresh_id(), generation: 0 }
    }
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activation record of one forward pass, tied to the network and parameter
/// generation that produced it.
#[derive(Debug, Clone)]
pub struct Trace {
    net_id: u64,
    generation: u64,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Gradients with the same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

fn check_finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {what}")))
    }
}

/// Uniform initialization in ±1/sqrt(fan_in) for weights and biases.
pub fn init_network(spec: &NetSpec, rng: &mut Rng) -> Result<DenseNet> {
    if spec.sizes.len() < 2 {
        return config("a network needs at least an input and an output size");
    }
    if spec.sizes.iter().any(|&s| s == 0) {
        return config(format!("zero-size layer in {:?}", spec.sizes));
    }
    let n = spec.sizes.len() - 1;
    let layers = spec
        .sizes
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weights =
                Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound));
            let biases = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..=bound));
            let activation = if k + 1 == n { spec.output } else { spec.hidden };
            Layer { weights, biases, activation }
        })
        .collect();
    DenseNet::from_layers(layers)
}

impl DenseNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return config("a network needs at least one layer");
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.input_dim() == 0 || layer.output_dim() == 0 {
                return config(format!("layer {k} has a zero dimension"));
            }
            if layer.biases.len() != layer.output_dim() {
                return config(format!("layer {k}: bias length does not match output dim"));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return config(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                ));
            }
        }
        let net = Self { layers, id: fresh_id(), generation: 0 };
        net.check_params()?;
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    fn check_params(&self) -> Result<()> {
        for (k, l) in self.layers.iter().enumerate() {
            check_finite(l.weights.iter().chain(l.biases.iter()).copied(), &format!("layer {k} parameters"))?;
        }
        Ok(())
    }

    /// Mutable access to one layer. Invalidates outstanding traces.
    pub fn layer_mut(&mut self, k: usize) -> &mut Layer {
        self.generation += 1;
        &mut self.layers[k]
    }

    /// Parameters flattened layer by layer: row-major weights, then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.biases.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return usage(format!("expected {} parameters, got {}", self.num_params(), params.len()));
        }
        check_finite(params.iter().copied(), "parameter update")?;
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *w = params[offset];
                offset += 1;
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Batched forward pass; rows are samples.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Trace)> {
        if input.ncols() != self.input_dim() {
            return usage(format!("input has {} columns, network expects {}", input.ncols(), self.input_dim()));
        }
        check_finite(input.iter().copied(), "network input")?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for l in &self.layers {
            let z = x.dot(&l.weights.t()) + &l.biases;
            let act = l.activation;
            let y = z.mapv(|v| act.apply(v));
            inputs.push(x);
            pre.push(z);
            x = y;
        }
        check_finite(x.iter().copied(), "network output")?;
        Ok((x, Trace { net_id: self.id, generation: self.generation, inputs, pre }))
    }

    /// Forward pass without recording a trace.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.input_dim() {
            return usage(format!("input has {} columns, network expects {}", input.ncols(), self.input_dim()));
        }
        let mut x = input.to_owned();
        for l in &self.layers {
            let act = l.activation;
            x = x.dot(&l.weights.t()) + &l.biases;
            if act != Activation::Identity {
                x.mapv_inplace(|v| act.apply(v));
            }
        }
        check_finite(x.iter().copied(), "network output")?;
        Ok(x)
    }

    /// Single-vector forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Trace)> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let (out, trace) = self.forward_batch(view)?;
        Ok((out.into_raw_vec_and_offset().0, trace))
    }

    /// Reverse pass. `output_grad` is dLoss/dOutput with one row per sample.
    /// Returns parameter gradients summed over the batch and dLoss/dInput.
    pub fn backward(&self, trace: &Trace, output_grad: ArrayView2<f64>) -> Result<(NetGrads, Array2<f64>)> {
        if trace.net_id != self.id || trace.generation != self.generation {
            return usage("trace was produced by a different network or before a parameter update");
        }
        let batch = trace.inputs[0].nrows();
        if output_grad.dim() != (batch, self.output_dim()) {
            return usage(format!(
                "output gradient has shape {:?}, expected ({batch}, {})",
                output_grad.dim(),
                self.output_dim()
            ));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut g = output_grad.to_owned();
        for k in (0..n).rev() {
            let l = &self.layers[k];
            if l.activation != Activation::Identity {
                let act = l.activation;
                ndarray::Zip::from(&mut g).and(&trace.pre[k]).for_each(|gv, &z| *gv *= act.derivative(z));
            }
            weights.push(g.t().dot(&trace.inputs[k]));
            biases.push(g.sum_axis(Axis(0)));
            g = g.dot(&l.weights);
        }
        weights.reverse();
        biases.reverse();
        Ok((NetGrads { weights, biases }, g))
    }
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.biases.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.weights.iter_mut().for_each(|w| *w *= c);
        self.biases.iter_mut().for_each(|b| *b *= c);
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    fn matches(&self, net: &DenseNet) -> bool {
        self.weights.len() == net.layers.len()
            && net
                .layers
                .iter()
                .zip(self.weights.iter().zip(&self.biases))
                .all(|(l, (w, b))| w.dim() == l.weights.dim() && b.len() == l.biases.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self { config, first_moment: vec![0.0; num_params], second_moment: vec![0.0; num_params], step_count: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return usage(format!(
                "adam state tracks {} parameters, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            ));
        }
        check_finite(grads.iter().copied(), "gradient")?;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in
            params.iter_mut().zip(grads).zip(&mut self.first_moment).zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        check_finite(params.iter().copied(), "parameters after adam step")
    }
}

/// One Adam update applied to a single network.
pub fn adam_step(net: &mut DenseNet, grads: &NetGrads, state: &mut AdamState) -> Result<()> {
    if !grads.matches(net) {
        return usage("gradient shapes do not match the network");
    }
    let mut params = net.params_flat();
    state.step(&mut params, &grads.flat())?;
    net.set_params_flat(&params)
}

/// Sinusoidal embedding of an integer timestep: interleaved
/// `(sin(t / base^(2k/dim)), cos(t / base^(2k/dim)))` for `k < dim/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeEmbedding {
    dim: usize,
    base: f64,
}

impl TimeEmbedding {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return config(format!("time embedding dim must be even and positive, got {dim}"));
        }
        if !(base > 1.0) {
            return config(format!("time embedding base must exceed 1, got {base}"));
        }
        Ok(Self { dim, base })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn embed(&self, t: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        self.embed_into(t, &mut out);
        out
    }

    fn embed_into(&self, t: usize, out: &mut Vec<f64>) {
        let half = self.dim / 2;
        for k in 0..half {
            let arg = t as f64 / self.base.powf(2.0 * k as f64 / self.dim as f64);
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }

    /// One embedding row per timestep.
    pub fn embed_batch(&self, ts: &[usize]) -> Array2<f64> {
        let mut flat = Vec::with_capacity(ts.len() * self.dim);
        for &t in ts {
            self.embed_into(t, &mut flat);
        }
        Array2::from_shape_vec((ts.len(), self.dim), flat).expect("embedding shape")
    }
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        Self { dim: 16, base: 10_000.0 }
    }
}
