//! Fully-connected networks with hand-written backpropagation and a
//! schedule-decayed plain SGD update.
//!
//! Parameters are laid out layer-major; within a layer the weight matrix is
//! stored row-major (`outputs × inputs`) followed by the bias vector. The
//! same layout is used by [`Mlp::params`], every gradient vector, and the
//! JSON checkpoint format.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            // `f64::max` would swallow NaN; keep it visible.
            Activation::Relu => {
                if x < 0.0 {
                    0.0
                } else {
                    x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    /// The relu subgradient at exactly 0 is taken as 0.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        output_activation: Activation,
        seed: u64,
    ) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            hidden_activation: Activation::Relu,
            output_activation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("all layer widths must be >= 1"));
        }
        if self.hidden_activation != Activation::Relu {
            return Err(Error::invalid("hidden layers use relu"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.output_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()),
        );
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascent,
    Descent,
}

/// Learning rate `base / (1 + decay · i)` at iteration `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.1,
            decay: 0.001,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        // base = 0 freezes the parameters.
        if !(self.base >= 0.0 && self.base.is_finite()) || !(self.decay >= 0.0) {
            return Err(Error::invalid("learning rate needs base >= 0 and decay >= 0"));
        }
        Ok(())
    }

    pub fn rate(&self, iter: u64) -> f64 {
        self.base / (1.0 + self.decay * iter as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl Mlp {
    /// Weights uniform in ±√(6/(d_in+d_out)), biases zero.
    pub fn init(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .widths()
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let bound = (6.0 / (inputs + outputs) as f64).sqrt();
                Dense {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect(),
                    bias: vec![0.0; outputs],
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        let mut net = Self::init(spec)?;
        for l in &mut net.layers {
            l.weights.fill(0.0);
        }
        Ok(net)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim(self.param_count(), params.len(), "parameter vector"));
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            let (b, r) = r.split_at(l.bias.len());
            l.weights.copy_from_slice(w);
            l.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.spec.output_activation
        } else {
            self.spec.hidden_activation
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.acts.pop().expect("non-empty"))
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.spec.input_dim {
            return Err(Error::dim(self.spec.input_dim, x.len(), "network input"));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.affine(acts.last().expect("non-empty"), &mut z);
            let act = self.activation(i);
            acts.push(z.iter().map(|&v| act.apply(v)).collect());
            pre.push(z);
        }
        Ok(Trace { acts, pre })
    }

    /// Gradient of `upstream · output` with respect to every parameter.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(x)?;
        let mut grad = vec![0.0; self.param_count()];
        self.accumulate_gradient(&trace, upstream, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale ·` the parameter gradient for `trace` into `grad`.
    pub fn accumulate_gradient(&self, trace: &Trace, upstream: &[f64], scale: f64, grad: &mut [f64]) -> Result<()> {
        self.accumulate(trace, upstream, scale, grad, false)
    }

    /// Like [`Mlp::accumulate_gradient`], but treats the output activation as
    /// the identity. Hidden layers still use their exact derivatives.
    ///
    /// With a relu output this is a projected step on the pre-activation:
    /// the relu maps it back onto the non-negative orthant, and an output
    /// pinned at zero can still move once the upstream signal changes sign.
    pub fn accumulate_gradient_through_output(
        &self,
        trace: &Trace,
        upstream: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        self.accumulate(trace, upstream, scale, grad, true)
    }

    fn accumulate(
        &self,
        trace: &Trace,
        upstream: &[f64],
        scale: f64,
        grad: &mut [f64],
        through_output: bool,
    ) -> Result<()> {
        if upstream.len() != self.spec.output_dim {
            return Err(Error::dim(self.spec.output_dim, upstream.len(), "upstream gradient"));
        }
        if grad.len() != self.param_count() {
            return Err(Error::dim(self.param_count(), grad.len(), "gradient buffer"));
        }
        let last = self.layers.len() - 1;
        let out_act = self.activation(last);
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(&trace.pre[last])
            .zip(&trace.acts[last + 1])
            .map(|((g, &z), &y)| {
                let d = if through_output { 1.0 } else { out_act.derivative(z, y) };
                scale * g * d
            })
            .collect();

        let mut offset = grad.len();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            offset -= layer.param_count();
            let input = &trace.acts[l];
            let (gw, gb) = grad[offset..offset + layer.param_count()].split_at_mut(layer.weights.len());
            for ((row, d), b) in gw.chunks_exact_mut(layer.inputs).zip(&delta).zip(gb.iter_mut()) {
                *b += d;
                if *d != 0.0 {
                    for (g, v) in row.iter_mut().zip(input) {
                        *g += d * v;
                    }
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (row, d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                    if *d != 0.0 {
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += d * w;
                        }
                    }
                }
                let act = self.activation(l - 1);
                for ((p, &z), &y) in prev.iter_mut().zip(&trace.pre[l - 1]).zip(&trace.acts[l]) {
                    *p *= act.derivative(z, y);
                }
                delta = prev;
            }
        }
        Ok(())
    }

    /// θ ← θ ± lr(iter) · grad.
    pub fn sgd_step(&mut self, grad: &[f64], schedule: &LrSchedule, iter: u64, direction: Direction) -> Result<()> {
        if grad.len() != self.param_count() {
            return Err(Error::dim(self.param_count(), grad.len(), "gradient"));
        }
        let lr = match direction {
            Direction::Ascent => schedule.rate(iter),
            Direction::Descent => -schedule.rate(iter),
        };
        let mut rest = grad;
        for l in &mut self.layers {
            let (gw, r) = rest.split_at(l.weights.len());
            let (gb, r) = r.split_at(l.bias.len());
            for (w, g) in l.weights.iter_mut().zip(gw) {
                *w += lr * g;
            }
            for (b, g) in l.bias.iter_mut().zip(gb) {
                *b += lr * g;
            }
            rest = r;
        }
        Ok(())
    }

    /// Sets the output-layer bias, e.g. to start a multiplier network away
    /// from the relu kink.
    pub fn set_output_bias(&mut self, value: f64) {
        if let Some(l) = self.layers.last_mut() {
            l.bias.fill(value);
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(MlpFile {
            spec: self.spec.clone(),
            params: self.params(),
        })
        .expect("plain data serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let file: MlpFile = serde_json::from_value(value)?;
        let mut net = Self::init(file.spec)?;
        net.set_params(&file.params)?;
        Ok(net)
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, &self.to_json())?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        Self::from_json(serde_json::from_reader(r)?)
    }
}
