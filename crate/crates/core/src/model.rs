//! Feed-forward reward scorer over a flat parameter vector.
//!
//! The network maps the concatenation `[prompt, response]` through dense
//! hidden layers with a shared activation to a single linear output. Each
//! dense layer stores its weight matrix row-major (`fan_out x fan_in`)
//! followed by its bias vector, and layers are laid out back to back.

use std::ops::{Index, IndexMut};
use std::sync::Arc;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

/// Architecture of a reward scorer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub prompt_dim: usize,
    pub response_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(prompt_dim: usize, response_dim: usize, hidden_dims: Vec<usize>) -> Self {
        Self {
            prompt_dim,
            response_dim,
            hidden_dims,
            activation: Activation::Tanh,
            seed: 0,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.prompt_dim + self.response_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_dim == 0 {
            return Err(Error::InvalidSpec("prompt_dim must be positive".into()));
        }
        if self.response_dim == 0 {
            return Err(Error::InvalidSpec("response_dim must be positive".into()));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&w| w == 0) {
            return Err(Error::InvalidSpec(format!("hidden layer {i} has zero width")));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<Layout> {
        self.validate()?;
        let mut layers = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut offset = 0;
        let mut fan_in = self.input_dim();
        for &fan_out in self.hidden_dims.iter().chain(std::iter::once(&1)) {
            layers.push(LayerShape {
                fan_in,
                fan_out,
                offset,
            });
            offset += fan_out * fan_in + fan_out;
            fan_in = fan_out;
        }
        Ok(Layout {
            prompt_dim: self.prompt_dim,
            response_dim: self.response_dim,
            activation: self.activation,
            layers,
            len: offset,
        })
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layout()?.len)
    }
}

/// Placement of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    pub fn xavier_bound(&self) -> f64 {
        (6.0 / (self.fan_in + self.fan_out) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub prompt_dim: usize,
    pub response_dim: usize,
    pub activation: Activation,
    pub layers: Vec<LayerShape>,
    len: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn input_dim(&self) -> usize {
        self.prompt_dim + self.response_dim
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        let n = self.layers.len() - 1;
        self.layers[..n].iter().map(|l| l.fan_out).collect()
    }

    pub fn output_layer(&self) -> &LayerShape {
        self.layers.last().expect("layout always has an output layer")
    }
}

/// Flat parameter vector tagged with the layout it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        let layout = spec.layout()?;
        Ok(Self {
            values: vec![0.0; layout.len],
            layout: Arc::new(layout),
        })
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len {
            return Err(Error::Shape {
                what: "parameter vector",
                expected: layout.len,
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: Arc::clone(&self.layout),
        }
    }

    /// Same layout, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_values(Arc::clone(&self.layout), values)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn shared_layout(&self) -> Arc<Layout> {
        Arc::clone(&self.layout)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for x in &mut self.values {
            *x *= c;
        }
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Self {
            values,
            layout: Arc::clone(&self.layout),
        }
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}

/// One (prompt, response) input to the scorer.
#[derive(Debug, Clone, Copy)]
pub struct FeatureInput<'a> {
    pub prompt: &'a [f64],
    pub response: &'a [f64],
}

impl<'a> FeatureInput<'a> {
    pub fn new(prompt: &'a [f64], response: &'a [f64]) -> Self {
        Self { prompt, response }
    }

    fn check(&self, layout: &Layout) -> Result<()> {
        if self.prompt.len() != layout.prompt_dim {
            return Err(Error::Shape {
                what: "prompt features",
                expected: layout.prompt_dim,
                got: self.prompt.len(),
            });
        }
        if self.response.len() != layout.response_dim {
            return Err(Error::Shape {
                what: "response features",
                expected: layout.response_dim,
                got: self.response.len(),
            });
        }
        Ok(())
    }
}

/// Xavier-uniform weights and zero biases, seeded by `spec.seed`.
pub fn init_params(spec: &ModelSpec) -> Result<ParamVector> {
    let mut params = ParamVector::zeros(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layers = params.layout.layers.clone();
    for layer in &layers {
        let bound = layer.xavier_bound();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
        for v in &mut params.values[layer.weight_range()] {
            *v = dist.sample(&mut rng);
        }
    }
    Ok(params)
}

/// Per-layer activations from one forward pass. `acts[0]` is the input.
fn forward(params: &ParamVector, input: FeatureInput<'_>, acts: &mut Vec<Vec<f64>>) -> f64 {
    let layout = &*params.layout;
    let theta = &params.values;
    acts.clear();
    let mut x = Vec::with_capacity(layout.input_dim());
    x.extend_from_slice(input.prompt);
    x.extend_from_slice(input.response);
    acts.push(x);

    let last = layout.layers.len() - 1;
    for (l, layer) in layout.layers.iter().enumerate() {
        let w = &theta[layer.weight_range()];
        let b = &theta[layer.bias_range()];
        let prev = &acts[l];
        let mut out = Vec::with_capacity(layer.fan_out);
        for (row, bias) in w.chunks_exact(layer.fan_in).zip(b) {
            let z = bias + row.iter().zip(prev).map(|(wi, xi)| wi * xi).sum::<f64>();
            out.push(if l == last {
                z
            } else {
                layout.activation.apply(z)
            });
        }
        acts.push(out);
    }
    acts[last + 1][0]
}

pub fn score(params: &ParamVector, input: FeatureInput<'_>) -> Result<f64> {
    input.check(&params.layout)?;
    let mut acts = Vec::new();
    Ok(forward(params, input, &mut acts))
}

/// Reverse-mode gradient of the scalar reward.
pub fn score_grad(params: &ParamVector, input: FeatureInput<'_>) -> Result<ParamVector> {
    let mut grad = params.zeros_like();
    accumulate_score_grad(params, input, 1.0, grad.values_mut())?;
    Ok(grad)
}

/// Adds `weight * d score / d params` into `grad` and returns the score.
pub fn accumulate_score_grad(
    params: &ParamVector,
    input: FeatureInput<'_>,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    input.check(&params.layout)?;
    if grad.len() != params.len() {
        return Err(Error::Shape {
            what: "gradient buffer",
            expected: params.len(),
            got: grad.len(),
        });
    }
    let mut acts = Vec::new();
    let out = forward(params, input, &mut acts);
    if weight == 0.0 {
        return Ok(out);
    }

    let layout = &*params.layout;
    let theta = &params.values;
    let mut delta = vec![weight];
    for (l, layer) in layout.layers.iter().enumerate().rev() {
        let prev = &acts[l];
        let gw = &mut grad[layer.weight_range()];
        for (row, &d) in gw.chunks_exact_mut(layer.fan_in).zip(&delta) {
            for (g, &a) in row.iter_mut().zip(prev) {
                *g += d * a;
            }
        }
        for (g, &d) in grad[layer.bias_range()].iter_mut().zip(&delta) {
            *g += d;
        }
        if l == 0 {
            break;
        }
        let w = &theta[layer.weight_range()];
        let mut next = vec![0.0; layer.fan_in];
        for (row, &d) in w.chunks_exact(layer.fan_in).zip(&delta) {
            for (n, &wi) in next.iter_mut().zip(row) {
                *n += d * wi;
            }
        }
        for (n, &a) in next.iter_mut().zip(prev) {
            *n *= layout.activation.derivative_from_output(a);
        }
        delta = next;
    }
    Ok(out)
}
