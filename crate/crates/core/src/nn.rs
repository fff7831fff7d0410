//! Fully connected networks with manual backpropagation.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine layer `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive std");
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || normal.sample(rng));
        Self { weight, bias: Array1::zeros(outputs) }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((inputs, outputs)), bias: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Per-feature batch normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn identity(width: usize) -> Self {
        Self { gamma: Array1::ones(width), beta: Array1::zeros(width) }
    }

    fn zeros(width: usize) -> Self {
        Self { gamma: Array1::zeros(width), beta: Array1::zeros(width) }
    }

    /// Normalizes with the statistics of this batch. Returns the output, `x_hat` and `1 / std`.
    fn forward(&self, z: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
        let var = z.var_axis(Axis(0), 0.0);
        let inv_std = var.mapv(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
        let x_hat = (z - &mean) * &inv_std;
        (&x_hat * &self.gamma + &self.beta, x_hat, inv_std)
    }

    fn backward(&self, g: &Array2<f64>, x_hat: &Array2<f64>, inv_std: &Array1<f64>) -> (BatchNorm, Array2<f64>) {
        let n = g.nrows() as f64;
        let sum_g = g.sum_axis(Axis(0));
        let sum_gx = (g * x_hat).sum_axis(Axis(0));
        let grad_in = (g * n - &sum_g - &(x_hat * &sum_gx)) * &(&self.gamma * inv_std / n);
        (BatchNorm { gamma: sum_gx, beta: sum_g }, grad_in)
    }
}

/// Stack of [`Dense`] layers with rectifiers between them, optionally batch-normalizing
/// every hidden layer before its rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    /// One per hidden layer when batch normalization is on, else empty.
    pub norms: Vec<BatchNorm>,
    /// Apply a rectifier after the last layer as well.
    pub final_relu: bool,
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    normalized: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Mlp {
    /// `widths = [input, hidden.., output]`.
    pub fn init(widths: &[usize], final_relu: bool, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Self { layers, norms: Vec::new(), final_relu }
    }

    /// Adds identity-initialized batch normalization to every hidden layer.
    pub fn with_batch_norm(mut self) -> Self {
        self.norms = self.layers[..self.layers.len() - 1].iter().map(|l| BatchNorm::identity(l.outputs())).collect();
        self
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect(),
            norms: self.norms.iter().map(|n| BatchNorm::zeros(n.gamma.len())).collect(),
            final_relu: self.final_relu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.final_relu
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut normalized = Vec::with_capacity(self.norms.len());
        let mut h = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&h);
            if let Some(norm) = self.norms.get(k) {
                let (out, x_hat, inv_std) = norm.forward(&z);
                normalized.push((x_hat, inv_std));
                z = out;
            }
            inputs.push(h);
            h = if self.activates(k) { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre_activations.push(z);
        }
        (h, MlpCache { inputs, pre_activations, normalized })
    }

    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, grad_output: &Array2<f64>) -> (Mlp, Array2<f64>) {
        let mut grads = self.zeros_like();
        let mut g = grad_output.to_owned();
        for k in (0..self.layers.len()).rev() {
            if self.activates(k) {
                g.zip_mut_with(&cache.pre_activations[k], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            if let Some(norm) = self.norms.get(k) {
                let (x_hat, inv_std) = &cache.normalized[k];
                let (ng, g_in) = norm.backward(&g, x_hat, inv_std);
                grads.norms[k] = ng;
                g = g_in;
            }
            // Upstream gradients of shape (n, 1) can come back column-major; keep blocks in standard layout.
            grads.layers[k].weight = cache.inputs[k].t().dot(&g).as_standard_layout().into_owned();
            grads.layers[k].bias = g.sum_axis(Axis(0));
            g = g.dot(&self.layers[k].weight.t());
        }
        (grads, g)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>() + self.norms.iter().map(|n| 2 * n.gamma.len()).sum::<usize>()
    }

    /// Named contiguous parameter blocks, in a fixed order.
    pub fn blocks<'a>(&'a self, prefix: &str) -> Vec<(String, &'a [f64])> {
        let mut out = Vec::with_capacity(4 * self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{k}.weight"), l.weight.as_slice().expect("standard layout")));
            out.push((format!("{prefix}.{k}.bias"), l.bias.as_slice().expect("standard layout")));
            if let Some(n) = self.norms.get(k) {
                out.push((format!("{prefix}.{k}.gamma"), n.gamma.as_slice().expect("standard layout")));
                out.push((format!("{prefix}.{k}.beta"), n.beta.as_slice().expect("standard layout")));
            }
        }
        out
    }

    pub fn blocks_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut [f64])> {
        let mut out = Vec::with_capacity(4 * self.layers.len());
        let mut norms = self.norms.iter_mut();
        for (k, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{k}.weight"), l.weight.as_slice_mut().expect("standard layout")));
            out.push((format!("{prefix}.{k}.bias"), l.bias.as_slice_mut().expect("standard layout")));
            if let Some(n) = norms.next() {
                out.push((format!("{prefix}.{k}.gamma"), n.gamma.as_slice_mut().expect("standard layout")));
                out.push((format!("{prefix}.{k}.beta"), n.beta.as_slice_mut().expect("standard layout")));
            }
        }
        out
    }
}

/// Architecture of the pretraining network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Hidden widths followed by the output width of the projection head.
    pub projector: Vec<usize>,
    /// Hidden widths of the predictor (its output matches the projection width).
    pub predictor: Vec<usize>,
    /// Batch-normalize hidden layers of the projector and predictor.
    #[serde(default)]
    pub head_batch_norm: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { input_dim: 192 * 192, hidden: vec![256, 128], embedding_dim: 64, projector: vec![128, 64], predictor: vec![128], head_batch_norm: true }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 || self.projector.is_empty() {
            return Err(Error::InvalidConfig("encoder dimensions must be positive and the projector nonempty".into()));
        }
        if self.hidden.iter().chain(&self.projector).chain(&self.predictor).any(|&w| w == 0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn projection_dim(&self) -> usize {
        *self.projector.last().expect("validated nonempty projector")
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.embedding_dim);
        w
    }
}

/// Encoder, projection head, and (for bootstrap methods) predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub encoder: Mlp,
    pub projector: Mlp,
    pub predictor: Option<Mlp>,
}

pub struct NetworkCache {
    encoder: MlpCache,
    projector: MlpCache,
    predictor: Option<MlpCache>,
}

/// Outputs of a cached forward pass.
pub struct NetworkOutput {
    pub embedding: Array2<f64>,
    pub projection: Array2<f64>,
    pub prediction: Option<Array2<f64>>,
}

impl Network {
    pub fn init(spec: &EncoderSpec, with_predictor: bool, rng: &mut impl Rng) -> Self {
        let encoder = Mlp::init(&spec.encoder_widths(), false, rng);
        let mut proj_widths = vec![spec.embedding_dim];
        proj_widths.extend(&spec.projector);
        let head = |m: Mlp| if spec.head_batch_norm { m.with_batch_norm() } else { m };
        let projector = head(Mlp::init(&proj_widths, false, rng));
        let predictor = with_predictor.then(|| {
            let p = spec.projection_dim();
            let mut widths = vec![p];
            widths.extend(&spec.predictor);
            widths.push(p);
            head(Mlp::init(&widths, false, rng))
        });
        Self { encoder, projector, predictor }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            projector: self.projector.zeros_like(),
            predictor: self.predictor.as_ref().map(Mlp::zeros_like),
        }
    }

    /// Online network without the predictor, as used for bootstrap targets.
    pub fn without_predictor(&self) -> Self {
        Self { encoder: self.encoder.clone(), projector: self.projector.clone(), predictor: None }
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (NetworkOutput, NetworkCache) {
        let (embedding, encoder) = self.encoder.forward_cached(x);
        let (projection, projector) = self.projector.forward_cached(&embedding);
        let (prediction, predictor) = match &self.predictor {
            Some(p) => {
                let (out, cache) = p.forward_cached(&projection);
                (Some(out), Some(cache))
            }
            None => (None, None),
        };
        (NetworkOutput { embedding, projection, prediction }, NetworkCache { encoder, projector, predictor })
    }

    pub fn project(&self, x: &Array2<f64>) -> Array2<f64> {
        self.projector.forward(&self.encoder.forward(x))
    }

    /// Backpropagates gradients arriving at the projection and/or prediction outputs.
    pub fn backward(&self, cache: &NetworkCache, grad_projection: Option<&Array2<f64>>, grad_prediction: Option<&Array2<f64>>) -> Network {
        let mut grads = self.zeros_like();
        let rows = cache.encoder.inputs[0].nrows();
        let mut g_proj = Array2::<f64>::zeros((rows, self.projector.output_dim()));
        if let Some(g) = grad_projection {
            g_proj += g;
        }
        if let (Some(g), Some(pred), Some(pc)) = (grad_prediction, &self.predictor, &cache.predictor) {
            let (pg, g_in) = pred.backward(pc, g);
            grads.predictor = Some(pg);
            g_proj += &g_in;
        }
        let (proj_grads, g_emb) = self.projector.backward(&cache.projector, &g_proj);
        grads.projector = proj_grads;
        let (enc_grads, _) = self.encoder.backward(&cache.encoder, &g_emb);
        grads.encoder = enc_grads;
        grads
    }

    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = self.encoder.blocks("encoder");
        out.extend(self.projector.blocks("projector"));
        if let Some(p) = &self.predictor {
            out.extend(p.blocks("predictor"));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.encoder.blocks_mut("encoder");
        out.extend(self.projector.blocks_mut("projector"));
        if let Some(p) = &mut self.predictor {
            out.extend(p.blocks_mut("predictor"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.projector.param_count() + self.predictor.as_ref().map_or(0, Mlp::param_count)
    }
}
