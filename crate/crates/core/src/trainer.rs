//! Pretraining loop for the eight method variants
//! ({SimCLR, BYOL} x {standard, metadata-enhanced with three time windows}).

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::batching::BatchSampler;
use crate::cohort::Cohort;
use crate::digest::config_digest;
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::nn::{BatchNorm, Dense, EncoderSpec, Mlp, Network};
use crate::objectives::{byol_loss, debiased_nt_xent, ema_update, nt_xent, DebiasConfig, LossOutput, PairMask};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::relations::{build_pair_index, MaxGap, RelationConfig};
use crate::schedule::{scaled_warmup, warmup_cosine, CadenceTable, REFERENCE_TOTAL_STEPS};
use crate::seeding::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    SimClr,
    Byol,
}

/// A pretraining variant: objective family plus, for metadata-enhanced runs, the time window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub family: Family,
    /// `None` for standard two-view pairing.
    pub window: Option<MaxGap>,
}

impl Method {
    pub const fn standard(family: Family) -> Self {
        Self { family, window: None }
    }

    pub const fn metadata(family: Family, window: MaxGap) -> Self {
        Self { family, window: Some(window) }
    }

    /// All eight variants in reporting order.
    pub fn all() -> Vec<Method> {
        let mut out = Vec::new();
        for family in [Family::SimClr, Family::Byol] {
            out.push(Method::standard(family));
            for w in [MaxGap::Years(0.5), MaxGap::Years(1.0), MaxGap::Unbounded] {
                out.push(Method::metadata(family, w));
            }
        }
        out
    }

    pub fn is_metadata(&self) -> bool {
        self.window.is_some()
    }

    pub fn relation(&self, min_gap_years: f64) -> Option<RelationConfig> {
        self.window.map(|max_gap| RelationConfig { min_gap_years, max_gap })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let family = match self.family {
            Family::SimClr => "simclr",
            Family::Byol => "byol",
        };
        match self.window {
            None => write!(f, "{family}"),
            Some(w) => write!(f, "{family}-me-{w}"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        let (family, rest) = if let Some(rest) = s.strip_prefix("simclr") {
            (Family::SimClr, rest)
        } else if let Some(rest) = s.strip_prefix("byol") {
            (Family::Byol, rest)
        } else {
            return Err(format!("unknown method `{s}`"));
        };
        if rest.is_empty() {
            return Ok(Method::standard(family));
        }
        let window = rest.strip_prefix("-me-").ok_or_else(|| format!("unknown method `{s}`"))?;
        let window: MaxGap = window.parse()?;
        Ok(Method::metadata(family, window))
    }
}

/// Where bootstrap targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetNetwork {
    /// Exponential moving average of the online network.
    Ema,
    /// The current online network with gradients stopped.
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub adam: AdamConfig,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub ema_tau: f64,
    pub temperature: f64,
    /// Debiased estimator for metadata-enhanced SimCLR; `None` uses plain NT-Xent.
    pub debias: Option<DebiasConfig>,
    pub min_gap_years: f64,
    pub self_pair_fallback: bool,
    pub use_predictor: bool,
    pub target: TargetNetwork,
    pub encoder: EncoderSpec,
    pub cadence: CadenceTable,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale reference settings.
    pub fn reference() -> Self {
        Self {
            base_lr: 5e-4,
            adam: AdamConfig::default(),
            warmup_steps: 1_200,
            total_steps: REFERENCE_TOTAL_STEPS,
            batch_size: 384,
            ema_tau: REFERENCE_EMA_TAU,
            temperature: 0.1,
            debias: Some(DebiasConfig::default()),
            min_gap_years: 0.02,
            self_pair_fallback: true,
            use_predictor: true,
            target: TargetNetwork::Ema,
            encoder: EncoderSpec::default(),
            cadence: CadenceTable::reference(1),
            seed: 0,
        }
    }

    /// Desk-scale settings for small synthetic scans.
    pub fn desk(input_dim: usize, total_steps: usize) -> Self {
        Self {
            total_steps,
            warmup_steps: scaled_warmup(total_steps),
            batch_size: 128,
            encoder: EncoderSpec { input_dim, hidden: vec![128], embedding_dim: 32, projector: vec![64, 32], predictor: vec![64], head_batch_norm: true },
            ..Self::reference()
        }
    }

    /// Sets `total_steps` and rescales warmup proportionally.
    pub fn with_total_steps(mut self, total_steps: usize) -> Self {
        self.total_steps = total_steps;
        self.warmup_steps = scaled_warmup(total_steps);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("learning rate and temperature must be positive".into()));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup ({}) must be shorter than the run ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 || self.batch_size % 2 == 1 {
            return Err(Error::OddBatchSize(self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.ema_tau) {
            return Err(Error::InvalidConfig("EMA coefficient must lie in [0, 1]".into()));
        }
        self.encoder.validate()?;
        self.cadence.validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        warmup_cosine(step, self.base_lr, self.warmup_steps, self.total_steps)
    }
}

pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_at(step)
}

pub fn validation_cadence(step: usize, cfg: &TrainConfig) -> bool {
    cfg.cadence.should_validate(step)
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub method: Method,
    pub config_digest: String,
    pub step: usize,
    pub online: Network,
    pub teacher: Option<Network>,
    pub adam: AdamState,
}

impl TrainState {
    pub fn init(method: Method, cfg: &TrainConfig, augment: &AugmentConfig) -> Self {
        let mut rng = rng_for(cfg.seed, &[INIT_STREAM]);
        let bootstrap = method.family == Family::Byol;
        let online = Network::init(&cfg.encoder, bootstrap && cfg.use_predictor, &mut rng);
        let teacher = (bootstrap && cfg.target == TargetNetwork::Ema).then(|| online.without_predictor());
        let sizes: Vec<usize> = online.blocks().iter().map(|(_, b)| b.len()).collect();
        Self {
            method,
            config_digest: run_digest(method, cfg, augment),
            step: 0,
            online,
            teacher,
            adam: AdamState::new(&sizes),
        }
    }
}

pub const REFERENCE_EMA_TAU: f64 = 0.9995;

const INIT_STREAM: u64 = 0x1a17;
const BATCH_STREAM: u64 = 0xba7c;

/// Digest of everything that determines a pretraining run.
pub fn run_digest(method: Method, cfg: &TrainConfig, augment: &AugmentConfig) -> String {
    config_digest(&(method.to_string(), cfg, augment))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_trace<W: Write>(trace: &[TraceRow], method: Method, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["step", "lr", "loss", "variant"])?;
    for row in trace {
        w.write_record([row.step.to_string(), row.lr.to_string(), row.loss.to_string(), method.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Flattens a view into one input row.
pub fn image_row(image: &GrayImage) -> Array1<f64> {
    Array1::from_vec(image.pixels().to_vec())
}

pub fn stack_images(images: &[GrayImage]) -> Result<Array2<f64>> {
    let cols = images.first().map_or(0, |i| i.pixels().len());
    let mut data = Vec::with_capacity(images.len() * cols);
    for img in images {
        if img.pixels().len() != cols {
            return Err(Error::ShapeMismatch("images in a batch differ in size".into()));
        }
        data.extend_from_slice(img.pixels());
    }
    Array2::from_shape_vec((images.len(), cols), data).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// Representation of one image under `encoder`.
pub fn encode(encoder: &Mlp, image: &GrayImage) -> Result<Array1<f64>> {
    if image.pixels().len() != encoder.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "image has {} pixels, encoder expects {}",
            image.pixels().len(),
            encoder.input_dim()
        )));
    }
    let x = image_row(image).insert_axis(ndarray::Axis(0));
    Ok(encoder.forward(&x).row(0).to_owned())
}

/// Loss of a batch and its gradient, without touching parameters.
pub struct StepOutcome {
    pub loss: f64,
    pub grads: Network,
}

/// Drives pretraining for one method over one cohort.
pub struct Trainer<'a> {
    cohort: &'a Cohort,
    images: &'a [GrayImage],
    cfg: TrainConfig,
    augment: AugmentConfig,
    sampler: BatchSampler,
    debias: Option<DebiasConfig>,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(cohort: &'a Cohort, images: &'a [GrayImage], method: Method, cfg: &TrainConfig, augment: &AugmentConfig) -> Result<Self> {
        let state = TrainState::init(method, cfg, augment);
        Self::resume(cohort, images, state, cfg, augment)
    }

    /// Continues from a saved state; the configuration must hash to the state's digest.
    pub fn resume(cohort: &'a Cohort, images: &'a [GrayImage], state: TrainState, cfg: &TrainConfig, augment: &AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        augment.validate()?;
        if images.len() != cohort.len() {
            return Err(Error::ShapeMismatch(format!("{} images for {} records", images.len(), cohort.len())));
        }
        if augment.output_len() != cfg.encoder.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "views have {} pixels but the encoder takes {}",
                augment.output_len(),
                cfg.encoder.input_dim
            )));
        }
        if state.config_digest != run_digest(state.method, cfg, augment) {
            return Err(Error::Checkpoint("configuration does not match the checkpoint digest".into()));
        }
        let method = state.method;
        let sampler = match method.relation(cfg.min_gap_years) {
            None => BatchSampler::standard(cohort),
            Some(relation) => {
                relation.validate()?;
                let index = build_pair_index(cohort, &relation);
                if index.is_empty() && !cfg.self_pair_fallback {
                    return Err(Error::InvalidConfig("no positive pairs and self-pair fallback is disabled".into()));
                }
                BatchSampler::metadata(&index, cfg.self_pair_fallback)
            }
        };
        let debias = match (method.family, method.is_metadata()) {
            (Family::SimClr, true) => cfg.debias,
            _ => None,
        };
        Ok(Self { cohort, images, cfg: cfg.clone(), augment: augment.clone(), sampler, debias, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Loss and gradients for a batch of flattened views under `mask`.
    pub fn evaluate(&self, inputs: &Array2<f64>, mask: &PairMask) -> Result<StepOutcome> {
        let online = &self.state.online;
        let (out, cache) = online.forward_cached(inputs);
        match self.state.method.family {
            Family::SimClr => {
                let loss = match &self.debias {
                    Some(d) => debiased_nt_xent(&out.projection, mask, self.cfg.temperature, d)?,
                    None => nt_xent(&out.projection, mask, self.cfg.temperature)?,
                };
                let grads = online.backward(&cache, Some(&loss.grad), None);
                Ok(StepOutcome { loss: loss.loss, grads })
            }
            Family::Byol => {
                let targets = match &self.state.teacher {
                    Some(teacher) => teacher.project(inputs),
                    None => out.projection.clone(),
                };
                let pairs = mask.positive_pairs();
                let online_out = out.prediction.as_ref().unwrap_or(&out.projection);
                let (loss, grad_rows) = paired_byol(online_out, &targets, &pairs)?;
                let grads = if out.prediction.is_some() {
                    online.backward(&cache, None, Some(&grad_rows))
                } else {
                    online.backward(&cache, Some(&grad_rows), None)
                };
                Ok(StepOutcome { loss: loss.loss, grads })
            }
        }
    }

    /// One optimisation step. Returns the trace row for the step just taken.
    pub fn step(&mut self) -> Result<TraceRow> {
        let step = self.state.step;
        let seed = derive_seed(self.cfg.seed, &[BATCH_STREAM, step as u64]);
        let batch = self.sampler.sample(self.cohort, self.images, &self.augment, self.cfg.batch_size, seed)?;
        let inputs = stack_images(&batch.views)?;
        let outcome = self.evaluate(&inputs, &batch.mask)?;
        if !outcome.loss.is_finite() {
            return Err(Error::Diverged { step, loss: outcome.loss });
        }
        let lr = self.cfg.lr_at(step);
        {
            let grads: Vec<(String, &[f64])> = outcome.grads.blocks();
            let mut params = self.state.online.blocks_mut();
            adam_step(&mut params, &grads, &mut self.state.adam, lr, &self.cfg.adam)?;
        }
        if let Some(teacher) = &mut self.state.teacher {
            let online = self.state.online.blocks();
            for ((_, t), (_, s)) in teacher.blocks_mut().into_iter().zip(online) {
                ema_update(t, s, self.cfg.ema_tau)?;
            }
        }
        self.state.step += 1;
        Ok(TraceRow { step, lr, loss: outcome.loss })
    }

    /// Runs until `total_steps`, calling `on_checkpoint` whenever the cadence fires and after the last step.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>) -> Result<Vec<TraceRow>> {
        let mut trace = Vec::with_capacity(self.cfg.total_steps.saturating_sub(self.state.step));
        while self.state.step < self.cfg.total_steps {
            let row = self.step()?;
            log::debug!("{} step {} lr {:.3e} loss {:.5}", self.state.method, row.step, row.lr, row.loss);
            trace.push(row);
            if self.state.step == self.cfg.total_steps || self.cfg.cadence.should_validate(self.state.step) {
                on_checkpoint(&self.state)?;
            }
        }
        Ok(trace)
    }
}

/// Bootstrap loss over ordered positive pairs `(i, j)`: online row `i` predicts target row `j`.
/// Returns the loss and its gradient scattered back onto the online rows.
fn paired_byol(online: &Array2<f64>, targets: &Array2<f64>, pairs: &[(usize, usize)]) -> Result<(LossOutput, Array2<f64>)> {
    let dim = online.ncols();
    let mut p = Array2::zeros((pairs.len(), dim));
    let mut t = Array2::zeros((pairs.len(), dim));
    for (k, &(i, j)) in pairs.iter().enumerate() {
        p.row_mut(k).assign(&online.row(i));
        t.row_mut(k).assign(&targets.row(j));
    }
    let loss = byol_loss(&p, &t)?;
    let mut grad = Array2::zeros(online.dim());
    for (k, &(i, _)) in pairs.iter().enumerate() {
        let mut row = grad.row_mut(i);
        row += &loss.grad.row(k);
    }
    Ok((loss, grad))
}

/// Output of a complete pretraining run.
pub struct Pretrained {
    pub state: TrainState,
    pub trace: Vec<TraceRow>,
}

pub fn pretrain(cohort: &Cohort, images: &[GrayImage], method: Method, cfg: &TrainConfig, augment: &AugmentConfig) -> Result<Pretrained> {
    let mut trainer = Trainer::new(cohort, images, method, cfg, augment)?;
    let trace = trainer.run(|_| Ok(()))?;
    Ok(Pretrained { state: trainer.state, trace })
}

// Checkpoint format: magic, version, digest, method, counters, then networks and moments
// as length-prefixed little-endian f64 arrays.
const MAGIC: &[u8; 8] = b"METACL\0\x01";
const FORMAT_VERSION: u32 = 1;

struct Encoder<W: Write>(W);

impl<W: Write> Encoder<W> {
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u64(b.len() as u64)?;
        Ok(self.0.write_all(b)?)
    }

    fn floats(&mut self, values: &[f64]) -> Result<()> {
        self.u64(values.len() as u64)?;
        for v in values {
            self.0.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn mlp(&mut self, mlp: &Mlp) -> Result<()> {
        self.u64(mlp.layers.len() as u64)?;
        self.u64(mlp.final_relu as u64)?;
        for l in &mlp.layers {
            self.u64(l.inputs() as u64)?;
            self.u64(l.outputs() as u64)?;
            self.floats(l.weight.as_slice().expect("standard layout"))?;
            self.floats(l.bias.as_slice().expect("standard layout"))?;
        }
        self.u64(mlp.norms.len() as u64)?;
        for n in &mlp.norms {
            self.floats(n.gamma.as_slice().expect("standard layout"))?;
            self.floats(n.beta.as_slice().expect("standard layout"))?;
        }
        Ok(())
    }

    fn network(&mut self, net: &Network) -> Result<()> {
        self.mlp(&net.encoder)?;
        self.mlp(&net.projector)?;
        self.u64(net.predictor.is_some() as u64)?;
        if let Some(p) = &net.predictor {
            self.mlp(p)?;
        }
        Ok(())
    }
}

struct Decoder<R: Read>(R);

impl<R: Read> Decoder<R> {
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        Ok(u64::from_le_bytes(b))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > 1 << 34 {
            return Err(Error::Checkpoint(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len()?;
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        Ok(b)
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f64::from_bits(self.u64()?));
        }
        Ok(out)
    }

    fn mlp(&mut self) -> Result<Mlp> {
        let layers = self.len()?;
        let final_relu = self.u64()? != 0;
        let mut out = Vec::with_capacity(layers);
        for _ in 0..layers {
            let (inputs, outputs) = (self.len()?, self.len()?);
            let weight = Array2::from_shape_vec((inputs, outputs), self.floats()?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let bias = Array1::from_vec(self.floats()?);
            if bias.len() != outputs {
                return Err(Error::Checkpoint("bias length mismatch".into()));
            }
            out.push(Dense { weight, bias });
        }
        let count = self.len()?;
        let mut norms = Vec::with_capacity(count);
        for _ in 0..count {
            let gamma = Array1::from_vec(self.floats()?);
            let beta = Array1::from_vec(self.floats()?);
            if gamma.len() != beta.len() {
                return Err(Error::Checkpoint("normalization parameter length mismatch".into()));
            }
            norms.push(BatchNorm { gamma, beta });
        }
        Ok(Mlp { layers: out, norms, final_relu })
    }

    fn network(&mut self) -> Result<Network> {
        let encoder = self.mlp()?;
        let projector = self.mlp()?;
        let predictor = if self.u64()? != 0 { Some(self.mlp()?) } else { None };
        Ok(Network { encoder, projector, predictor })
    }
}

impl TrainState {
    pub fn write_checkpoint<W: Write>(&self, sink: W) -> Result<()> {
        let mut e = Encoder(sink);
        e.0.write_all(MAGIC)?;
        e.0.write_all(&FORMAT_VERSION.to_le_bytes())?;
        e.bytes(self.config_digest.as_bytes())?;
        e.bytes(self.method.to_string().as_bytes())?;
        e.u64(self.step as u64)?;
        e.network(&self.online)?;
        e.u64(self.teacher.is_some() as u64)?;
        if let Some(t) = &self.teacher {
            e.network(t)?;
        }
        e.u64(self.adam.step)?;
        e.u64(self.adam.first.len() as u64)?;
        for (m, v) in self.adam.first.iter().zip(&self.adam.second) {
            e.floats(m)?;
            e.floats(v)?;
        }
        e.0.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(source: R) -> Result<Self> {
        let mut d = Decoder(source);
        let mut magic = [0u8; 8];
        d.0.read_exact(&mut magic).map_err(|_| Error::Checkpoint("not a checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut version = [0u8; 4];
        d.0.read_exact(&mut version).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if u32::from_le_bytes(version) != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", u32::from_le_bytes(version))));
        }
        let utf8 = |b: Vec<u8>| String::from_utf8(b).map_err(|_| Error::Checkpoint("invalid UTF-8".into()));
        let config_digest = utf8(d.bytes()?)?;
        let method: Method = utf8(d.bytes()?)?.parse().map_err(Error::Checkpoint)?;
        let step = d.len()?;
        let online = d.network()?;
        let teacher = if d.u64()? != 0 { Some(d.network()?) } else { None };
        let adam_step = d.u64()?;
        let blocks = d.len()?;
        let mut first = Vec::with_capacity(blocks);
        let mut second = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            first.push(d.floats()?);
            second.push(d.floats()?);
        }
        Ok(Self { method, config_digest, step, online, teacher, adam: AdamState { step: adam_step, first, second } })
    }
}
