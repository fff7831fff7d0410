//! Contrastive and bootstrap objectives over embedding blocks.
//!
//! Every loss returns its value together with the gradient with respect to
//! the *unnormalized* input rows; row normalization is part of the loss.

use std::fmt;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relations::Relation;

/// One entry of a batch relation mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskEntry {
    Positive,
    Negative,
    Excluded,
    /// Diagonal entries, and two views of one scan that are not designated partners.
    Identity,
}

impl From<Relation> for MaskEntry {
    fn from(r: Relation) -> Self {
        match r {
            Relation::Positive => MaskEntry::Positive,
            Relation::Negative => MaskEntry::Negative,
            Relation::Excluded => MaskEntry::Excluded,
        }
    }
}

impl MaskEntry {
    /// Whether the entry contributes to a contrastive denominator.
    pub fn contrasts(self) -> bool {
        matches!(self, MaskEntry::Positive | MaskEntry::Negative)
    }

    pub fn symbol(self) -> char {
        match self {
            MaskEntry::Positive => '+',
            MaskEntry::Negative => '-',
            MaskEntry::Excluded => '?',
            MaskEntry::Identity => '=',
        }
    }
}

/// Square relation mask over the slots of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMask {
    size: usize,
    entries: Vec<MaskEntry>,
}

impl PairMask {
    /// All off-diagonal entries `fill`, diagonal [`MaskEntry::Identity`].
    pub fn filled(size: usize, fill: MaskEntry) -> Self {
        let mut entries = vec![fill; size * size];
        for i in 0..size {
            entries[i * size + i] = MaskEntry::Identity;
        }
        Self { size, entries }
    }

    /// Standard view-identity mask: slot pairs `(2k, 2k+1)` positive, everything else negative.
    pub fn view_pairs(size: usize) -> Self {
        let mut mask = Self::filled(size, MaskEntry::Negative);
        for k in (0..size - size % 2).step_by(2) {
            mask.set_symmetric(k, k + 1, MaskEntry::Positive);
        }
        mask
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> MaskEntry {
        self.entries[i * self.size + j]
    }

    pub fn set_symmetric(&mut self, i: usize, j: usize, entry: MaskEntry) {
        self.entries[i * self.size + j] = entry;
        self.entries[j * self.size + i] = entry;
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..self.size).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn positives(&self, i: usize) -> Vec<usize> {
        (0..self.size).filter(|&j| self.get(i, j) == MaskEntry::Positive).collect()
    }

    pub fn negatives(&self, i: usize) -> Vec<usize> {
        (0..self.size).filter(|&j| self.get(i, j) == MaskEntry::Negative).collect()
    }

    /// Ordered positive pairs `(i, j)`, `i != j`.
    pub fn positive_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.size).flat_map(|i| self.positives(i).into_iter().map(move |j| (i, j))).collect()
    }

    pub fn count(&self, entry: MaskEntry) -> usize {
        self.entries.iter().filter(|&&e| e == entry).count()
    }
}

impl fmt::Display for PairMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.size {
            let row: String = (0..self.size).map(|j| self.get(i, j).symbol()).collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

/// Rows of projection vectors, optionally already unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    values: Array2<f64>,
    normalized: bool,
}

impl EmbeddingBlock {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values, normalized: false }
    }

    pub fn normalized(&self) -> Result<Self> {
        let (z, _) = normalize_rows(&self.values)?;
        Ok(Self { values: z, normalized: true })
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean of `per_anchor`.
    pub loss: f64,
    pub per_anchor: Vec<f64>,
    /// Gradient of `loss` with respect to the input rows.
    pub grad: Array2<f64>,
}

pub(crate) fn normalize_rows(x: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut z = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for (i, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNorm(i));
        }
        row /= n;
        norms.push(n);
    }
    Ok((z, norms))
}

/// Chain rule through `z = x / |x|`: `dx = (dz - z (z . dz)) / |x|`.
pub(crate) fn normalize_backward(z: &Array2<f64>, norms: &[f64], dz: &Array2<f64>) -> Array2<f64> {
    let mut dx = dz.clone();
    for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
        let zi = z.row(i);
        let proj = zi.dot(&dz.row(i));
        row.scaled_add(-proj, &zi);
        row /= norms[i];
    }
    dx
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn check_inputs(x: &Array2<f64>, mask: &PairMask, temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
    }
    if mask.size() != x.nrows() {
        return Err(Error::ShapeMismatch(format!("{} embeddings but a {}x{0} mask", x.nrows(), mask.size())));
    }
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("embedding block".into()));
    }
    Ok(())
}

/// Turns per-pair logit gradients `g[i][k] = dL/ds_ik` (with `s_ik = z_i . z_k / t`) into input gradients.
fn logits_backward(x_norm: &Array2<f64>, norms: &[f64], logit_grad: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let sym = logit_grad + &logit_grad.t();
    let dz = sym.dot(x_norm) / temperature;
    normalize_backward(x_norm, norms, &dz)
}

/// Masked multi-positive NT-Xent with cosine similarity.
///
/// Anchor `i` scores `-mean_{j in P(i)} log softmax_{k in P(i) u N(i)}(s_ik)[j]`;
/// excluded and identity entries appear nowhere.
pub fn nt_xent(embeddings: &Array2<f64>, mask: &PairMask, temperature: f64) -> Result<LossOutput> {
    check_inputs(embeddings, mask, temperature)?;
    let b = embeddings.nrows();
    let (z, norms) = normalize_rows(embeddings)?;
    let mut per_anchor = Vec::with_capacity(b);
    let mut logit_grad = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        let positives = mask.positives(i);
        if positives.is_empty() {
            return Err(Error::NoPositive(i));
        }
        let denominator: Vec<usize> = (0..b).filter(|&k| mask.get(i, k).contrasts()).collect();
        let logits: Vec<f64> = denominator.iter().map(|&k| dot(z.row(i), z.row(k)) / temperature).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let log_sum = max + total.ln();

        let inv_p = 1.0 / positives.len() as f64;
        let mut mean_pos = 0.0;
        for (slot, &k) in denominator.iter().enumerate() {
            let positive = mask.get(i, k) == MaskEntry::Positive;
            if positive {
                mean_pos += logits[slot] * inv_p;
            }
            let g = exps[slot] / total - if positive { inv_p } else { 0.0 };
            logit_grad[[i, k]] = g / b as f64;
        }
        per_anchor.push(log_sum - mean_pos);
    }
    let loss = per_anchor.iter().sum::<f64>() / b as f64;
    let grad = logits_backward(&z, &norms, &logit_grad, temperature);
    Ok(LossOutput { loss, per_anchor, grad })
}

/// Parameters of the debiased negative-mass estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DebiasConfig {
    /// Prior probability that a nominal negative is actually a positive.
    pub class_prior: f64,
    /// Number of positive samples entering the estimator; positives are cycled when fewer exist.
    pub positive_samples: usize,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self { class_prior: 0.05, positive_samples: 20 }
    }
}

/// NT-Xent whose negative mass is replaced by the debiased estimate
/// `g = max((Σ_neg e^s - τ⁺ N mean_Q(e^s_pos)) / (1 - τ⁺), N e^{-1/t})`.
///
/// With several positives the denominator is `Σ_pos e^s + g`, so a vanishing
/// prior recovers [`nt_xent`].
pub fn debiased_nt_xent(embeddings: &Array2<f64>, mask: &PairMask, temperature: f64, debias: &DebiasConfig) -> Result<LossOutput> {
    check_inputs(embeddings, mask, temperature)?;
    let prior = debias.class_prior;
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::InvalidConfig(format!("class prior must lie in (0, 1), got {prior}")));
    }
    if debias.positive_samples == 0 {
        return Err(Error::InvalidConfig("positive sample count must be >= 1".into()));
    }
    let b = embeddings.nrows();
    let (z, norms) = normalize_rows(embeddings)?;
    let mut per_anchor = Vec::with_capacity(b);
    let mut logit_grad = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        let positives = mask.positives(i);
        if positives.is_empty() {
            return Err(Error::NoPositive(i));
        }
        let negatives = mask.negatives(i);
        let s = |k: usize| dot(z.row(i), z.row(k)) / temperature;
        let pos_logits: Vec<f64> = positives.iter().map(|&k| s(k)).collect();
        let neg_logits: Vec<f64> = negatives.iter().map(|&k| s(k)).collect();
        let max = pos_logits.iter().chain(&neg_logits).cloned().fold(f64::NEG_INFINITY, f64::max);
        let pos_exp: Vec<f64> = pos_logits.iter().map(|v| (v - max).exp()).collect();
        let neg_exp: Vec<f64> = neg_logits.iter().map(|v| (v - max).exp()).collect();

        let q = debias.positive_samples;
        let n_pos = positives.len();
        let weights: Vec<f64> = (0..n_pos)
            .map(|p| (q / n_pos + usize::from(p < q % n_pos)) as f64 / q as f64)
            .collect();
        let pos_mass: f64 = pos_exp.iter().sum();
        let sampled_pos: f64 = weights.iter().zip(&pos_exp).map(|(w, e)| w * e).sum();
        let n_neg = negatives.len() as f64;
        let raw = (neg_exp.iter().sum::<f64>() - prior * n_neg * sampled_pos) / (1.0 - prior);
        let floor = n_neg * (-1.0 / temperature - max).exp();
        let active = raw > floor;
        let g = if active { raw } else { floor };
        let denom = pos_mass + g;

        let inv_p = 1.0 / n_pos as f64;
        let mean_pos = pos_logits.iter().map(|v| v - max).sum::<f64>() * inv_p;
        per_anchor.push(denom.ln() - mean_pos);

        for (p, &k) in positives.iter().enumerate() {
            let dg = if active { -prior * n_neg * weights[p] * pos_exp[p] / (1.0 - prior) } else { 0.0 };
            logit_grad[[i, k]] = (-inv_p + (pos_exp[p] + dg) / denom) / b as f64;
        }
        if active {
            for (n, &k) in negatives.iter().enumerate() {
                logit_grad[[i, k]] = neg_exp[n] / (1.0 - prior) / denom / b as f64;
            }
        }
    }
    let loss = per_anchor.iter().sum::<f64>() / b as f64;
    let grad = logits_backward(&z, &norms, &logit_grad, temperature);
    Ok(LossOutput { loss, per_anchor, grad })
}

/// Mean of `|p̂ - ẑ|² = 2 - 2 cos(p, z)` over paired rows. Targets receive no gradient.
pub fn byol_loss(predictions: &Array2<f64>, targets: &Array2<f64>) -> Result<LossOutput> {
    if predictions.dim() != targets.dim() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {:?} vs targets {:?}",
            predictions.dim(),
            targets.dim()
        )));
    }
    let b = predictions.nrows();
    if b == 0 {
        return Err(Error::EmptyInput("embedding block".into()));
    }
    let (p, norms) = normalize_rows(predictions)?;
    let (t, _) = normalize_rows(targets)?;
    let per_anchor: Vec<f64> = (0..b).map(|i| 2.0 - 2.0 * dot(p.row(i), t.row(i))).collect();
    let loss = per_anchor.iter().sum::<f64>() / b as f64;
    let dp = t * (-2.0 / b as f64);
    let grad = normalize_backward(&p, &norms, &dp);
    Ok(LossOutput { loss, per_anchor, grad })
}

/// `teacher <- tau * teacher + (1 - tau) * student`, elementwise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], tau: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch(format!("teacher has {} values, student {}", teacher.len(), student.len())));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!("EMA coefficient must lie in [0, 1], got {tau}")));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = tau * *t + (1.0 - tau) * s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn orthogonal4() -> Array2<f64> {
        Array2::eye(4)
    }

    #[test]
    fn orthogonal_fixture_is_ln3() {
        let out = nt_xent(&orthogonal4(), &PairMask::view_pairs(4), 1.0).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn excluded_entry_shrinks_denominator() {
        let mut mask = PairMask::view_pairs(4);
        mask.set_symmetric(0, 2, MaskEntry::Excluded);
        let out = nt_xent(&orthogonal4(), &mask, 1.0).unwrap();
        assert!((out.per_anchor[0] - 2f64.ln()).abs() < 1e-12);
        assert!((out.per_anchor[1] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_positive_fixture() {
        let x = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut mask = PairMask::filled(4, MaskEntry::Excluded);
        mask.set_symmetric(0, 1, MaskEntry::Positive);
        mask.set_symmetric(0, 2, MaskEntry::Negative);
        mask.set_symmetric(0, 3, MaskEntry::Negative);
        mask.set_symmetric(2, 3, MaskEntry::Positive);
        let out = nt_xent(&x, &mask, 0.5).unwrap();
        let e2 = 2f64.exp();
        assert!((out.per_anchor[0] - (-(e2 / (e2 + 2.0)).ln())).abs() < 1e-12);
        assert!((out.per_anchor[0] - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn nt_xent_errors() {
        let mask = PairMask::filled(4, MaskEntry::Negative);
        assert!(matches!(nt_xent(&orthogonal4(), &mask, 1.0), Err(Error::NoPositive(0))));
        assert!(nt_xent(&orthogonal4(), &PairMask::view_pairs(4), 0.0).is_err());
        let mut x = orthogonal4();
        x.row_mut(2).fill(0.0);
        assert!(matches!(nt_xent(&x, &PairMask::view_pairs(4), 1.0), Err(Error::ZeroNorm(2))));
    }

    #[test]
    fn debiased_small_prior_matches_nt_xent() {
        let x = array![[1.0, 0.2, -0.3], [0.9, 0.1, 0.0], [-0.2, 1.0, 0.4], [0.1, -0.7, 1.1]];
        let mask = PairMask::view_pairs(4);
        let cfg = DebiasConfig { class_prior: 1e-12, positive_samples: 20 };
        let a = debiased_nt_xent(&x, &mask, 0.5, &cfg).unwrap();
        let b = nt_xent(&x, &mask, 0.5).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-9);
    }

    #[test]
    fn debiased_clamp_engages_when_positives_dominate() {
        // anchor 0 identical to its positive, negatives nearly orthogonal; a large prior
        // drives the raw estimate below the floor.
        let x = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut mask = PairMask::filled(4, MaskEntry::Negative);
        mask.set_symmetric(0, 1, MaskEntry::Positive);
        mask.set_symmetric(2, 3, MaskEntry::Positive);
        let t = 0.5;
        let out = debiased_nt_xent(&x, &mask, t, &DebiasConfig { class_prior: 0.5, positive_samples: 1 }).unwrap();
        let pos = (1.0f64 / t).exp();
        let g = 2.0 * (-1.0f64 / t).exp();
        assert!((out.per_anchor[0] - (-(pos / (pos + g)).ln())).abs() < 1e-12);
    }

    #[test]
    fn debiased_rejects_bad_prior() {
        let mask = PairMask::view_pairs(4);
        for prior in [0.0, 1.0, -0.1] {
            let cfg = DebiasConfig { class_prior: prior, positive_samples: 1 };
            assert!(debiased_nt_xent(&orthogonal4(), &mask, 1.0, &cfg).is_err());
        }
    }

    #[test]
    fn byol_canonical_values() {
        let a = array![[1.0, 0.0], [0.0, -2.0]];
        assert_eq!(byol_loss(&a, &a).unwrap().loss, 0.0);
        assert_eq!(byol_loss(&a, &(-&a)).unwrap().loss, 4.0);
        let orth = array![[0.0, 3.0], [5.0, 0.0]];
        assert_eq!(byol_loss(&a, &orth).unwrap().loss, 2.0);
        assert!(matches!(byol_loss(&a, &Array2::zeros((2, 2))), Err(Error::ZeroNorm(0))));
    }

    #[test]
    fn ema_cases() {
        let mut t = vec![1.0, 2.0];
        ema_update(&mut t, &[5.0, 6.0], 1.0).unwrap();
        assert_eq!(t, vec![1.0, 2.0]);
        ema_update(&mut t, &[5.0, 6.0], 0.0).unwrap();
        assert_eq!(t, vec![5.0, 6.0]);
        let mut t = vec![1.0];
        ema_update(&mut t, &[0.0], 0.9995).unwrap();
        assert_eq!(t, vec![0.9995]);
        assert!(ema_update(&mut t, &[0.0, 1.0], 0.5).is_err());
    }
}
