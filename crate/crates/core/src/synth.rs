//! Synthetic longitudinal cohorts with a known latent disease course.
//!
//! Each patient gets smooth texture and retinal-band geometry. Each eye gets
//! its own lesion sites. Severity grows linearly with time and is clamped to [0, 1];
//! the fellow eye follows the same course delayed by a fixed lag.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{write_manifest, Cohort, Laterality, LabelValue, ScanRecord, DAYS_PER_YEAR};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::seeding::{derive_seed, rng_for};

pub const STAGE_TASK: &str = "stage";
pub const AGE_TASK: &str = "age";
pub const SEX_TASK: &str = "sex";
pub const ACUITY_TASK: &str = "acuity";
pub const STAGE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub patients: usize,
    pub eyes_per_patient: usize,
    pub visits_mean: f64,
    pub visits_std: f64,
    /// Inter-visit gaps are drawn uniformly from this range, in years.
    pub gap_years: [f64; 2],
    /// Mean severity increase per year.
    pub progression_rate: f64,
    /// Log-normal spread of per-patient rates.
    pub rate_spread: f64,
    /// Range of the lead eye's severity at the first visit.
    pub initial_severity: [f64; 2],
    pub fellow_lag_years: f64,
    pub age_range: [f64; 2],
    /// Retinal thinning per year of age.
    pub age_drift: f64,
    pub image_size: usize,
    pub noise: f64,
    /// Scales per-scan shadow depth and intensity tilt.
    pub artifact_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patients: 200,
            eyes_per_patient: 2,
            visits_mean: 5.0,
            visits_std: 1.5,
            gap_years: [0.2, 0.8],
            progression_rate: 0.15,
            rate_spread: 0.5,
            initial_severity: [0.0, 0.6],
            fellow_lag_years: 1.0,
            age_range: [55.0, 85.0],
            age_drift: 0.012,
            image_size: 32,
            noise: 0.03,
            artifact_strength: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.patients == 0 {
            return bad("patient count must be positive");
        }
        if !(1..=2).contains(&self.eyes_per_patient) {
            return bad("eyes per patient must be 1 or 2");
        }
        if !(self.visits_mean >= 1.0) || !(self.visits_std >= 0.0) {
            return bad("visits need mean >= 1 and a non-negative spread");
        }
        if !(self.gap_years[0] > 0.0 && self.gap_years[0] <= self.gap_years[1]) {
            return bad("visit gaps must be a positive, ordered range");
        }
        if !(self.progression_rate >= 0.0) || !(self.rate_spread >= 0.0) || !(self.fellow_lag_years >= 0.0) {
            return bad("progression rate, spread and fellow lag must be non-negative");
        }
        if !(self.age_range[0] <= self.age_range[1]) {
            return bad("age range must be ordered");
        }
        if self.image_size < 8 {
            return bad("image size must be at least 8");
        }
        if !(self.noise >= 0.0) || !(0.0..=1.5).contains(&self.artifact_strength) {
            return bad("noise level must be non-negative and artifact strength within [0, 1.5]");
        }
        let [lo, hi] = self.initial_severity;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("initial severity range must be ordered within [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

/// Ground truth behind one scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub severity: f64,
    pub age: f64,
    pub sex: Sex,
    /// logMAR-like: higher is worse.
    pub acuity: f64,
}

impl LatentState {
    pub fn stage(&self) -> bool {
        self.severity > STAGE_THRESHOLD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub freq_x: f64,
    pub freq_y: f64,
    pub phase: f64,
    pub amplitude: f64,
}

/// Patient- and eye-level rendering factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub texture: Vec<Wave>,
    /// Band centre as a fraction of image height.
    pub band_position: f64,
    pub band_thickness: f64,
    pub curvature: f64,
    pub brightness: f64,
    /// Fractional band thinning per year of age.
    pub age_drift: f64,
    /// Horizontal lesion sites in [0, 1].
    pub lesion_sites: Vec<f64>,
    pub hypertransmission_site: f64,
    pub mirrored: bool,
}

/// Per-scan acquisition nuisances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub vertical_shift: f64,
    pub gain: f64,
    /// Left-to-right intensity slope.
    pub tilt: f64,
    /// Vertical shadow streaks as (position, width, depth).
    pub shadows: [(f64, f64, f64); 2],
}

impl Acquisition {
    pub fn clean() -> Self {
        Self { vertical_shift: 0.0, gain: 1.0, tilt: 0.0, shadows: [(0.0, 1.0, 0.0); 2] }
    }
}

pub struct SynthCohort {
    pub cohort: Cohort,
    pub images: Vec<GrayImage>,
    /// Aligned with `cohort.records()`.
    pub latents: Vec<LatentState>,
}

const REFERENCE_AGE: f64 = 70.0;

/// Renders one scan. Pixel values are clamped to [0, 1].
pub fn render_scan(latent: &LatentState, look: &Appearance, acq: &Acquisition, size: usize, noise: f64, seed: u64) -> GrayImage {
    let s = latent.severity.clamp(0.0, 1.0);
    let age = latent.age - REFERENCE_AGE;
    let thickness = (look.band_thickness * (1.0 - 0.25 * s) * (1.0 - look.age_drift * age)).max(0.02);
    let brightness = look.brightness - 0.008 * age;
    let hyper = (s - 0.3).max(0.0) / 0.7;
    let n = size as f64;
    let mut img = GrayImage::from_fn(size, size, |y, x| {
        let v = (y as f64 + 0.5) / n;
        let mut u = (x as f64 + 0.5) / n;
        if look.mirrored {
            u = 1.0 - u;
        }
        let mut p = 0.15 + 0.004 * age;
        for w in &look.texture {
            p += w.amplitude * (2.0 * PI * (w.freq_x * u + w.freq_y * v) + w.phase).sin();
        }
        let centre = look.band_position + look.curvature * (u - 0.5).powi(2) + acq.vertical_shift;
        let d = (v - centre) / thickness;
        p += brightness * (-0.5 * d * d).exp();
        for &site in &look.lesion_sites {
            let du = (u - site) / 0.05;
            let dv = (v - (centre - thickness)) / 0.04;
            p += 0.45 * s * (-0.5 * (du * du + dv * dv)).exp();
        }
        if v > centre + thickness {
            let du = (u - look.hypertransmission_site) / 0.15;
            p += 0.4 * hyper * (-0.5 * du * du).exp();
        }
        for &(at, width, depth) in &acq.shadows {
            let du = (u - at) / width;
            p *= 1.0 - depth * (-0.5 * du * du).exp();
        }
        p * acq.gain * (1.0 + acq.tilt * (u - 0.5))
    });
    if noise > 0.0 {
        let mut rng = rng_for(seed, &[]);
        let normal = Normal::new(0.0, noise).expect("finite noise");
        let data = img.pixels().iter().map(|p| p + normal.sample(&mut rng)).collect();
        img = GrayImage::new(size, size, data).expect("same shape");
    }
    img.clamped()
}

const PATIENT_STREAM: u64 = 0x9a7;
const SCAN_STREAM: u64 = 0x5ca;

/// Generates a cohort, its rendered images, and the latent state of every scan.
pub fn generate_cohort(cfg: &SynthConfig, seed: u64) -> Result<SynthCohort> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut latents = Vec::new();
    for p in 0..cfg.patients {
        let mut rng = rng_for(seed, &[PATIENT_STREAM, p as u64]);
        let patient_id = format!("P{p:04}");
        let sex = if rng.random_bool(0.5) { Sex::Female } else { Sex::Male };
        let baseline_age = rng.random_range(cfg.age_range[0]..=cfg.age_range[1]);
        let start_day = 16_000.0 + rng.random_range(0..2_000) as f64;
        let rate = cfg.progression_rate * (cfg.rate_spread * Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).exp();
        let initial = rng.random_range(cfg.initial_severity[0]..=cfg.initial_severity[1]);
        let lead = if rng.random_bool(0.5) { Laterality::Left } else { Laterality::Right };

        let visits = (Normal::new(cfg.visits_mean, cfg.visits_std.max(1e-12)).unwrap().sample(&mut rng).round() as i64).max(1) as usize;
        let mut times = Vec::with_capacity(visits);
        let mut t = 0.0;
        for v in 0..visits {
            if v > 0 {
                t += rng.random_range(cfg.gap_years[0]..=cfg.gap_years[1]);
            }
            times.push(t);
        }

        let texture: Vec<Wave> = (0..3)
            .map(|_| Wave {
                freq_x: rng.random_range(0.5..2.5),
                freq_y: rng.random_range(0.5..2.5),
                phase: rng.random_range(0.0..2.0 * PI),
                amplitude: rng.random_range(0.02..0.06),
            })
            .collect();
        let band_position = rng.random_range(0.4..0.55) + if sex == Sex::Female { 0.04 } else { 0.0 };
        let band_thickness = rng.random_range(0.055..0.075);
        let curvature = rng.random_range(-0.3..0.3);
        let brightness = rng.random_range(0.55..0.65);

        let eyes: &[Laterality] = if cfg.eyes_per_patient == 2 {
            &[Laterality::Right, Laterality::Left]
        } else {
            std::slice::from_ref(&lead)
        };
        for &side in eyes {
            let lag = if side == lead { 0.0 } else { cfg.fellow_lag_years };
            let look = Appearance {
                texture: texture.clone(),
                band_position,
                band_thickness,
                curvature,
                brightness,
                age_drift: cfg.age_drift,
                lesion_sites: (0..3).map(|_| rng.random_range(0.15..0.85)).collect(),
                hypertransmission_site: rng.random_range(0.3..0.7),
                mirrored: side == Laterality::Left,
            };
            let side_key = match side {
                Laterality::Right => 0,
                Laterality::Left => 1,
            };
            for (v, &t) in times.iter().enumerate() {
                let severity = (initial + rate * (t - lag)).clamp(0.0, 1.0);
                let acuity = 0.05 + 0.9 * severity.powf(1.5) + rng.random_range(-0.08..0.08);
                let latent = LatentState { severity, age: baseline_age + t, sex, acuity };
                let acq = Acquisition {
                    vertical_shift: rng.random_range(-0.02..0.02),
                    gain: rng.random_range(0.93..1.07),
                    tilt: cfg.artifact_strength * rng.random_range(-0.3..0.3),
                    shadows: [0, 1].map(|_| (rng.random_range(0.1..0.9), rng.random_range(0.02..0.05), cfg.artifact_strength * rng.random_range(0.0..0.6))),
                };
                let scan_seed = derive_seed(seed, &[SCAN_STREAM, p as u64, side_key, v as u64]);
                images.push(render_scan(&latent, &look, &acq, cfg.image_size, cfg.noise, scan_seed));
                let scan_id = format!("{patient_id}-{}-{v:02}", if side == Laterality::Right { "R" } else { "L" });
                records.push(ScanRecord {
                    image_ref: format!("images/{scan_id}.png"),
                    scan_id,
                    patient_id: patient_id.clone(),
                    laterality: side,
                    timestamp: start_day + (t * DAYS_PER_YEAR).round(),
                    labels: labels_for(&latent),
                });
                latents.push(latent);
            }
        }
    }
    Ok(SynthCohort { cohort: Cohort::new(records)?, images, latents })
}

fn labels_for(latent: &LatentState) -> BTreeMap<String, LabelValue> {
    let round = |x: f64| (x * 1e4).round() / 1e4;
    BTreeMap::from([
        (STAGE_TASK.to_string(), LabelValue::Number(latent.stage() as u8 as f64)),
        (AGE_TASK.to_string(), LabelValue::Number(round(latent.age))),
        (SEX_TASK.to_string(), LabelValue::Number((latent.sex == Sex::Female) as u8 as f64)),
        (ACUITY_TASK.to_string(), LabelValue::Number(round(latent.acuity))),
    ])
}

/// Writes `manifest.csv` and one PNG per scan under `dir`.
pub fn write_synth(synth: &SynthCohort, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    for (record, image) in synth.cohort.records().iter().zip(&synth.images) {
        image.save_png(&dir.join(&record.image_ref))?;
    }
    let file = fs::File::create(dir.join("manifest.csv"))?;
    write_manifest(&synth.cohort, std::io::BufWriter::new(file))
}
