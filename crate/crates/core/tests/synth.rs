use metacl::cohort::Laterality;
use metacl::seeding::rng_for;
use metacl::synth::{generate_cohort, render_scan, Acquisition, Appearance, LatentState, Sex, SynthConfig, Wave, STAGE_TASK};
use rand::Rng;

fn look() -> Appearance {
    Appearance {
        texture: vec![Wave { freq_x: 1.2, freq_y: 0.7, phase: 0.3, amplitude: 0.04 }],
        band_position: 0.5,
        band_thickness: 0.065,
        curvature: 0.1,
        brightness: 0.6,
        age_drift: 0.012,
        lesion_sites: vec![0.3, 0.5, 0.7],
        hypertransmission_site: 0.5,
        mirrored: false,
    }
}

fn latent(severity: f64) -> LatentState {
    LatentState { severity, age: 70.0, sex: Sex::Female, acuity: 0.2 }
}

#[test]
fn renderer_distance_grows_with_severity_gap() {
    let acq = Acquisition::clean();
    let base = render_scan(&latent(0.0), &look(), &acq, 32, 0.0, 1);
    let small = render_scan(&latent(0.05), &look(), &acq, 32, 0.0, 1);
    let full = render_scan(&latent(1.0), &look(), &acq, 32, 0.0, 1);
    assert!(base.mean_abs_diff(&full) > base.mean_abs_diff(&small));
    let mut last = 0.0;
    for k in 1..=10 {
        let d = base.mean_abs_diff(&render_scan(&latent(k as f64 / 10.0), &look(), &acq, 32, 0.0, 1));
        assert!(d > last, "severity {}: {d} <= {last}", k as f64 / 10.0);
        last = d;
    }
}

#[test]
fn equal_latents_render_identically_without_noise() {
    let acq = Acquisition::clean();
    let a = render_scan(&latent(0.4), &look(), &acq, 32, 0.0, 1);
    let b = render_scan(&latent(0.4), &look(), &acq, 32, 0.0, 99);
    assert_eq!(a, b);
    assert!(a.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn generation_is_deterministic_and_consistent() {
    let cfg = SynthConfig { patients: 10, ..SynthConfig::default() };
    let a = generate_cohort(&cfg, 1).unwrap();
    let b = generate_cohort(&cfg, 1).unwrap();
    assert_eq!(a.cohort, b.cohort);
    assert_eq!(a.images, b.images);
    assert!((60..=140).contains(&a.cohort.len()));
    for idx in a.cohort.eyes().values() {
        for w in idx.windows(2) {
            assert!(a.cohort.record(w[0]).timestamp < a.cohort.record(w[1]).timestamp);
            assert!(a.latents[w[0]].severity <= a.latents[w[1]].severity);
        }
    }
    for (r, l) in a.cohort.records().iter().zip(&a.latents) {
        let stage = r.label(STAGE_TASK).unwrap().as_number().unwrap();
        assert_eq!(stage == 1.0, l.severity > 0.5);
    }
}

#[test]
fn zero_progression_keeps_severity_per_eye() {
    let cfg = SynthConfig { patients: 8, progression_rate: 0.0, ..SynthConfig::default() };
    let s = generate_cohort(&cfg, 2).unwrap();
    for idx in s.cohort.eyes().values() {
        assert!(idx.iter().all(|&i| s.latents[i].severity == s.latents[idx[0]].severity));
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end + 1 < order.len() && v[order[end + 1]] == v[order[k]] {
            end += 1;
        }
        for &i in &order[k..=end] {
            r[i] = (k + end) as f64 / 2.0;
        }
        k = end + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn image_distance_tracks_time_between_visits() {
    let s = generate_cohort(&SynthConfig::default(), 7).unwrap();
    let eyes: Vec<&Vec<usize>> = s.cohort.eyes().values().filter(|v| v.len() >= 2).collect();
    let mut rng = rng_for(3, &[]);
    let (mut gaps, mut dists) = (Vec::new(), Vec::new());
    while gaps.len() < 1_000 {
        let idx = eyes[rng.random_range(0..eyes.len())];
        let a = rng.random_range(0..idx.len());
        let b = rng.random_range(0..idx.len());
        if a == b {
            continue;
        }
        let (i, j) = (idx[a], idx[b]);
        gaps.push((s.cohort.record(i).timestamp - s.cohort.record(j).timestamp).abs());
        dists.push(s.images[i].mean_abs_diff(&s.images[j]));
    }
    let rho = spearman(&gaps, &dists);
    assert!(rho > 0.3, "rank correlation {rho}");
}

#[test]
fn fellow_eyes_differ_more_than_nearby_visits_of_one_eye() {
    let s = generate_cohort(&SynthConfig { fellow_lag_years: 1.0, ..SynthConfig::default() }, 8).unwrap();
    let records = s.cohort.records();
    let (mut same, mut fellow) = (Vec::new(), Vec::new());
    for (i, a) in records.iter().enumerate() {
        for (j, b) in records.iter().enumerate().skip(i + 1) {
            if a.patient_id != b.patient_id {
                continue;
            }
            let gap = (a.timestamp - b.timestamp).abs() / 365.25;
            let d = s.images[i].mean_abs_diff(&s.images[j]);
            if a.laterality == b.laterality && (0.02..=0.5).contains(&gap) {
                same.push(d);
            } else if a.laterality != b.laterality {
                fellow.push(d);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!same.is_empty() && !fellow.is_empty());
    assert!(mean(&fellow) > mean(&same), "fellow {} vs same-eye {}", mean(&fellow), mean(&same));
}

#[test]
fn fellow_eye_severity_lags_the_lead_eye() {
    let cfg = SynthConfig { patients: 40, rate_spread: 0.0, fellow_lag_years: 1.0, ..SynthConfig::default() };
    let s = generate_cohort(&cfg, 4).unwrap();
    let records = s.cohort.records();
    for (i, a) in records.iter().enumerate() {
        for (j, b) in records.iter().enumerate() {
            if a.patient_id == b.patient_id && a.laterality == Laterality::Right && b.laterality == Laterality::Left && a.timestamp == b.timestamp {
                let (sa, sb) = (s.latents[i].severity, s.latents[j].severity);
                let diff = (sa - sb).abs();
                // Same visit, lag of one year at the nominal rate, unless clamped at 0 or 1.
                if sa.min(sb) > 0.0 && sa.max(sb) < 1.0 {
                    assert!((diff - cfg.progression_rate).abs() < 1e-9, "{} {}", a.scan_id, b.scan_id);
                }
            }
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        SynthConfig { patients: 0, ..SynthConfig::default() },
        SynthConfig { eyes_per_patient: 3, ..SynthConfig::default() },
        SynthConfig { noise: -0.1, ..SynthConfig::default() },
        SynthConfig { gap_years: [0.5, 0.1], ..SynthConfig::default() },
    ] {
        assert!(generate_cohort(&cfg, 0).is_err());
    }
}
