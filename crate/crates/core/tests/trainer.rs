use metacl::augment::AugmentConfig;
use metacl::cohort::{Cohort, Laterality};
use metacl::imaging::GrayImage;
use metacl::nn::EncoderSpec;
use metacl::relations::MaxGap;
use metacl::synth::{generate_cohort, SynthConfig};
use metacl::trainer::{pretrain, Family, Method, TargetNetwork, TrainConfig, TrainState, Trainer};

fn small_config(aug: &AugmentConfig, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk(aug.output_len(), steps);
    cfg.batch_size = 16;
    cfg.encoder = EncoderSpec { input_dim: aug.output_len(), hidden: vec![32], embedding_dim: 16, projector: vec![32, 16], predictor: vec![32], head_batch_norm: true };
    cfg.base_lr = 1e-3;
    cfg
}

fn small_cohort(patients: usize) -> (Cohort, Vec<GrayImage>) {
    let s = generate_cohort(&SynthConfig { patients, ..SynthConfig::default() }, 21).unwrap();
    (s.cohort, s.images)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn loss_decreases_on_a_small_cohort() {
    let (cohort, images) = small_cohort(5);
    assert!((30..=80).contains(&cohort.len()), "{}", cohort.len());
    let aug = AugmentConfig::desk(32);
    let cfg = small_config(&aug, 200);
    for method in [Method::standard(Family::SimClr), Method::metadata(Family::SimClr, MaxGap::Years(1.0))] {
        let out = pretrain(&cohort, &images, method, &cfg, &aug).unwrap();
        assert_eq!(out.trace.len(), 200);
        let first = mean(out.trace[..20].iter().map(|r| r.loss));
        let last = mean(out.trace[180..].iter().map(|r| r.loss));
        assert!(last < first, "{method}: {first} -> {last}");
    }
}

#[test]
fn teacher_follows_the_ema_recurrence() {
    let (cohort, images) = small_cohort(4);
    let aug = AugmentConfig::desk(32);
    let mut cfg = small_config(&aug, 10);
    cfg.ema_tau = 0.9;
    let mut trainer = Trainer::new(&cohort, &images, Method::standard(Family::Byol), &cfg, &aug).unwrap();
    let before: Vec<Vec<f64>> = trainer.state.teacher.as_ref().unwrap().blocks().iter().map(|(_, b)| b.to_vec()).collect();
    trainer.step().unwrap();
    let online = trainer.state.online.without_predictor();
    let teacher = trainer.state.teacher.as_ref().unwrap();
    for ((t, o), b) in teacher.blocks().iter().zip(online.blocks()).zip(&before) {
        assert_eq!(t.0, o.0);
        for k in 0..b.len() {
            let want = 0.9 * b[k] + 0.1 * o.1[k];
            assert!((t.1[k] - want).abs() < 1e-15, "{} [{k}]", t.0);
        }
    }
}

#[test]
fn ablation_without_ema_has_no_teacher() {
    let (cohort, images) = small_cohort(3);
    let aug = AugmentConfig::desk(32);
    let mut cfg = small_config(&aug, 5);
    cfg.target = TargetNetwork::Online;
    cfg.use_predictor = false;
    let out = pretrain(&cohort, &images, Method::standard(Family::Byol), &cfg, &aug).unwrap();
    assert!(out.state.teacher.is_none());
    assert!(out.state.online.predictor.is_none());
}

/// One scan per patient leaves every scan an orphan, so metadata pairing falls back to two-view self-pairs.
#[test]
fn metadata_pairing_without_partners_reduces_to_standard() {
    let (synth, images) = small_cohort(30);
    let mut records = Vec::new();
    let mut imgs = Vec::new();
    for (r, img) in synth.records().iter().zip(&images) {
        if r.laterality == Laterality::Right && r.scan_id.ends_with("-00") {
            records.push(r.clone());
            imgs.push(img.clone());
        }
    }
    let cohort = Cohort::new(records).unwrap();
    let aug = AugmentConfig::desk(32);
    let mut cfg = small_config(&aug, 20);
    cfg.debias = None;
    let a = pretrain(&cohort, &imgs, Method::standard(Family::SimClr), &cfg, &aug).unwrap();
    let b = pretrain(&cohort, &imgs, Method::metadata(Family::SimClr, MaxGap::Unbounded), &cfg, &aug).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.state.online, b.state.online);
}

fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let mut buf = Vec::new();
    state.write_checkpoint(&mut buf).unwrap();
    buf
}

#[test]
fn runs_are_deterministic_and_checkpoints_round_trip() {
    let (cohort, images) = small_cohort(4);
    let aug = AugmentConfig::desk(32);
    let cfg = small_config(&aug, 30);
    for method in Method::all() {
        let a = pretrain(&cohort, &images, method, &cfg, &aug).unwrap();
        let b = pretrain(&cohort, &images, method, &cfg, &aug).unwrap();
        assert_eq!(a.trace, b.trace, "{method}");
        let bytes = checkpoint_bytes(&a.state);
        assert_eq!(bytes, checkpoint_bytes(&b.state), "{method}");
        let back = TrainState::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, a.state, "{method}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (cohort, images) = small_cohort(4);
    let aug = AugmentConfig::desk(32);
    let cfg = small_config(&aug, 40);
    for method in [Method::metadata(Family::SimClr, MaxGap::Years(0.5)), Method::standard(Family::Byol)] {
        let straight = pretrain(&cohort, &images, method, &cfg, &aug).unwrap();
        let mut first = Trainer::new(&cohort, &images, method, &cfg, &aug).unwrap();
        let mut trace = Vec::new();
        for _ in 0..17 {
            trace.push(first.step().unwrap());
        }
        let saved = checkpoint_bytes(&first.state);
        drop(first);
        let state = TrainState::read_checkpoint(saved.as_slice()).unwrap();
        let mut second = Trainer::resume(&cohort, &images, state, &cfg, &aug).unwrap();
        trace.extend(second.run(|_| Ok(())).unwrap());
        assert_eq!(trace, straight.trace, "{method}");
        assert_eq!(checkpoint_bytes(&second.state), checkpoint_bytes(&straight.state), "{method}");
    }
}

#[test]
fn resume_rejects_a_different_configuration() {
    let (cohort, images) = small_cohort(3);
    let aug = AugmentConfig::desk(32);
    let cfg = small_config(&aug, 10);
    let out = pretrain(&cohort, &images, Method::standard(Family::SimClr), &cfg, &aug).unwrap();
    let other = TrainConfig { base_lr: 2e-3, ..cfg };
    assert!(Trainer::resume(&cohort, &images, out.state, &other, &aug).is_err());
}

#[test]
fn truncated_checkpoints_are_rejected() {
    let (cohort, images) = small_cohort(3);
    let aug = AugmentConfig::desk(32);
    let out = pretrain(&cohort, &images, Method::standard(Family::Byol), &small_config(&aug, 4), &aug).unwrap();
    let bytes = checkpoint_bytes(&out.state);
    for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
        assert!(TrainState::read_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}
