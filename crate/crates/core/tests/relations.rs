use std::collections::BTreeSet;

use metacl::augment::AugmentConfig;
use metacl::batching::{relation_mask, BatchSampler};
use metacl::cohort::{ingest_manifest, write_manifest, Cohort, LabelValue, Laterality, ScanRecord, DAYS_PER_YEAR};
use metacl::imaging::GrayImage;
use metacl::objectives::MaskEntry;
use metacl::relations::{build_pair_index, pair_stats, relate, MaxGap, Relation, RelationConfig};
use metacl::seeding::rng_for;
use proptest::prelude::*;
use rand::Rng;

/// Literal transcription of the relation rule, written independently of the library.
fn oracle(a: &ScanRecord, b: &ScanRecord, min_gap: f64, max_gap: Option<f64>) -> Relation {
    if a.patient_id != b.patient_id {
        return Relation::Negative;
    }
    let dt = (a.timestamp - b.timestamp).abs() / 365.25;
    let within = dt >= min_gap && max_gap.map_or(true, |m| dt <= m);
    if a.laterality == b.laterality && within {
        Relation::Positive
    } else {
        Relation::Excluded
    }
}

fn random_cohort(scans: usize, patients: usize, seed: u64) -> Cohort {
    let mut rng = rng_for(seed, &[]);
    let records = (0..scans)
        .map(|k| ScanRecord {
            scan_id: format!("s{k}"),
            patient_id: format!("p{}", rng.random_range(0..patients)),
            laterality: if rng.random_bool(0.5) { Laterality::Left } else { Laterality::Right },
            timestamp: rng.random_range(0.0..4.0 * DAYS_PER_YEAR).round(),
            image_ref: format!("img/{k}.png"),
            labels: Default::default(),
        })
        .collect();
    Cohort::new(records).unwrap()
}

#[test]
fn relate_matches_oracle_on_random_pairs() {
    let cohort = random_cohort(400, 30, 11);
    let mut rng = rng_for(12, &[]);
    let windows = [Some(0.5), Some(1.0), None];
    let mut checked = 0;
    while checked < 12_000 {
        let i = rng.random_range(0..cohort.len());
        let j = rng.random_range(0..cohort.len());
        let (a, b) = (cohort.record(i), cohort.record(j));
        let max = windows[checked % 3];
        let cfg = RelationConfig::new(0.02, max.map_or(MaxGap::Unbounded, MaxGap::Years)).unwrap();
        if i == j {
            assert!(relate(a, b, &cfg).is_err());
            continue;
        }
        assert_eq!(relate(a, b, &cfg).unwrap(), oracle(a, b, 0.02, max), "{a:?} {b:?} {cfg:?}");
        checked += 1;
    }
}

#[test]
fn relation_is_symmetric_and_fellow_eyes_are_excluded() {
    let cohort = random_cohort(200, 10, 5);
    let cfg = RelationConfig::new(0.02, MaxGap::Unbounded).unwrap();
    for a in cohort.records() {
        for b in cohort.records() {
            if a.scan_id == b.scan_id {
                continue;
            }
            let r = relate(a, b, &cfg).unwrap();
            assert_eq!(r, relate(b, a, &cfg).unwrap());
            if a.patient_id == b.patient_id && a.laterality != b.laterality {
                assert_eq!(r, Relation::Excluded);
            }
        }
    }
}

fn brute_force(cohort: &Cohort, min_gap: f64, max_gap: Option<f64>) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for i in 0..cohort.len() {
        for j in i + 1..cohort.len() {
            if oracle(cohort.record(i), cohort.record(j), min_gap, max_gap) == Relation::Positive {
                out.insert((i, j));
            }
        }
    }
    out
}

#[test]
fn pair_index_matches_brute_force() {
    for (scans, patients) in [(50, 5), (600, 60), (2_000, 150)] {
        let cohort = random_cohort(scans, patients, scans as u64);
        let mut previous: Option<BTreeSet<(usize, usize)>> = None;
        for max in [Some(0.5), Some(1.0), None] {
            let cfg = RelationConfig::new(0.02, max.map_or(MaxGap::Unbounded, MaxGap::Years)).unwrap();
            let index = build_pair_index(&cohort, &cfg);
            let got: BTreeSet<(usize, usize)> = index.pairs().iter().copied().collect();
            let want = brute_force(&cohort, 0.02, max);
            assert_eq!(got, want, "{scans} scans, window {max:?}");
            assert_eq!(index.len(), want.len());
            if let Some(prev) = &previous {
                assert!(prev.is_subset(&got));
            }
            for i in 0..cohort.len() {
                let expected: Vec<usize> = want.iter().filter_map(|&(a, b)| if a == i { Some(b) } else if b == i { Some(a) } else { None }).collect();
                let mut partners = index.partners(i).to_vec();
                partners.sort_unstable();
                assert_eq!(partners, expected);
                assert_eq!(index.orphans().contains(&i), expected.is_empty());
            }
            let stats = pair_stats(&index, &cohort);
            assert_eq!(stats.pair_count, want.len());
            assert_eq!(stats.unbounded_count, brute_force(&cohort, 0.02, None).len());
            assert_eq!(stats.gap_histogram.iter().sum::<usize>(), want.len());
            previous = Some(got);
        }
    }
}

#[test]
fn sampled_batches_give_every_slot_a_positive() {
    let cohort = random_cohort(300, 40, 9);
    let cfg = RelationConfig::new(0.02, MaxGap::Years(0.5)).unwrap();
    let index = build_pair_index(&cohort, &cfg);
    let sampler = BatchSampler::metadata(&index, true);
    for seed in 0..1_000 {
        let slots = sampler.sample_slots(32, seed).unwrap();
        let mask = relation_mask(&slots, &cohort, &cfg);
        let mut seen = BTreeSet::new();
        for (i, s) in slots.iter().enumerate() {
            assert_eq!(slots[s.partner].partner, i);
            assert!(!mask.positives(i).is_empty(), "slot {i} of batch {seed}");
            for (j, t) in slots.iter().enumerate() {
                if i == j {
                    assert_eq!(mask.get(i, j), MaskEntry::Identity);
                } else if s.partner == j {
                    assert_eq!(mask.get(i, j), MaskEntry::Positive);
                } else if s.record == t.record {
                    assert_eq!(mask.get(i, j), MaskEntry::Identity);
                } else {
                    let want: MaskEntry = relate(cohort.record(s.record), cohort.record(t.record), &cfg).unwrap().into();
                    assert_eq!(mask.get(i, j), want);
                }
            }
        }
        for unit in slots.chunks(2) {
            let records: BTreeSet<usize> = unit.iter().map(|s| s.record).collect();
            for r in records {
                assert!(seen.insert(r), "scan {r} repeated within batch {seed}");
            }
        }
    }
}

#[test]
fn standard_batches_pair_views_of_one_scan() {
    let cohort = random_cohort(100, 20, 3);
    let images: Vec<GrayImage> = (0..cohort.len()).map(|k| GrayImage::filled(32, 32, k as f64 / 100.0)).collect();
    let aug = AugmentConfig::desk(32);
    let batch = BatchSampler::standard(&cohort).sample(&cohort, &images, &aug, 16, 4).unwrap();
    for (i, s) in batch.slots.iter().enumerate() {
        assert_eq!(batch.slots[s.partner].record, s.record);
        assert_eq!(batch.mask.positives(i), vec![s.partner]);
        assert_eq!(batch.mask.negatives(i).len(), 14);
    }
}

fn record_strategy() -> impl Strategy<Value = (String, u8, bool, f64, Option<f64>, Option<u8>)> {
    (
        "[a-z]{1,6}",
        0u8..6,
        any::<bool>(),
        (0i64..200_000).prop_map(|v| v as f64 / 8.0),
        prop::option::of((0i64..1_000).prop_map(|v| v as f64 / 4.0)),
        prop::option::of(0u8..2),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trips(rows in prop::collection::vec(record_strategy(), 1..40)) {
        let records: Vec<ScanRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(k, (id, patient, left, t, age, grade))| {
                let mut labels = std::collections::BTreeMap::new();
                if let Some(a) = age {
                    labels.insert("age".to_string(), LabelValue::Number(a));
                }
                if let Some(g) = grade {
                    labels.insert("grade".to_string(), LabelValue::Class(["mild", "severe"][g as usize].into()));
                }
                ScanRecord {
                    scan_id: format!("{id}{k}"),
                    patient_id: format!("P{patient}"),
                    laterality: if left { Laterality::Left } else { Laterality::Right },
                    timestamp: t,
                    image_ref: format!("images/{id}{k}.png"),
                    labels,
                }
            })
            .collect();
        let cohort = Cohort::new(records).unwrap();
        let mut buf = Vec::new();
        write_manifest(&cohort, &mut buf).unwrap();
        let back = ingest_manifest(buf.as_slice()).unwrap();
        prop_assert_eq!(back.records(), cohort.records());
        let mut again = Vec::new();
        write_manifest(&back, &mut again).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn widening_the_window_never_loses_pairs(seed in 0u64..1_000, lo in 0.0f64..0.3, w1 in 0.05f64..1.0, w2 in 0.0f64..2.0) {
        let cohort = random_cohort(120, 8, seed);
        let narrow = RelationConfig::new(lo, MaxGap::Years(lo + w1)).unwrap();
        let wide = RelationConfig::new(lo, MaxGap::Years(lo + w1 + w2)).unwrap();
        let a: BTreeSet<_> = build_pair_index(&cohort, &narrow).pairs().iter().copied().collect();
        let b: BTreeSet<_> = build_pair_index(&cohort, &wide).pairs().iter().copied().collect();
        prop_assert!(a.is_subset(&b));
    }
}
