//! Contrastive batch sampling and per-batch relation masks.
//!
//! A batch holds `B/2` sampling units, each filling two adjacent slots that
//! are designated partners. Under metadata pairing a unit is a positive pair
//! from the [`PairIndex`] or, for scans without any partner, a self-pair of
//! two independently augmented views. Standard pairing always uses
//! self-pairs. No scan occupies more than one unit per batch.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{augment, AugmentConfig};
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::objectives::{MaskEntry, PairMask};
use crate::relations::{relate_unchecked, PairIndex, RelationConfig};
use crate::seeding::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    /// Record index in the cohort.
    pub record: usize,
    /// Slot index of the designated positive partner.
    pub partner: usize,
    pub view_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Unit {
    Pair(usize, usize),
    SelfPair(usize),
}

/// How positives are formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pairing {
    /// Two views of one scan; every other slot is a negative.
    Standard,
    /// Metadata-derived pairs, masked by the relation function.
    Metadata { relation: RelationConfig, self_pair_fallback: bool },
}

/// Samples batch compositions from a fixed population of units.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    units: Vec<Unit>,
    pairing: Pairing,
}

impl BatchSampler {
    pub fn standard(cohort: &Cohort) -> Self {
        Self { units: (0..cohort.len()).map(Unit::SelfPair).collect(), pairing: Pairing::Standard }
    }

    /// Units are the indexed pairs plus, when `self_pair_fallback` is set, one self-pair per orphan.
    pub fn metadata(index: &PairIndex, self_pair_fallback: bool) -> Self {
        let mut units: Vec<Unit> = index.pairs().iter().map(|&(i, j)| Unit::Pair(i, j)).collect();
        if self_pair_fallback {
            units.extend(index.orphans().iter().map(|&o| Unit::SelfPair(o)));
        }
        Self { units, pairing: Pairing::Metadata { relation: *index.config(), self_pair_fallback } }
    }

    pub fn pairing(&self) -> Pairing {
        self.pairing
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    /// Draws `batch_size / 2` units uniformly without scan repetition.
    pub fn sample_slots(&self, batch_size: usize, seed: u64) -> Result<Vec<Slot>> {
        if batch_size == 0 || batch_size % 2 == 1 {
            return Err(Error::OddBatchSize(batch_size));
        }
        let needed = batch_size / 2;
        let mut rng = rng_for(seed, &[0]);
        let mut used: HashSet<usize> = HashSet::with_capacity(batch_size);
        let mut chosen: Vec<Unit> = Vec::with_capacity(needed);
        let take = |unit: Unit, used: &mut HashSet<usize>, chosen: &mut Vec<Unit>| {
            let fits = match unit {
                Unit::Pair(i, j) => !used.contains(&i) && !used.contains(&j),
                Unit::SelfPair(i) => !used.contains(&i),
            };
            if fits {
                match unit {
                    Unit::Pair(i, j) => {
                        used.insert(i);
                        used.insert(j);
                    }
                    Unit::SelfPair(i) => {
                        used.insert(i);
                    }
                }
                chosen.push(unit);
            }
        };
        if !self.units.is_empty() {
            for _ in 0..32 * batch_size {
                if chosen.len() == needed {
                    break;
                }
                let unit = self.units[rng.random_range(0..self.units.len())];
                take(unit, &mut used, &mut chosen);
            }
        }
        if chosen.len() < needed {
            let mut order: Vec<usize> = (0..self.units.len()).collect();
            order.shuffle(&mut rng);
            for k in order {
                if chosen.len() == needed {
                    break;
                }
                take(self.units[k], &mut used, &mut chosen);
            }
        }
        if chosen.len() < needed {
            return Err(Error::InsufficientPairs { needed, found: chosen.len() });
        }
        let mut slots = Vec::with_capacity(batch_size);
        for (k, unit) in chosen.into_iter().enumerate() {
            let (a, b) = match unit {
                Unit::Pair(i, j) => (i, j),
                Unit::SelfPair(i) => (i, i),
            };
            let s = 2 * k;
            slots.push(Slot { record: a, partner: s + 1, view_seed: derive_seed(seed, &[1, s as u64]) });
            slots.push(Slot { record: b, partner: s, view_seed: derive_seed(seed, &[1, s as u64 + 1]) });
        }
        Ok(slots)
    }

    pub fn mask(&self, slots: &[Slot], cohort: &Cohort) -> PairMask {
        match self.pairing {
            Pairing::Standard => PairMask::view_pairs(slots.len()),
            Pairing::Metadata { relation, .. } => relation_mask(slots, cohort, &relation),
        }
    }

    /// Samples a composition and augments every slot once.
    pub fn sample(&self, cohort: &Cohort, images: &[GrayImage], augment_cfg: &AugmentConfig, batch_size: usize, seed: u64) -> Result<ContrastiveBatch> {
        let slots = self.sample_slots(batch_size, seed)?;
        let views = slots
            .iter()
            .map(|s| augment(&images[s.record], augment_cfg, s.view_seed))
            .collect::<Result<Vec<_>>>()?;
        let mask = self.mask(&slots, cohort);
        Ok(ContrastiveBatch { slots, views, mask })
    }
}

/// Relation mask over batch slots.
///
/// Off-diagonal entries between distinct scans follow the relation function.
/// Two views of one scan are [`MaskEntry::Identity`] unless they are designated
/// partners, which are always [`MaskEntry::Positive`].
pub fn relation_mask(slots: &[Slot], cohort: &Cohort, cfg: &RelationConfig) -> PairMask {
    let mut mask = PairMask::filled(slots.len(), MaskEntry::Identity);
    for (i, a) in slots.iter().enumerate() {
        for (j, b) in slots.iter().enumerate().skip(i + 1) {
            let entry = if a.partner == j {
                MaskEntry::Positive
            } else if a.record == b.record {
                MaskEntry::Identity
            } else {
                relate_unchecked(cohort.record(a.record), cohort.record(b.record), cfg).into()
            };
            mask.set_symmetric(i, j, entry);
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub slots: Vec<Slot>,
    pub views: Vec<GrayImage>,
    pub mask: PairMask,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Audit table: `slot, scan_id, partner, positives, negatives, excluded`, tab separated.
    pub fn write_audit<W: Write>(&self, cohort: &Cohort, mut sink: W) -> Result<()> {
        writeln!(sink, "slot\tscan_id\tpartner\tpositives\tnegatives\texcluded")?;
        for (i, s) in self.slots.iter().enumerate() {
            let count = |e: MaskEntry| (0..self.len()).filter(|&j| self.mask.get(i, j) == e).count();
            writeln!(
                sink,
                "{i}\t{}\t{}\t{}\t{}\t{}",
                cohort.record(s.record).scan_id,
                s.partner,
                count(MaskEntry::Positive),
                count(MaskEntry::Negative),
                count(MaskEntry::Excluded)
            )?;
        }
        Ok(())
    }
}

/// One-shot convenience over [`BatchSampler::metadata`].
pub fn sample_batch(
    index: &PairIndex,
    cohort: &Cohort,
    images: &[GrayImage],
    augment_cfg: &AugmentConfig,
    batch_size: usize,
    seed: u64,
    self_pair_fallback: bool,
) -> Result<ContrastiveBatch> {
    BatchSampler::metadata(index, self_pair_fallback).sample(cohort, images, augment_cfg, batch_size, seed)
}
