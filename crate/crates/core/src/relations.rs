//! Metadata-derived contrastive relationships between scans.
//!
//! Two scans of the same eye whose acquisition gap lies inside
//! `[min_gap, max_gap]` are positives. Scans of different patients are
//! negatives. Every other same-patient pair (fellow eyes, gaps outside the
//! window) has an unknown relationship and is excluded from the loss.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, ScanRecord, DAYS_PER_YEAR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    Positive,
    Negative,
    Excluded,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Relation::Positive => "+",
            Relation::Negative => "-",
            Relation::Excluded => "?",
        };
        f.write_str(s)
    }
}

/// Upper bound on the acquisition gap of a positive pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MaxGapRepr", into = "MaxGapRepr")]
pub enum MaxGap {
    Years(f64),
    Unbounded,
}

impl MaxGap {
    pub fn admits(self, gap_years: f64) -> bool {
        match self {
            MaxGap::Years(max) => gap_years <= max,
            MaxGap::Unbounded => true,
        }
    }
}

impl fmt::Display for MaxGap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaxGap::Years(y) => write!(f, "{y}"),
            MaxGap::Unbounded => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for MaxGap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "unbounded" | "none" => Ok(MaxGap::Unbounded),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(MaxGap::Years)
                .ok_or_else(|| format!("invalid maximum gap `{s}`")),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MaxGapRepr {
    Years(f64),
    Text(String),
}

impl TryFrom<MaxGapRepr> for MaxGap {
    type Error = String;

    fn try_from(value: MaxGapRepr) -> Result<Self, Self::Error> {
        match value {
            MaxGapRepr::Years(y) if y.is_finite() => Ok(MaxGap::Years(y)),
            MaxGapRepr::Years(_) => Ok(MaxGap::Unbounded),
            MaxGapRepr::Text(s) => s.parse(),
        }
    }
}

impl From<MaxGap> for MaxGapRepr {
    fn from(value: MaxGap) -> Self {
        match value {
            MaxGap::Years(y) => MaxGapRepr::Years(y),
            MaxGap::Unbounded => MaxGapRepr::Text("inf".into()),
        }
    }
}

/// Temporal window (in years) for same-eye positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationConfig {
    pub min_gap_years: f64,
    pub max_gap: MaxGap,
}

impl RelationConfig {
    pub fn new(min_gap_years: f64, max_gap: MaxGap) -> Result<Self> {
        let cfg = Self { min_gap_years, max_gap };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_gap_years.is_finite() && self.min_gap_years >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "minimum gap must be finite and >= 0, got {}",
                self.min_gap_years
            )));
        }
        if let MaxGap::Years(max) = self.max_gap {
            if !(max > self.min_gap_years) {
                return Err(Error::InvalidConfig(format!(
                    "maximum gap {max} must exceed minimum gap {}",
                    self.min_gap_years
                )));
            }
        }
        Ok(())
    }

    /// Same minimum gap, no upper limit.
    pub fn unbounded(&self) -> Self {
        Self { min_gap_years: self.min_gap_years, max_gap: MaxGap::Unbounded }
    }

    pub fn admits(&self, gap_years: f64) -> bool {
        gap_years >= self.min_gap_years && self.max_gap.admits(gap_years)
    }
}

pub fn gap_years(a: &ScanRecord, b: &ScanRecord) -> f64 {
    (a.timestamp - b.timestamp).abs() / DAYS_PER_YEAR
}

/// Classifies the relationship between two distinct scans.
pub fn relate(a: &ScanRecord, b: &ScanRecord, cfg: &RelationConfig) -> Result<Relation> {
    if a.scan_id == b.scan_id {
        return Err(Error::SelfPair(a.scan_id.clone()));
    }
    Ok(relate_unchecked(a, b, cfg))
}

pub(crate) fn relate_unchecked(a: &ScanRecord, b: &ScanRecord, cfg: &RelationConfig) -> Relation {
    if a.patient_id != b.patient_id {
        Relation::Negative
    } else if a.laterality == b.laterality && cfg.admits(gap_years(a, b)) {
        Relation::Positive
    } else {
        Relation::Excluded
    }
}

/// All positive pairs of a cohort under one [`RelationConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairIndex {
    config: RelationConfig,
    /// Record-index pairs `(i, j)` with `i < j`, sorted.
    pairs: Vec<(usize, usize)>,
    partners: Vec<Vec<usize>>,
    orphans: Vec<usize>,
}

impl PairIndex {
    pub fn config(&self) -> &RelationConfig {
        &self.config
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Positive partners of record `index`, ascending.
    pub fn partners(&self, index: usize) -> &[usize] {
        &self.partners[index]
    }

    /// Records with no positive partner, ascending.
    pub fn orphans(&self) -> &[usize] {
        &self.orphans
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes `scan_a<TAB>scan_b` rows, then one `orphan<TAB>scan` row per orphan.
    pub fn write_table<W: Write>(&self, cohort: &Cohort, mut sink: W) -> Result<()> {
        writeln!(sink, "scan_a\tscan_b")?;
        for &(i, j) in &self.pairs {
            writeln!(sink, "{}\t{}", cohort.record(i).scan_id, cohort.record(j).scan_id)?;
        }
        for &o in &self.orphans {
            writeln!(sink, "orphan\t{}", cohort.record(o).scan_id)?;
        }
        Ok(())
    }
}

/// Enumerates positives eye by eye; the result is sorted and independent of cohort order.
pub fn build_pair_index(cohort: &Cohort, cfg: &RelationConfig) -> PairIndex {
    let mut pairs = Vec::new();
    for ids in cohort.eyes().values() {
        for (k, &i) in ids.iter().enumerate() {
            for &j in &ids[k + 1..] {
                let (a, b) = (cohort.record(i), cohort.record(j));
                if relate_unchecked(a, b, cfg) == Relation::Positive {
                    pairs.push((i.min(j), i.max(j)));
                }
            }
        }
    }
    pairs.sort_unstable();
    let mut partners = vec![Vec::new(); cohort.len()];
    for &(i, j) in &pairs {
        partners[i].push(j);
        partners[j].push(i);
    }
    for p in &mut partners {
        p.sort_unstable();
    }
    let orphans = (0..cohort.len()).filter(|&i| partners[i].is_empty()).collect();
    PairIndex { config: *cfg, pairs, partners, orphans }
}

/// Summary of a [`PairIndex`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairStats {
    pub pair_count: usize,
    pub orphan_count: usize,
    /// Same-eye pairs with no gap limits at all (minimum gap 0, unbounded).
    pub unfiltered_count: usize,
    /// Same-eye pairs meeting the minimum gap with no upper limit.
    pub unbounded_count: usize,
    /// `pair_count / unbounded_count`, 0 when there are no candidates.
    pub fraction_of_unbounded: f64,
    /// Gap histogram of the indexed pairs in one-month bins (bin k covers `[k/12, (k+1)/12)` years).
    pub gap_histogram: Vec<usize>,
}

pub const HISTOGRAM_BIN_YEARS: f64 = 1.0 / 12.0;

pub fn pair_stats(index: &PairIndex, cohort: &Cohort) -> PairStats {
    let unbounded = index.config.unbounded();
    let mut unfiltered_count = 0;
    let mut unbounded_count = 0;
    for ids in cohort.eyes().values() {
        for (k, &i) in ids.iter().enumerate() {
            for &j in &ids[k + 1..] {
                unfiltered_count += 1;
                if unbounded.admits(gap_years(cohort.record(i), cohort.record(j))) {
                    unbounded_count += 1;
                }
            }
        }
    }
    let mut gap_histogram: Vec<usize> = Vec::new();
    for &(i, j) in index.pairs() {
        let bin = (gap_years(cohort.record(i), cohort.record(j)) / HISTOGRAM_BIN_YEARS).floor() as usize;
        if gap_histogram.len() <= bin {
            gap_histogram.resize(bin + 1, 0);
        }
        gap_histogram[bin] += 1;
    }
    let pair_count = index.len();
    PairStats {
        pair_count,
        orphan_count: index.orphans().len(),
        unfiltered_count,
        unbounded_count,
        fraction_of_unbounded: if unbounded_count == 0 { 0.0 } else { pair_count as f64 / unbounded_count as f64 },
        gap_histogram,
    }
}

impl PairStats {
    /// Key-value report, one `key<TAB>value` per line.
    pub fn write_report<W: Write>(&self, cfg: &RelationConfig, mut sink: W) -> Result<()> {
        writeln!(sink, "min_gap_years\t{}", cfg.min_gap_years)?;
        writeln!(sink, "max_gap_years\t{}", cfg.max_gap)?;
        writeln!(sink, "pair_count\t{}", self.pair_count)?;
        writeln!(sink, "orphan_count\t{}", self.orphan_count)?;
        writeln!(sink, "unbounded_count\t{}", self.unbounded_count)?;
        writeln!(sink, "unfiltered_count\t{}", self.unfiltered_count)?;
        writeln!(sink, "fraction_of_unbounded\t{}", self.fraction_of_unbounded)?;
        let bins: Vec<String> = self.gap_histogram.iter().map(|c| c.to_string()).collect();
        writeln!(sink, "gap_histogram_months\t{}", bins.join(","))?;
        Ok(())
    }
}

/// Relation counts over every unordered pair of a cohort. Quadratic; meant for audits.
pub fn relation_census(cohort: &Cohort, cfg: &RelationConfig) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::from([("positive", 0), ("negative", 0), ("excluded", 0)]);
    let records = cohort.records();
    for (k, a) in records.iter().enumerate() {
        for b in &records[k + 1..] {
            let key = match relate_unchecked(a, b, cfg) {
                Relation::Positive => "positive",
                Relation::Negative => "negative",
                Relation::Excluded => "excluded",
            };
            *counts.get_mut(key).unwrap() += 1;
        }
    }
    counts
}
