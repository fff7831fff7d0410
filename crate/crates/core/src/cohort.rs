//! Longitudinal scan metadata: records, the per-eye index, and manifest I/O.
//!
//! Timestamps are held as fractional days since 1970-01-01. Time gaps are
//! converted to years with [`DAYS_PER_YEAR`] wherever they are compared.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DAYS_PER_YEAR: f64 = 365.25;

/// Prefix marking label columns in a manifest header.
pub const LABEL_PREFIX: &str = "label:";

const REQUIRED_COLUMNS: [&str; 5] = ["scan_id", "patient_id", "laterality", "timestamp", "image_ref"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Laterality {
    Left,
    Right,
}

impl Laterality {
    pub fn fellow(self) -> Self {
        match self {
            Laterality::Left => Laterality::Right,
            Laterality::Right => Laterality::Left,
        }
    }
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Laterality::Left => write!(f, "Left"),
            Laterality::Right => write!(f, "Right"),
        }
    }
}

impl FromStr for Laterality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l" | "left" => Ok(Laterality::Left),
            "r" | "right" => Ok(Laterality::Right),
            other => Err(format!("unrecognised laterality `{other}`")),
        }
    }
}

/// A per-task label: either a scalar or a class name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelValue {
    Number(f64),
    Class(String),
}

impl LabelValue {
    fn parse(cell: &str) -> Self {
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => LabelValue::Number(v),
            _ => LabelValue::Class(cell.to_string()),
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            LabelValue::Number(v) => Some(*v),
            LabelValue::Class(_) => None,
        }
    }
}

impl fmt::Display for LabelValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelValue::Number(v) => write!(f, "{v}"),
            LabelValue::Class(c) => write!(f, "{c}"),
        }
    }
}

/// Metadata for one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_id: String,
    pub patient_id: String,
    pub laterality: Laterality,
    /// Acquisition time in fractional days since 1970-01-01.
    pub timestamp: f64,
    pub image_ref: String,
    pub labels: BTreeMap<String, LabelValue>,
}

impl ScanRecord {
    pub fn eye(&self) -> EyeKey {
        EyeKey {
            patient_id: self.patient_id.clone(),
            laterality: self.laterality,
        }
    }

    pub fn label(&self, task: &str) -> Option<&LabelValue> {
        self.labels.get(task)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EyeKey {
    pub patient_id: String,
    pub laterality: Laterality,
}

/// A validated, immutable collection of scan records with a per-eye index.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    records: Vec<ScanRecord>,
    eyes: BTreeMap<EyeKey, Vec<usize>>,
    by_id: HashMap<String, usize>,
}

impl Cohort {
    /// Validates `records` and builds the eye index.
    pub fn new(records: Vec<ScanRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !r.timestamp.is_finite() {
                return Err(Error::ManifestRow {
                    row: i + 2,
                    message: format!("non-finite timestamp for `{}`", r.scan_id),
                });
            }
            if by_id.insert(r.scan_id.clone(), i).is_some() {
                return Err(Error::DuplicateScanId(r.scan_id.clone()));
            }
        }
        let mut eyes: BTreeMap<EyeKey, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            eyes.entry(r.eye()).or_default().push(i);
        }
        for ids in eyes.values_mut() {
            ids.sort_by(|&a, &b| {
                let (ra, rb) = (&records[a], &records[b]);
                ra.timestamp
                    .total_cmp(&rb.timestamp)
                    .then_with(|| ra.scan_id.cmp(&rb.scan_id))
            });
        }
        Ok(Self { records, eyes, by_id })
    }

    pub fn records(&self) -> &[ScanRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, index: usize) -> &ScanRecord {
        &self.records[index]
    }

    pub fn index_of(&self, scan_id: &str) -> Option<usize> {
        self.by_id.get(scan_id).copied()
    }

    /// Eye key to time-sorted record indices.
    pub fn eyes(&self) -> &BTreeMap<EyeKey, Vec<usize>> {
        &self.eyes
    }

    /// Sorted, deduplicated label task names present on any record.
    pub fn label_tasks(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().flat_map(|r| r.labels.keys()).collect();
        set.into_iter().cloned().collect()
    }

    pub fn patients(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().map(|r| &r.patient_id).collect();
        set.into_iter().cloned().collect()
    }

    /// A new cohort holding the given records, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Cohort> {
        Cohort::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }
}

/// The time-ordered scans of one eye.
#[derive(Debug, Clone, PartialEq)]
pub struct Longitude {
    pub eye: EyeKey,
    pub scans: Vec<String>,
    /// Years between first and last scan.
    pub span_years: f64,
}

impl Longitude {
    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }
}

pub fn eye_longitudes(cohort: &Cohort) -> Vec<Longitude> {
    cohort
        .eyes()
        .iter()
        .map(|(eye, ids)| {
            let first = cohort.record(ids[0]).timestamp;
            let last = cohort.record(ids[ids.len() - 1]).timestamp;
            Longitude {
                eye: eye.clone(),
                scans: ids.iter().map(|&i| cohort.record(i).scan_id.clone()).collect(),
                span_years: (last - first) / DAYS_PER_YEAR,
            }
        })
        .collect()
}

/// Parses a timestamp cell: fractional days, an ISO-8601 date, or an ISO-8601 date-time.
pub fn parse_timestamp(cell: &str) -> Option<f64> {
    let cell = cell.trim();
    if let Ok(days) = cell.parse::<f64>() {
        return days.is_finite().then_some(days);
    }
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1)?.and_hms_opt(0, 0, 0)?;
    let datetime = NaiveDateTime::parse_from_str(cell, "%Y-%m-%dT%H:%M:%S%.f")
        .or_else(|_| NaiveDateTime::parse_from_str(cell, "%Y-%m-%d %H:%M:%S%.f"))
        .ok()
        .or_else(|| NaiveDate::parse_from_str(cell, "%Y-%m-%d").ok()?.and_hms_opt(0, 0, 0))?;
    let seconds = (datetime - epoch).num_milliseconds() as f64 / 1000.0;
    Some(seconds / 86_400.0)
}

/// Reads and validates a comma-delimited manifest.
pub fn ingest_manifest<R: Read>(source: R) -> Result<Cohort> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let [scan_col, patient_col, lat_col, time_col, image_col] = [
        column(REQUIRED_COLUMNS[0])?,
        column(REQUIRED_COLUMNS[1])?,
        column(REQUIRED_COLUMNS[2])?,
        column(REQUIRED_COLUMNS[3])?,
        column(REQUIRED_COLUMNS[4])?,
    ];
    let label_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix(LABEL_PREFIX).map(|task| (i, task.to_string())))
        .collect();

    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        let cell = |c: usize| row.get(c).unwrap_or("");
        let scan_id = cell(scan_col).to_string();
        if scan_id.is_empty() {
            return Err(Error::ManifestRow { row: line, message: "empty scan_id".into() });
        }
        if let Some(first) = seen.insert(scan_id.clone(), line) {
            log::debug!("scan_id `{scan_id}` first seen on row {first}, repeated on row {line}");
            return Err(Error::DuplicateScanId(scan_id));
        }
        let laterality = cell(lat_col)
            .parse::<Laterality>()
            .map_err(|message| Error::ManifestRow { row: line, message })?;
        let timestamp = parse_timestamp(cell(time_col)).ok_or_else(|| Error::ManifestRow {
            row: line,
            message: format!("unparseable timestamp `{}`", cell(time_col)),
        })?;
        let labels = label_cols
            .iter()
            .filter(|(c, _)| !cell(*c).is_empty())
            .map(|(c, task)| (task.clone(), LabelValue::parse(cell(*c))))
            .collect();
        records.push(ScanRecord {
            scan_id,
            patient_id: cell(patient_col).to_string(),
            laterality,
            timestamp,
            image_ref: cell(image_col).to_string(),
            labels,
        });
    }
    Cohort::new(records)
}

/// Writes `cohort` in manifest format. Re-ingesting the output reproduces the cohort.
pub fn write_manifest<W: Write>(cohort: &Cohort, sink: W) -> Result<()> {
    let tasks = cohort.label_tasks();
    let mut writer = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = REQUIRED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(tasks.iter().map(|t| format!("{LABEL_PREFIX}{t}")));
    writer.write_record(&header)?;
    for r in cohort.records() {
        let mut row = vec![
            r.scan_id.clone(),
            r.patient_id.clone(),
            r.laterality.to_string(),
            format!("{}", r.timestamp),
            r.image_ref.clone(),
        ];
        row.extend(tasks.iter().map(|t| r.labels.get(t).map(|v| v.to_string()).unwrap_or_default()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &str = "\
scan_id,patient_id,laterality,timestamp,image_ref,label:stage,label:age
s1,p1,L,0,a.png,0,71.5
s2,p1,Right,100,b.png,,72
s3,p2,r,2020-01-02,c.png,1,
";

    #[test]
    fn ingests_valid_rows() {
        let cohort = ingest_manifest(MANIFEST.as_bytes()).unwrap();
        assert_eq!(cohort.len(), 3);
        assert_eq!(cohort.eyes().len(), 3);
        let s2 = cohort.record(cohort.index_of("s2").unwrap());
        assert_eq!(s2.laterality, Laterality::Right);
        assert!(s2.label("stage").is_none());
        assert_eq!(s2.label("age"), Some(&LabelValue::Number(72.0)));
        let s3 = cohort.record(cohort.index_of("s3").unwrap());
        assert_eq!(s3.timestamp, 18263.0);
    }

    #[test]
    fn laterality_aliases() {
        for (s, want) in [("L", Laterality::Left), ("left", Laterality::Left), ("LEFT", Laterality::Left), ("R", Laterality::Right), ("Right", Laterality::Right)] {
            assert_eq!(s.parse::<Laterality>().unwrap(), want);
        }
        assert!("X".parse::<Laterality>().is_err());
    }

    #[test]
    fn rejects_duplicate_scan_id() {
        let text = "scan_id,patient_id,laterality,timestamp,image_ref\na,p,L,0,x\nb,p,L,1,x\nc,p,L,2,x\na,p,L,3,x\n";
        match ingest_manifest(text.as_bytes()) {
            Err(Error::DuplicateScanId(id)) => assert_eq!(id, "a"),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_cells_with_row_number() {
        let text = "scan_id,patient_id,laterality,timestamp,image_ref\na,p,L,0,x\nb,p,Q,1,x\n";
        assert!(matches!(ingest_manifest(text.as_bytes()), Err(Error::ManifestRow { row: 3, .. })));
        let text = "scan_id,patient_id,laterality,timestamp,image_ref\na,p,L,yesterday,x\n";
        assert!(matches!(ingest_manifest(text.as_bytes()), Err(Error::ManifestRow { row: 2, .. })));
    }

    #[test]
    fn missing_column() {
        let text = "scan_id,patient_id,timestamp,image_ref\n";
        assert!(matches!(ingest_manifest(text.as_bytes()), Err(Error::MissingColumn(c)) if c == "laterality"));
    }

    #[test]
    fn datetime_timestamps_are_fractional() {
        assert_eq!(parse_timestamp("1970-01-02T12:00:00"), Some(1.5));
        assert_eq!(parse_timestamp("12.25"), Some(12.25));
        assert_eq!(parse_timestamp("NaN"), None);
    }

    #[test]
    fn longitudes() {
        let text = "scan_id,patient_id,laterality,timestamp,image_ref\nc,p,L,200,x\na,p,L,0,x\nb,p,L,100,x\nd,p,R,5,x\n";
        let cohort = ingest_manifest(text.as_bytes()).unwrap();
        let longs = eye_longitudes(&cohort);
        assert_eq!(longs.len(), 2);
        let left = &longs[0];
        assert_eq!(left.eye.laterality, Laterality::Left);
        assert_eq!(left.scans, vec!["a", "b", "c"]);
        assert!((left.span_years - 200.0 / 365.25).abs() < 1e-15);
        assert_eq!(longs.iter().map(Longitude::len).sum::<usize>(), cohort.len());
        assert!(eye_longitudes(&Cohort::new(vec![]).unwrap()).is_empty());
    }

    #[test]
    fn ties_broken_by_scan_id() {
        let text = "scan_id,patient_id,laterality,timestamp,image_ref\nz,p,L,5,x\ny,p,L,5,x\n";
        let cohort = ingest_manifest(text.as_bytes()).unwrap();
        let ids = &cohort.eyes().values().next().unwrap();
        assert_eq!(cohort.record(ids[0]).scan_id, "y");
    }
}
