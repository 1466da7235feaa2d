//! Outfit records: labels, per-factor features, and NDJSON files.
//!
//! A record is one top/bottom outfit pairing with a three-way judgment
//! label, an optional reason label naming the factor responsible, the five
//! feature vectors for each garment, and a string attribute map used when
//! rendering explanations. Datasets are stored as NDJSON: one JSON object
//! per line, so files stream and diff nicely.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Overall verdict for an outfit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Judgment {
    Good,
    Normal,
    Bad,
}

impl Judgment {
    /// Fixed label order; doubles as the logit index of each class.
    pub const ALL: [Judgment; 3] = [Judgment::Good, Judgment::Normal, Judgment::Bad];

    pub fn index(self) -> usize {
        match self {
            Judgment::Good => 0,
            Judgment::Normal => 1,
            Judgment::Bad => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Judgment> {
        Judgment::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Judgment::Good => "good",
            Judgment::Normal => "normal",
            Judgment::Bad => "bad",
        }
    }
}

impl fmt::Display for Judgment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Judgment {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, RecordError> {
        match s {
            "good" => Ok(Judgment::Good),
            "normal" => Ok(Judgment::Normal),
            "bad" => Ok(Judgment::Bad),
            other => Err(RecordError::UnknownLabel { kind: "judgment", value: other.to_string() }),
        }
    }
}

/// The factor a non-normal judgment is attributed to. `Design` covers the
/// material, silhouette, and detail factors together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reason {
    Color,
    Print,
    Design,
}

impl Reason {
    /// Fixed order; doubles as the index into reason-scored vectors and as
    /// the tie-break preference (earlier wins).
    pub const ALL: [Reason; 3] = [Reason::Color, Reason::Print, Reason::Design];

    pub fn index(self) -> usize {
        match self {
            Reason::Color => 0,
            Reason::Print => 1,
            Reason::Design => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Reason> {
        Reason::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Color => "color",
            Reason::Print => "print",
            Reason::Design => "design",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reason {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, RecordError> {
        match s {
            "color" => Ok(Reason::Color),
            "print" => Ok(Reason::Print),
            "design" => Ok(Reason::Design),
            other => Err(RecordError::UnknownLabel { kind: "reason", value: other.to_string() }),
        }
    }
}

/// The five garment factors features are extracted for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Color,
    Print,
    Material,
    Silhouette,
    Detail,
}

impl FactorKind {
    /// Fixed factor order; everything that walks factors (feature layout,
    /// network branches, checkpoint layout) uses this order.
    pub const ALL: [FactorKind; 5] = [
        FactorKind::Color,
        FactorKind::Print,
        FactorKind::Material,
        FactorKind::Silhouette,
        FactorKind::Detail,
    ];

    pub fn index(self) -> usize {
        match self {
            FactorKind::Color => 0,
            FactorKind::Print => 1,
            FactorKind::Material => 2,
            FactorKind::Silhouette => 3,
            FactorKind::Detail => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FactorKind::Color => "color",
            FactorKind::Print => "print",
            FactorKind::Material => "material",
            FactorKind::Silhouette => "silhouette",
            FactorKind::Detail => "detail",
        }
    }

    /// The reason bucket this factor reports into.
    pub fn reason(self) -> Reason {
        match self {
            FactorKind::Color => Reason::Color,
            FactorKind::Print => Reason::Print,
            FactorKind::Material | FactorKind::Silhouette | FactorKind::Detail => Reason::Design,
        }
    }
}

impl fmt::Display for FactorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Expected per-factor feature dimensions. Data files and model configs
/// both speak in these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDims {
    pub color: usize,
    pub print: usize,
    pub material: usize,
    pub silhouette: usize,
    pub detail: usize,
}

impl Default for FeatureDims {
    /// Matches the standard attribute catalog: a 25-dim color feature and
    /// one-hot prints (14), materials (10), silhouettes (5), details (8).
    fn default() -> Self {
        FeatureDims { color: 25, print: 14, material: 10, silhouette: 5, detail: 8 }
    }
}

impl FeatureDims {
    pub fn get(&self, factor: FactorKind) -> usize {
        match factor {
            FactorKind::Color => self.color,
            FactorKind::Print => self.print,
            FactorKind::Material => self.material,
            FactorKind::Silhouette => self.silhouette,
            FactorKind::Detail => self.detail,
        }
    }

    pub fn as_array(&self) -> [usize; 5] {
        [self.color, self.print, self.material, self.silhouette, self.detail]
    }

    /// Total feature length of one garment.
    pub fn garment_total(&self) -> usize {
        self.as_array().iter().sum()
    }
}

/// One garment's feature vectors, one per factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorFeatureSet {
    pub color: Vec<f64>,
    pub print: Vec<f64>,
    pub material: Vec<f64>,
    pub silhouette: Vec<f64>,
    pub detail: Vec<f64>,
}

impl FactorFeatureSet {
    pub fn get(&self, factor: FactorKind) -> &[f64] {
        match factor {
            FactorKind::Color => &self.color,
            FactorKind::Print => &self.print,
            FactorKind::Material => &self.material,
            FactorKind::Silhouette => &self.silhouette,
            FactorKind::Detail => &self.detail,
        }
    }

    /// Feature dimensions in factor order.
    pub fn dims(&self) -> [usize; 5] {
        [
            self.color.len(),
            self.print.len(),
            self.material.len(),
            self.silhouette.len(),
            self.detail.len(),
        ]
    }

    fn all_finite(&self) -> bool {
        FactorKind::ALL.iter().all(|f| self.get(*f).iter().all(|v| v.is_finite()))
    }
}

/// One labeled outfit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutfitRecord {
    pub outfit_id: String,
    pub judgment: Judgment,
    /// Present exactly when the judgment is not `normal`.
    pub reason: Option<Reason>,
    pub top: FactorFeatureSet,
    pub bottom: FactorFeatureSet,
    /// Human-readable attribute names (`color_top`, `print_bottom`, ...)
    /// consumed by explanation templates. Ordered so serialization is
    /// stable.
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl OutfitRecord {
    /// Structural validity: the reason label must match the judgment kind,
    /// top and bottom must agree on feature dimensions, and every feature
    /// must be finite.
    pub fn validate(&self) -> Result<(), RecordError> {
        let invalid = |message: String| RecordError::InvalidRecord {
            outfit_id: self.outfit_id.clone(),
            message,
        };
        match (self.judgment, self.reason) {
            (Judgment::Normal, Some(r)) => {
                return Err(invalid(format!("normal judgment must not carry a reason, got {r}")));
            }
            (Judgment::Good | Judgment::Bad, None) => {
                return Err(invalid(format!("{} judgment needs a reason label", self.judgment)));
            }
            _ => {}
        }
        if self.top.dims() != self.bottom.dims() {
            return Err(invalid(format!(
                "top/bottom feature dims differ: {:?} vs {:?}",
                self.top.dims(),
                self.bottom.dims()
            )));
        }
        if !self.top.all_finite() || !self.bottom.all_finite() {
            return Err(invalid("non-finite feature value".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("record {outfit_id:?}: {message}")]
    InvalidRecord { outfit_id: String, message: String },
    #[error("unknown {kind} label {value:?}")]
    UnknownLabel { kind: &'static str, value: String },
}

/// Read an NDJSON feature file, validating every record. Blank lines are
/// tolerated; anything else that fails to parse reports its line number.
pub fn read_ndjson<R: Read>(reader: R) -> Result<Vec<OutfitRecord>, RecordError> {
    let reader = BufReader::new(reader);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: OutfitRecord = serde_json::from_str(&line)
            .map_err(|source| RecordError::Parse { line: i + 1, source })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

pub fn read_ndjson_file(path: &Path) -> Result<Vec<OutfitRecord>, RecordError> {
    read_ndjson(File::open(path)?)
}

/// Write records as NDJSON, one object per line, validating on the way out
/// so a bad record never reaches disk.
pub fn write_ndjson<W: Write>(writer: W, records: &[OutfitRecord]) -> Result<(), RecordError> {
    let mut writer = BufWriter::new(writer);
    for record in records {
        record.validate()?;
        serde_json::to_writer(&mut writer, record)
            .map_err(|source| RecordError::Parse { line: 0, source })?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_ndjson_file(path: &Path, records: &[OutfitRecord]) -> Result<(), RecordError> {
    write_ndjson(File::create(path)?, records)
}
