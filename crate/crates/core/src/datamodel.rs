//! Label taxonomy, sample/manifest schema and the binary relabeling maps
//! that turn the three-class problem into the two expert problems.
//!
//! Manifests are JSON-lines files, one record per line, with image paths
//! relative to the manifest's directory. All types are immutable after
//! construction and safe to share across threads.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The three ocular classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelClass {
    NoLens,
    SoftLens,
    CosmeticLens,
}

impl LabelClass {
    pub const ALL: [LabelClass; 3] = [
        LabelClass::NoLens,
        LabelClass::SoftLens,
        LabelClass::CosmeticLens,
    ];

    /// Row/column index in confusion matrices, ordered (NO, SOFT, COSMETIC).
    pub fn index(self) -> usize {
        match self {
            LabelClass::NoLens => 0,
            LabelClass::SoftLens => 1,
            LabelClass::CosmeticLens => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<LabelClass> {
        LabelClass::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelClass::NoLens => "no_lens",
            LabelClass::SoftLens => "soft_lens",
            LabelClass::CosmeticLens => "cosmetic_lens",
        }
    }
}

impl fmt::Display for LabelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The two binary experts in the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    /// Textured (cosmetic) vs non-textured (no lens or soft lens).
    TexturedDetector,
    /// Lens (soft) vs no-lens; cosmetic samples are excluded from its pool.
    LensDetector,
}

impl ExpertKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::TexturedDetector => "textured_detector",
            ExpertKind::LensDetector => "lens_detector",
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Binary label seen by one expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Positive,
    Negative,
}

impl BinaryLabel {
    /// Class index in the two-way head: negative = 0, positive = 1.
    pub fn index(self) -> usize {
        match self {
            BinaryLabel::Negative => 0,
            BinaryLabel::Positive => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eye {
    Left,
    Right,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One labeled iris image. `image_path` is stored exactly as written in the
/// manifest (relative to the manifest directory); `resolved_path` is the
/// absolute location derived at load time and is not part of record equality
/// or serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub sensor_id: String,
    pub subject_id: String,
    pub eye: Eye,
    pub label: LabelClass,
    pub split: Split,
    #[serde(skip)]
    pub resolved_path: PathBuf,
}

impl PartialEq for SampleRecord {
    fn eq(&self, other: &Self) -> bool {
        self.sample_id == other.sample_id
            && self.image_path == other.image_path
            && self.sensor_id == other.sensor_id
            && self.subject_id == other.subject_id
            && self.eye == other.eye
            && self.label == other.label
            && self.split == other.split
    }
}

impl Eq for SampleRecord {}

/// An ordered collection of records plus the derived sensor set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<SampleRecord>,
    sensor_ids: BTreeSet<String>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate sample_id {id:?} at {path}:{line}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
}

/// One invariant violation found by [`validate_manifest`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    /// A subject appears in both TRAIN and TEST splits.
    SubjectOverlap { subject_id: String },
    /// A record's image file does not exist.
    MissingFile { sample_id: String, path: PathBuf },
    /// Two records share a sample_id (possible when a manifest is built in
    /// memory rather than loaded).
    DuplicateId { sample_id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SubjectOverlap { subject_id } => {
                write!(f, "subject {subject_id:?} appears in both train and test splits")
            }
            Violation::MissingFile { sample_id, path } => {
                write!(f, "sample {sample_id:?}: missing image file {}", path.display())
            }
            Violation::DuplicateId { sample_id } => {
                write!(f, "duplicate sample_id {sample_id:?}")
            }
        }
    }
}

/// Violations are data, not exceptions: an empty report means all invariants hold.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl DatasetManifest {
    /// Builds a manifest from records, deriving the sensor set. Fails on
    /// duplicate sample ids.
    pub fn new(
        name: impl Into<String>,
        records: Vec<SampleRecord>,
    ) -> Result<Self, ManifestError> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(ManifestError::DuplicateId {
                    path: PathBuf::new(),
                    line: i + 1,
                    id: r.sample_id.clone(),
                });
            }
        }
        let sensor_ids = records.iter().map(|r| r.sensor_id.clone()).collect();
        Ok(DatasetManifest {
            name: name.into(),
            records,
            sensor_ids,
        })
    }

    pub fn sensor_ids(&self) -> &BTreeSet<String> {
        &self.sensor_ids
    }

    pub fn records_for_split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Writes the manifest as JSON lines. `resolved_path` is not serialized.
    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("record serialization cannot fail");
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Loads a JSON-lines manifest. The manifest name is the file stem; image
/// paths are resolved against the manifest's directory. Blank lines are
/// permitted.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let file = fs::File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".to_string());

    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: SampleRecord =
            serde_json::from_str(&line).map_err(|source| ManifestError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                source,
            })?;
        if seen.insert(record.sample_id.clone(), lineno).is_some() {
            return Err(ManifestError::DuplicateId {
                path: path.to_path_buf(),
                line: lineno,
                id: record.sample_id,
            });
        }
        record.resolved_path = dir.join(&record.image_path);
        records.push(record);
    }
    let sensor_ids = records.iter().map(|r| r.sensor_id.clone()).collect();
    Ok(DatasetManifest {
        name,
        records,
        sensor_ids,
    })
}

/// Checks every manifest invariant without mutating the input: duplicate
/// ids, subject-disjoint splits, and image file existence.
pub fn validate_manifest(manifest: &DatasetManifest) -> ValidationReport {
    let mut violations = Vec::new();

    let mut seen = HashSet::new();
    for r in &manifest.records {
        if !seen.insert(r.sample_id.as_str()) {
            violations.push(Violation::DuplicateId {
                sample_id: r.sample_id.clone(),
            });
        }
    }

    violations.extend(subject_overlap_violations(manifest.records.iter()));

    for r in &manifest.records {
        if !r.resolved_path.as_os_str().is_empty() && !r.resolved_path.exists() {
            violations.push(Violation::MissingFile {
                sample_id: r.sample_id.clone(),
                path: r.resolved_path.clone(),
            });
        }
    }

    ValidationReport { violations }
}

/// Subject-disjointness check shared with the protocol builder.
pub fn subject_overlap_violations<'a>(
    records: impl Iterator<Item = &'a SampleRecord>,
) -> Vec<Violation> {
    let mut train_subjects = BTreeSet::new();
    let mut test_subjects = BTreeSet::new();
    for r in records {
        match r.split {
            Split::Train => train_subjects.insert(r.subject_id.as_str()),
            Split::Test => test_subjects.insert(r.subject_id.as_str()),
        };
    }
    train_subjects
        .intersection(&test_subjects)
        .map(|s| Violation::SubjectOverlap {
            subject_id: (*s).to_string(),
        })
        .collect()
}

#[derive(Debug, Error)]
#[error("relabel undefined: {label} has no binary label under {kind} (caller bug)")]
pub struct UndefinedRelabel {
    pub label: LabelClass,
    pub kind: ExpertKind,
}

/// Maps a three-class label to the binary label one expert sees, or `None`
/// for the one excluded pair: cosmetic samples do not participate in the
/// lens detector's pool at all.
pub fn relabel_for_expert(label: LabelClass, kind: ExpertKind) -> Option<BinaryLabel> {
    match (kind, label) {
        (ExpertKind::TexturedDetector, LabelClass::CosmeticLens) => Some(BinaryLabel::Positive),
        (ExpertKind::TexturedDetector, _) => Some(BinaryLabel::Negative),
        (ExpertKind::LensDetector, LabelClass::SoftLens) => Some(BinaryLabel::Positive),
        (ExpertKind::LensDetector, LabelClass::NoLens) => Some(BinaryLabel::Negative),
        (ExpertKind::LensDetector, LabelClass::CosmeticLens) => None,
    }
}

/// As [`relabel_for_expert`] but treats the undefined pair as a caller bug.
pub fn relabel_for_expert_strict(
    label: LabelClass,
    kind: ExpertKind,
) -> Result<BinaryLabel, UndefinedRelabel> {
    relabel_for_expert(label, kind).ok_or(UndefinedRelabel { label, kind })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    pub(crate) fn record(
        id: &str,
        sensor: &str,
        subject: &str,
        label: LabelClass,
        split: Split,
    ) -> SampleRecord {
        SampleRecord {
            sample_id: id.to_string(),
            image_path: PathBuf::from(format!("{id}.png")),
            sensor_id: sensor.to_string(),
            subject_id: subject.to_string(),
            eye: Eye::Unknown,
            label,
            split,
            resolved_path: PathBuf::new(),
        }
    }

    #[test]
    fn manifest_derives_sensor_set() {
        let m = DatasetManifest::new(
            "m",
            vec![
                record("a", "S1", "p0", LabelClass::NoLens, Split::Train),
                record("b", "S1", "p0", LabelClass::SoftLens, Split::Train),
                record("c", "S2", "p1", LabelClass::CosmeticLens, Split::Test),
                record("d", "S2", "p1", LabelClass::NoLens, Split::Test),
            ],
        )
        .unwrap();
        assert_eq!(m.sensor_ids().len(), 2);
        assert!(m.sensor_ids().contains("S1") && m.sensor_ids().contains("S2"));
    }

    #[test]
    fn duplicate_sample_id_is_rejected_naming_the_id() {
        let err = DatasetManifest::new(
            "m",
            vec![
                record("dup", "S1", "p0", LabelClass::NoLens, Split::Train),
                record("dup", "S1", "p1", LabelClass::NoLens, Split::Test),
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("dup"));
    }

    #[test]
    fn load_rejects_duplicate_ids_with_location() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let line = r#"{"sample_id":"x","image_path":"x.png","sensor_id":"S","subject_id":"p","eye":"left","label":"no_lens","split":"train"}"#;
        fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        let err = load_manifest(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("\"x\"") && msg.contains(":2"), "{msg}");
    }

    #[test]
    fn load_reports_parse_location_and_unknown_labels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            r#"{"sample_id":"x","image_path":"x.png","sensor_id":"S","subject_id":"p","eye":"left","label":"hard_lens","split":"train"}"#,
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":1"), "{msg}");
    }

    #[test]
    fn table2_scale_manifest_roundtrips_with_counts_preserved() {
        // IIIT-D layout: 6,570 records, 3,285 train / 3,285 test, two sensors.
        let dir = tempdir().unwrap();
        let path = dir.path().join("iiitd.jsonl");
        let mut records = Vec::new();
        for i in 0..6570usize {
            let split = if i < 3285 { Split::Train } else { Split::Test };
            let sensor = if i % 2 == 0 { "Cogent" } else { "Vista" };
            // 101 subjects, split-consistent: subjects 0..50 train, 50..101 test.
            let subject = if i < 3285 { i % 50 } else { 50 + i % 51 };
            records.push(record(
                &format!("img{i}"),
                sensor,
                &format!("subj{subject}"),
                LabelClass::ALL[i % 3],
                split,
            ));
        }
        let m = DatasetManifest::new("iiitd", records).unwrap();
        m.save(&path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.records.len(), 6570);
        assert_eq!(loaded.records_for_split(Split::Train).count(), 3285);
        assert_eq!(loaded.records_for_split(Split::Test).count(), 3285);
        assert_eq!(loaded.sensor_ids().len(), 2);
        assert_eq!(loaded.records, m.records);
        assert!(subject_overlap_violations(loaded.records.iter()).is_empty());
    }

    #[test]
    fn validate_reports_subject_overlap() {
        let m = DatasetManifest::new(
            "m",
            vec![
                record("a", "S1", "S1subj", LabelClass::NoLens, Split::Train),
                record("b", "S1", "S1subj", LabelClass::NoLens, Split::Test),
            ],
        )
        .unwrap();
        let report = validate_manifest(&m);
        assert_eq!(
            report.violations,
            vec![Violation::SubjectOverlap {
                subject_id: "S1subj".into()
            }]
        );
    }

    #[test]
    fn validate_empty_manifest_is_clean() {
        let m = DatasetManifest::new("m", vec![]).unwrap();
        assert!(validate_manifest(&m).is_empty());
    }

    #[test]
    fn validate_flags_missing_image_file() {
        let dir = tempdir().unwrap();
        let mut r = record("a", "S1", "p0", LabelClass::NoLens, Split::Train);
        r.resolved_path = dir.path().join("a.png");
        let mut r2 = record("b", "S1", "p0", LabelClass::NoLens, Split::Train);
        r2.resolved_path = dir.path().join("b.png");
        fs::write(&r2.resolved_path, b"stub").unwrap();
        let m = DatasetManifest::new("m", vec![r, r2]).unwrap();
        let report = validate_manifest(&m);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(
            &report.violations[0],
            Violation::MissingFile { sample_id, .. } if sample_id == "a"
        ));
    }

    #[test]
    fn relabel_truth_table() {
        use BinaryLabel::*;
        use ExpertKind::*;
        use LabelClass::*;
        assert_eq!(relabel_for_expert(CosmeticLens, TexturedDetector), Some(Positive));
        assert_eq!(relabel_for_expert(SoftLens, TexturedDetector), Some(Negative));
        assert_eq!(relabel_for_expert(NoLens, TexturedDetector), Some(Negative));
        assert_eq!(relabel_for_expert(SoftLens, LensDetector), Some(Positive));
        assert_eq!(relabel_for_expert(NoLens, LensDetector), Some(Negative));
        assert_eq!(relabel_for_expert(CosmeticLens, LensDetector), None);
        // Total minus the single undefined pair.
        let defined = LabelClass::ALL
            .iter()
            .flat_map(|&l| {
                [ExpertKind::TexturedDetector, ExpertKind::LensDetector]
                    .into_iter()
                    .map(move |k| relabel_for_expert(l, k))
            })
            .filter(Option::is_some)
            .count();
        assert_eq!(defined, 5);
    }

    #[test]
    fn relabel_strict_flags_the_undefined_pair() {
        let err =
            relabel_for_expert_strict(LabelClass::CosmeticLens, ExpertKind::LensDetector)
                .unwrap_err();
        assert!(err.to_string().contains("caller bug"));
    }
}
