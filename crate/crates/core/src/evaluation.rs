//! The four cross-sensor validation protocols and CCR reporting.
//!
//! A protocol turns one or more manifests into a train pool and a test
//! pool; `run_protocol` trains both experts on the train pool and scores
//! the cascade on the test pool, producing per-class and aggregate CCR
//! percentages over a 3x3 confusion matrix ordered (NO, SOFT, COSMETIC).
//! Undecodable test images are excluded with explicit accounting, never
//! silently dropped.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneConfig, ExpertModel};
use crate::cascade::{cascade_predict, CascadeDecision, CascadeError, CascadeThresholds};
use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::datamodel::{
    subject_overlap_violations, DatasetManifest, ExpertKind, LabelClass, SampleRecord, Split,
};
use crate::ingestion::prepare_input_sized;
use crate::training::{
    effective_training_pool, train_expert_on_pool, TrainConfig, TrainError, TrainHistory,
};

/// Batch size used when streaming test records through the cascade.
const EVAL_BATCH: usize = 32;

/// A declarative evaluation protocol over named manifests and sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ProtocolSpec {
    /// Train and test pools both filtered to one sensor.
    Intra { sensor: String },
    /// Train on one sensor's TRAIN split, test on another sensor's TEST split.
    Inter {
        train_sensor: String,
        test_sensor: String,
    },
    /// Union of two or more sensors, train-with-train and test-with-test.
    Multi { sensors: Vec<String> },
    /// Union of all named manifests' TRAIN splits; test on one manifest's
    /// TEST split.
    Combined {
        manifest_names: Vec<String>,
        test_manifest: String,
    },
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        match self {
            ProtocolSpec::Intra { sensor } => {
                if sensor.is_empty() {
                    return Err(EvalError::InvalidProtocol("empty sensor name".into()));
                }
            }
            ProtocolSpec::Inter {
                train_sensor,
                test_sensor,
            } => {
                if train_sensor == test_sensor {
                    return Err(EvalError::InvalidProtocol(format!(
                        "inter-sensor train and test sensors must differ (both {train_sensor:?})"
                    )));
                }
            }
            ProtocolSpec::Multi { sensors } => {
                let unique: BTreeSet<&String> = sensors.iter().collect();
                if unique.len() < 2 {
                    return Err(EvalError::InvalidProtocol(
                        "multi-sensor needs at least two distinct sensors".into(),
                    ));
                }
            }
            ProtocolSpec::Combined {
                manifest_names,
                test_manifest,
            } => {
                if manifest_names.is_empty() {
                    return Err(EvalError::InvalidProtocol(
                        "combined-sensor needs at least one manifest".into(),
                    ));
                }
                if !manifest_names.contains(test_manifest) {
                    return Err(EvalError::InvalidProtocol(format!(
                        "test manifest {test_manifest:?} is not among the trained manifests"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            ProtocolSpec::Intra { .. } => "intra",
            ProtocolSpec::Inter { .. } => "inter",
            ProtocolSpec::Multi { .. } => "multi",
            ProtocolSpec::Combined { .. } => "combined",
        }
    }

    /// Display label used in tables and for matching reference rows.
    pub fn label(&self) -> String {
        match self {
            ProtocolSpec::Intra { sensor } => sensor.clone(),
            ProtocolSpec::Inter {
                train_sensor,
                test_sensor,
            } => format!("{train_sensor}->{test_sensor}"),
            ProtocolSpec::Multi { sensors } => sensors.join("+"),
            ProtocolSpec::Combined { test_manifest, .. } => test_manifest.clone(),
        }
    }
}

/// 3x3 counts, rows = true class, columns = predicted class, both ordered
/// (NO, SOFT, COSMETIC).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; 3]; 3]);

impl ConfusionMatrix {
    pub fn record(&mut self, truth: LabelClass, predicted: LabelClass) {
        self.0[truth.index()][predicted.index()] += 1;
    }

    pub fn from_pairs(pairs: &[(LabelClass, LabelClass)]) -> Self {
        let mut m = ConfusionMatrix::default();
        for &(t, p) in pairs {
            m.record(t, p);
        }
        m
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for i in 0..3 {
            for j in 0..3 {
                self.0[i][j] += other.0[i][j];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.0[i][i]).sum()
    }

    pub fn row_total(&self, class: LabelClass) -> u64 {
        self.0[class.index()].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionRecord {
    pub sample_id: String,
    pub reason: String,
}

/// Per-class and aggregate CCR percentages for one protocol run.
/// Aggregate is overall accuracy (trace over total), not the per-class
/// mean. A per-class CCR is `None` when that class has no test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CCRReport {
    pub protocol: ProtocolSpec,
    pub counts: ConfusionMatrix,
    pub ccr_nn: Option<f64>,
    pub ccr_ss: Option<f64>,
    pub ccr_cc: Option<f64>,
    pub aggregate: f64,
    pub evaluated: u64,
    pub excluded: u64,
    pub exclusions: Vec<ExclusionRecord>,
}

impl CCRReport {
    /// Computes all CCR figures from a confusion matrix. Isolated so the
    /// aggregate definition lives in exactly one place.
    pub fn from_matrix(
        protocol: ProtocolSpec,
        counts: ConfusionMatrix,
        exclusions: Vec<ExclusionRecord>,
    ) -> Self {
        let per_class = |class: LabelClass| -> Option<f64> {
            let total = counts.row_total(class);
            (total > 0).then(|| 100.0 * counts.0[class.index()][class.index()] as f64 / total as f64)
        };
        let total = counts.total();
        let aggregate = if total > 0 {
            100.0 * counts.trace() as f64 / total as f64
        } else {
            0.0
        };
        CCRReport {
            protocol,
            ccr_nn: per_class(LabelClass::NoLens),
            ccr_ss: per_class(LabelClass::SoftLens),
            ccr_cc: per_class(LabelClass::CosmeticLens),
            aggregate,
            evaluated: total,
            excluded: exclusions.len() as u64,
            exclusions,
            counts,
        }
    }

    pub fn per_class(&self, class: LabelClass) -> Option<f64> {
        match class {
            LabelClass::NoLens => self.ccr_nn,
            LabelClass::SoftLens => self.ccr_ss,
            LabelClass::CosmeticLens => self.ccr_cc,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error("sensor {0:?} not found in the provided manifests")]
    SensorNotFound(String),
    #[error("manifest {0:?} not found")]
    ManifestNotFound(String),
    #[error("{pool} pool is empty for protocol {label}")]
    EmptyPool { pool: &'static str, label: String },
    #[error("subject {subject_id:?} appears in both train and test pools after combination")]
    SubjectOverlap { subject_id: String },
    #[error("sample id {0:?} appears in both train and test pools")]
    SampleOverlap(String),
    #[error("experts disagree on input size: {0} vs {1}")]
    InputSizeMismatch(usize, usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("reference table error: {0}")]
    Reference(String),
}

fn pool_by_sensor(
    manifests: &[DatasetManifest],
    sensor: &str,
    split: Split,
) -> Vec<SampleRecord> {
    manifests
        .iter()
        .flat_map(|m| m.records.iter())
        .filter(|r| r.sensor_id == sensor && r.split == split)
        .cloned()
        .collect()
}

fn sensor_exists(manifests: &[DatasetManifest], sensor: &str) -> bool {
    manifests.iter().any(|m| m.sensor_ids().contains(sensor))
}

/// Builds the train/test record pools for a protocol and re-validates
/// disjointness on the result.
pub fn build_protocol_splits(
    spec: &ProtocolSpec,
    manifests: &[DatasetManifest],
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>), EvalError> {
    spec.validate()?;
    let (train, test) = match spec {
        ProtocolSpec::Intra { sensor } => {
            if !sensor_exists(manifests, sensor) {
                return Err(EvalError::SensorNotFound(sensor.clone()));
            }
            (
                pool_by_sensor(manifests, sensor, Split::Train),
                pool_by_sensor(manifests, sensor, Split::Test),
            )
        }
        ProtocolSpec::Inter {
            train_sensor,
            test_sensor,
        } => {
            for s in [train_sensor, test_sensor] {
                if !sensor_exists(manifests, s) {
                    return Err(EvalError::SensorNotFound(s.clone()));
                }
            }
            (
                pool_by_sensor(manifests, train_sensor, Split::Train),
                pool_by_sensor(manifests, test_sensor, Split::Test),
            )
        }
        ProtocolSpec::Multi { sensors } => {
            for s in sensors {
                if !sensor_exists(manifests, s) {
                    return Err(EvalError::SensorNotFound(s.clone()));
                }
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            for s in sensors {
                train.extend(pool_by_sensor(manifests, s, Split::Train));
                test.extend(pool_by_sensor(manifests, s, Split::Test));
            }
            (train, test)
        }
        ProtocolSpec::Combined {
            manifest_names,
            test_manifest,
        } => {
            let by_name: HashMap<&str, &DatasetManifest> =
                manifests.iter().map(|m| (m.name.as_str(), m)).collect();
            let mut train = Vec::new();
            for name in manifest_names {
                let m = by_name
                    .get(name.as_str())
                    .ok_or_else(|| EvalError::ManifestNotFound(name.clone()))?;
                train.extend(m.records_for_split(Split::Train).cloned());
            }
            let test_m = by_name
                .get(test_manifest.as_str())
                .ok_or_else(|| EvalError::ManifestNotFound(test_manifest.clone()))?;
            let test: Vec<SampleRecord> = test_m.records_for_split(Split::Test).cloned().collect();
            (train, test)
        }
    };

    if train.is_empty() {
        return Err(EvalError::EmptyPool {
            pool: "train",
            label: spec.label(),
        });
    }
    if test.is_empty() {
        return Err(EvalError::EmptyPool {
            pool: "test",
            label: spec.label(),
        });
    }

    // Hygiene on the combined result: disjoint sample ids and subjects.
    let train_ids: HashSet<&str> = train.iter().map(|r| r.sample_id.as_str()).collect();
    if let Some(dup) = test.iter().find(|r| train_ids.contains(r.sample_id.as_str())) {
        return Err(EvalError::SampleOverlap(dup.sample_id.clone()));
    }
    let overlaps = subject_overlap_violations(train.iter().chain(test.iter()));
    if let Some(crate::datamodel::Violation::SubjectOverlap { subject_id }) = overlaps.first() {
        return Err(EvalError::SubjectOverlap {
            subject_id: subject_id.clone(),
        });
    }
    Ok((train, test))
}

/// Builds a report directly from (truth, decision) pairs. The score path
/// (`evaluate`) reduces to this, and tests drive it with synthetic
/// decisions.
pub fn report_from_decisions(
    protocol: ProtocolSpec,
    pairs: &[(LabelClass, CascadeDecision)],
    exclusions: Vec<ExclusionRecord>,
) -> CCRReport {
    let mut counts = ConfusionMatrix::default();
    for (truth, decision) in pairs {
        counts.record(*truth, decision.label);
    }
    CCRReport::from_matrix(protocol, counts, exclusions)
}

/// Scores the cascade over the test pool. Undecodable images become
/// exclusion records; evaluated + excluded equals the pool size.
pub fn evaluate(
    expert_textured: &ExpertModel<f32>,
    expert_lens: &ExpertModel<f32>,
    test_records: &[SampleRecord],
    thresholds: &CascadeThresholds,
    protocol: ProtocolSpec,
) -> Result<CCRReport, EvalError> {
    if test_records.is_empty() {
        return Err(EvalError::EmptyPool {
            pool: "test",
            label: protocol.label(),
        });
    }
    let size_t = expert_textured.config.input_size;
    let size_l = expert_lens.config.input_size;
    if size_t != size_l {
        return Err(EvalError::InputSizeMismatch(size_t, size_l));
    }

    let mut pairs: Vec<(LabelClass, CascadeDecision)> = Vec::with_capacity(test_records.len());
    let mut exclusions = Vec::new();

    for chunk in test_records.chunks(EVAL_BATCH) {
        let decoded: Vec<_> = chunk
            .par_iter()
            .map(|r| prepare_input_sized(&r.resolved_path, size_t))
            .collect();
        let mut images = Vec::with_capacity(chunk.len());
        let mut truths = Vec::with_capacity(chunk.len());
        for (record, result) in chunk.iter().zip(decoded) {
            match result {
                Ok(tensor) => {
                    images.push(tensor);
                    truths.push(record.label);
                }
                Err(e) => exclusions.push(ExclusionRecord {
                    sample_id: record.sample_id.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        let decisions = cascade_predict(expert_textured, expert_lens, &images, thresholds)?;
        pairs.extend(truths.into_iter().zip(decisions));
    }
    Ok(report_from_decisions(protocol, &pairs, exclusions))
}

/// Everything a protocol run produces.
pub struct ProtocolRun {
    pub reports: Vec<CCRReport>,
    pub expert_textured: ExpertModel<f32>,
    pub expert_lens: ExpertModel<f32>,
    pub history_textured: TrainHistory,
    pub history_lens: TrainHistory,
}

/// Trains both experts on the protocol's train pool and evaluates the
/// cascade on its test pool. The lens expert's init and shuffle seeds are
/// offset by one so the two experts never share randomness.
pub fn run_protocol(
    spec: &ProtocolSpec,
    manifests: &[DatasetManifest],
    train_config: &TrainConfig,
    backbone_config: &BackboneConfig,
    thresholds: &CascadeThresholds,
) -> Result<ProtocolRun, EvalError> {
    let (train_records, test_records) = build_protocol_splits(spec, manifests)?;
    let run = train_pair(&train_records, train_config, backbone_config)?;
    let report = evaluate(
        &run.0,
        &run.2,
        &test_records,
        thresholds,
        spec.clone(),
    )?;
    Ok(ProtocolRun {
        reports: vec![report],
        expert_textured: run.0,
        history_textured: run.1,
        expert_lens: run.2,
        history_lens: run.3,
    })
}

/// Combined-sensor driver: trains one expert pair on the union of every
/// manifest's TRAIN split, then evaluates per test manifest. One report
/// per test manifest; the average row is a rendering concern.
pub fn run_combined_protocol(
    manifests: &[DatasetManifest],
    test_manifests: &[String],
    train_config: &TrainConfig,
    backbone_config: &BackboneConfig,
    thresholds: &CascadeThresholds,
) -> Result<ProtocolRun, EvalError> {
    let manifest_names: Vec<String> = manifests.iter().map(|m| m.name.clone()).collect();
    if test_manifests.is_empty() {
        return Err(EvalError::InvalidProtocol(
            "combined-sensor needs at least one test manifest".into(),
        ));
    }
    let first_spec = ProtocolSpec::Combined {
        manifest_names: manifest_names.clone(),
        test_manifest: test_manifests[0].clone(),
    };
    let (train_records, _) = build_protocol_splits(&first_spec, manifests)?;
    let (tex, tex_hist, lens, lens_hist) =
        train_pair(&train_records, train_config, backbone_config)?;

    let mut reports = Vec::new();
    for test_name in test_manifests {
        let spec = ProtocolSpec::Combined {
            manifest_names: manifest_names.clone(),
            test_manifest: test_name.clone(),
        };
        let (_, test_records) = build_protocol_splits(&spec, manifests)?;
        reports.push(evaluate(&tex, &lens, &test_records, thresholds, spec)?);
    }
    Ok(ProtocolRun {
        reports,
        expert_textured: tex,
        history_textured: tex_hist,
        expert_lens: lens,
        history_lens: lens_hist,
    })
}

type TrainedPair = (
    ExpertModel<f32>,
    TrainHistory,
    ExpertModel<f32>,
    TrainHistory,
);

fn train_pair(
    train_records: &[SampleRecord],
    train_config: &TrainConfig,
    backbone_config: &BackboneConfig,
) -> Result<TrainedPair, EvalError> {
    let tex_pool = effective_training_pool(train_records.iter(), ExpertKind::TexturedDetector);
    let (tex, tex_hist) = train_expert_on_pool(
        ExpertKind::TexturedDetector,
        &tex_pool,
        train_config,
        backbone_config,
    )?;

    let lens_backbone = BackboneConfig {
        init_seed: backbone_config.init_seed.wrapping_add(1),
        ..backbone_config.clone()
    };
    let lens_train = TrainConfig {
        seed: train_config.seed.wrapping_add(1),
        ..train_config.clone()
    };
    let lens_pool = effective_training_pool(train_records.iter(), ExpertKind::LensDetector);
    let (lens, lens_hist) =
        train_expert_on_pool(ExpertKind::LensDetector, &lens_pool, &lens_train, &lens_backbone)?;
    Ok((tex, tex_hist, lens, lens_hist))
}

/// Persists a protocol run: checkpoints, histories, text and JSON reports,
/// and the resolved protocol configuration, side by side under `out_dir`.
pub fn persist_run(
    run: &ProtocolRun,
    spec_echo: &serde_json::Value,
    reference: Option<&ReferenceTable>,
    out_dir: &Path,
) -> Result<(), EvalError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| EvalError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;

    save_checkpoint(&run.expert_textured, &out_dir.join("checkpoints/textured"))?;
    save_checkpoint(&run.expert_lens, &out_dir.join("checkpoints/lens"))?;

    let hist_t = out_dir.join("history_textured.json");
    fs::write(&hist_t, serde_json::to_vec_pretty(&run.history_textured)?).map_err(io(&hist_t))?;
    let hist_l = out_dir.join("history_lens.json");
    fs::write(&hist_l, serde_json::to_vec_pretty(&run.history_lens)?).map_err(io(&hist_l))?;

    let report_txt = out_dir.join("report.txt");
    fs::write(&report_txt, render_report(&run.reports, reference)).map_err(io(&report_txt))?;
    let report_json = out_dir.join("report.json");
    fs::write(&report_json, reports_to_json(&run.reports)?).map_err(io(&report_json))?;

    let cfg_path = out_dir.join("protocol_config.json");
    fs::write(&cfg_path, serde_json::to_vec_pretty(spec_echo)?).map_err(io(&cfg_path))?;
    Ok(())
}

/// Machine-readable report file: the reports plus an average block when
/// several reports share the combined variant.
pub fn reports_to_json(reports: &[CCRReport]) -> Result<Vec<u8>, EvalError> {
    #[derive(Serialize)]
    struct ReportFile<'a> {
        reports: &'a [CCRReport],
        #[serde(skip_serializing_if = "Option::is_none")]
        average: Option<AverageRow>,
    }
    let doc = ReportFile {
        reports,
        average: average_row(reports),
    };
    Ok(serde_json::to_vec_pretty(&doc)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct AverageRow {
    pub nn: Option<f64>,
    pub ss: Option<f64>,
    pub cc: Option<f64>,
    pub aggregate: f64,
}

/// Unweighted mean over multiple combined-variant reports (one per test
/// manifest), mirroring the published combined-sensor table's Avg column.
pub fn average_row(reports: &[CCRReport]) -> Option<AverageRow> {
    if reports.len() < 2
        || !reports
            .iter()
            .all(|r| matches!(r.protocol, ProtocolSpec::Combined { .. }))
    {
        return None;
    }
    let mean_opt = |vals: Vec<Option<f64>>| -> Option<f64> {
        let present: Vec<f64> = vals.into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    };
    Some(AverageRow {
        nn: mean_opt(reports.iter().map(|r| r.ccr_nn).collect()),
        ss: mean_opt(reports.iter().map(|r| r.ccr_ss).collect()),
        cc: mean_opt(reports.iter().map(|r| r.ccr_cc).collect()),
        aggregate: reports.iter().map(|r| r.aggregate).sum::<f64>() / reports.len() as f64,
    })
}

/// Published reference CCR values, keyed by protocol variant and row label.
#[derive(Debug, Clone, Deserialize)]
pub struct ReferenceTable {
    pub description: String,
    #[serde(default)]
    pub intra: Vec<ReferenceRow>,
    #[serde(default)]
    pub inter: Vec<ReferenceRow>,
    #[serde(default)]
    pub multi: Vec<ReferenceRow>,
    #[serde(default)]
    pub combined: Vec<ReferenceRow>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    pub methods: BTreeMap<String, ReferenceCcr>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct ReferenceCcr {
    pub nn: f64,
    pub ss: f64,
    pub cc: f64,
    pub aggregate: f64,
}

/// Transcribed published values shipped with the crate.
pub fn builtin_reference() -> ReferenceTable {
    serde_json::from_str(include_str!("../data/reference_ccr.json"))
        .expect("embedded reference table is valid")
}

pub fn load_reference(path: &Path) -> Result<ReferenceTable, EvalError> {
    let bytes = fs::read(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| EvalError::Reference(e.to_string()))
}

impl ReferenceTable {
    fn rows_for(&self, variant: &str) -> &[ReferenceRow] {
        match variant {
            "intra" => &self.intra,
            "inter" => &self.inter,
            "multi" => &self.multi,
            "combined" => &self.combined,
            _ => &[],
        }
    }

    pub fn find(&self, variant: &str, label: &str) -> Option<&ReferenceRow> {
        self.rows_for(variant).iter().find(|r| r.label == label)
    }
}

/// Fixed rendering order for reference methods; the published model's own
/// numbers come last, prior methods first.
const METHOD_ORDER: [&str; 4] = ["SIF", "DIR", "ContlensNet", "GHCLNet"];
const PRIOR_METHODS: [&str; 3] = ["SIF", "DIR", "ContlensNet"];

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "-".to_string(),
    }
}

/// Renders fixed-width text blocks, one per report, rows N-N / S-S / C-C /
/// Aggregate. With a reference table, matching rows gain the published
/// method columns and the aggregate line a delta against the best prior
/// method. Deterministic: equal inputs produce identical bytes.
pub fn render_report(reports: &[CCRReport], reference: Option<&ReferenceTable>) -> String {
    let mut out = String::new();
    for report in reports {
        render_block(
            &mut out,
            &format!(
                "protocol: {:<8}  pool: {}",
                report.protocol.variant_name(),
                report.protocol.label()
            ),
            report.per_class(LabelClass::NoLens),
            report.per_class(LabelClass::SoftLens),
            report.per_class(LabelClass::CosmeticLens),
            Some(report.aggregate),
            reference.and_then(|t| t.find(report.protocol.variant_name(), &report.protocol.label())),
            Some((report.evaluated, report.excluded)),
        );
    }
    if let Some(avg) = average_row(reports) {
        let reference_row = reference.and_then(|t| t.find("combined", "Avg"));
        render_block(
            &mut out,
            "protocol: combined  pool: Avg",
            avg.nn,
            avg.ss,
            avg.cc,
            Some(avg.aggregate),
            reference_row,
            None,
        );
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn render_block(
    out: &mut String,
    heading: &str,
    nn: Option<f64>,
    ss: Option<f64>,
    cc: Option<f64>,
    aggregate: Option<f64>,
    reference: Option<&ReferenceRow>,
    counts: Option<(u64, u64)>,
) {
    writeln!(out, "{heading}").unwrap();
    let methods: Vec<&str> = reference
        .map(|row| {
            METHOD_ORDER
                .iter()
                .copied()
                .filter(|m| row.methods.contains_key(*m))
                .collect()
        })
        .unwrap_or_default();

    write!(out, "  {:<10} {:>10}", "metric", "measured").unwrap();
    for m in &methods {
        write!(out, " {:>12}", m).unwrap();
    }
    if reference.is_some() {
        write!(out, " {:>10}", "delta").unwrap();
    }
    writeln!(out).unwrap();

    let rows: [(&str, Option<f64>, fn(&ReferenceCcr) -> f64); 4] = [
        ("N-N", nn, |r| r.nn),
        ("S-S", ss, |r| r.ss),
        ("C-C", cc, |r| r.cc),
        ("Aggregate", aggregate, |r| r.aggregate),
    ];
    for (name, measured, pick) in rows {
        write!(out, "  {:<10} {:>10}", name, fmt_opt(measured)).unwrap();
        if let Some(row) = reference {
            for m in &methods {
                write!(out, " {:>12}", format!("{:.2}", pick(&row.methods[*m]))).unwrap();
            }
            let delta = if name == "Aggregate" {
                let best_prior = PRIOR_METHODS
                    .iter()
                    .filter_map(|m| row.methods.get(*m))
                    .map(|r| r.aggregate)
                    .fold(f64::NEG_INFINITY, f64::max);
                match (measured, best_prior.is_finite()) {
                    (Some(m), true) => format!("{:+.2}", m - best_prior),
                    _ => "-".to_string(),
                }
            } else {
                String::new()
            };
            if !delta.is_empty() {
                write!(out, " {:>10}", delta).unwrap();
            }
        }
        writeln!(out).unwrap();
    }
    if let Some((evaluated, excluded)) = counts {
        writeln!(out, "  evaluated: {evaluated}  excluded: {excluded}").unwrap();
    }
    writeln!(out).unwrap();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Eye;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn record(
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

    fn two_sensor_manifest() -> DatasetManifest {
        let mut records = Vec::new();
        for (si, sensor) in ["Vista", "Cogent"].iter().enumerate() {
            for i in 0..12 {
                let subject = format!("s{}", i % 6);
                let split = if i % 6 < 3 { Split::Train } else { Split::Test };
                records.push(record(
                    &format!("{sensor}-{i}"),
                    sensor,
                    &subject,
                    LabelClass::ALL[(i + si) % 3],
                    split,
                ));
            }
        }
        DatasetManifest::new("iiitd", records).unwrap()
    }

    #[test]
    fn inter_split_has_disjoint_sensor_sets() {
        let m = two_sensor_manifest();
        let spec = ProtocolSpec::Inter {
            train_sensor: "Vista".into(),
            test_sensor: "Cogent".into(),
        };
        let (train, test) = build_protocol_splits(&spec, &[m]).unwrap();
        assert!(train.iter().all(|r| r.sensor_id == "Vista" && r.split == Split::Train));
        assert!(test.iter().all(|r| r.sensor_id == "Cogent" && r.split == Split::Test));
    }

    #[test]
    fn inter_same_sensor_is_rejected() {
        let spec = ProtocolSpec::Inter {
            train_sensor: "A".into(),
            test_sensor: "A".into(),
        };
        assert!(matches!(spec.validate(), Err(EvalError::InvalidProtocol(_))));
    }

    #[test]
    fn multi_pool_is_the_union_of_per_sensor_pools() {
        let m = two_sensor_manifest();
        let vista_train = pool_by_sensor(&[m.clone()], "Vista", Split::Train).len();
        let cogent_train = pool_by_sensor(&[m.clone()], "Cogent", Split::Train).len();
        let spec = ProtocolSpec::Multi {
            sensors: vec!["Vista".into(), "Cogent".into()],
        };
        let (train, _) = build_protocol_splits(&spec, &[m]).unwrap();
        assert_eq!(train.len(), vista_train + cogent_train);
    }

    #[test]
    fn combined_unions_train_and_tests_one_manifest() {
        let mut manifests = Vec::new();
        for (mi, name) in ["IITK", "IIITD", "ND"].iter().enumerate() {
            let mut records = Vec::new();
            for i in 0..8 {
                let split = if i < 4 { Split::Train } else { Split::Test };
                records.push(record(
                    &format!("{name}-{i}"),
                    &format!("{name}-sensor"),
                    &format!("{name}-s{}", i % 4 + if i < 4 { 0 } else { 4 }),
                    LabelClass::ALL[(i + mi) % 3],
                    split,
                ));
            }
            manifests.push(DatasetManifest::new(*name, records).unwrap());
        }
        let spec = ProtocolSpec::Combined {
            manifest_names: vec!["IITK".into(), "IIITD".into(), "ND".into()],
            test_manifest: "IITK".into(),
        };
        let (train, test) = build_protocol_splits(&spec, &manifests).unwrap();
        assert_eq!(train.len(), 12);
        assert!(test.iter().all(|r| r.sample_id.starts_with("IITK")));
        assert_eq!(test.len(), 4);
    }

    #[test]
    fn combination_introducing_subject_overlap_is_an_error() {
        // subject "shared" trains in manifest A and tests in manifest B
        let a = DatasetManifest::new(
            "A",
            vec![
                record("a1", "SA", "shared", LabelClass::NoLens, Split::Train),
                record("a2", "SA", "other", LabelClass::SoftLens, Split::Test),
            ],
        )
        .unwrap();
        let b = DatasetManifest::new(
            "B",
            vec![
                record("b1", "SB", "x", LabelClass::NoLens, Split::Train),
                record("b2", "SB", "shared", LabelClass::SoftLens, Split::Test),
            ],
        )
        .unwrap();
        let spec = ProtocolSpec::Combined {
            manifest_names: vec!["A".into(), "B".into()],
            test_manifest: "B".into(),
        };
        let err = build_protocol_splits(&spec, &[a, b]).unwrap_err();
        assert!(matches!(err, EvalError::SubjectOverlap { subject_id } if subject_id == "shared"));
    }

    #[test]
    fn empty_pools_and_unknown_sensors_error() {
        let m = two_sensor_manifest();
        let spec = ProtocolSpec::Intra {
            sensor: "Nonexistent".into(),
        };
        assert!(matches!(
            build_protocol_splits(&spec, &[m.clone()]),
            Err(EvalError::SensorNotFound(_))
        ));

        let empty_test = DatasetManifest::new(
            "onlytrain",
            vec![record("t1", "S", "s0", LabelClass::NoLens, Split::Train)],
        )
        .unwrap();
        let spec = ProtocolSpec::Intra { sensor: "S".into() };
        assert!(matches!(
            build_protocol_splits(&spec, &[empty_test]),
            Err(EvalError::EmptyPool { pool: "test", .. })
        ));
    }

    fn decision_for(label: LabelClass) -> CascadeDecision {
        match label {
            LabelClass::CosmeticLens => CascadeDecision {
                label,
                p_textured: 0.9,
                p_lens: 0.2,
                deciding_expert: ExpertKind::TexturedDetector,
            },
            LabelClass::SoftLens => CascadeDecision {
                label,
                p_textured: 0.1,
                p_lens: 0.9,
                deciding_expert: ExpertKind::LensDetector,
            },
            LabelClass::NoLens => CascadeDecision {
                label,
                p_textured: 0.1,
                p_lens: 0.1,
                deciding_expert: ExpertKind::LensDetector,
            },
        }
    }

    #[test]
    fn perfect_predictor_scores_100_everywhere() {
        let pairs: Vec<(LabelClass, CascadeDecision)> = (0..30)
            .map(|i| {
                let label = LabelClass::ALL[i % 3];
                (label, decision_for(label))
            })
            .collect();
        let report = report_from_decisions(
            ProtocolSpec::Intra { sensor: "S".into() },
            &pairs,
            Vec::new(),
        );
        assert_eq!(report.ccr_nn, Some(100.0));
        assert_eq!(report.ccr_ss, Some(100.0));
        assert_eq!(report.ccr_cc, Some(100.0));
        assert_eq!(report.aggregate, 100.0);
        assert_eq!(report.evaluated, 30);
    }

    #[test]
    fn hand_worked_matrix_yields_80_90_100_90() {
        let counts = ConfusionMatrix([[8, 2, 0], [1, 9, 0], [0, 0, 10]]);
        let report = CCRReport::from_matrix(
            ProtocolSpec::Intra { sensor: "S".into() },
            counts,
            Vec::new(),
        );
        assert_eq!(report.ccr_nn, Some(80.0));
        assert_eq!(report.ccr_ss, Some(90.0));
        assert_eq!(report.ccr_cc, Some(100.0));
        assert_eq!(report.aggregate, 90.0);
    }

    #[test]
    fn ccr_matches_brute_force_recount_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.gen_range(1..60);
            let pairs: Vec<(LabelClass, LabelClass)> = (0..n)
                .map(|_| {
                    (
                        LabelClass::ALL[rng.gen_range(0..3)],
                        LabelClass::ALL[rng.gen_range(0..3)],
                    )
                })
                .collect();
            let counts = ConfusionMatrix::from_pairs(&pairs);
            let report = CCRReport::from_matrix(
                ProtocolSpec::Intra { sensor: "S".into() },
                counts,
                Vec::new(),
            );

            // independent recount straight from the raw pairs
            for class in LabelClass::ALL {
                let total = pairs.iter().filter(|(t, _)| *t == class).count();
                let correct = pairs.iter().filter(|(t, p)| *t == class && p == t).count();
                let expected = (total > 0).then(|| 100.0 * correct as f64 / total as f64);
                assert_eq!(report.per_class(class), expected);
            }
            let correct = pairs.iter().filter(|(t, p)| t == p).count();
            assert_eq!(report.aggregate, 100.0 * correct as f64 / n as f64);

            // aggregate bounded by per-class extremes when all non-empty
            let per: Vec<f64> = LabelClass::ALL
                .iter()
                .filter_map(|&c| report.per_class(c))
                .collect();
            if per.len() == 3 {
                let min = per.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(report.aggregate >= min - 1e-9 && report.aggregate <= max + 1e-9);
            }
        }
    }

    #[test]
    fn render_includes_published_row_and_delta() {
        // Counts engineered to land on the published aggregate at 2dp.
        let counts = ConfusionMatrix([
            [8986, 1000, 14],
            [300, 9126, 574],
            [0, 0, 10000],
        ]);
        let report = CCRReport::from_matrix(
            ProtocolSpec::Intra {
                sensor: "IIITD-Cogent".into(),
            },
            counts,
            Vec::new(),
        );
        let reference = builtin_reference();
        let text = render_report(std::slice::from_ref(&report), Some(&reference));
        assert!(text.contains("86.73"), "{text}");
        assert!(text.contains("93.71"), "{text}");
        assert!(text.contains("+6.98"), "{text}");
        // byte stability
        let again = render_report(std::slice::from_ref(&report), Some(&reference));
        assert_eq!(text, again);
    }

    #[test]
    fn render_reproduces_reference_fixture_rows() {
        let counts = ConfusionMatrix([[99, 1, 0], [1, 99, 0], [0, 0, 100]]);
        let report = CCRReport::from_matrix(
            ProtocolSpec::Intra { sensor: "IITK".into() },
            counts,
            Vec::new(),
        );
        let reference = builtin_reference();
        let text = render_report(&[report], Some(&reference));
        for v in ["99.78", "99.24", "100.00", "99.67"] {
            assert!(text.contains(v), "missing {v} in\n{text}");
        }
    }

    #[test]
    fn render_empty_list_is_empty() {
        assert_eq!(render_report(&[], None), "");
        assert_eq!(render_report(&[], Some(&builtin_reference())), "");
    }

    #[test]
    fn exclusion_accounting_is_total() {
        let pairs = vec![
            (LabelClass::NoLens, decision_for(LabelClass::NoLens)),
            (LabelClass::SoftLens, decision_for(LabelClass::NoLens)),
        ];
        let exclusions = vec![ExclusionRecord {
            sample_id: "bad".into(),
            reason: "undecodable".into(),
        }];
        let report = report_from_decisions(
            ProtocolSpec::Intra { sensor: "S".into() },
            &pairs,
            exclusions,
        );
        assert_eq!(report.evaluated + report.excluded, 3);
    }

    #[test]
    fn builtin_reference_parses_and_contains_all_sections() {
        let t = builtin_reference();
        assert_eq!(t.intra.len(), 5);
        assert_eq!(t.inter.len(), 4);
        assert_eq!(t.multi.len(), 2);
        assert_eq!(t.combined.len(), 6);
        let row = t.find("intra", "IIITD-Cogent").unwrap();
        assert_eq!(row.methods["ContlensNet"].aggregate, 86.73);
        assert_eq!(row.methods["GHCLNet"].aggregate, 93.71);
    }
}
