//! GHCLNet: hierarchical contact-lens detection.
//!
//! Two binary experts, a textured-lens detector and a soft-lens detector,
//! are built on the same five-stage residual backbone and fused by a hard
//! cascade into a three-class verdict: no lens, soft lens, cosmetic lens.
//! Fine-tuning updates only a configurable subset of backbone sub-blocks;
//! evaluation covers intra-, inter-, multi- and combined-sensor protocols
//! with per-class CCR reporting. All randomness is seeded and every
//! parallel reduction has a fixed order, so identical configurations
//! reproduce identical artifacts.

pub mod backbone;
pub mod cascade;
pub mod checkpoint;
pub mod datamodel;
pub mod evaluation;
pub mod featviz;
pub mod ingestion;
pub mod nn;
pub mod training;

pub use backbone::{build_backbone, feature_shapes, BackboneConfig, ExpertModel, FreezePolicy};
pub use cascade::{cascade_decide, cascade_predict, CascadeDecision, CascadeThresholds};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use datamodel::{
    load_manifest, relabel_for_expert, validate_manifest, BinaryLabel, DatasetManifest,
    ExpertKind, LabelClass, SampleRecord, ValidationReport,
};
pub use evaluation::{
    build_protocol_splits, evaluate, render_report, run_combined_protocol, run_protocol,
    CCRReport, ConfusionMatrix, ProtocolSpec,
};
pub use featviz::{visualize, VizRequest};
pub use ingestion::{prepare_input, synth_generate, ImageTensor, SynthSpec};
pub use training::{
    make_batches, train_expert, OptimizerConfig, TrainConfig, TrainHistory,
};
