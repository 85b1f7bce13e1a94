//! Property auditing for black-box classifiers.
//!
//! The question "does this classifier use property P when scoring class c?"
//! is reduced to a conditional-independence test between the property and the
//! class logit. Three nonparametric tests (conditional HSIC, RCoT and CMIknn)
//! form a committee whose consensus decides each (property, class) cell.
//!
//! Around the committee sit the pieces needed for a full audit: dataset
//! ingestion ([`dataset`]), landmark symmetry properties ([`symmetry`]),
//! descriptive analytics ([`trend`]) and a synthetic structural-causal-model
//! harness used to calibrate the tests themselves ([`synth`]).

pub mod cmiknn;
pub mod committee;
pub mod dataset;
pub mod error;
pub mod kernel;
pub mod neighbors;
pub mod outcome;
pub mod rcot;
pub mod seed;
pub mod symmetry;
pub mod synth;
pub mod trend;

pub use committee::{
    aggregate_usage, export_table, run_audit, run_cell, AuditConfig, ConditioningMode,
    ConsensusCell, ConsensusRule, Correction, ExportFormat, SignificanceTable, UsageSummary,
};
pub use dataset::{
    load_dataset, one_hot_labels, standardize, stratify, Dataset, Manifest, PropertyGroup,
    PropertyKind, PropertySpec, StandardizedVector,
};
pub use error::{AuditError, Result};
pub use outcome::{CiTest, TestId, TestOutcome};
pub use cmiknn::{cmi_knn_estimate, cmiknn_test, local_permutation, CmiknnConfig};
pub use kernel::{chsic_test, hsic_statistic, median_heuristic_bandwidth, rbf_gram, ChsicConfig, GramMatrix};
pub use rcot::{rcot_test, NullMethod, RcotConfig};
pub use synth::{calibration_run, generate_pipeline_fixture, generate_scm_dataset, CalibrationReport, GroundTruth, ScmKind, ScmSpec};
