use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use propaudit_core::TestId;

#[derive(Debug, Parser)]
#[command(name = "propaudit", version, about = "Audit which sample properties a classifier uses")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Sample table (CSV).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,

    /// Property manifest (JSON).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[arg(long, global = true)]
    pub alpha: Option<f64>,

    /// Comma-separated subset of chsic,rcot,cmiknn.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_test_id)]
    pub tests: Option<Vec<TestId>>,

    #[arg(long, global = true, value_enum)]
    pub consensus: Option<ConsensusArg>,

    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,

    /// Also render SVG figures.
    #[arg(long, global = true)]
    pub svg: bool,

    /// JSON file with defaults; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

fn parse_test_id(s: &str) -> Result<TestId, String> {
    s.parse().map_err(|e: propaudit_core::AuditError| e.to_string())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConsensusArg {
    Majority,
    Unanimous,
    Any,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Stratify,
    #[value(alias = "condition-on-label")]
    ConditionOnLabel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CorrectionArg {
    None,
    #[value(alias = "bh")]
    BenjaminiHochberg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    #[value(alias = "null_common_cause", alias = "null-common-cause")]
    Null,
    #[value(alias = "direct_dependence", alias = "direct-dependence")]
    Direct,
    #[value(alias = "pipeline_fixture", alias = "pipeline-fixture")]
    Pipeline,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PropertyKindArg {
    Scalar,
    Binary,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Committee significance table for every (property, class) cell.
    Audit(AuditArgs),
    /// Per-class accuracy of the argmax prediction, optionally by group.
    Accuracy(AccuracyArgs),
    /// Sliding-window logit trends and binary group summaries.
    Trend(TrendArgs),
    /// Landmark symmetry angles and mirrored-half dissimilarity.
    Symmetry(SymmetryArgs),
    /// Rejection rates of the tests on synthetic data.
    Calibrate(CalibrateArgs),
    /// Emit a synthetic dataset with known ground truth.
    Fixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long, value_enum)]
    pub correction: Option<CorrectionArg>,

    /// Permutations per permutation-based null.
    #[arg(long)]
    pub permutations: Option<usize>,

    #[arg(long)]
    pub min_stratum: Option<usize>,

    /// Label stored with the table, e.g. the model name.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct AccuracyArgs {
    /// Property abbreviations to group by.
    #[arg(long, value_delimiter = ',')]
    pub group_by: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrendArgs {
    /// Property abbreviation; all properties when omitted.
    #[arg(long)]
    pub property: Option<String>,

    /// Class name; all classes when omitted.
    #[arg(long)]
    pub class: Option<String>,

    #[arg(long, default_value_t = propaudit_core::trend::DEFAULT_WINDOW_FRAC)]
    pub window_frac: f64,

    #[arg(long, default_value_t = propaudit_core::trend::DEFAULT_STRIDE_FRAC)]
    pub stride_frac: f64,
}

#[derive(Debug, Args)]
pub struct SymmetryArgs {
    /// Landmark CSV: sample_id, lx, ly, rx, ry, nx, ny, sx, sy.
    #[arg(long)]
    pub landmarks: PathBuf,

    /// Directory holding `<sample_id>.pgm` images.
    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, visible_alias = "spec", value_enum, default_value = "null")]
    pub kind: KindArg,

    /// Number of trials (default 200).
    #[arg(long)]
    pub trials: Option<usize>,

    #[arg(long)]
    pub n: Option<usize>,

    #[arg(long)]
    pub effect: Option<f64>,

    #[arg(long)]
    pub noise: Option<f64>,

    #[arg(long, value_enum)]
    pub property_kind: Option<PropertyKindArg>,

    #[arg(long)]
    pub permutations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, value_enum, default_value = "pipeline")]
    pub kind: KindArg,

    #[arg(long)]
    pub n: Option<usize>,

    #[arg(long)]
    pub classes: Option<usize>,

    #[arg(long)]
    pub effect: Option<f64>,

    #[arg(long)]
    pub noise: Option<f64>,

    #[arg(long, value_enum)]
    pub property_kind: Option<PropertyKindArg>,
}
