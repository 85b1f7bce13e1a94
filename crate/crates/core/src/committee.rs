//! Per-(property, class logit) audits by a committee of CI tests.
//!
//! Every cell asks whether a property carries information about one class
//! logit. Under `stratify` only samples of that class are used and the test is
//! unconditional; under `condition_on_label` all samples are used with the
//! one-hot true label as conditioning set. Each configured test votes at
//! `alpha` and the consensus rule turns the votes into a ✓/✗.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmiknn::CmiknnConfig;
use crate::dataset::{one_hot_labels, standardize, stratify, Dataset, PropertyKind, PropertySpec, DEFAULT_MIN_STRATUM};
use crate::error::{AuditError, Result};
use crate::kernel::ChsicConfig;
use crate::outcome::{CiTest, TestId, TestOutcome};
use crate::rcot::RcotConfig;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    Stratify,
    ConditionOnLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusRule {
    Majority,
    Unanimous,
    Any,
}

impl ConsensusRule {
    pub fn decide(self, rejections: usize, votes: usize) -> bool {
        if votes == 0 {
            return false;
        }
        match self {
            ConsensusRule::Majority => 2 * rejections > votes,
            ConsensusRule::Unanimous => rejections == votes,
            ConsensusRule::Any => rejections >= 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    None,
    BenjaminiHochberg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub alpha: f64,
    pub mode: ConditioningMode,
    pub tests: Vec<TestId>,
    pub consensus: ConsensusRule,
    pub correction: Correction,
    /// Permutations for every permutation-based null.
    pub permutations: usize,
    pub seed: u64,
    pub min_stratum: usize,
    pub run_label: String,
    pub chsic: ChsicConfig,
    pub rcot: RcotConfig,
    pub cmiknn: CmiknnConfig,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            mode: ConditioningMode::Stratify,
            tests: TestId::ALL.to_vec(),
            consensus: ConsensusRule::Majority,
            correction: Correction::None,
            permutations: 500,
            seed: 0,
            min_stratum: DEFAULT_MIN_STRATUM,
            run_label: "audit".into(),
            chsic: ChsicConfig::default(),
            rcot: RcotConfig::default(),
            cmiknn: CmiknnConfig::default(),
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AuditError::Validation(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.tests.is_empty() {
            return Err(AuditError::Validation("at least one test must be selected".into()));
        }
        if self.permutations == 0 {
            return Err(AuditError::Validation("permutations must be positive".into()));
        }
        Ok(())
    }

    /// The configured test with the shared permutation count and minimum size.
    pub fn build_test(&self, id: TestId) -> Box<dyn CiTest> {
        match id {
            TestId::Chsic => Box::new(ChsicConfig {
                permutations: self.permutations,
                min_samples: self.min_stratum,
                ..self.chsic.clone()
            }),
            TestId::Rcot => Box::new(RcotConfig {
                permutations: self.permutations,
                min_samples: self.min_stratum,
                ..self.rcot.clone()
            }),
            TestId::Cmiknn => Box::new(CmiknnConfig {
                permutations: self.permutations,
                min_samples: self.min_stratum,
                ..self.cmiknn.clone()
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusCell {
    pub property: String,
    pub class_name: String,
    pub outcomes: Vec<TestOutcome>,
    /// Multiplicity-adjusted p-values aligned with `outcomes`, when corrected.
    pub adjusted_p_values: Option<Vec<f64>>,
    pub significant: bool,
    pub n_used: usize,
    /// Why the cell was not evaluated; skipped cells are excluded from counts.
    pub skipped: Option<String>,
}

impl ConsensusCell {
    fn skipped(property: &str, class_name: &str, n_used: usize, reason: String) -> Self {
        Self {
            property: property.to_string(),
            class_name: class_name.to_string(),
            outcomes: Vec::new(),
            adjusted_p_values: None,
            significant: false,
            n_used,
            skipped: Some(reason),
        }
    }

    /// Applies `rule` to the (adjusted, if present) p-values at `alpha`.
    pub fn decide(&self, rule: ConsensusRule, alpha: f64) -> bool {
        if self.skipped.is_some() {
            return false;
        }
        let p: Vec<f64> = match &self.adjusted_p_values {
            Some(q) => q.clone(),
            None => self.outcomes.iter().map(|o| o.p_value).collect(),
        };
        rule.decide(p.iter().filter(|&&v| v < alpha).count(), p.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCount {
    pub property: String,
    pub significant: usize,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceTable {
    pub run_label: String,
    pub properties: Vec<String>,
    pub classes: Vec<String>,
    /// Property-major: all classes of the first property, then the next.
    pub cells: Vec<ConsensusCell>,
    pub per_property_counts: Vec<PropertyCount>,
    pub significant_total: usize,
    pub cell_total: usize,
}

impl SignificanceTable {
    /// Assembles a table and fills the counts from the cells.
    pub fn from_cells(run_label: &str, properties: Vec<String>, classes: Vec<String>, cells: Vec<ConsensusCell>) -> Result<Self> {
        if cells.len() != properties.len() * classes.len() {
            return Err(AuditError::Validation(format!(
                "{} cells for a {}×{} grid",
                cells.len(),
                properties.len(),
                classes.len()
            )));
        }
        let per_property_counts: Vec<PropertyCount> = properties
            .iter()
            .enumerate()
            .map(|(p, name)| {
                let row = &cells[p * classes.len()..(p + 1) * classes.len()];
                PropertyCount {
                    property: name.clone(),
                    significant: row.iter().filter(|c| c.skipped.is_none() && c.significant).count(),
                    evaluated: row.iter().filter(|c| c.skipped.is_none()).count(),
                }
            })
            .collect();
        Ok(Self {
            run_label: run_label.to_string(),
            significant_total: per_property_counts.iter().map(|c| c.significant).sum(),
            cell_total: per_property_counts.iter().map(|c| c.evaluated).sum(),
            properties,
            classes,
            cells,
            per_property_counts,
        })
    }

    /// A table of bare decisions; `grid[class][property]`.
    pub fn from_grid(run_label: &str, properties: &[&str], classes: &[&str], grid: &[Vec<bool>]) -> Result<Self> {
        if grid.len() != classes.len() || grid.iter().any(|row| row.len() != properties.len()) {
            return Err(AuditError::Validation("grid shape does not match the labels".into()));
        }
        let mut cells = Vec::with_capacity(properties.len() * classes.len());
        for (p, property) in properties.iter().enumerate() {
            for (c, class) in classes.iter().enumerate() {
                cells.push(ConsensusCell {
                    property: property.to_string(),
                    class_name: class.to_string(),
                    outcomes: Vec::new(),
                    adjusted_p_values: None,
                    significant: grid[c][p],
                    n_used: 0,
                    skipped: None,
                });
            }
        }
        Self::from_cells(
            run_label,
            properties.iter().map(|s| s.to_string()).collect(),
            classes.iter().map(|s| s.to_string()).collect(),
            cells,
        )
    }

    pub fn cell(&self, property: &str, class_name: &str) -> Option<&ConsensusCell> {
        self.cells
            .iter()
            .find(|c| c.property == property && c.class_name == class_name)
    }

    pub fn skipped_cells(&self) -> Vec<&ConsensusCell> {
        self.cells.iter().filter(|c| c.skipped.is_some()).collect()
    }
}

fn prepare(values: &[f64], kind: PropertyKind) -> Result<Vec<f64>> {
    match kind {
        PropertyKind::Binary => Ok(values.to_vec()),
        PropertyKind::Scalar => Ok(standardize(values)?.values),
    }
}

/// Seed of one (property, class) cell, independent of evaluation order.
pub fn cell_seed(seed: u64, property: &str, class_index: usize) -> u64 {
    seed::derive(seed::derive(seed, seed::hash_str(property)), class_index as u64)
}

/// Runs every configured test on one cell and applies the consensus rule.
pub fn run_cell(dataset: &Dataset, property: &PropertySpec, class_index: usize, config: &AuditConfig) -> Result<ConsensusCell> {
    config.validate()?;
    let class_name = dataset
        .class_names()
        .get(class_index)
        .ok_or_else(|| AuditError::Domain(format!("class index {class_index} out of range")))?
        .clone();
    if dataset.property(&property.abbreviation).is_none() {
        return Err(AuditError::MissingColumn(property.column.clone()));
    }
    let (subset, z) = match config.mode {
        ConditioningMode::Stratify => match stratify(dataset, class_index, config.min_stratum) {
            Ok(s) => {
                let n = s.n();
                (s, DMatrix::zeros(n, 0))
            }
            Err(AuditError::InsufficientData(reason)) => {
                let n = dataset.labels().iter().filter(|&&l| l == class_index).count();
                return Ok(ConsensusCell::skipped(&property.abbreviation, &class_name, n, reason));
            }
            Err(e) => return Err(e),
        },
        ConditioningMode::ConditionOnLabel => {
            if dataset.n() < config.min_stratum {
                return Ok(ConsensusCell::skipped(
                    &property.abbreviation,
                    &class_name,
                    dataset.n(),
                    format!("{} samples, minimum is {}", dataset.n(), config.min_stratum),
                ));
            }
            (dataset.clone(), one_hot_labels(dataset))
        }
    };
    let n = subset.n();
    let raw_x = subset.property(&property.abbreviation).expect("checked above");
    let x = prepare(raw_x, property.kind)?;
    let y = standardize(subset.logits(class_index))?.values;

    let base = cell_seed(config.seed, &property.abbreviation, class_index);
    let mut outcomes = Vec::with_capacity(config.tests.len());
    for &id in &config.tests {
        let test = config.build_test(id);
        match test.run(&x, &y, &z, seed::derive(base, seed::hash_str(id.as_str()))) {
            Ok(o) => outcomes.push(o),
            Err(e) if e.is_schema() => return Err(e),
            Err(e) => {
                return Ok(ConsensusCell::skipped(
                    &property.abbreviation,
                    &class_name,
                    n,
                    format!("{id}: {e}"),
                ))
            }
        }
    }
    let mut cell = ConsensusCell {
        property: property.abbreviation.clone(),
        class_name,
        outcomes,
        adjusted_p_values: None,
        significant: false,
        n_used: n,
        skipped: None,
    };
    cell.significant = cell.decide(config.consensus, config.alpha);
    Ok(cell)
}

/// Benjamini–Hochberg adjusted p-values, in input order.
pub fn benjamini_hochberg(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p_values[i] * m as f64 / (rank + 1) as f64);
        adjusted[i] = running.min(1.0);
    }
    adjusted
}

fn apply_correction(cells: &mut [ConsensusCell], config: &AuditConfig) {
    if config.correction == Correction::None {
        return;
    }
    for cell in cells.iter_mut().filter(|c| c.skipped.is_none()) {
        cell.adjusted_p_values = Some(cell.outcomes.iter().map(|o| o.p_value).collect());
    }
    for (slot, _) in config.tests.iter().enumerate() {
        let members: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].skipped.is_none()).collect();
        let raw: Vec<f64> = members.iter().map(|&i| cells[i].outcomes[slot].p_value).collect();
        for (&i, q) in members.iter().zip(benjamini_hochberg(&raw)) {
            cells[i].adjusted_p_values.as_mut().expect("set above")[slot] = q;
        }
    }
    for cell in cells.iter_mut() {
        cell.significant = cell.decide(config.consensus, config.alpha);
    }
}

/// Evaluates every (property, class) cell of the dataset.
pub fn run_audit(dataset: &Dataset, config: &AuditConfig) -> Result<SignificanceTable> {
    config.validate()?;
    let specs = dataset.property_specs();
    let classes = dataset.num_classes();
    let mut cells = (0..specs.len() * classes)
        .into_par_iter()
        .map(|k| run_cell(dataset, &specs[k / classes], k % classes, config))
        .collect::<Result<Vec<_>>>()?;
    apply_correction(&mut cells, config);
    SignificanceTable::from_cells(
        &config.run_label,
        specs.iter().map(|s| s.abbreviation.clone()).collect(),
        dataset.class_names().to_vec(),
        cells,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyUsage {
    pub property: String,
    /// `k/N` over the evaluated classes.
    pub fraction: String,
    pub significant: usize,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageSummary {
    pub run_label: String,
    pub per_property: Vec<PropertyUsage>,
    /// `k/N` over all evaluated cells.
    pub total: String,
    pub significant: usize,
    pub evaluated: usize,
    /// `100·k/N` rounded to two decimals.
    pub percentage: f64,
}

pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

pub fn aggregate_usage(table: &SignificanceTable) -> UsageSummary {
    let per_property = table
        .per_property_counts
        .iter()
        .map(|c| PropertyUsage {
            property: c.property.clone(),
            fraction: format!("{}/{}", c.significant, c.evaluated),
            significant: c.significant,
            evaluated: c.evaluated,
        })
        .collect();
    let (k, n) = (table.significant_total, table.cell_total);
    UsageSummary {
        run_label: table.run_label.clone(),
        per_property,
        total: format!("{k}/{n}"),
        significant: k,
        evaluated: n,
        percentage: if n == 0 { 0.0 } else { round2(100.0 * k as f64 / n as f64) },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Json,
    TextGrid,
}

fn csv_tests(table: &SignificanceTable) -> Vec<TestId> {
    let mut ids: Vec<TestId> = Vec::new();
    for cell in &table.cells {
        for o in &cell.outcomes {
            if !ids.contains(&o.test_id) {
                ids.push(o.test_id);
            }
        }
    }
    ids.sort_by_key(|id| TestId::ALL.iter().position(|a| a == id));
    ids
}

fn export_csv(table: &SignificanceTable) -> Result<String> {
    let ids = csv_tests(table);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "run_label".to_string(),
        "property".into(),
        "class".into(),
        "significant".into(),
        "n_used".into(),
        "skipped".into(),
    ];
    for id in &ids {
        for field in ["statistic", "p_value", "adjusted_p_value", "seed", "config"] {
            header.push(format!("{id}_{field}"));
        }
    }
    w.write_record(&header)?;
    for cell in &table.cells {
        let mut row = vec![
            table.run_label.clone(),
            cell.property.clone(),
            cell.class_name.clone(),
            cell.significant.to_string(),
            cell.n_used.to_string(),
            cell.skipped.clone().unwrap_or_default(),
        ];
        for id in &ids {
            match cell.outcomes.iter().position(|o| o.test_id == *id) {
                Some(k) => {
                    let o = &cell.outcomes[k];
                    row.push(o.statistic.to_string());
                    row.push(o.p_value.to_string());
                    row.push(
                        cell.adjusted_p_values
                            .as_ref()
                            .map(|q| q[k].to_string())
                            .unwrap_or_default(),
                    );
                    row.push(o.seed.to_string());
                    row.push(o.config_echo.clone());
                }
                None => row.extend(std::iter::repeat_n(String::new(), 5)),
            }
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| AuditError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn export_grid(table: &SignificanceTable) -> String {
    let classes = table.classes.len();
    let width = table
        .classes
        .iter()
        .map(|c| c.chars().count())
        .max()
        .unwrap_or(0)
        .max("class".len());
    let col = table.properties.iter().map(|p| p.chars().count()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "class");
    for p in &table.properties {
        let _ = write!(out, " {p:>col$}");
    }
    let _ = writeln!(out, " {:>7}", "sum");
    for (c, class) in table.classes.iter().enumerate() {
        let _ = write!(out, "{class:<width$}");
        let (mut k, mut n) = (0, 0);
        for p in 0..table.properties.len() {
            let cell = &table.cells[p * classes + c];
            let mark = match (&cell.skipped, cell.significant) {
                (Some(_), _) => "-",
                (None, true) => "✓",
                (None, false) => "✗",
            };
            if cell.skipped.is_none() {
                n += 1;
                k += usize::from(cell.significant);
            }
            let _ = write!(out, " {mark:>col$}");
        }
        let _ = writeln!(out, " {:>7}", format!("{k}/{n}"));
    }
    let _ = write!(out, "{:<width$}", "∅");
    for count in &table.per_property_counts {
        let _ = write!(out, " {:>col$}", format!("{}/{}", count.significant, count.evaluated));
    }
    let _ = writeln!(out, " {:>7}", format!("{}/{}", table.significant_total, table.cell_total));
    out
}

pub fn export_table(table: &SignificanceTable, format: ExportFormat) -> Result<String> {
    match format {
        ExportFormat::Json => Ok(serde_json::to_string_pretty(table)? + "\n"),
        ExportFormat::Csv => export_csv(table),
        ExportFormat::TextGrid => Ok(export_grid(table)),
    }
}
