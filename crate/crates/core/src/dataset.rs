//! Audit data model: sample tables, property manifests and preprocessing.
//!
//! A sample table is a CSV file with a header row. It carries a `sample_id`
//! column, a label column holding class names, one logit column per class
//! (`<logit_prefix><class>`) and free-named property columns. The manifest is
//! a JSON document naming the classes, the label column, the logit prefix and
//! the properties to audit.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

pub const DEFAULT_MIN_STRATUM: usize = 25;
pub const SAMPLE_ID_COLUMN: &str = "sample_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropertyGroup {
    Bodily,
    Recording,
    Symmetry,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropertyKind {
    Scalar,
    Binary,
}

/// One audited property and where to find it in the sample table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertySpec {
    pub name: String,
    /// Short unique key, e.g. `B_A` for age.
    pub abbreviation: String,
    pub group: PropertyGroup,
    pub kind: PropertyKind,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default = "default_logit_prefix")]
    pub logit_prefix: String,
    pub properties: Vec<PropertySpec>,
}

fn default_label_column() -> String {
    "label".to_string()
}

fn default_logit_prefix() -> String {
    "logit_".to_string()
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        let manifest: Manifest = serde_json::from_reader(file)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(AuditError::Schema("manifest declares no classes".into()));
        }
        let mut seen = BTreeSet::new();
        for class in &self.classes {
            if !seen.insert(class.as_str()) {
                return Err(AuditError::Schema(format!("duplicate class `{class}`")));
            }
        }
        let mut abbreviations = BTreeSet::new();
        for spec in &self.properties {
            if !abbreviations.insert(spec.abbreviation.as_str()) {
                return Err(AuditError::Schema(format!(
                    "duplicate property abbreviation `{}`",
                    spec.abbreviation
                )));
            }
        }
        Ok(())
    }

    pub fn logit_column(&self, class: &str) -> String {
        format!("{}{}", self.logit_prefix, class)
    }

    pub fn property(&self, abbreviation: &str) -> Option<&PropertySpec> {
        self.properties.iter().find(|p| p.abbreviation == abbreviation)
    }
}

/// Validated, immutable audit input.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    manifest: Manifest,
    sample_ids: Vec<String>,
    labels: Vec<usize>,
    /// One column per class.
    logits: Vec<Vec<f64>>,
    /// One column per manifest property, in manifest order.
    properties: Vec<Vec<f64>>,
}

impl Dataset {
    /// Builds a dataset from in-memory columns, checking every invariant.
    pub fn new(
        manifest: Manifest,
        sample_ids: Vec<String>,
        labels: Vec<usize>,
        logits: Vec<Vec<f64>>,
        properties: Vec<Vec<f64>>,
    ) -> Result<Self> {
        manifest.validate()?;
        let n = sample_ids.len();
        let classes = manifest.classes.len();
        if logits.len() != classes {
            return Err(AuditError::Schema(format!(
                "expected {classes} logit columns, got {}",
                logits.len()
            )));
        }
        if properties.len() != manifest.properties.len() {
            return Err(AuditError::Schema(format!(
                "expected {} property columns, got {}",
                manifest.properties.len(),
                properties.len()
            )));
        }
        if labels.len() != n
            || logits.iter().any(|c| c.len() != n)
            || properties.iter().any(|c| c.len() != n)
        {
            return Err(AuditError::Validation(
                "all columns must have exactly n entries".into(),
            ));
        }
        if let Some(row) = labels.iter().position(|&l| l >= classes) {
            return Err(AuditError::Validation(format!(
                "label {} at row {} outside [0, {classes})",
                labels[row],
                row + 1
            )));
        }
        for (class, column) in manifest.classes.iter().zip(&logits) {
            if let Some(row) = column.iter().position(|v| !v.is_finite()) {
                return Err(AuditError::Validation(format!(
                    "non-finite logit for class `{class}` at row {}",
                    row + 1
                )));
            }
        }
        for (spec, column) in manifest.properties.iter().zip(&properties) {
            if let Some(row) = column.iter().position(|v| !v.is_finite()) {
                return Err(AuditError::Validation(format!(
                    "non-finite value for property `{}` at row {}",
                    spec.abbreviation,
                    row + 1
                )));
            }
            if spec.kind == PropertyKind::Binary {
                let offending: Vec<usize> = column
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0 && v != 1.0)
                    .map(|(i, _)| i + 1)
                    .collect();
                if !offending.is_empty() {
                    return Err(AuditError::Validation(format!(
                        "binary property `{}` has values outside {{0, 1}} at rows {:?}",
                        spec.abbreviation, offending
                    )));
                }
            }
        }
        Ok(Self {
            manifest,
            sample_ids,
            labels,
            logits,
            properties,
        })
    }

    /// Parses a sample table against `manifest`. Row order is preserved.
    pub fn from_csv_reader<R: Read>(reader: R, manifest: &Manifest) -> Result<Self> {
        manifest.validate()?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
        let find = |name: &str| -> Result<usize> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| AuditError::MissingColumn(name.to_string()))
        };

        let id_col = find(SAMPLE_ID_COLUMN)?;
        let label_col = find(&manifest.label_column)?;
        let logit_cols = manifest
            .classes
            .iter()
            .map(|c| find(&manifest.logit_column(c)))
            .collect::<Result<Vec<_>>>()?;
        let prop_cols = manifest
            .properties
            .iter()
            .map(|p| find(&p.column))
            .collect::<Result<Vec<_>>>()?;

        let class_index: HashMap<&str, usize> = manifest
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();

        let mut sample_ids = Vec::new();
        let mut labels = Vec::new();
        let mut logits = vec![Vec::new(); logit_cols.len()];
        let mut properties = vec![Vec::new(); prop_cols.len()];

        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let row = i + 1;
            let cell = |col: usize| record.get(col).unwrap_or("");
            sample_ids.push(cell(id_col).to_string());

            let label = cell(label_col);
            let class = class_index.get(label).copied().ok_or_else(|| {
                AuditError::Validation(format!("unknown class `{label}` at row {row}"))
            })?;
            labels.push(class);

            for ((out, &col), class) in logits.iter_mut().zip(&logit_cols).zip(&manifest.classes) {
                out.push(parse_number(cell(col), row, &manifest.logit_column(class))?);
            }
            for ((out, &col), spec) in properties.iter_mut().zip(&prop_cols).zip(&manifest.properties) {
                out.push(parse_number(cell(col), row, &spec.column)?);
            }
        }

        Dataset::new(manifest.clone(), sample_ids, labels, logits, properties)
    }

    /// Writes the dataset in the same CSV schema it is loaded from.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let m = &self.manifest;
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec![SAMPLE_ID_COLUMN.to_string(), m.label_column.clone()];
        header.extend(m.classes.iter().map(|c| m.logit_column(c)));
        header.extend(m.properties.iter().map(|p| p.column.clone()));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![self.sample_ids[i].clone(), m.classes[self.labels[i]].clone()];
            row.extend(self.logits.iter().map(|c| c[i].to_string()));
            row.extend(self.properties.iter().map(|c| c[i].to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.manifest.classes
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.manifest.classes.iter().position(|c| c == name)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn logits(&self, class_index: usize) -> &[f64] {
        &self.logits[class_index]
    }

    /// Logit vector of sample `i` across all classes.
    pub fn logit_row(&self, i: usize) -> Vec<f64> {
        self.logits.iter().map(|c| c[i]).collect()
    }

    pub fn property_specs(&self) -> &[PropertySpec] {
        &self.manifest.properties
    }

    pub fn property(&self, abbreviation: &str) -> Option<&[f64]> {
        self.manifest
            .properties
            .iter()
            .position(|p| p.abbreviation == abbreviation)
            .map(|i| self.properties[i].as_slice())
    }

    pub fn property_spec(&self, abbreviation: &str) -> Option<&PropertySpec> {
        self.manifest.property(abbreviation)
    }

    /// Subset with the given sample indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let pick = |col: &Vec<f64>| indices.iter().map(|&i| col[i]).collect::<Vec<_>>();
        Dataset {
            manifest: self.manifest.clone(),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            logits: self.logits.iter().map(pick).collect(),
            properties: self.properties.iter().map(pick).collect(),
        }
    }
}

fn parse_number(raw: &str, row: usize, column: &str) -> Result<f64> {
    if raw.is_empty() {
        return Err(AuditError::Parse {
            row,
            column: column.to_string(),
            message: "missing value".into(),
        });
    }
    raw.parse::<f64>().map_err(|e| AuditError::Parse {
        row,
        column: column.to_string(),
        message: format!("`{raw}` is not a number ({e})"),
    })
}

/// Loads a sample table and its manifest.
pub fn load_dataset(table_path: impl AsRef<Path>, manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest = Manifest::load(manifest_path)?;
    let file = File::open(table_path.as_ref())?;
    Dataset::from_csv_reader(file, &manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedVector {
    pub values: Vec<f64>,
    pub original_mean: f64,
    /// Population standard deviation; zero marks a constant input.
    pub original_std: f64,
}

/// Zero-mean, unit-variance rescaling (population standard deviation).
pub fn standardize(values: &[f64]) -> Result<StandardizedVector> {
    if values.is_empty() {
        return Err(AuditError::Domain("cannot standardize an empty vector".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AuditError::Domain("cannot standardize non-finite values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    // Rounding in the mean leaves ~1e-17 relative spread on constant input.
    if std <= 1e-12 * mean.abs().max(1.0) {
        return Ok(StandardizedVector {
            values: vec![0.0; values.len()],
            original_mean: mean,
            original_std: 0.0,
        });
    }
    Ok(StandardizedVector {
        values: values.iter().map(|v| (v - mean) / std).collect(),
        original_mean: mean,
        original_std: std,
    })
}

/// Samples whose true label is `class_index`.
pub fn stratify(dataset: &Dataset, class_index: usize, min_size: usize) -> Result<Dataset> {
    if class_index >= dataset.num_classes() {
        return Err(AuditError::Domain(format!(
            "class index {class_index} outside [0, {})",
            dataset.num_classes()
        )));
    }
    let indices: Vec<usize> = (0..dataset.n())
        .filter(|&i| dataset.labels[i] == class_index)
        .collect();
    if indices.len() < min_size.max(1) {
        return Err(AuditError::InsufficientData(format!(
            "class `{}` has {} samples, minimum is {}",
            dataset.class_names()[class_index],
            indices.len(),
            min_size
        )));
    }
    Ok(dataset.select(&indices))
}

/// n x C indicator matrix of the true labels.
pub fn one_hot_labels(dataset: &Dataset) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(dataset.n(), dataset.num_classes());
    for (i, &label) in dataset.labels.iter().enumerate() {
        out[(i, label)] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(properties: Vec<PropertySpec>) -> Manifest {
        Manifest {
            classes: vec!["a".into(), "b".into(), "c".into()],
            label_column: "label".into(),
            logit_prefix: "logit_".into(),
            properties,
        }
    }

    fn binary_prop() -> PropertySpec {
        PropertySpec {
            name: "Attached sEMG".into(),
            abbreviation: "R_A".into(),
            group: PropertyGroup::Recording,
            kind: PropertyKind::Binary,
            column: "emg".into(),
        }
    }

    #[test]
    fn loads_seven_class_table() {
        let classes: Vec<String> = (0..7).map(|i| format!("c{i}")).collect();
        let m = Manifest {
            classes: classes.clone(),
            label_column: "label".into(),
            logit_prefix: "logit_".into(),
            properties: vec![binary_prop()],
        };
        let mut csv = String::from("sample_id,label");
        for c in &classes {
            csv.push_str(&format!(",logit_{c}"));
        }
        csv.push_str(",emg\n");
        for r in 0..3 {
            csv.push_str(&format!("s{r},c{r}"));
            for k in 0..7 {
                csv.push_str(&format!(",{}", k as f64 * 0.5 - r as f64));
            }
            csv.push_str(&format!(",{}\n", r % 2));
        }
        let d = Dataset::from_csv_reader(csv.as_bytes(), &m).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.num_classes(), 7);
        assert_eq!(d.labels(), &[0, 1, 2]);
        assert_eq!(d.logits(2), &[1.0, 0.0, -1.0]);
        assert_eq!(d.property("R_A").unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn missing_property_column_is_named() {
        let mut p = binary_prop();
        p.column = "age".into();
        let csv = "sample_id,label,logit_a,logit_b,logit_c\ns0,a,1,2,3\n";
        let err = Dataset::from_csv_reader(csv.as_bytes(), &manifest(vec![p])).unwrap_err();
        assert!(matches!(&err, AuditError::MissingColumn(c) if c == "age"), "{err}");
        assert!(err.is_schema());
    }

    #[test]
    fn binary_value_two_is_rejected_with_row() {
        let csv = "sample_id,label,logit_a,logit_b,logit_c,emg\ns0,a,1,2,3,0\ns1,b,1,2,3,2\n";
        let err = Dataset::from_csv_reader(csv.as_bytes(), &manifest(vec![binary_prop()])).unwrap_err();
        match err {
            AuditError::Validation(msg) => assert!(msg.contains("[2]"), "{msg}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_numeric_logit_reports_row() {
        let csv = "sample_id,label,logit_a,logit_b,logit_c\ns0,a,1,2,3\ns1,a,1,x,3\n";
        let err = Dataset::from_csv_reader(csv.as_bytes(), &manifest(vec![])).unwrap_err();
        assert!(matches!(err, AuditError::Parse { row: 2, ref column, .. } if column == "logit_b"));
    }

    #[test]
    fn empty_cell_is_rejected_not_imputed() {
        let csv = "sample_id,label,logit_a,logit_b,logit_c\ns0,a,1,,3\n";
        let err = Dataset::from_csv_reader(csv.as_bytes(), &manifest(vec![])).unwrap_err();
        assert!(matches!(err, AuditError::Parse { .. }));
    }

    #[test]
    fn duplicate_abbreviation_rejected() {
        let m = manifest(vec![binary_prop(), binary_prop()]);
        assert!(matches!(m.validate(), Err(AuditError::Schema(_))));
    }

    #[test]
    fn standardize_hand_values() {
        let s = standardize(&[1.0, 2.0, 3.0]).unwrap();
        let expected = (1.5f64).sqrt(); // 1 / sqrt(2/3)
        assert!((s.values[0] + expected).abs() < 1e-12);
        assert!(s.values[1].abs() < 1e-12);
        assert!((s.values[2] - expected).abs() < 1e-12);
        assert!((s.original_std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn standardize_constant_and_empty() {
        let s = standardize(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(s.values, vec![0.0; 3]);
        assert_eq!(s.original_std, 0.0);
        let s = standardize(&[0.1, 0.1, 0.1]).unwrap();
        assert_eq!(s.original_std, 0.0);
        assert!(matches!(standardize(&[]), Err(AuditError::Domain(_))));
    }

    #[test]
    fn standardize_idempotent() {
        let once = standardize(&[3.0, -1.0, 4.0, 1.5, 9.0]).unwrap();
        let twice = standardize(&once.values).unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn tiny(labels: Vec<usize>) -> Dataset {
        let n = labels.len();
        Dataset::new(
            manifest(vec![binary_prop()]),
            (0..n).map(|i| format!("s{i}")).collect(),
            labels,
            vec![(0..n).map(|i| i as f64).collect(); 3],
            vec![(0..n).map(|i| (i % 2) as f64).collect()],
        )
        .unwrap()
    }

    #[test]
    fn stratify_filters_and_is_idempotent() {
        let d = tiny(vec![0, 1, 0, 2]);
        let s = stratify(&d, 0, 1).unwrap();
        assert_eq!(s.n(), 2);
        assert_eq!(s.sample_ids(), &["s0".to_string(), "s2".to_string()]);
        assert_eq!(s.logits(1), &[0.0, 2.0]);
        assert_eq!(s.property("R_A").unwrap(), &[0.0, 0.0]);
        assert_eq!(stratify(&s, 0, 1).unwrap(), s);
    }

    #[test]
    fn stratify_empty_class_is_insufficient() {
        let d = tiny(vec![0, 1, 0, 1]);
        let err = stratify(&d, 2, 1).unwrap_err();
        assert!(matches!(err, AuditError::InsufficientData(ref m) if m.contains("`c`")));
        assert!(matches!(stratify(&d, 0, DEFAULT_MIN_STRATUM), Err(AuditError::InsufficientData(_))));
    }

    #[test]
    fn one_hot_rows_and_columns() {
        let d = tiny(vec![0, 2]);
        let h = one_hot_labels(&d);
        assert_eq!(h, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
        let d = tiny(vec![0, 2, 2, 1, 0, 2]);
        let h = one_hot_labels(&d);
        for i in 0..d.n() {
            assert_eq!(h.row(i).sum(), 1.0);
        }
        let sums: Vec<f64> = (0..3).map(|c| h.column(c).sum()).collect();
        assert_eq!(sums, vec![2.0, 1.0, 3.0]);
    }
}
