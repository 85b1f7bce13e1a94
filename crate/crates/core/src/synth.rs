//! Synthetic structural causal models with known dependence structure.
//!
//! The base model is a common cause:
//!
//! ```text
//! z ~ N(0, 1)
//! x = tanh(z) + σ·ε_x
//! y = z²/2 + σ·ε_y  (+ effect·x for the direct kind)
//! ```
//!
//! so `x ⟂ y | z` holds for the null kind while `x` and `y` stay marginally
//! dependent. The pipeline fixture plants a property into one class logit of
//! an otherwise label-driven classifier.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Manifest, PropertyGroup, PropertyKind, PropertySpec};
use crate::error::{AuditError, Result};
use crate::outcome::CiTest;
use crate::seed;

pub const MIN_SCM_SAMPLES: usize = 50;
pub const PLANTED_PROPERTY: &str = "P_D";
pub const INDEPENDENT_PROPERTY: &str = "P_I";
/// Class names used by seven-class fixtures.
pub const EMOTIONS: [&str; 7] = ["angry", "disgusted", "fearful", "happy", "sad", "surprised", "neutral"];
const LABEL_LOGIT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScmKind {
    NullCommonCause,
    DirectDependence,
    PipelineFixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScmSpec {
    pub kind: ScmKind,
    pub n: usize,
    pub effect_size: f64,
    pub noise_std: f64,
    pub property_kind: PropertyKind,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ScmSpec {
    fn default() -> Self {
        Self {
            kind: ScmKind::NullCommonCause,
            n: 500,
            effect_size: 0.5,
            noise_std: 1.0,
            property_kind: PropertyKind::Scalar,
            classes: 7,
            seed: 0,
        }
    }
}

impl ScmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_SCM_SAMPLES {
            return Err(AuditError::Domain(format!(
                "n = {} is below the minimum of {MIN_SCM_SAMPLES}",
                self.n
            )));
        }
        if !(self.effect_size >= 0.0) || !self.effect_size.is_finite() {
            return Err(AuditError::Domain(format!("effect size must be non-negative, got {}", self.effect_size)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(AuditError::Domain(format!("noise std must be non-negative, got {}", self.noise_std)));
        }
        if self.kind == ScmKind::PipelineFixture && self.classes < 2 {
            return Err(AuditError::Domain("a pipeline fixture needs at least two classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthCell {
    pub property: String,
    pub class: String,
    pub dependent: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub cells: Vec<GroundTruthCell>,
}

impl GroundTruth {
    pub fn dependent(&self, property: &str, class: &str) -> Option<bool> {
        self.cells
            .iter()
            .find(|c| c.property == property && c.class == class)
            .map(|c| c.dependent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScmSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// n × 1 common cause.
    pub z: DMatrix<f64>,
    pub truth: GroundTruth,
}

fn normals(rng: &mut seed::SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

fn binarize(values: &[f64]) -> Vec<f64> {
    let m = median(values);
    values.iter().map(|&v| if v > m { 1.0 } else { 0.0 }).collect()
}

/// Draws `(x, y, z)` from the null or direct-dependence model.
pub fn generate_scm_dataset(spec: &ScmSpec) -> Result<ScmSample> {
    spec.validate()?;
    if spec.kind == ScmKind::PipelineFixture {
        return Err(AuditError::Domain(
            "pipeline fixtures are built by generate_pipeline_fixture".into(),
        ));
    }
    let n = spec.n;
    let mut rng = seed::rng(spec.seed);
    let z = normals(&mut rng, n);
    let ex = normals(&mut rng, n);
    let ey = normals(&mut rng, n);
    let raw_x: Vec<f64> = z.iter().zip(&ex).map(|(z, e)| z.tanh() + spec.noise_std * e).collect();
    let x = match spec.property_kind {
        PropertyKind::Scalar => raw_x,
        PropertyKind::Binary => binarize(&raw_x),
    };
    let direct = spec.kind == ScmKind::DirectDependence;
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let base = z[i] * z[i] / 2.0 + spec.noise_std * ey[i];
            if direct {
                base + spec.effect_size * x[i]
            } else {
                base
            }
        })
        .collect();
    let truth = GroundTruth {
        cells: vec![GroundTruthCell {
            property: "x".into(),
            class: "y".into(),
            dependent: direct && spec.effect_size > 0.0,
        }],
    };
    Ok(ScmSample {
        x,
        y,
        z: DMatrix::from_vec(n, 1, z),
        truth,
    })
}

/// Class names for a fixture with `classes` classes.
pub fn fixture_class_names(classes: usize) -> Vec<String> {
    if classes == EMOTIONS.len() {
        EMOTIONS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..classes).map(|c| format!("class_{c}")).collect()
    }
}

/// The class whose logit the planted property drives (`happy` for seven classes).
pub fn planted_class(classes: usize) -> usize {
    classes / 2
}

pub fn fixture_manifest(spec: &ScmSpec) -> Manifest {
    let property = |name: &str, abbreviation: &str| PropertySpec {
        name: name.into(),
        abbreviation: abbreviation.into(),
        group: PropertyGroup::Custom,
        kind: spec.property_kind,
        column: name.into(),
    };
    Manifest {
        classes: fixture_class_names(spec.classes),
        label_column: "label".into(),
        logit_prefix: "logit_".into(),
        properties: vec![
            property("planted", PLANTED_PROPERTY),
            property("independent", INDEPENDENT_PROPERTY),
        ],
    }
}

/// A full audit input: balanced labels, label-driven logits, one planted and
/// one independent property.
pub fn generate_pipeline_fixture(spec: &ScmSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let (n, classes) = (spec.n, spec.classes);
    let mut rng = seed::rng(spec.seed);
    let draw = |rng: &mut seed::SeededRng| -> Vec<f64> {
        match spec.property_kind {
            PropertyKind::Scalar => normals(rng, n),
            PropertyKind::Binary => (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect(),
        }
    };
    let planted = draw(&mut rng);
    let independent = draw(&mut rng);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let target = planted_class(classes);
    let logits: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let noise = normals(&mut rng, n);
            (0..n)
                .map(|i| {
                    let mut v = spec.noise_std * noise[i];
                    if labels[i] == c {
                        v += LABEL_LOGIT;
                    }
                    if c == target {
                        let f = match spec.property_kind {
                            PropertyKind::Scalar => planted[i],
                            PropertyKind::Binary => 2.0 * planted[i] - 1.0,
                        };
                        v += spec.effect_size * f;
                    }
                    v
                })
                .collect()
        })
        .collect();
    let manifest = fixture_manifest(spec);
    let class_names = manifest.classes.clone();
    let sample_ids = (0..n).map(|i| format!("s{i:05}")).collect();
    let dataset = Dataset::new(manifest, sample_ids, labels, logits, vec![planted, independent])?;
    let mut cells = Vec::new();
    for property in [PLANTED_PROPERTY, INDEPENDENT_PROPERTY] {
        for (c, class) in class_names.iter().enumerate() {
            cells.push(GroundTruthCell {
                property: property.into(),
                class: class.clone(),
                dependent: property == PLANTED_PROPERTY && c == target && spec.effect_size > 0.0,
            });
        }
    }
    Ok((dataset, GroundTruth { cells }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCalibration {
    pub test: String,
    pub trials: usize,
    pub completed: usize,
    pub rejections: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub failures: Vec<TrialFailure>,
    /// Per-trial p-values in trial order; failed trials are absent.
    pub p_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub spec: ScmSpec,
    pub trials: usize,
    pub alpha: f64,
    pub results: Vec<TestCalibration>,
}

/// Seed of the data drawn for `trial`.
pub fn trial_seed(spec_seed: u64, trial: usize) -> u64 {
    seed::derive(spec_seed, trial as u64)
}

/// Rejection rates of each test over independently seeded trials.
pub fn calibration_run(tests: &[&dyn CiTest], spec: &ScmSpec, trials: usize, alpha: f64) -> Result<CalibrationReport> {
    spec.validate()?;
    if trials == 0 {
        return Err(AuditError::Domain("at least one trial required".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AuditError::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let outcomes: Vec<Vec<std::result::Result<f64, String>>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let data_seed = trial_seed(spec.seed, trial);
            let sample = generate_scm_dataset(&ScmSpec {
                seed: data_seed,
                ..spec.clone()
            });
            tests
                .iter()
                .map(|test| {
                    let sample = sample.as_ref().map_err(|e| e.to_string())?;
                    test.run(&sample.x, &sample.y, &sample.z, seed::derive(data_seed, seed::hash_str(test.name())))
                        .map(|o| o.p_value)
                        .map_err(|e| e.to_string())
                })
                .collect()
        })
        .collect();

    let results = tests
        .iter()
        .enumerate()
        .map(|(t, test)| {
            let mut p_values = Vec::new();
            let mut failures = Vec::new();
            for (trial, row) in outcomes.iter().enumerate() {
                match &row[t] {
                    Ok(p) => p_values.push(*p),
                    Err(reason) => failures.push(TrialFailure {
                        trial,
                        reason: reason.clone(),
                    }),
                }
            }
            let completed = p_values.len();
            let rejections = p_values.iter().filter(|&&p| p < alpha).count();
            let (rate, ci_low, ci_high) = binomial_interval(rejections, completed);
            TestCalibration {
                test: test.name().to_string(),
                trials,
                completed,
                rejections,
                rate,
                ci_low,
                ci_high,
                failures,
                p_values,
            }
        })
        .collect();
    Ok(CalibrationReport {
        spec: spec.clone(),
        trials,
        alpha,
        results,
    })
}

/// Rate and 95% normal-approximation interval, clamped to [0, 1].
pub fn binomial_interval(successes: usize, total: usize) -> (f64, f64, f64) {
    if total == 0 {
        return (f64::NAN, 0.0, 1.0);
    }
    let rate = successes as f64 / total as f64;
    let half = 1.96 * (rate * (1.0 - rate) / total as f64).sqrt();
    (rate, (rate - half).max(0.0), (rate + half).min(1.0))
}

/// One-sample Kolmogorov–Smirnov test against U(0, 1): `(D, p)`.
pub fn ks_uniform(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = v.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let x = x.clamp(0.0, 1.0);
        d.max((i + 1) as f64 / nf - x).max(x - i as f64 / nf)
    });
    let sqrt_n = nf.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    (d, kolmogorov_tail(lambda))
}

fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
