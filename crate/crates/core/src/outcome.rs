use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// The committee members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestId {
    Chsic,
    Rcot,
    Cmiknn,
}

impl TestId {
    pub const ALL: [TestId; 3] = [TestId::Chsic, TestId::Rcot, TestId::Cmiknn];

    pub fn as_str(self) -> &'static str {
        match self {
            TestId::Chsic => "chsic",
            TestId::Rcot => "rcot",
            TestId::Cmiknn => "cmiknn",
        }
    }
}

impl fmt::Display for TestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestId {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chsic" => Ok(TestId::Chsic),
            "rcot" => Ok(TestId::Rcot),
            "cmiknn" => Ok(TestId::Cmiknn),
            other => Err(AuditError::Schema(format!("unknown test `{other}`"))),
        }
    }
}

/// Result of one conditional-independence test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test_id: TestId,
    pub statistic: f64,
    pub p_value: f64,
    pub n_used: usize,
    pub seed: u64,
    pub config_echo: String,
}

/// A conditional-independence test of `x` and `y` given the columns of `z`.
///
/// `z` may have zero columns, in which case the test is unconditional.
pub trait CiTest: Send + Sync {
    fn name(&self) -> &str;

    fn run(&self, x: &[f64], y: &[f64], z: &DMatrix<f64>, seed: u64) -> Result<TestOutcome>;
}

pub(crate) fn check_inputs(x: &[f64], y: &[f64], z: &DMatrix<f64>, min_samples: usize) -> Result<()> {
    if x.len() != y.len() || z.nrows() != x.len() {
        return Err(AuditError::Domain(format!(
            "input lengths differ: x={}, y={}, z={}",
            x.len(),
            y.len(),
            z.nrows()
        )));
    }
    if x.len() < min_samples {
        return Err(AuditError::InsufficientData(format!(
            "{} samples, minimum is {min_samples}",
            x.len()
        )));
    }
    Ok(())
}
