//! Randomized conditional correlation test (RCoT).
//!
//! Each variable is lifted into random Fourier features approximating a
//! squared-exponential kernel. The `x` and `y` features are ridge-residualized
//! on the `z` features and the test statistic is the scaled squared Frobenius
//! norm of their empirical cross-covariance. Its null is a weighted sum of
//! χ²₁ variables, approximated by a moment-matched gamma.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::dataset::{standardize, DEFAULT_MIN_STRATUM};
use crate::error::{AuditError, Result};
use crate::kernel::{capped_bandwidth, permutation_pvalue, to_points};
use crate::outcome::{check_inputs, CiTest, TestId, TestOutcome};
use crate::seed;

/// Below this sample size the permutation null replaces the gamma tail.
pub const HBE_MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct FourierFeatureMap {
    /// n × D feature matrix.
    pub features: DMatrix<f64>,
    /// D × d standard-normal frequencies.
    pub frequencies: DMatrix<f64>,
    pub phases: Vec<f64>,
    pub bandwidth: f64,
    pub seed: u64,
}

impl FourierFeatureMap {
    /// Evaluates `√(2/D)·cos(w_j·x_i/bandwidth + b_j)` for given frequencies and phases.
    pub fn from_parts(
        points: &DMatrix<f64>,
        frequencies: DMatrix<f64>,
        phases: Vec<f64>,
        bandwidth: f64,
        seed: u64,
    ) -> Result<Self> {
        let d_features = frequencies.nrows();
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(AuditError::Domain(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if d_features == 0 {
            return Err(AuditError::Domain("at least one feature required".into()));
        }
        if frequencies.ncols() != points.ncols() || phases.len() != d_features {
            return Err(AuditError::Domain("frequency shape does not match the input".into()));
        }
        let scale = (2.0 / d_features as f64).sqrt();
        let proj = points * frequencies.transpose() / bandwidth;
        let features = DMatrix::from_fn(points.nrows(), d_features, |i, j| scale * (proj[(i, j)] + phases[j]).cos());
        Ok(Self {
            features,
            frequencies,
            phases,
            bandwidth,
            seed,
        })
    }
}

pub fn random_fourier_features(
    points: &DMatrix<f64>,
    bandwidth: f64,
    num_features: usize,
    seed: u64,
) -> Result<FourierFeatureMap> {
    if num_features == 0 {
        return Err(AuditError::Domain("at least one feature required".into()));
    }
    let mut rng = seed::rng(seed);
    let d = points.ncols();
    let frequencies = DMatrix::from_row_iterator(
        num_features,
        d,
        (0..num_features * d).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    let phases = (0..num_features)
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();
    FourierFeatureMap::from_parts(points, frequencies, phases, bandwidth, seed)
}

fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let n = m.nrows().max(1) as f64;
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

/// `F_t − F_c·β̂` on column-centered inputs, `β̂ = (F_cᵀF_c + ridge·I)⁻¹F_cᵀF_t`.
pub fn residualize(target: &DMatrix<f64>, cond: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if target.nrows() != cond.nrows() {
        return Err(AuditError::Domain(format!(
            "row count mismatch: {} vs {}",
            target.nrows(),
            cond.nrows()
        )));
    }
    if !(ridge > 0.0) {
        return Err(AuditError::Domain(format!("ridge must be positive, got {ridge}")));
    }
    let t = center_columns(target);
    if cond.ncols() == 0 {
        return Ok(t);
    }
    let c = center_columns(cond);
    let gram = c.tr_mul(&c) + DMatrix::identity(c.ncols(), c.ncols()) * ridge;
    let chol = gram.cholesky().ok_or_else(|| {
        AuditError::Numerical(format!("ridge system not positive definite at ridge {ridge}; use a larger ridge"))
    })?;
    let beta = chol.solve(&c.tr_mul(&t));
    Ok(t - c * beta)
}

/// `n·‖(1/n)·R_xᵀR_y‖²_F`.
pub fn rcot_statistic(rx: &DMatrix<f64>, ry: &DMatrix<f64>) -> Result<f64> {
    if rx.nrows() != ry.nrows() {
        return Err(AuditError::Domain(format!(
            "row count mismatch: {} vs {}",
            rx.nrows(),
            ry.nrows()
        )));
    }
    let n = rx.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let c = rx.tr_mul(ry);
    Ok(c.norm_squared() / n as f64)
}

/// Upper tail of `Σ wᵢ·χ²₁` by a gamma matching its mean and variance.
pub fn hbe_pvalue(weights: &[f64], statistic: f64) -> Result<f64> {
    let positive: Vec<f64> = weights.iter().copied().filter(|&w| w > 0.0).collect();
    if positive.is_empty() {
        return Err(AuditError::Domain("no positive weight".into()));
    }
    if statistic <= 0.0 {
        return Ok(1.0);
    }
    let sum: f64 = positive.iter().sum();
    let sum_sq: f64 = positive.iter().map(|w| w * w).sum();
    let shape = sum * sum / (2.0 * sum_sq);
    let rate = sum / (2.0 * sum_sq);
    let gamma = Gamma::new(shape, rate).map_err(|e| AuditError::Numerical(e.to_string()))?;
    Ok(gamma.sf(statistic).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NullMethod {
    Hbe,
    Permutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RcotConfig {
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub ridge: f64,
    pub null_method: NullMethod,
    pub permutations: usize,
    pub seed: u64,
    pub min_samples: usize,
}

impl Default for RcotConfig {
    fn default() -> Self {
        Self {
            d_x: 5,
            d_y: 5,
            d_z: 25,
            ridge: 1e-5,
            null_method: NullMethod::Hbe,
            permutations: 500,
            seed: 0,
            min_samples: DEFAULT_MIN_STRATUM,
        }
    }
}

impl RcotConfig {
    fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_y == 0 || self.d_z == 0 {
            return Err(AuditError::Domain("feature counts must be at least 1".into()));
        }
        if !(self.ridge > 0.0) {
            return Err(AuditError::Domain(format!("ridge must be positive, got {}", self.ridge)));
        }
        Ok(())
    }
}

fn standardized_matrix(columns: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = columns.first().map_or(0, Vec::len);
    let std: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| standardize(c).map(|s| s.values))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, std.len(), |i, j| std[j][i]))
}

fn features(points: &DMatrix<f64>, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    // Identical points give constant features whatever the bandwidth.
    let bandwidth = capped_bandwidth(&to_points(points)).unwrap_or(1.0);
    Ok(random_fourier_features(points, bandwidth, count, seed)?.features)
}

/// Eigenvalues of the covariance of per-sample residual cross-products.
fn null_weights(rx: &DMatrix<f64>, ry: &DMatrix<f64>) -> Vec<f64> {
    let (n, d1, d2) = (rx.nrows(), rx.ncols(), ry.ncols());
    let p = DMatrix::from_fn(n, d1 * d2, |i, c| rx[(i, c / d2)] * ry[(i, c % d2)]);
    let p = center_columns(&p);
    let cov = p.tr_mul(&p) / n as f64;
    cov.symmetric_eigenvalues().iter().copied().collect()
}

pub fn rcot_test(x: &[f64], y: &[f64], z: &DMatrix<f64>, config: &RcotConfig) -> Result<TestOutcome> {
    check_inputs(x, y, z, config.min_samples)?;
    config.validate()?;
    let n = x.len();
    let xs = standardized_matrix(&[x.to_vec()])?;
    let ys = standardized_matrix(&[y.to_vec()])?;
    let zcols: Vec<Vec<f64>> = z.column_iter().map(|c| c.iter().copied().collect()).collect();
    let zs = if zcols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        standardized_matrix(&zcols)?
    };

    let fx = features(&xs, config.d_x, seed::derive(config.seed, 1))?;
    let fy = features(&ys, config.d_y, seed::derive(config.seed, 2))?;
    let fz = if z.ncols() == 0 {
        DMatrix::zeros(n, 0)
    } else {
        features(&zs, config.d_z, seed::derive(config.seed, 3))?
    };
    let rx = residualize(&fx, &fz, config.ridge)?;
    let ry = residualize(&fy, &fz, config.ridge)?;
    let statistic = rcot_statistic(&rx, &ry)?;

    let use_permutation = config.null_method == NullMethod::Permutation || n < HBE_MIN_SAMPLES;
    let p_value = if use_permutation {
        if config.permutations == 0 {
            return Err(AuditError::Domain("at least one permutation required".into()));
        }
        let base = seed::derive(config.seed, 4);
        let surrogates = (0..config.permutations)
            .into_par_iter()
            .map(|b| {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut seed::rng(seed::derive(base, b as u64)));
                let rxp = DMatrix::from_fn(n, rx.ncols(), |i, j| rx[(perm[i], j)]);
                rcot_statistic(&rxp, &ry)
            })
            .collect::<Result<Vec<f64>>>()?;
        permutation_pvalue(statistic, &surrogates)?
    } else {
        let weights = null_weights(&rx, &ry);
        if statistic <= 0.0 || weights.iter().all(|&w| w <= 0.0) {
            1.0
        } else {
            hbe_pvalue(&weights, statistic)?
        }
    };

    Ok(TestOutcome {
        test_id: TestId::Rcot,
        statistic,
        p_value,
        n_used: n,
        seed: config.seed,
        config_echo: format!(
            "d_x={} d_y={} d_z={} ridge={} null={} dz={}",
            config.d_x,
            config.d_y,
            config.d_z,
            config.ridge,
            if use_permutation { "permutation" } else { "hbe" },
            z.ncols()
        ),
    })
}

impl CiTest for RcotConfig {
    fn name(&self) -> &str {
        "rcot"
    }

    fn run(&self, x: &[f64], y: &[f64], z: &DMatrix<f64>, seed: u64) -> Result<TestOutcome> {
        rcot_test(x, y, z, &RcotConfig { seed, ..self.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::rbf_gram;
    use statrs::distribution::ChiSquared;

    fn normals(n: usize, s: u64) -> Vec<f64> {
        let mut rng = seed::rng(s);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn zero_frequency_gives_constant_features() {
        let pts = DMatrix::from_column_slice(4, 1, &[0.3, -1.0, 2.0, 5.0]);
        let map = FourierFeatureMap::from_parts(&pts, DMatrix::zeros(1, 1), vec![0.0], 1.0, 0).unwrap();
        for v in map.features.iter() {
            assert!((v - 2f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn features_deterministic_and_bounded() {
        let pts = DMatrix::from_column_slice(50, 1, &normals(50, 1));
        let a = random_fourier_features(&pts, 0.7, 20, 9).unwrap();
        assert_eq!(a, random_fourier_features(&pts, 0.7, 20, 9).unwrap());
        let bound = (2.0f64 / 20.0).sqrt();
        assert!(a.features.iter().all(|v| v.abs() <= bound + 1e-15));
        assert!(matches!(
            random_fourier_features(&pts, 0.0, 20, 9),
            Err(AuditError::Domain(_))
        ));
        assert!(random_fourier_features(&pts, 1.0, 0, 9).is_err());
    }

    #[test]
    fn features_approximate_gram() {
        let n = 200;
        let pts = DMatrix::from_column_slice(n, 1, &normals(n, 2));
        let exact = rbf_gram(&pts, 1.0).unwrap().entries;
        let map = random_fourier_features(&pts, 1.0, 400, 3).unwrap();
        let approx = &map.features * map.features.transpose();
        let mae = (approx - exact).abs().mean();
        assert!(mae <= 0.05, "mae {mae}");
    }

    #[test]
    fn residualize_empty_condition_centers() {
        let t = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let r = residualize(&t, &DMatrix::zeros(3, 0), 1e-5).unwrap();
        assert_eq!(r, DMatrix::from_row_slice(3, 2, &[-2.0, -3.0, 0.0, -1.0, 2.0, 4.0]));
    }

    #[test]
    fn residualize_exact_fit() {
        let n = 100;
        let c = DMatrix::from_fn(n, 3, |i, j| ((i * (j + 2)) as f64 * 0.37).sin());
        let t = &c * DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 3.0, 2.0, 0.0]);
        let r = residualize(&t, &c, 1e-8).unwrap();
        assert!(r.norm() <= 1e-6 * t.norm());
    }

    #[test]
    fn residuals_orthogonal_to_condition() {
        let n = 80;
        let ridge = 1e-3;
        let c = center_columns(&DMatrix::from_fn(n, 4, |i, j| ((i + 3 * j) as f64).cos()));
        let t = center_columns(&DMatrix::from_fn(n, 2, |i, j| ((i * i + j) as f64 * 0.1).sin()));
        let beta = (c.tr_mul(&c) + DMatrix::identity(4, 4) * ridge)
            .cholesky()
            .unwrap()
            .solve(&c.tr_mul(&t));
        let r = residualize(&t, &c, ridge).unwrap();
        assert!(c.tr_mul(&r).norm() <= ridge * beta.norm() * (1.0 + 1e-8));
    }

    #[test]
    fn statistic_cases() {
        let rx = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, -2.0]);
        let ry = DMatrix::from_row_slice(3, 1, &[0.2, -0.4, 1.5]);
        assert_eq!(rcot_statistic(&rx, &DMatrix::zeros(3, 1)).unwrap(), 0.0);
        let mut hand = 0.0;
        for a in 0..2 {
            let mut c = 0.0;
            for i in 0..3 {
                c += rx[(i, a)] * ry[(i, 0)] / 3.0;
            }
            hand += c * c;
        }
        assert!((rcot_statistic(&rx, &ry).unwrap() - 3.0 * hand).abs() < 1e-12);
        let perm = [2, 0, 1];
        let px = DMatrix::from_fn(3, 2, |i, j| rx[(perm[i], j)]);
        let py = DMatrix::from_fn(3, 1, |i, j| ry[(perm[i], j)]);
        assert!((rcot_statistic(&px, &py).unwrap() - rcot_statistic(&rx, &ry).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn hbe_reductions() {
        let chi1 = ChiSquared::new(1.0).unwrap();
        for (w, s) in [(2.0, 1.0), (0.5, 3.0), (1.0, 0.1)] {
            assert!((hbe_pvalue(&[w], s).unwrap() - chi1.sf(s / w)).abs() < 1e-6);
        }
        for d in [1usize, 3, 10, 25] {
            let chi = ChiSquared::new(d as f64).unwrap();
            let w = vec![1.0; d];
            for s in [d as f64 / 2.0, d as f64, 2.0 * d as f64] {
                assert!((hbe_pvalue(&w, s).unwrap() - chi.sf(s)).abs() < 2e-2);
            }
        }
        assert_eq!(hbe_pvalue(&[1.0, 2.0], 0.0).unwrap(), 1.0);
        assert!(matches!(hbe_pvalue(&[0.0, -1.0], 1.0), Err(AuditError::Domain(_))));
        let w = [0.3, 1.2, 0.05];
        let mut last = 1.0;
        for s in 0..50 {
            let p = hbe_pvalue(&w, s as f64 * 0.2).unwrap();
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn affine_rescaling_keeps_p_value() {
        let n = 300;
        let z = normals(n, 4);
        let x: Vec<f64> = z.iter().zip(normals(n, 5)).map(|(z, e)| z.tanh() + e).collect();
        let y: Vec<f64> = z.iter().zip(normals(n, 6)).map(|(z, e)| z * z / 2.0 + e).collect();
        let shifted: Vec<f64> = x.iter().map(|v| 3.0 * v + 7.0).collect();
        let zm = DMatrix::from_column_slice(n, 1, &z);
        let cfg = RcotConfig::default();
        let a = rcot_test(&x, &y, &zm, &cfg).unwrap();
        let b = rcot_test(&shifted, &y, &zm, &cfg).unwrap();
        assert!((a.p_value - b.p_value).abs() <= 1e-12);
    }

    #[test]
    fn detects_dependence_and_is_deterministic() {
        let n = 300;
        let x = normals(n, 7);
        let y: Vec<f64> = x.iter().zip(normals(n, 8)).map(|(x, e)| x + 0.5 * e).collect();
        let cfg = RcotConfig {
            seed: 11,
            ..Default::default()
        };
        let z = DMatrix::zeros(n, 0);
        let out = rcot_test(&x, &y, &z, &cfg).unwrap();
        assert!(out.p_value < 1e-4);
        assert_eq!(out, rcot_test(&x, &y, &z, &cfg).unwrap());
        let small = rcot_test(&x[..60], &y[..60], &DMatrix::zeros(60, 0), &cfg).unwrap();
        assert!(small.config_echo.contains("null=permutation"));
        assert!(small.p_value < 0.01);
    }

    #[test]
    fn constant_input_is_not_significant() {
        let n = 150;
        let x = vec![2.0; n];
        let y = normals(n, 9);
        let out = rcot_test(&x, &y, &DMatrix::zeros(n, 0), &RcotConfig::default()).unwrap();
        assert_eq!(out.p_value, 1.0);
    }
}
