//! Squared-exponential kernel machinery and the conditional HSIC test.
//!
//! The conditional statistic uses regularized centered Gram operators
//! `R_A = G_A (G_A + n·ε·I)^{-1}` on the extended variables `(x, z)` and
//! `(y, z)`:
//!
//! ```text
//! T = Tr[R_xz R_yz − 2 R_xz R_yz R_z + R_xz R_z R_yz R_z]
//!   = Tr[R_xz (I − R_z) R_yz (I − R_z)]
//! ```
//!
//! [`chsic_statistic`] evaluates the second form through pivoted incomplete
//! Cholesky factors, so a surrogate costs O(n·r²) instead of a dense O(n³)
//! solve. [`chsic_statistic_exact`] evaluates the first form densely and is
//! kept as the reference route.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmiknn::LocalPermuter;
use crate::dataset::DEFAULT_MIN_STRATUM;
use crate::error::{AuditError, Result};
use crate::neighbors::Points;
use crate::outcome::{check_inputs, CiTest, TestId, TestOutcome};
use crate::seed;

/// Rows used by the internal median heuristic; larger inputs use a prefix.
pub const MEDIAN_SAMPLE_CAP: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    pub bandwidth: f64,
}

impl GramMatrix {
    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

pub(crate) fn to_points(m: &DMatrix<f64>) -> Points {
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        data.extend(m.row(i).iter());
    }
    Points::new(data, m.ncols())
}

/// Concatenates a leading column with the columns of `rest`.
pub(crate) fn prepend_column(first: &[f64], rest: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(first.len(), rest.ncols() + 1, |i, j| {
        if j == 0 {
            first[i]
        } else {
            rest[(i, j - 1)]
        }
    })
}

#[cfg(test)]
pub(crate) fn column_matrix(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(values.len(), 1, values)
}

fn median_of_pairwise(points: &Points, positive_only: bool) -> Option<f64> {
    let n = points.len();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(points.row(i), points.row(j)).sqrt();
            if !positive_only || v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return None;
    }
    let m = d.len();
    let (_, upper, _) = d.select_nth_unstable_by(m / 2, f64::total_cmp);
    let upper = *upper;
    if m % 2 == 1 {
        return Some(upper);
    }
    let lower = d[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(0.5 * (lower + upper))
}

/// Median of all pairwise Euclidean distances between distinct points.
///
/// When more than half of the pairs coincide (heavily tied binary data) the
/// median of the non-zero distances is used instead.
pub fn median_heuristic_bandwidth(points: &DMatrix<f64>) -> Result<f64> {
    if points.nrows() < 2 {
        return Err(AuditError::Degenerate(
            "median heuristic needs at least two points".into(),
        ));
    }
    bandwidth_of(&to_points(points))
        .ok_or_else(|| AuditError::Degenerate("all points are identical".into()))
}

fn bandwidth_of(points: &Points) -> Option<f64> {
    let m = median_of_pairwise(points, false)?;
    if m > 0.0 {
        return Some(m);
    }
    median_of_pairwise(points, true)
}

/// Median heuristic over at most [`MEDIAN_SAMPLE_CAP`] leading rows.
pub(crate) fn capped_bandwidth(points: &Points) -> Option<f64> {
    if points.len() <= MEDIAN_SAMPLE_CAP {
        return bandwidth_of(points);
    }
    let head = Points::new(
        (0..MEDIAN_SAMPLE_CAP).flat_map(|i| points.row(i).to_vec()).collect(),
        points.dim(),
    );
    bandwidth_of(&head).or_else(|| bandwidth_of(points))
}

/// Squared-exponential Gram matrix `exp(−‖a−b‖² / (2·bandwidth²))`.
pub fn rbf_gram(points: &DMatrix<f64>, bandwidth: f64) -> Result<GramMatrix> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(AuditError::Domain(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let pts = to_points(points);
    let n = pts.len().max(points.nrows());
    let scale = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut k = DMatrix::from_element(n, n, 1.0);
    if pts.dim() > 0 {
        for i in 0..n {
            for j in i + 1..n {
                let v = (-sq_dist(pts.row(i), pts.row(j)) * scale).exp();
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
    }
    Ok(GramMatrix {
        entries: k,
        bandwidth,
    })
}

/// `H K H` with `H = I − 11ᵀ/n`.
pub fn center_gram(k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / nf).collect();
    let col_means: Vec<f64> = (0..n).map(|j| k.column(j).sum() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    DMatrix::from_fn(n, n, |i, j| k[(i, j)] - row_means[i] - col_means[j] + grand)
}

/// Biased HSIC estimate `(1/n²)·Tr(K̃x K̃y)`.
pub fn hsic_statistic(kx: &GramMatrix, ky: &GramMatrix) -> Result<f64> {
    if kx.entries.shape() != ky.entries.shape() || kx.entries.nrows() != kx.entries.ncols() {
        return Err(AuditError::Domain(format!(
            "Gram shapes differ: {:?} vs {:?}",
            kx.entries.shape(),
            ky.entries.shape()
        )));
    }
    let n = kx.len() as f64;
    if n == 0.0 {
        return Ok(0.0);
    }
    let cx = center_gram(&kx.entries);
    let cy = center_gram(&ky.entries);
    // Tr(AB) = Σ A∘B for symmetric B.
    Ok(cx.component_mul(&cy).sum() / (n * n))
}

/// Pivoted incomplete Cholesky of the squared-exponential Gram: K ≈ L Lᵀ.
/// Stops once every residual diagonal entry is at most `tolerance`.
pub fn pivoted_cholesky(points: &Points, bandwidth: f64, tolerance: f64) -> DMatrix<f64> {
    let n = points.len();
    let scale = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut residual = vec![1.0f64; n];
    let mut columns: Vec<Vec<f64>> = Vec::new();
    while columns.len() < n {
        let (pivot, &best) = residual
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty residual");
        if best <= tolerance {
            break;
        }
        let root = best.sqrt();
        let p_row = points.row(pivot);
        let mut col: Vec<f64> = (0..n)
            .map(|i| (-sq_dist(points.row(i), p_row) * scale).exp())
            .collect();
        for prev in &columns {
            let a = prev[pivot];
            if a != 0.0 {
                for (c, &p) in col.iter_mut().zip(prev) {
                    *c -= a * p;
                }
            }
        }
        for (i, c) in col.iter_mut().enumerate() {
            *c /= root;
            residual[i] -= *c * *c;
        }
        residual[pivot] = 0.0;
        columns.push(col);
    }
    let r = columns.len();
    DMatrix::from_fn(n, r, |i, j| columns[j][i])
}

/// Factor `U` with `U Uᵀ = G (G + λI)^{-1}` for the centered Gram `G`.
fn regularized_factor(points: &Points, bandwidth: Option<f64>, lambda: f64, tol: f64) -> Result<DMatrix<f64>> {
    let n = points.len();
    let Some(bw) = bandwidth else {
        // Identical points: the centered Gram vanishes.
        return Ok(DMatrix::zeros(n, 0));
    };
    let mut l = pivoted_cholesky(points, bw, tol);
    for mut col in l.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let mut a = l.tr_mul(&l);
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let chol = a.cholesky().ok_or_else(|| {
        AuditError::Numerical("regularized Gram solve failed; increase epsilon".into())
    })?;
    let ut = chol
        .l()
        .solve_lower_triangular(&l.transpose())
        .ok_or_else(|| AuditError::Numerical("triangular solve failed; increase epsilon".into()))?;
    Ok(ut.transpose())
}

/// Precomputed conditioning side of the conditional HSIC statistic.
struct ChsicFactors {
    /// `(I − R_z) U_yz`, so that the statistic is `‖U_xzᵀ W‖²_F`.
    w: DMatrix<f64>,
    bandwidth_xz: Option<f64>,
    lambda: f64,
    tolerance: f64,
}

impl ChsicFactors {
    fn new(y: &[f64], z: &DMatrix<f64>, xz_bandwidth_source: &Points, epsilon: f64, tolerance: f64) -> Result<Self> {
        let n = y.len();
        let lambda = n as f64 * epsilon;
        let yz = to_points(&prepend_column(y, z));
        let u_yz = regularized_factor(&yz, capped_bandwidth(&yz), lambda, tolerance)?;
        let w = if z.ncols() == 0 {
            u_yz
        } else {
            let zp = to_points(z);
            let u_z = regularized_factor(&zp, capped_bandwidth(&zp), lambda, tolerance)?;
            let proj = u_z.tr_mul(&u_yz);
            &u_yz - &u_z * proj
        };
        Ok(Self {
            w,
            bandwidth_xz: capped_bandwidth(xz_bandwidth_source),
            lambda,
            tolerance,
        })
    }

    fn x_factor(&self, xz: &Points) -> Result<DMatrix<f64>> {
        regularized_factor(xz, self.bandwidth_xz, self.lambda, self.tolerance)
    }

    fn statistic_from(&self, u_xz: &DMatrix<f64>) -> f64 {
        if u_xz.ncols() == 0 || self.w.ncols() == 0 {
            return 0.0;
        }
        u_xz.tr_mul(&self.w).norm_squared()
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-9;
/// Looser factorization used inside the permutation test.
pub const TEST_RANK_TOLERANCE: f64 = 1e-6;

/// Conditional HSIC statistic via low-rank factors.
///
/// Bandwidths come from the median heuristic on each extended variable.
pub fn chsic_statistic(x: &[f64], y: &[f64], z: &DMatrix<f64>, epsilon: f64) -> Result<f64> {
    chsic_statistic_with_tolerance(x, y, z, epsilon, DEFAULT_RANK_TOLERANCE)
}

pub fn chsic_statistic_with_tolerance(
    x: &[f64],
    y: &[f64],
    z: &DMatrix<f64>,
    epsilon: f64,
    tolerance: f64,
) -> Result<f64> {
    check_inputs(x, y, z, 1)?;
    check_epsilon(epsilon)?;
    let xz = to_points(&prepend_column(x, z));
    let factors = ChsicFactors::new(y, z, &xz, epsilon, tolerance)?;
    Ok(factors.statistic_from(&factors.x_factor(&xz)?))
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(AuditError::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

/// Dense evaluation of the conditional HSIC trace formula.
pub fn chsic_statistic_exact(x: &[f64], y: &[f64], z: &DMatrix<f64>, epsilon: f64) -> Result<f64> {
    check_inputs(x, y, z, 1)?;
    check_epsilon(epsilon)?;
    let n = x.len();
    let lambda = n as f64 * epsilon;
    let regularized = |pts: DMatrix<f64>| -> Result<DMatrix<f64>> {
        let Some(bw) = capped_bandwidth(&to_points(&pts)) else {
            return Ok(DMatrix::zeros(n, n));
        };
        let g = center_gram(&rbf_gram(&pts, bw)?.entries);
        let mut shifted = g.clone();
        for i in 0..n {
            shifted[(i, i)] += lambda;
        }
        let chol = shifted.cholesky().ok_or_else(|| {
            AuditError::Numerical("regularized Gram solve failed; increase epsilon".into())
        })?;
        // G and (G + λI)^{-1} commute.
        Ok(chol.solve(&g))
    };
    let r_xz = regularized(prepend_column(x, z))?;
    let r_yz = regularized(prepend_column(y, z))?;
    if z.ncols() == 0 {
        return Ok((&r_xz * &r_yz).trace());
    }
    let r_z = regularized(z.clone())?;
    let xy = &r_xz * &r_yz;
    let xyz = &xy * &r_z;
    let xzyz = &r_xz * &r_z * &r_yz * &r_z;
    Ok(xy.trace() - 2.0 * xyz.trace() + xzyz.trace())
}

/// `(1 + #{surrogate ≥ observed}) / (B + 1)`.
pub fn permutation_pvalue(observed: f64, surrogates: &[f64]) -> Result<f64> {
    if surrogates.is_empty() {
        return Err(AuditError::Domain("no surrogate statistics".into()));
    }
    let exceed = surrogates.iter().filter(|&&s| s >= observed).count();
    Ok((1 + exceed) as f64 / (surrogates.len() + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChsicConfig {
    pub epsilon: f64,
    pub permutations: usize,
    pub k_perm: usize,
    pub seed: u64,
    pub min_samples: usize,
    pub rank_tolerance: f64,
}

impl Default for ChsicConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            permutations: 500,
            k_perm: 5,
            seed: 0,
            min_samples: DEFAULT_MIN_STRATUM,
            rank_tolerance: TEST_RANK_TOLERANCE,
        }
    }
}

/// Conditional HSIC test with a local-permutation null.
///
/// Surrogates recompute the statistic after permuting `x` within
/// `z`-neighborhoods (uniformly when `z` is empty). Bandwidths stay fixed at
/// their values on the observed data.
pub fn chsic_test(x: &[f64], y: &[f64], z: &DMatrix<f64>, config: &ChsicConfig) -> Result<TestOutcome> {
    check_inputs(x, y, z, config.min_samples)?;
    check_epsilon(config.epsilon)?;
    if config.permutations == 0 {
        return Err(AuditError::Domain("at least one permutation required".into()));
    }
    let n = x.len();
    let xz = to_points(&prepend_column(x, z));
    let factors = ChsicFactors::new(y, z, &xz, config.epsilon, config.rank_tolerance)?;
    let u_xz = factors.x_factor(&xz)?;
    let observed = factors.statistic_from(&u_xz);
    let permuter = LocalPermuter::new(z, config.k_perm, seed::derive(config.seed, u64::MAX))?;

    let surrogates = (0..config.permutations)
        .into_par_iter()
        .map(|b| -> Result<f64> {
            let perm = permuter.draw(seed::derive(config.seed, b as u64));
            if z.ncols() == 0 {
                // R for permuted x is P R Pᵀ: permute factor rows.
                let permuted = DMatrix::from_fn(n, u_xz.ncols(), |i, j| u_xz[(perm[i], j)]);
                return Ok(factors.statistic_from(&permuted));
            }
            let x_perm: Vec<f64> = perm.iter().map(|&j| x[j]).collect();
            let xz_perm = to_points(&prepend_column(&x_perm, z));
            Ok(factors.statistic_from(&factors.x_factor(&xz_perm)?))
        })
        .collect::<Result<Vec<f64>>>()?;

    Ok(TestOutcome {
        test_id: TestId::Chsic,
        statistic: observed,
        p_value: permutation_pvalue(observed, &surrogates)?,
        n_used: n,
        seed: config.seed,
        config_echo: format!(
            "epsilon={} permutations={} k_perm={} dz={}",
            config.epsilon,
            config.permutations,
            config.k_perm,
            z.ncols()
        ),
    })
}

impl CiTest for ChsicConfig {
    fn name(&self) -> &str {
        "chsic"
    }

    fn run(&self, x: &[f64], y: &[f64], z: &DMatrix<f64>, seed: u64) -> Result<TestOutcome> {
        chsic_test(x, y, z, &ChsicConfig { seed, ..self.clone() })
    }
}
