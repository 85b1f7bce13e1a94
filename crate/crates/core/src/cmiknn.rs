//! Nearest-neighbor conditional mutual information and the CMIknn test.
//!
//! The estimator works on normal scores of the inputs (ties share their
//! average rank) with a 1e-10 seeded jitter, so binary properties and repeated
//! values do not collapse neighborhoods, and the estimate depends on each
//! variable only through its ranks.
//! Neighborhoods use the max-norm:
//!
//! ```text
//! I(x; y | z) ≈ ψ(k) − ⟨ψ(n_xz + 1) + ψ(n_yz + 1) − ψ(n_z + 1)⟩
//! ```
//!
//! where `ε_i` is the distance to the k-th neighbor in the joint space and the
//! `n_*` count points strictly inside `ε_i` in each subspace. Without a
//! conditioning set `n_z = n − 1` and this is the KSG estimator.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::DEFAULT_MIN_STRATUM;
use crate::error::{AuditError, Result};
use crate::kernel::permutation_pvalue;
use crate::neighbors::{max_norm, NeighborIndex, Points, BRUTE_FORCE_LIMIT};
use crate::outcome::{check_inputs, CiTest, TestId, TestOutcome};
use crate::seed;

pub const JITTER: f64 = 1e-10;

/// Digamma function, accurate to about 1e-13 for positive arguments.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    acc + x.ln() - 0.5 * inv - series
}

/// Van der Waerden scores `Φ⁻¹(r / (n + 1))` of the average ranks `r`.
pub fn normal_scores(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let normal = Normal::standard();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut scores = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean.
        let rank = (start + 1 + end) as f64 / 2.0;
        let score = normal.inverse_cdf(rank / (n + 1) as f64);
        for &i in &order[start..end] {
            scores[i] = score;
        }
        start = end;
    }
    scores
}

/// The jitter stream is keyed by the column's contents, so swapping `x` and
/// `y` swaps their jittered copies exactly.
fn jittered(values: &[f64], jitter_seed: u64) -> Vec<f64> {
    let key = values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01B3)
    });
    let mut rng = seed::rng(seed::derive(jitter_seed, key));
    normal_scores(values)
        .into_iter()
        .map(|v| v + JITTER * rng.random::<f64>())
        .collect()
}

/// Transformed inputs shared by an observed estimate and its surrogates.
struct Prepared {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<Vec<f64>>,
    digamma_table: Vec<f64>,
    pairs: Option<Pairwise>,
}

/// Distances that do not involve `x`, shared by all surrogates.
struct Pairwise {
    /// n × n max-norm distances in z (zero without z).
    dz: Vec<f64>,
    /// n × n max-norm distances in (y, z).
    dyz: Vec<f64>,
    /// Per sample, sorted distances to the other n − 1 samples.
    dz_sorted: Vec<f64>,
    dyz_sorted: Vec<f64>,
}

impl Pairwise {
    fn new(y: &[f64], z: &[Vec<f64>]) -> Self {
        let n = y.len();
        let mut dz = vec![0.0; n * n];
        let mut dyz = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let d = z.iter().fold(0.0f64, |m, c| m.max((c[i] - c[j]).abs()));
                dz[i * n + j] = d;
                dyz[i * n + j] = d.max((y[i] - y[j]).abs());
            }
        }
        let sorted_rows = |m: &[f64]| {
            let mut out = Vec::with_capacity(n * n.saturating_sub(1));
            for i in 0..n {
                let start = out.len();
                out.extend((0..n).filter(|&j| j != i).map(|j| m[i * n + j]));
                out[start..].sort_unstable_by(f64::total_cmp);
            }
            out
        };
        Self {
            dz_sorted: sorted_rows(&dz),
            dyz_sorted: sorted_rows(&dyz),
            dz,
            dyz,
        }
    }
}

impl Prepared {
    fn new(x: &[f64], y: &[f64], z: &DMatrix<f64>, jitter_seed: u64) -> Result<Self> {
        let x = jittered(x, jitter_seed);
        let y = jittered(y, jitter_seed);
        let z: Vec<Vec<f64>> = (0..z.ncols())
            .map(|j| jittered(z.column(j).as_slice(), jitter_seed))
            .collect();
        let digamma_table = (0..=x.len() + 1).map(|m| if m == 0 { f64::NAN } else { digamma(m as f64) }).collect();
        let pairs = (x.len() <= BRUTE_FORCE_LIMIT).then(|| Pairwise::new(&y, &z));
        Ok(Self {
            x,
            y,
            z,
            digamma_table,
            pairs,
        })
    }

    fn estimate(&self, x: &[f64], k: usize) -> f64 {
        if x.len() <= BRUTE_FORCE_LIMIT {
            self.estimate_brute(x, k)
        } else {
            self.estimate_indexed(x, k)
        }
    }

    /// Single pass over all pairs per sample; fastest for small `n`.
    fn estimate_brute(&self, x: &[f64], k: usize) -> f64 {
        let n = x.len();
        let pairs = self.pairs.as_ref().expect("pairwise tables exist for small n");
        let below = |sorted: &[f64], eps: f64| sorted.partition_point(|&v| v < eps);
        let mut joint = vec![0u64; n];
        let mut d_xz = vec![0.0; n];
        let psi = &self.digamma_table;
        let mut sum = 0.0;
        for i in 0..n {
            let (dz, dyz) = (&pairs.dz[i * n..(i + 1) * n], &pairs.dyz[i * n..(i + 1) * n]);
            let xi = x[i];
            for j in 0..n {
                let dx = (xi - x[j]).abs().max(dz[j]);
                d_xz[j] = dx;
                // Non-negative floats order like their bit patterns.
                joint[j] = dx.max(dyz[j]).to_bits();
            }
            // Index k skips the zero self-distance.
            let (_, &mut kth, _) = joint.select_nth_unstable(k);
            let eps = f64::from_bits(kth);
            let self_hit = usize::from(eps > 0.0);
            let row = i * (n - 1)..(i + 1) * (n - 1);
            let n_xz = d_xz.iter().filter(|&&v| v < eps).count() - self_hit;
            let n_yz = below(&pairs.dyz_sorted[row.clone()], eps);
            let n_z = if self.z.is_empty() { n - 1 } else { below(&pairs.dz_sorted[row], eps) };
            sum += psi[n_xz + 1] + psi[n_yz + 1] - psi[n_z + 1];
        }
        psi[k] - sum / n as f64
    }

    fn estimate_indexed(&self, x: &[f64], k: usize) -> f64 {
        let n = x.len();
        let zc: Vec<&[f64]> = self.z.iter().map(Vec::as_slice).collect();
        let with = |first: &[&[f64]]| {
            let mut cols = first.to_vec();
            cols.extend(zc.iter().copied());
            Points::from_columns(&cols)
        };
        let joint = with(&[x, &self.y]);
        let xz = with(&[x]);
        let yz = with(&[&self.y]);
        let zp = Points::from_columns(&zc);

        let joint_idx = NeighborIndex::new(&joint);
        let xz_idx = NeighborIndex::new(&xz);
        let yz_idx = NeighborIndex::new(&yz);
        let z_idx = (!zc.is_empty()).then(|| NeighborIndex::new(&zp));

        let psi = &self.digamma_table;
        let mut sum = 0.0;
        for i in 0..n {
            let eps = joint_idx.kth_distance(i, k);
            let n_xz = xz_idx.count_others_within(i, eps);
            let n_yz = yz_idx.count_others_within(i, eps);
            let n_z = z_idx.as_ref().map_or(n - 1, |idx| idx.count_others_within(i, eps));
            sum += psi[n_xz + 1] + psi[n_yz + 1] - psi[n_z + 1];
        }
        psi[k] - sum / n as f64
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(AuditError::Domain(format!("k = {k} must lie in [1, n) with n = {n}")));
    }
    Ok(())
}

/// Conditional mutual information estimate in nats; may be slightly negative.
pub fn cmi_knn_estimate(x: &[f64], y: &[f64], z: &DMatrix<f64>, k: usize, jitter_seed: u64) -> Result<f64> {
    check_inputs(x, y, z, 1)?;
    check_k(k, x.len())?;
    let prepared = Prepared::new(x, y, z, jitter_seed)?;
    Ok(prepared.estimate(&prepared.x, k))
}

/// Neighborhood-restricted shuffler.
///
/// Each sample may only receive the `x` value of one of its `k_perm` nearest
/// `z`-neighbors (max-norm, itself included). Neighbor lists are computed once;
/// every [`LocalPermuter::draw`] is a cheap pass over them.
pub struct LocalPermuter {
    n: usize,
    points: Option<Points>,
    neighbors: Vec<Vec<usize>>,
    tie_keys: Vec<u64>,
}

impl LocalPermuter {
    pub fn new(z: &DMatrix<f64>, k_perm: usize, tie_seed: u64) -> Result<Self> {
        let n = z.nrows();
        if z.ncols() == 0 {
            return Ok(Self {
                n,
                points: None,
                neighbors: Vec::new(),
                tie_keys: Vec::new(),
            });
        }
        if k_perm == 0 || n < k_perm {
            return Err(AuditError::Domain(format!(
                "k_perm = {k_perm} must lie in [1, n] with n = {n}"
            )));
        }
        let cols: Vec<Vec<f64>> = (0..z.ncols()).map(|j| z.column(j).iter().copied().collect()).collect();
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        let points = Points::from_columns(&refs);
        let mut rng = seed::rng(tie_seed);
        let tie_keys: Vec<u64> = (0..n).map(|_| rng.random()).collect();
        let neighbors = (0..n)
            .into_par_iter()
            .map(|i| {
                let q = points.row(i);
                let mut cand: Vec<(f64, u64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (max_norm(q, points.row(j)), tie_keys[j], j))
                    .collect();
                let take = k_perm - 1;
                if take > 0 && take < cand.len() {
                    cand.select_nth_unstable_by(take - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    cand.truncate(take);
                }
                cand.truncate(take);
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                std::iter::once(i).chain(cand.into_iter().map(|c| c.2)).collect()
            })
            .collect();
        Ok(Self {
            n,
            points: Some(points),
            neighbors,
            tie_keys,
        })
    }

    /// A bijection `perm` such that `x_perm[i] = x[perm[i]]`.
    pub fn draw(&self, seed: u64) -> Vec<usize> {
        let mut rng = seed::rng(seed);
        let Some(points) = &self.points else {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut rng);
            return perm;
        };
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut rng);
        let mut used = vec![false; self.n];
        let mut perm = vec![usize::MAX; self.n];
        let mut candidates = Vec::new();
        for &i in &order {
            candidates.clear();
            candidates.extend_from_slice(&self.neighbors[i]);
            candidates.shuffle(&mut rng);
            let pick = match candidates.iter().copied().find(|&j| !used[j]) {
                Some(j) => j,
                None => {
                    // Neighborhood exhausted: nearest unused sample instead.
                    let q = points.row(i);
                    (0..self.n)
                        .filter(|&j| !used[j])
                        .min_by(|&a, &b| {
                            max_norm(q, points.row(a))
                                .total_cmp(&max_norm(q, points.row(b)))
                                .then(self.tie_keys[a].cmp(&self.tie_keys[b]))
                        })
                        .expect("an unused index remains")
                }
            };
            used[pick] = true;
            perm[i] = pick;
        }
        perm
    }
}

/// One local permutation of `{0..n}` under the neighborhood structure of `z`.
pub fn local_permutation(z: &DMatrix<f64>, k_perm: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(LocalPermuter::new(z, k_perm, seed)?.draw(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmiknnConfig {
    /// Fixed neighbor count; `None` uses `max(5, ⌊k_fraction·n⌋)`.
    pub k_cmi: Option<usize>,
    pub k_fraction: f64,
    pub k_perm: usize,
    pub permutations: usize,
    pub seed: u64,
    pub min_samples: usize,
}

impl Default for CmiknnConfig {
    fn default() -> Self {
        Self {
            k_cmi: None,
            k_fraction: 0.1,
            k_perm: 5,
            permutations: 500,
            seed: 0,
            min_samples: DEFAULT_MIN_STRATUM,
        }
    }
}

impl CmiknnConfig {
    pub fn k_for(&self, n: usize) -> usize {
        self.k_cmi
            .unwrap_or_else(|| ((self.k_fraction * n as f64).floor() as usize).max(5))
    }
}

/// CMIknn test: nearest-neighbor CMI with a local-permutation null.
pub fn cmiknn_test(x: &[f64], y: &[f64], z: &DMatrix<f64>, config: &CmiknnConfig) -> Result<TestOutcome> {
    check_inputs(x, y, z, config.min_samples)?;
    if config.permutations == 0 {
        return Err(AuditError::Domain("at least one permutation required".into()));
    }
    let n = x.len();
    let k = config.k_for(n);
    check_k(k, n)?;
    let prepared = Prepared::new(x, y, z, seed::derive(config.seed, u64::MAX))?;
    let observed = prepared.estimate(&prepared.x, k);
    let permuter = LocalPermuter::new(
        &DMatrix::from_fn(n, prepared.z.len(), |i, j| prepared.z[j][i]),
        config.k_perm,
        seed::derive(config.seed, u64::MAX - 1),
    )?;
    let surrogates: Vec<f64> = (0..config.permutations)
        .into_par_iter()
        .map(|b| {
            let perm = permuter.draw(seed::derive(config.seed, b as u64));
            let xp: Vec<f64> = perm.iter().map(|&j| prepared.x[j]).collect();
            prepared.estimate(&xp, k)
        })
        .collect();
    Ok(TestOutcome {
        test_id: TestId::Cmiknn,
        statistic: observed,
        p_value: permutation_pvalue(observed, &surrogates)?,
        n_used: n,
        seed: config.seed,
        config_echo: format!(
            "k_cmi={k} k_perm={} permutations={} dz={}",
            config.k_perm,
            config.permutations,
            z.ncols()
        ),
    })
}

impl CiTest for CmiknnConfig {
    fn name(&self) -> &str {
        "cmiknn"
    }

    fn run(&self, x: &[f64], y: &[f64], z: &DMatrix<f64>, seed: u64) -> Result<TestOutcome> {
        cmiknn_test(x, y, z, &CmiknnConfig { seed, ..self.clone() })
    }
}
