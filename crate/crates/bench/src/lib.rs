//! Shared inputs for the benchmarks.

use propaudit_core::synth::{generate_scm_dataset, ScmKind, ScmSample, ScmSpec};

/// A null common-cause sample of size `n`.
pub fn null_sample(n: usize, seed: u64) -> ScmSample {
    generate_scm_dataset(&ScmSpec {
        kind: ScmKind::NullCommonCause,
        n,
        seed,
        ..Default::default()
    })
    .expect("valid benchmark spec")
}
