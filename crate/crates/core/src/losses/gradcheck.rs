//! Randomized analytic-vs-finite-difference gradient checks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{finite_diff_gradient, loss_gradient, make_loss_spec, relative_error, EvaluationMode, LossKind};
use crate::datagen::{sample_tuples, PairMode};
use crate::error::Result;
use crate::instance::BanditInstance;
use crate::policy::PolicyModel;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Pass threshold on the relative error.
pub const FD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckOutcome {
    pub kind: LossKind,
    pub trials: usize,
    pub worst_relative_error: f64,
    pub passed: bool,
}

/// Checks `kind` on `trials` random instances and parameters, each in
/// population mode and on a 40-tuple sampled dataset.
pub fn gradient_check(kind: LossKind, trials: usize, seed: u64) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9));
    let mut worst = 0.0_f64;
    for t in 0..trials {
        let n = rng.random_range(1..=3);
        let f = rng.random_range(1..=3);
        let inst = BanditInstance::random(&mut rng, n, f, 5)?;
        let theta = DMatrix::from_fn(inst.feature_dim(), inst.max_responses(), |_, _| rng.random_range(-1.5..1.5));
        let model = PolicyModel::new(theta, &inst)?;
        let lambda = match kind {
            LossKind::ExpoReg => rng.random_range(0.0..1.0),
            _ => 10f64.powf(rng.random_range(-1.0..0.5)),
        };
        let spec = make_loss_spec(kind, lambda)?;
        let pairs = if t % 2 == 0 { PairMode::UniformPairs } else { PairMode::RefProduct };
        let data = sample_tuples(&inst, 40, pairs, rng.random())?;
        for mode in [EvaluationMode::Population(pairs), EvaluationMode::sampled(data.tuples())] {
            let g = loss_gradient(&spec, &model, &inst, &mode)?;
            let fd = finite_diff_gradient(&spec, &model, &inst, &mode, FD_STEP)?;
            worst = worst.max(relative_error(&g, &fd, 1e-6));
        }
    }
    Ok(GradCheckOutcome { kind, trials, worst_relative_error: worst, passed: worst < FD_TOL })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_pass_and_custom_is_rejected() {
        for kind in LossKind::PRESETS {
            let out = gradient_check(kind, 3, 1).unwrap();
            assert!(out.passed, "{out:?}");
        }
        assert!(gradient_check(LossKind::QpoCustom, 1, 1).is_err());
    }

    #[test]
    fn zero_trials_is_trivially_clean() {
        assert_eq!(gradient_check(LossKind::Dpo, 0, 0).unwrap().worst_relative_error, 0.0);
    }
}
