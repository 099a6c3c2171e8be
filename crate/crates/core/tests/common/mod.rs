//! Shared measurement routines for the integration tests and the acceptance
//! runner. Each returns the measured quantities; callers decide thresholds.
#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DMatrix;
use prefopt::datagen::{sample_tuples, PairMode};
use prefopt::instance::{random_distribution, BanditInstance};
use prefopt::losses::{
    self, identities, per_tuple_values, EvaluationMode, LinkFn, LossKind, LossSpec, ReferenceTerm,
    ShapeFn,
};
use prefopt::optim::{bt_reward_fit, FitConfig};
use prefopt::oracle;
use prefopt::policy::PolicyModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// psi(u) = exp(-lambda u), a convex shape outside the presets.
#[derive(Debug)]
pub struct ExpShape;

impl ShapeFn for ExpShape {
    fn value(&self, u: f64, lambda: f64) -> f64 {
        (-lambda * u).exp()
    }
    fn derivative(&self, u: f64, lambda: f64) -> f64 {
        -lambda * (-lambda * u).exp()
    }
}

/// mu(v) = sqrt(v)
#[derive(Debug)]
pub struct SqrtLink;

impl LinkFn for SqrtLink {
    fn value(&self, v: f64) -> f64 {
        v.sqrt()
    }
    fn derivative(&self, v: f64) -> f64 {
        0.5 / v.sqrt()
    }
}

pub fn random_theta<R: Rng>(rng: &mut R, instance: &BanditInstance, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(instance.feature_dim(), instance.max_responses(), |_, _| {
        rng.random_range(-scale..scale)
    })
}

/// Random instance (1-3 prompts, 1-3 features, 2-5 responses) and theta.
pub fn random_case(seed: u64) -> (BanditInstance, PolicyModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let f = rng.random_range(1..=3);
    let inst = BanditInstance::random(&mut rng, n, f, 5).unwrap();
    let theta = random_theta(&mut rng, &inst, 1.5);
    let model = PolicyModel::new(theta, &inst).unwrap();
    (inst, model)
}

pub fn spec_for<R: Rng>(rng: &mut R, kind: LossKind) -> LossSpec {
    let lambda = match kind {
        LossKind::ExpoReg => rng.random_range(0.0..1.0),
        _ => 10f64.powf(rng.random_range(-1.0..0.5)),
    };
    match kind {
        LossKind::QpoCustom => LossSpec::qpo_custom(Arc::new(ExpShape), Arc::new(SqrtLink), lambda).unwrap(),
        _ => losses::make_loss_spec(kind, lambda).unwrap(),
    }
}

pub const ALL_KINDS: [LossKind; 7] = [
    LossKind::Dpo,
    LossKind::Ipo,
    LossKind::FdpoJs,
    LossKind::QpoCustom,
    LossKind::ExpoComp,
    LossKind::ExpoReg,
    LossKind::BtReward,
];

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    losses::relative_error(a, b, 1e-6)
}

/// Worst analytic-vs-central-difference relative error per loss kind over
/// `trials` random cases, each checked in population mode, on a fixed
/// sampled dataset, and (EXPO_COMP) with reference draws.
pub fn gradient_errors(trials: u64) -> Vec<(LossKind, f64)> {
    ALL_KINDS
        .iter()
        .map(|&kind| {
            let mut worst = 0.0_f64;
            for t in 0..trials {
                let seed = 1000 * (kind as u64 + 1) + t;
                let (inst, model) = random_case(seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
                let spec = spec_for(&mut rng, kind);
                let pairs = if t % 2 == 0 { PairMode::UniformPairs } else { PairMode::RefProduct };
                let data = sample_tuples(&inst, 40, pairs, seed).unwrap();
                let draws: Vec<(usize, usize)> = (0..30)
                    .map(|_| {
                        let x = rng.random_range(0..inst.len());
                        (x, rng.random_range(0..inst.prompts()[x].responses.len()))
                    })
                    .collect();
                let mut modes = vec![EvaluationMode::Population(pairs), EvaluationMode::sampled(data.tuples())];
                if kind == LossKind::ExpoComp {
                    modes.push(EvaluationMode::Sampled { tuples: data.tuples(), reference: ReferenceTerm::Draws(&draws) });
                }
                for mode in &modes {
                    let g = losses::loss_gradient(&spec, &model, &inst, mode).unwrap();
                    let fd = losses::finite_diff_gradient(&spec, &model, &inst, mode, FD_STEP).unwrap();
                    worst = worst.max(rel_err(&g, &fd));
                }
            }
            (kind, worst)
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct IdentityErrors {
    pub reg_grad: f64,
    pub reg_offset_spread: f64,
    pub kl_grad: f64,
    pub kl_offset_spread: f64,
}

/// Compares the regression loss against its true-target form and the
/// pairwise cross-entropy against its KL form on `cases` random instances,
/// with 10 extra random theta per instance for the value offsets.
pub fn identity_errors(cases: u64) -> IdentityErrors {
    let mut out = IdentityErrors::default();
    for c in 0..cases {
        let (inst, model) = random_case(50_000 + c);
        let mut rng = ChaCha8Rng::seed_from_u64(c);
        let lambda = rng.random_range(0.0..=1.0);
        let pairs = if c % 2 == 0 { PairMode::UniformPairs } else { PairMode::RefProduct };
        let pop = EvaluationMode::Population(pairs);
        let reg = losses::make_loss_spec(LossKind::ExpoReg, lambda).unwrap();
        let sup = losses::make_loss_spec(LossKind::BtReward, 1.0).unwrap();

        let (_, g) = losses::loss_and_gradient(&reg, &model, &inst, &pop).unwrap();
        let (_, h) = identities::expo_reg_true_target(&model, &inst, lambda, pairs).unwrap();
        out.reg_grad = out.reg_grad.max((&g - &h).abs().max());
        let (_, g) = losses::loss_and_gradient(&sup, &model, &inst, &pop).unwrap();
        let (_, h) = identities::supervised_kl(&model, &inst, pairs).unwrap();
        out.kl_grad = out.kl_grad.max((&g - &h).abs().max());

        let mut reg_off = Vec::new();
        let mut kl_off = Vec::new();
        for _ in 0..10 {
            let m = model.with_theta(random_theta(&mut rng, &inst, 2.0));
            let a = losses::evaluate_loss(&reg, &m, &inst, &pop).unwrap();
            let b = identities::expo_reg_true_target(&m, &inst, lambda, pairs).unwrap().0;
            reg_off.push(a - b);
            let a = losses::evaluate_loss(&sup, &m, &inst, &pop).unwrap();
            let b = identities::supervised_kl(&m, &inst, pairs).unwrap().0;
            kl_off.push(a - b);
        }
        out.reg_offset_spread = out.reg_offset_spread.max(spread(&reg_off));
        out.kl_offset_spread = out.kl_offset_spread.max(spread(&kl_off));
    }
    out
}

fn spread(v: &[f64]) -> f64 {
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    hi - lo
}

#[derive(Debug, Default)]
pub struct OracleErrors {
    pub round_trip_tv: f64,
    /// Perturbations scoring a lower (better) objective than the closed form.
    pub closed_form_beaten: usize,
    pub perturbations: usize,
    pub inversion: f64,
    pub reward_fit: f64,
}

pub fn oracle_errors() -> OracleErrors {
    let mut out = OracleErrors::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let pi = random_distribution(&mut rng, k);
        let table = oracle::preference_table(&pi).unwrap();
        let back = oracle::bt_policy_from_preferences(&table).unwrap();
        out.round_trip_tv = out.round_trip_tv.max(oracle::total_variation(&back.policy, &pi));
    }
    for _ in 0..20 {
        let k = rng.random_range(2..=6);
        let pi_ref = random_distribution(&mut rng, k);
        let reward: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lambda = 10f64.powf(rng.random_range(-1.0..1.0));
        let best = oracle::rlhf_closed_form(&pi_ref, &reward, lambda).unwrap();
        let top = oracle::rlhf_objective(&best, &pi_ref, &reward, lambda).unwrap();
        for _ in 0..100 {
            let w: Vec<f64> = best.iter().map(|p| p * rng.random_range(-0.3f64..0.3).exp()).collect();
            let total: f64 = w.iter().sum();
            let q: Vec<f64> = w.iter().map(|v| v / total).collect();
            out.perturbations += 1;
            if oracle::rlhf_objective(&q, &pi_ref, &reward, lambda).unwrap() < top {
                out.closed_form_beaten += 1;
            }
        }
        let inv = oracle::reward_from_policy(&best, &pi_ref, lambda).unwrap();
        let want = oracle::gauge_fix(&reward);
        for (a, b) in inv.iter().zip(&want) {
            out.inversion = out.inversion.max((a - b).abs());
        }
    }
    let inst = BanditInstance::single(vec![0.6, 0.3, 0.1], vec![0.4, 0.4, 0.2]).unwrap();
    let fit = bt_reward_fit(&inst, &EvaluationMode::Population(PairMode::UniformPairs), &FitConfig::default()).unwrap();
    let want = oracle::gauge_fix(&[0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()]);
    for (a, b) in fit.prompt(0).iter().zip(&want) {
        out.reward_fit = out.reward_fit.max((a - b).abs());
    }
    out
}

/// |sampled mean - population value| in standard errors, per preset, with
/// `n` tuples drawn at the interpolation instance from a non-reference theta.
pub fn monte_carlo_z(n: usize, seed: u64) -> Vec<(LossKind, f64)> {
    let inst = BanditInstance::single(vec![0.6, 0.3, 0.1], vec![0.4, 0.4, 0.2]).unwrap();
    let model = PolicyModel::from_policies(&inst, &[vec![0.5, 0.35, 0.15]]).unwrap();
    let data = sample_tuples(&inst, n, PairMode::UniformPairs, seed).unwrap();
    LossKind::PRESETS
        .iter()
        .map(|&kind| {
            let lambda = if kind == LossKind::ExpoReg { 0.3 } else { 0.5 };
            let spec = losses::make_loss_spec(kind, lambda).unwrap();
            let pop = losses::evaluate_loss(&spec, &model, &inst, &EvaluationMode::Population(PairMode::UniformPairs))
                .unwrap();
            let vals = per_tuple_values(&spec, &model, &inst, data.tuples()).unwrap();
            let m = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
            (kind, (mean - pop).abs() / (var / m).sqrt())
        })
        .collect()
}

pub fn interpolation_instance() -> BanditInstance {
    prefopt::experiments::build_interpolation_instance()
}

