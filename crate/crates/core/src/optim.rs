//! Adam with global-norm clipping, the training loop, and trajectories.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_with_rng, PairMode, PreferenceTuple};
use crate::error::{Error, Result};
use crate::instance::{BanditInstance, Prompt};
use crate::losses::{loss_and_gradient_with, make_loss_spec, EvaluationMode, LossKind, LossSpec};
use crate::oracle::{mode_policy, total_variation, RewardTable};
use crate::par::Execution;
use crate::policy::PolicyModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// One exact-gradient step per epoch.
    #[default]
    Population,
    /// Stochastic minibatches of labeled tuples.
    Sampled,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "population" => Ok(TrainMode::Population),
            "sampled" => Ok(TrainMode::Sampled),
            _ => Err(Error::validation(format!("unknown mode `{s}` (population | sampled)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Tuples per step in sampled mode.
    pub batch_size: usize,
    pub clip_max_norm: Option<f64>,
    pub mode: TrainMode,
    pub pair_mode: PairMode,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub record_every: usize,
    pub grad_tol: Option<f64>,
    /// Sampled mode only: draw one dataset of this size up front and cycle
    /// through shuffled passes over it instead of fresh batches.
    pub dataset_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            steps: 1000,
            batch_size: 20,
            clip_max_norm: Some(10.0),
            mode: TrainMode::Population,
            pair_mode: PairMode::UniformPairs,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            record_every: 10,
            grad_tol: None,
            dataset_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::validation(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("eps", self.eps)?;
        if let Some(c) = self.clip_max_norm {
            positive("clip_max_norm", c)?;
        }
        if let Some(t) = self.grad_tol {
            positive("grad_tol", t)?;
        }
        for (name, v) in [("steps", self.steps), ("batch_size", self.batch_size), ("record_every", self.record_every)] {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be >= 1")));
            }
        }
        if self.dataset_size == Some(0) {
            return Err(Error::validation("dataset_size must be >= 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            m: DMatrix::zeros(rows, cols),
            v: DMatrix::zeros(rows, cols),
            t: 0,
        }
    }
}

/// Advances the moments by one step and returns the parameter delta
/// -lr * m_hat / (sqrt(v_hat) + eps).
pub fn adam_step(
    state: &mut AdamState,
    grad: &DMatrix<f64>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<DMatrix<f64>> {
    if grad.shape() != state.m.shape() {
        return Err(Error::Shape(format!(
            "gradient is {:?}, optimizer state is {:?}",
            grad.shape(),
            state.m.shape()
        )));
    }
    let (b1, b2) = betas;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut update = DMatrix::zeros(grad.nrows(), grad.ncols());
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        update[i] = -lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(update)
}

/// Rescales to `max_norm` when the global L2 norm exceeds it.
pub fn clip_gradient(grad: &DMatrix<f64>, max_norm: f64) -> Result<DMatrix<f64>> {
    if !(max_norm > 0.0) {
        return Err(Error::validation(format!("max_norm must be > 0, got {max_norm}")));
    }
    let norm = grad.norm();
    if norm <= max_norm {
        Ok(grad.clone())
    } else {
        Ok(grad * (max_norm / norm))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Policy per prompt at this step.
    pub policies: Vec<Vec<f64>>,
    pub tv_star: Vec<f64>,
    pub tv_ref: Vec<f64>,
    pub tv_delta: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    /// Whether training ended on the gradient tolerance.
    pub stopped_early: bool,
}

/// Fixed-width float rendering with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl Trajectory {
    pub fn last(&self) -> Option<&TrajectoryRecord> {
        self.records.last()
    }

    pub const CSV_HEADER: &'static str =
        "step,loss,grad_norm,prompt_id,response_id,prob,tv_star,tv_ref,tv_delta";

    pub fn to_csv_string(&self, instance: &BanditInstance) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            for (x, prompt) in instance.prompts().iter().enumerate() {
                for (y, resp) in prompt.responses.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{}",
                        r.step,
                        format_float(r.loss),
                        format_float(r.grad_norm),
                        prompt.id,
                        resp,
                        format_float(r.policies[x][y]),
                        format_float(r.tv_star[x]),
                        format_float(r.tv_ref[x]),
                        format_float(r.tv_delta[x]),
                    );
                }
            }
        }
        out
    }

    pub fn save_csv(&self, instance: &BanditInstance, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string(instance)).map_err(|e| Error::io(path, e))
    }
}

/// What each step's gradient is computed on.
#[derive(Clone, Copy, Debug)]
pub enum DataSource<'a> {
    Population(PairMode),
    /// A fresh batch drawn from the instance every step.
    Fresh { batch: usize, pairs: PairMode },
    /// Batches from a fixed tuple list: the whole list when `batch` covers
    /// it, else consecutive slices of a reshuffled order each pass.
    Fixed { tuples: &'a [PreferenceTuple], batch: usize },
}

struct Batcher<'a> {
    source: DataSource<'a>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    buf: Vec<PreferenceTuple>,
}

impl<'a> Batcher<'a> {
    fn new(source: DataSource<'a>, rng: ChaCha8Rng) -> Result<Self> {
        if let DataSource::Fixed { tuples, batch } = source {
            if tuples.is_empty() || batch == 0 {
                return Err(Error::validation("fixed dataset and batch must be nonempty"));
            }
        }
        Ok(Batcher { source, rng, order: Vec::new(), cursor: 0, buf: Vec::new() })
    }

    fn next(&mut self, instance: &BanditInstance) -> Result<EvaluationMode<'_>> {
        match self.source {
            DataSource::Population(p) => Ok(EvaluationMode::Population(p)),
            DataSource::Fresh { batch, pairs } => {
                self.buf = sample_with_rng(instance, batch, pairs, &mut self.rng)?;
                Ok(EvaluationMode::sampled(&self.buf))
            }
            DataSource::Fixed { tuples, batch } => {
                if batch >= tuples.len() {
                    return Ok(EvaluationMode::sampled(tuples));
                }
                self.buf.clear();
                while self.buf.len() < batch {
                    if self.cursor == self.order.len() {
                        self.order = (0..tuples.len()).collect();
                        self.order.shuffle(&mut self.rng);
                        self.cursor = 0;
                    }
                    self.buf.push(tuples[self.order[self.cursor]]);
                    self.cursor += 1;
                }
                Ok(EvaluationMode::sampled(&self.buf))
            }
        }
    }
}

fn snapshot(
    step: usize,
    loss: f64,
    grad_norm: f64,
    model: &PolicyModel,
    instance: &BanditInstance,
) -> Result<TrajectoryRecord> {
    let policies = model.policies(instance)?;
    let mut tv_star = Vec::with_capacity(policies.len());
    let mut tv_ref = Vec::with_capacity(policies.len());
    let mut tv_delta = Vec::with_capacity(policies.len());
    for (pi, prompt) in policies.iter().zip(instance.prompts()) {
        tv_star.push(total_variation(pi, &prompt.pi_star));
        tv_ref.push(total_variation(pi, &prompt.pi_ref));
        tv_delta.push(total_variation(pi, &mode_policy(&prompt.pi_star)));
    }
    Ok(TrajectoryRecord { step, loss, grad_norm, policies, tv_star, tv_ref, tv_delta })
}

/// Trains per `config`, drawing batches from the instance in sampled mode.
pub fn train(
    spec: &LossSpec,
    instance: &BanditInstance,
    init: &PolicyModel,
    config: &TrainConfig,
) -> Result<(PolicyModel, Trajectory)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match (config.mode, config.dataset_size) {
        (TrainMode::Population, _) => {
            train_with_source(spec, instance, init, config, DataSource::Population(config.pair_mode), rng)
        }
        (TrainMode::Sampled, None) => train_with_source(
            spec,
            instance,
            init,
            config,
            DataSource::Fresh { batch: config.batch_size, pairs: config.pair_mode },
            rng,
        ),
        (TrainMode::Sampled, Some(n)) => {
            let tuples = sample_with_rng(instance, n, config.pair_mode, &mut rng)?;
            let source = DataSource::Fixed { tuples: &tuples, batch: config.batch_size };
            train_with_source(spec, instance, init, config, source, rng)
        }
    }
}

/// Trains on a given tuple list (the whole list per step when
/// `config.batch_size` covers it).
pub fn train_on_tuples(
    spec: &LossSpec,
    instance: &BanditInstance,
    init: &PolicyModel,
    config: &TrainConfig,
    tuples: &[PreferenceTuple],
) -> Result<(PolicyModel, Trajectory)> {
    config.validate()?;
    let rng = ChaCha8Rng::seed_from_u64(config.seed);
    let source = DataSource::Fixed { tuples, batch: config.batch_size };
    train_with_source(spec, instance, init, config, source, rng)
}

pub fn train_with_source(
    spec: &LossSpec,
    instance: &BanditInstance,
    init: &PolicyModel,
    config: &TrainConfig,
    source: DataSource<'_>,
    rng: ChaCha8Rng,
) -> Result<(PolicyModel, Trajectory)> {
    config.validate()?;
    let mut model = init.clone();
    // shape check against the instance
    PolicyModel::new(model.theta().clone(), instance)?;
    let mut state = AdamState::new(model.theta().nrows(), model.theta().ncols());
    let mut batcher = Batcher::new(source, rng)?;
    let mut traj = Trajectory::default();

    for step in 0..=config.steps {
        let mode = batcher.next(instance)?;
        let (loss, grad) =
            loss_and_gradient_with(Execution::Sequential, spec, &model, instance, &mode, true)?;
        let grad = grad.expect("gradient requested");
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, quantity: format!("loss ({loss})") });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, quantity: "gradient".into() });
        }
        let grad_norm = grad.norm();
        let early = config.grad_tol.is_some_and(|tol| grad_norm < tol);
        if step % config.record_every == 0 || step == config.steps || early {
            traj.records.push(snapshot(step, loss, grad_norm, &model, instance)?);
        }
        if early {
            traj.stopped_early = true;
            break;
        }
        if step == config.steps {
            break;
        }
        let grad = match config.clip_max_norm {
            Some(c) => clip_gradient(&grad, c)?,
            None => grad,
        };
        let update = adam_step(&mut state, &grad, config.learning_rate, (config.beta1, config.beta2), config.eps)?;
        *model.theta_mut() += update;
        if model.theta().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step, quantity: "parameters".into() });
        }
    }
    Ok((model, traj))
}

/// Optimizer settings for the tabular reward fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 0.05,
            max_steps: 20_000,
            grad_tol: 1e-10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Copy of the instance with one-hot prompt features, so the policy logits
/// become one free value per (prompt, response).
fn tabular(instance: &BanditInstance) -> Result<BanditInstance> {
    let n = instance.len();
    let prompts = instance
        .prompts()
        .iter()
        .enumerate()
        .map(|(x, p)| Prompt {
            features: (0..n).map(|j| if j == x { 1.0 } else { 0.0 }).collect(),
            ..p.clone()
        })
        .collect();
    BanditInstance::new(prompts)
}

/// Fits a tabular Bradley-Terry reward by minimizing the pairwise logistic
/// loss. Returns the gauge-fixed reward.
pub fn bt_reward_fit(
    instance: &BanditInstance,
    mode: &EvaluationMode<'_>,
    config: &FitConfig,
) -> Result<RewardTable> {
    TrainConfig {
        learning_rate: config.learning_rate,
        steps: config.max_steps,
        grad_tol: Some(config.grad_tol),
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
        ..TrainConfig::default()
    }
    .validate()?;
    let table = tabular(instance)?;
    let spec = make_loss_spec(LossKind::BtReward, 1.0)?;
    let mut model = PolicyModel::zeros(&table);
    let mut state = AdamState::new(model.theta().nrows(), model.theta().ncols());
    let counts = table.response_counts();
    let rewards = |m: &PolicyModel| -> Vec<Vec<f64>> {
        counts
            .iter()
            .enumerate()
            .map(|(x, k)| (0..*k).map(|y| m.theta()[(x, y)]).collect())
            .collect()
    };
    let gap = |m: &PolicyModel| -> f64 {
        rewards(m)
            .iter()
            .map(|r| {
                let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .fold(0.0, f64::max)
    };
    let mut gaps = Vec::new();
    let mut grad_norm = f64::INFINITY;
    for step in 0..=config.max_steps {
        let (loss, grad) = loss_and_gradient_with(Execution::Sequential, &spec, &model, &table, mode, true)?;
        let grad = grad.expect("gradient requested");
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, quantity: "reward-fit loss or gradient".into() });
        }
        grad_norm = grad.norm();
        if grad_norm < config.grad_tol {
            return RewardTable::new(rewards(&model));
        }
        if step % (config.max_steps / 10).max(1) == 0 || step == config.max_steps {
            gaps.push(gap(&model));
        }
        if step == config.max_steps {
            break;
        }
        let update = adam_step(&mut state, &grad, config.learning_rate, (config.beta1, config.beta2), config.eps)?;
        *model.theta_mut() += update;
    }
    let growing = gaps.windows(2).all(|w| w[1] > w[0]);
    let trail: Vec<String> = gaps.iter().map(|g| format!("{g:.3}")).collect();
    Err(Error::Convergence {
        steps: config.max_steps,
        grad_norm,
        tol: config.grad_tol,
        detail: format!(
            "max reward gap at checkpoints [{}]{}",
            trail.join(", "),
            if growing { ", growing monotonically (preferences not interior)" } else { "" }
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::degenerate_dataset;

    fn interp() -> BanditInstance {
        BanditInstance::single(vec![0.6, 0.3, 0.1], vec![0.4, 0.4, 0.2]).unwrap()
    }

    #[test]
    fn adam_zero_gradient_gives_zero_update() {
        let mut s = AdamState::new(1, 3);
        let u = adam_step(&mut s, &DMatrix::zeros(1, 3), 0.1, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(u, DMatrix::zeros(1, 3));
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut s = AdamState::new(1, 3);
        let g = DMatrix::from_row_slice(1, 3, &[0.5, -2.0, 1e-3]);
        let u = adam_step(&mut s, &g, 0.01, (0.9, 0.999), 1e-8).unwrap();
        for i in 0..3 {
            let want = -0.01 * g[i] / (g[i].abs() + 1e-8);
            assert!((u[i] - want).abs() < 1e-15);
            assert!((u[i] + 0.01 * g[i].signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_constant_gradient_tends_to_learning_rate() {
        let mut s = AdamState::new(1, 2);
        let g = DMatrix::from_row_slice(1, 2, &[3.0, -0.2]);
        let mut u = DMatrix::zeros(1, 2);
        for _ in 0..5000 {
            u = adam_step(&mut s, &g, 0.001, (0.9, 0.999), 1e-8).unwrap();
        }
        assert!((u[0] + 0.001).abs() < 1e-9 && (u[1] - 0.001).abs() < 1e-9, "{u}");
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut s = AdamState::new(1, 2);
        assert!(adam_step(&mut s, &DMatrix::zeros(2, 2), 0.1, (0.9, 0.999), 1e-8).is_err());
    }

    #[test]
    fn clipping_examples() {
        let g = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_eq!(clip_gradient(&g, 10.0).unwrap(), g);
        let c = clip_gradient(&DMatrix::from_row_slice(1, 2, &[30.0, 40.0]), 10.0).unwrap();
        assert!((c[0] - 6.0).abs() < 1e-12 && (c[1] - 8.0).abs() < 1e-12);
        assert_eq!(clip_gradient(&DMatrix::zeros(2, 2), 10.0).unwrap(), DMatrix::zeros(2, 2));
        assert!(clip_gradient(&g, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { learning_rate: -1.0, ..TrainConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("learning_rate"));
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rat": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"steps": 5, "mode": "sampled"}"#).unwrap();
        assert_eq!((c.steps, c.mode, c.batch_size), (5, TrainMode::Sampled, 20));
    }

    #[test]
    fn records_steps_and_final_state() {
        let inst = interp();
        let spec = make_loss_spec(LossKind::Dpo, 0.1).unwrap();
        let init = PolicyModel::reference_init(&inst).unwrap();
        let cfg = TrainConfig { steps: 25, record_every: 10, ..TrainConfig::default() };
        let (model, traj) = train(&spec, &inst, &init, &cfg).unwrap();
        let steps: Vec<usize> = traj.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25]);
        let last = traj.last().unwrap();
        assert_eq!(last.policies[0], model.policy(&inst, 0).unwrap());
        assert!((traj.records[0].tv_ref[0]).abs() < 1e-12);
        let csv = traj.to_csv_string(&inst);
        assert!(csv.starts_with(Trajectory::CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + 4 * 3);
    }

    #[test]
    fn sampled_training_is_deterministic() {
        let inst = interp();
        let spec = make_loss_spec(LossKind::ExpoComp, 0.1).unwrap();
        let init = PolicyModel::reference_init(&inst).unwrap();
        let cfg = TrainConfig { mode: TrainMode::Sampled, steps: 50, seed: 9, ..TrainConfig::default() };
        let a = train(&spec, &inst, &init, &cfg).unwrap();
        let b = train(&spec, &inst, &init, &cfg).unwrap();
        assert_eq!(a.1, b.1);
        let fixed = TrainConfig { dataset_size: Some(30), ..cfg.clone() };
        let c = train(&spec, &inst, &init, &fixed).unwrap();
        let d = train(&spec, &inst, &init, &fixed).unwrap();
        assert_eq!(c.1, d.1);
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn early_stop_respects_tolerance() {
        let inst = BanditInstance::single(vec![0.25; 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let spec = make_loss_spec(LossKind::Ipo, 1.0).unwrap();
        let init = PolicyModel::reference_init(&inst).unwrap();
        let cfg = TrainConfig { grad_tol: Some(1e-6), ..TrainConfig::default() };
        let (model, traj) = train(&spec, &inst, &init, &cfg).unwrap();
        assert!(traj.stopped_early);
        assert_eq!(traj.records.len(), 1);
        let mode = EvaluationMode::Population(PairMode::UniformPairs);
        let g = crate::losses::loss_gradient(&spec, &model, &inst, &mode).unwrap();
        assert!(g.norm() < 1e-6);
    }

    #[test]
    fn non_finite_aborts_with_step() {
        #[derive(Debug)]
        struct Blowup;
        impl crate::losses::ShapeFn for Blowup {
            fn value(&self, u: f64, _: f64) -> f64 {
                if u > 0.05 { f64::NAN } else { -u }
            }
            fn derivative(&self, _: f64, _: f64) -> f64 {
                -1.0
            }
        }
        let inst = interp();
        let spec = LossSpec::qpo_custom(
            std::sync::Arc::new(Blowup),
            std::sync::Arc::new(crate::losses::LogLink),
            1.0,
        )
        .unwrap();
        let init = PolicyModel::reference_init(&inst).unwrap();
        let cfg = TrainConfig { learning_rate: 0.01, steps: 500, ..TrainConfig::default() };
        match train(&spec, &inst, &init, &cfg) {
            Err(Error::NonFinite { step, quantity }) => {
                assert!(step > 0);
                assert!(quantity.contains("loss"));
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn reward_fit_recovers_log_policy() {
        let inst = interp();
        let r = bt_reward_fit(&inst, &EvaluationMode::Population(PairMode::UniformPairs), &FitConfig::default())
            .unwrap();
        let want = crate::oracle::gauge_fix(&[0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()]);
        for (a, b) in r.prompt(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        let flat = BanditInstance::single(vec![0.25; 4], vec![0.25; 4]).unwrap();
        let r = bt_reward_fit(&flat, &EvaluationMode::Population(PairMode::UniformPairs), &FitConfig::default())
            .unwrap();
        assert!(r.max_gap() < 1e-6);
    }

    #[test]
    fn reward_fit_diverges_on_total_order() {
        let inst = interp();
        let ds = degenerate_dataset(&inst);
        let err = bt_reward_fit(&inst, &EvaluationMode::sampled(ds.tuples()), &FitConfig::default()).unwrap_err();
        match err {
            Error::Convergence { detail, .. } => assert!(detail.contains("growing monotonically"), "{detail}"),
            other => panic!("{other:?}"),
        }
    }
}
