//! Preset experiments: interpolation across lambda, preservation on a
//! two-prompt instance, and the degenerate-data probe. Each produces an
//! [`ExperimentReport`] whose checks carry the measured value and threshold.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{degenerate_dataset, PairMode, PreferenceDataset};
use crate::error::{Error, Result};
use crate::instance::{BanditInstance, Prompt};
use crate::losses::{make_loss_spec, LossKind};
use crate::optim::{format_float, train, train_on_tuples, TrainConfig, TrainMode, Trajectory};
use crate::oracle::{policy_distance, total_variation};
use crate::par::{self, Execution};
use crate::policy::PolicyModel;

/// Distance threshold for "converged to" claims.
pub const CONVERGED_TV: f64 = 0.02;
/// Minimum TV to pi* of the weak-interpolation limit.
pub const WIC_MIN_TV_STAR: f64 = 0.15;
/// Per-step slack on monotone sweeps.
pub const MONOTONE_SLACK: f64 = 0.01;
/// Bad-prompt TV below which a run counts as improved (baseline 0.2).
pub const IMPROVED_TV: f64 = 0.18;
/// Converged policies of the control loss must differ by more than this.
pub const CONTROL_MIN_TV: f64 = 0.05;
/// Fraction of the step budget ignored before trend checks.
pub const BURN_IN: f64 = 0.1;

/// lambda at or below which small-lambda limits are asserted.
pub const SMALL_LAMBDA: f64 = 1e-5;
/// lambda at or above which large-lambda limits are asserted.
pub const LARGE_LAMBDA: f64 = 100.0;

pub const DEFAULT_LAMBDAS: [f64; 7] = [1e-5, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

pub fn expo_reg_lambdas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn is_small(kind: LossKind, lambda: f64) -> bool {
    lambda <= SMALL_LAMBDA || (kind == LossKind::ExpoReg && lambda == 0.0)
}

fn is_large(kind: LossKind, lambda: f64) -> bool {
    if kind == LossKind::ExpoReg {
        lambda >= 1.0
    } else {
        lambda >= LARGE_LAMBDA
    }
}

/// Single prompt, pi* = (0.6, 0.3, 0.1), pi_ref = (0.4, 0.4, 0.2).
pub fn build_interpolation_instance() -> BanditInstance {
    BanditInstance::new(vec![Prompt {
        id: "x".into(),
        prob: 1.0,
        features: vec![1.0],
        responses: vec!["y_a".into(), "y_b".into(), "y_c".into()],
        pi_star: vec![0.6, 0.3, 0.1],
        pi_ref: vec![0.4, 0.4, 0.2],
    }])
    .expect("interpolation instance is valid")
}

/// Good prompt with pi_ref = pi*, bad prompt with pi_ref != pi*,
/// equiprobable, one-hot features.
pub fn build_preservation_instance() -> BanditInstance {
    let responses: Vec<String> = vec!["y_a".into(), "y_b".into(), "y_c".into()];
    BanditInstance::new(vec![
        Prompt {
            id: "x_g".into(),
            prob: 0.5,
            features: vec![1.0, 0.0],
            responses: responses.clone(),
            pi_star: vec![0.6, 0.3, 0.1],
            pi_ref: vec![0.6, 0.3, 0.1],
        },
        Prompt {
            id: "x_b".into(),
            prob: 0.5,
            features: vec![0.0, 1.0],
            responses,
            pi_star: vec![0.4, 0.2, 0.4],
            pi_ref: vec![0.6, 0.2, 0.2],
        },
    ])
    .expect("preservation instance is valid")
}

/// Shared training settings for experiment cells. Unset learning rate and
/// step budget fall back to the per-method defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub learning_rate: Option<f64>,
    /// Base budget; f-DPO gets three times this.
    pub steps: Option<usize>,
    pub mode: TrainMode,
    pub batch_size: usize,
    pub clip_max_norm: Option<f64>,
    pub seed: u64,
    pub record_every: usize,
    pub pair_mode: PairMode,
    pub dataset_size: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ExperimentConfig {
            learning_rate: None,
            steps: None,
            mode: t.mode,
            batch_size: t.batch_size,
            clip_max_norm: t.clip_max_norm,
            seed: t.seed,
            record_every: t.record_every,
            pair_mode: t.pair_mode,
            dataset_size: t.dataset_size,
        }
    }
}

/// Default (learning rate, base steps) per method.
pub fn default_schedule(kind: LossKind) -> (f64, usize) {
    if kind.is_expo() {
        (5e-4, 1000)
    } else {
        (1e-3, 1000)
    }
}

fn budget(kind: LossKind, base: usize) -> usize {
    if kind == LossKind::FdpoJs {
        3 * base
    } else {
        base
    }
}

impl ExperimentConfig {
    pub fn train_config(&self, kind: LossKind) -> TrainConfig {
        let (lr, steps) = default_schedule(kind);
        self.train_config_with(kind, lr, steps)
    }

    fn train_config_with(&self, kind: LossKind, lr: f64, steps: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(lr),
            steps: budget(kind, self.steps.unwrap_or(steps)),
            batch_size: self.batch_size,
            clip_max_norm: self.clip_max_norm,
            mode: self.mode,
            pair_mode: self.pair_mode,
            seed: self.seed,
            record_every: self.record_every,
            dataset_size: self.dataset_size,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(LossKind::Dpo).validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl Op {
    fn holds(self, a: f64, b: f64) -> bool {
        match self {
            Op::Le => a <= b,
            Op::Lt => a < b,
            Op::Ge => a >= b,
            Op::Gt => a > b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub quantity: String,
    pub measured: f64,
    pub op: Op,
    pub threshold: f64,
    pub holds: bool,
}

impl Condition {
    pub fn new(quantity: impl Into<String>, measured: f64, op: Op, threshold: f64) -> Self {
        Condition {
            quantity: quantity.into(),
            measured,
            op,
            threshold,
            holds: op.holds(measured, threshold),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Logic {
    /// Every condition holds.
    All,
    /// The first condition implies the rest.
    Implies,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub method: Option<LossKind>,
    pub lambda: Option<f64>,
    pub logic: Logic,
    pub conditions: Vec<Condition>,
    pub passed: bool,
}

impl Check {
    pub fn new(
        name: impl Into<String>,
        method: Option<LossKind>,
        lambda: Option<f64>,
        logic: Logic,
        conditions: Vec<Condition>,
    ) -> Self {
        let passed = match logic {
            Logic::All => conditions.iter().all(|c| c.holds),
            Logic::Implies => !conditions[0].holds || conditions[1..].iter().all(|c| c.holds),
        };
        Check { name: name.into(), method, lambda, logic, conditions, passed }
    }

    fn failed(name: impl Into<String>, method: Option<LossKind>, lambda: Option<f64>, why: &str) -> Self {
        Check::new(
            format!("{} ({why})", name.into()),
            method,
            lambda,
            Logic::All,
            vec![Condition::new("cell completed", 0.0, Op::Ge, 1.0)],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub prompt_id: String,
    pub policy: Vec<f64>,
    pub tv_star: f64,
    pub tv_ref: f64,
    pub tv_delta: f64,
    /// KL(pi_theta || pi*), kept alongside TV for post-hoc thresholds.
    pub kl_star: f64,
    /// KL(pi_theta || pi_ref)
    pub kl_ref: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: LossKind,
    pub lambda: f64,
    /// Which instance of the report this cell trained on.
    pub instance: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub prompts: Vec<PromptOutcome>,
    pub error: Option<String>,
    #[serde(skip)]
    pub trajectory: Option<Trajectory>,
}

impl CellRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn prompt(&self, id: &str) -> Option<&PromptOutcome> {
        self.prompts.iter().find(|p| p.prompt_id == id)
    }

    pub fn trajectory_name(&self) -> String {
        format!("{}_{}.csv", self.method, self.lambda)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub description: String,
    pub instances: Vec<BanditInstance>,
    pub config: serde_json::Value,
    pub cells: Vec<CellRecord>,
    pub checks: Vec<Check>,
    /// Trajectory files written for this report, relative to its directory.
    pub trajectories: Vec<String>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn aborted_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.ok()).count()
    }

    pub fn cell(&self, method: LossKind, lambda: f64) -> Option<&CellRecord> {
        self.cells.iter().find(|c| c.method == method && c.lambda == lambda)
    }

    /// Short hex digest of the config echo and instances.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.experiment.as_bytes());
        h.update(self.config.to_string().as_bytes());
        for inst in &self.instances {
            h.update(inst.content_hash().as_bytes());
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

struct Job {
    kind: LossKind,
    lambda: f64,
    instance: usize,
    train: TrainConfig,
    keep_trajectory: bool,
}

fn outcome(model: &PolicyModel, instance: &BanditInstance) -> Result<Vec<PromptOutcome>> {
    instance
        .prompts()
        .iter()
        .enumerate()
        .map(|(x, p)| {
            let pi = model.policy(instance, x)?;
            Ok(PromptOutcome {
                prompt_id: p.id.clone(),
                tv_star: total_variation(&pi, &p.pi_star),
                tv_ref: total_variation(&pi, &p.pi_ref),
                tv_delta: total_variation(&pi, &crate::oracle::mode_policy(&p.pi_star)),
                kl_star: policy_distance(&pi, &p.pi_star)?.kl_forward,
                kl_ref: policy_distance(&pi, &p.pi_ref)?.kl_forward,
                policy: pi,
            })
        })
        .collect()
}

fn run_jobs(
    exec: Execution,
    jobs: &[Job],
    instances: &[BanditInstance],
    data: Option<&[Vec<crate::datagen::PreferenceTuple>]>,
) -> Vec<CellRecord> {
    par::map(exec, jobs, |job| {
        let instance = &instances[job.instance];
        let run = || -> Result<(PolicyModel, Trajectory)> {
            let spec = make_loss_spec(job.kind, job.lambda)?;
            let init = PolicyModel::reference_init(instance)?;
            match data {
                Some(sets) => train_on_tuples(&spec, instance, &init, &job.train, &sets[job.instance]),
                None => train(&spec, instance, &init, &job.train),
            }
        };
        let mut rec = CellRecord {
            method: job.kind,
            lambda: job.lambda,
            instance: job.instance,
            learning_rate: job.train.learning_rate,
            steps: job.train.steps,
            prompts: Vec::new(),
            error: None,
            trajectory: None,
        };
        match run().and_then(|(m, t)| Ok((outcome(&m, instance)?, t))) {
            Ok((prompts, traj)) => {
                rec.prompts = prompts;
                if job.keep_trajectory {
                    rec.trajectory = Some(traj);
                }
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        rec
    })
}

/// Grid for one method: EXPO_REG clamps requested values into [0, 1].
fn method_grid(kind: LossKind, lambdas: Option<&[f64]>) -> Vec<f64> {
    let mut grid = match (kind, lambdas) {
        (LossKind::ExpoReg, None) => expo_reg_lambdas(),
        (LossKind::ExpoReg, Some(ls)) => ls.iter().map(|l| l.clamp(0.0, 1.0)).collect(),
        (_, None) => DEFAULT_LAMBDAS.to_vec(),
        (_, Some(ls)) => ls.to_vec(),
    };
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

fn validate_grid(methods: &[LossKind], lambdas: Option<&[f64]>) -> Result<()> {
    if let Some(ls) = lambdas {
        if ls.is_empty() {
            return Err(Error::validation("lambda grid must be nonempty"));
        }
    }
    for &m in methods {
        if m == LossKind::QpoCustom {
            return Err(Error::validation("qpo-custom has no preset and cannot be swept"));
        }
        for l in method_grid(m, lambdas) {
            m.validate_lambda(l)?;
        }
    }
    Ok(())
}

fn sweep_jobs(methods: &[LossKind], lambdas: Option<&[f64]>, config: &ExperimentConfig, all_traj: bool) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &kind in methods {
        let grid = method_grid(kind, lambdas);
        let (lo, hi) = (grid[0], grid[grid.len() - 1]);
        for &lambda in &grid {
            jobs.push(Job {
                kind,
                lambda,
                instance: 0,
                train: config.train_config(kind),
                keep_trajectory: all_traj || lambda == lo || lambda == hi,
            });
        }
    }
    jobs
}

fn config_echo(methods: &[LossKind], lambdas: Option<&[f64]>, config: &ExperimentConfig) -> serde_json::Value {
    serde_json::json!({
        "methods": methods,
        "lambdas": lambdas,
        "train": config,
        "method_schedules": methods
            .iter()
            .map(|m| {
                let t = config.train_config(*m);
                serde_json::json!({"method": m, "learning_rate": t.learning_rate, "steps": t.steps})
            })
            .collect::<Vec<_>>(),
    })
}

fn monotone_violation(values: &[f64], increasing: bool) -> f64 {
    values
        .windows(2)
        .map(|w| if increasing { w[0] - w[1] } else { w[1] - w[0] })
        .fold(0.0, f64::max)
}

fn interpolation_checks(cells: &[CellRecord], methods: &[LossKind]) -> Vec<Check> {
    let mut checks = Vec::new();
    for &kind in methods {
        let mine: Vec<&CellRecord> = cells.iter().filter(|c| c.method == kind).collect();
        for cell in &mine {
            if !cell.ok() {
                checks.push(Check::failed("cell", Some(kind), Some(cell.lambda), "aborted"));
                continue;
            }
            let p = &cell.prompts[0];
            if is_small(kind, cell.lambda) {
                if kind.is_expo() {
                    checks.push(Check::new(
                        "small-lambda limit is pi*",
                        Some(kind),
                        Some(cell.lambda),
                        Logic::All,
                        vec![Condition::new("tv_star", p.tv_star, Op::Le, CONVERGED_TV)],
                    ));
                } else {
                    checks.push(Check::new(
                        "small-lambda limit is the mode policy",
                        Some(kind),
                        Some(cell.lambda),
                        Logic::All,
                        vec![
                            Condition::new("prob_y_a", p.policy[0], Op::Ge, 1.0 - CONVERGED_TV),
                            Condition::new("tv_delta", p.tv_delta, Op::Le, CONVERGED_TV),
                        ],
                    ));
                    checks.push(Check::new(
                        "misses pi* at small lambda",
                        Some(kind),
                        Some(cell.lambda),
                        Logic::All,
                        vec![Condition::new("tv_star", p.tv_star, Op::Ge, WIC_MIN_TV_STAR)],
                    ));
                }
            }
            if is_large(kind, cell.lambda) {
                checks.push(Check::new(
                    "large-lambda limit is pi_ref",
                    Some(kind),
                    Some(cell.lambda),
                    Logic::All,
                    vec![Condition::new("tv_ref", p.tv_ref, Op::Le, CONVERGED_TV)],
                ));
            }
        }
        let ok: Vec<&&CellRecord> = mine.iter().filter(|c| c.ok()).collect();
        if kind.is_expo() && ok.len() >= 2 && ok.len() == mine.len() {
            let star: Vec<f64> = ok.iter().map(|c| c.prompts[0].tv_star).collect();
            let refd: Vec<f64> = ok.iter().map(|c| c.prompts[0].tv_ref).collect();
            checks.push(Check::new(
                "monotone interpolation across lambda",
                Some(kind),
                None,
                Logic::All,
                vec![
                    Condition::new("max decrease of tv_star", monotone_violation(&star, true), Op::Le, MONOTONE_SLACK),
                    Condition::new("max increase of tv_ref", monotone_violation(&refd, false), Op::Le, MONOTONE_SLACK),
                ],
            ));
        }
    }
    checks
}

/// Trains every method at every grid lambda on the interpolation instance.
pub fn run_interpolation(
    methods: &[LossKind],
    lambdas: Option<&[f64]>,
    config: &ExperimentConfig,
    exec: Execution,
) -> Result<ExperimentReport> {
    config.validate()?;
    validate_grid(methods, lambdas)?;
    let start = Instant::now();
    let instances = vec![build_interpolation_instance()];
    let jobs = sweep_jobs(methods, lambdas, config, false);
    let cells = run_jobs(exec, &jobs, &instances, None);
    let checks = interpolation_checks(&cells, methods);
    Ok(finish(
        "interpolation",
        "single prompt, pi* = (0.6, 0.3, 0.1), pi_ref = (0.4, 0.4, 0.2)",
        instances,
        config_echo(methods, lambdas, config),
        cells,
        checks,
        start,
    ))
}

fn finish(
    name: &str,
    description: &str,
    instances: Vec<BanditInstance>,
    config: serde_json::Value,
    cells: Vec<CellRecord>,
    checks: Vec<Check>,
    start: Instant,
) -> ExperimentReport {
    let trajectories = cells
        .iter()
        .filter(|c| c.trajectory.is_some())
        .map(|c| format!("traj/{}", c.trajectory_name()))
        .collect();
    ExperimentReport {
        experiment: name.into(),
        description: description.into(),
        instances,
        config,
        cells,
        checks,
        trajectories,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    }
}

fn preservation_checks(cells: &[CellRecord], methods: &[LossKind]) -> Vec<Check> {
    let mut checks = Vec::new();
    let tv = |c: &CellRecord, id: &str| c.prompt(id).map(|p| p.tv_star).unwrap_or(f64::NAN);
    for &kind in methods {
        let mine: Vec<&CellRecord> = cells.iter().filter(|c| c.method == kind).collect();
        for cell in mine.iter().filter(|c| !c.ok()) {
            checks.push(Check::failed("cell", Some(kind), Some(cell.lambda), "aborted"));
        }
        let ok: Vec<&&CellRecord> = mine.iter().filter(|c| c.ok()).collect();
        if kind.is_expo() {
            let conds = |c: &CellRecord| {
                vec![
                    Condition::new("tv_star x_b", tv(c, "x_b"), Op::Lt, IMPROVED_TV),
                    Condition::new("tv_star x_g", tv(c, "x_g"), Op::Le, CONVERGED_TV),
                ]
            };
            // the first passing lambda, else the one with least x_g damage
            // among improving lambdas, else the smallest lambda
            let pick = ok
                .iter()
                .find(|c| conds(c).iter().all(|k| k.holds))
                .or_else(|| {
                    ok.iter()
                        .filter(|c| tv(c, "x_b") < IMPROVED_TV)
                        .min_by(|a, b| tv(a, "x_g").total_cmp(&tv(b, "x_g")))
                })
                .or(ok.first());
            if let Some(c) = pick {
                checks.push(Check::new(
                    "improves x_b while preserving x_g at some lambda",
                    Some(kind),
                    Some(c.lambda),
                    Logic::All,
                    conds(c),
                ));
            }
        } else {
            for c in &ok {
                checks.push(Check::new(
                    "improvement on x_b implies degradation on x_g",
                    Some(kind),
                    Some(c.lambda),
                    Logic::Implies,
                    vec![
                        Condition::new("tv_star x_b", tv(c, "x_b"), Op::Lt, IMPROVED_TV),
                        Condition::new("tv_star x_g", tv(c, "x_g"), Op::Gt, CONVERGED_TV),
                    ],
                ));
            }
        }
        for c in ok.iter().filter(|c| is_large(kind, c.lambda)) {
            checks.push(Check::new(
                "large lambda neither improves nor degrades",
                Some(kind),
                Some(c.lambda),
                Logic::All,
                vec![
                    Condition::new("tv_star x_g", tv(c, "x_g"), Op::Le, CONVERGED_TV),
                    Condition::new("tv_star x_b", tv(c, "x_b"), Op::Ge, IMPROVED_TV),
                ],
            ));
        }
    }
    checks
}

/// Trains every method at every grid lambda on the two-prompt instance.
pub fn run_preservation(
    methods: &[LossKind],
    lambdas: Option<&[f64]>,
    config: &ExperimentConfig,
    exec: Execution,
) -> Result<ExperimentReport> {
    config.validate()?;
    validate_grid(methods, lambdas)?;
    let start = Instant::now();
    let instances = vec![build_preservation_instance()];
    let jobs = sweep_jobs(methods, lambdas, config, false);
    let cells = run_jobs(exec, &jobs, &instances, None);
    let checks = preservation_checks(&cells, methods);
    Ok(finish(
        "preservation",
        "x_g: pi_ref = pi* = (0.6, 0.3, 0.1); x_b: pi* = (0.4, 0.2, 0.4), pi_ref = (0.6, 0.2, 0.2)",
        instances,
        config_echo(methods, lambdas, config),
        cells,
        checks,
        start,
    ))
}

/// Loss weights used by the degeneracy probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeLambdas {
    pub dpo: f64,
    pub fdpo_js: f64,
    pub expo_reg: f64,
}

impl Default for ProbeLambdas {
    fn default() -> Self {
        ProbeLambdas { dpo: 0.1, fdpo_js: 0.1, expo_reg: 0.5 }
    }
}

/// Default (learning rate, base steps) for the probe; full-batch training
/// on three tuples needs a larger rate to saturate.
pub const PROBE_SCHEDULE: (f64, usize) = (0.01, 1000);

/// Trains DPO, f-DPO and the EXPO_REG control on total-order labels under two
/// reference policies and compares the converged policies.
pub fn run_degeneracy_probe(
    pi_ref_a: &[f64],
    pi_ref_b: &[f64],
    lambdas: &ProbeLambdas,
    config: &ExperimentConfig,
    exec: Execution,
) -> Result<ExperimentReport> {
    config.validate()?;
    if pi_ref_a == pi_ref_b {
        return Err(Error::validation("reference policies must differ"));
    }
    let start = Instant::now();
    let base = build_interpolation_instance();
    let mut instances = Vec::new();
    for (id, r) in [("ref_a", pi_ref_a), ("ref_b", pi_ref_b)] {
        let p = &base.prompts()[0];
        instances.push(BanditInstance::new(vec![Prompt {
            id: id.into(),
            pi_ref: r.to_vec(),
            ..p.clone()
        }])?);
    }
    let data: Vec<Vec<_>> = instances.iter().map(|i| degenerate_dataset(i).tuples().to_vec()).collect();
    let methods = [
        (LossKind::Dpo, lambdas.dpo),
        (LossKind::FdpoJs, lambdas.fdpo_js),
        (LossKind::ExpoReg, lambdas.expo_reg),
    ];
    let mut jobs = Vec::new();
    for &(kind, lambda) in &methods {
        kind.validate_lambda(lambda)?;
        for inst in 0..2 {
            let mut train = config.train_config_with(kind, PROBE_SCHEDULE.0, PROBE_SCHEDULE.1);
            train.batch_size = data[inst].len();
            jobs.push(Job { kind, lambda, instance: inst, train, keep_trajectory: true });
        }
    }
    let cells = run_jobs(exec, &jobs, &instances, Some(&data));
    // the response that loses every comparison it appears in
    let star = &base.prompts()[0].pi_star;
    let loser = (0..star.len()).min_by(|&a, &b| star[a].total_cmp(&star[b])).expect("nonempty");
    let mut checks = Vec::new();
    for &(kind, lambda) in &methods {
        let pair: Vec<&CellRecord> = cells.iter().filter(|c| c.method == kind).collect();
        if pair.iter().any(|c| !c.ok()) {
            checks.push(Check::failed("reference comparison", Some(kind), Some(lambda), "aborted"));
            continue;
        }
        let gap = total_variation(&pair[0].prompts[0].policy, &pair[1].prompts[0].policy);
        let cond = if kind == LossKind::ExpoReg {
            Condition::new("tv between references", gap, Op::Gt, CONTROL_MIN_TV)
        } else {
            Condition::new("tv between references", gap, Op::Le, CONVERGED_TV)
        };
        let name = if kind == LossKind::ExpoReg {
            "control keeps reference dependence"
        } else {
            "converged policy ignores the reference"
        };
        checks.push(Check::new(name, Some(kind), Some(lambda), Logic::All, vec![cond]));
        if kind == LossKind::ExpoReg {
            continue;
        }
        for c in &pair {
            let traj = c.trajectory.as_ref().expect("probe keeps trajectories");
            let burn = (BURN_IN * c.steps as f64).ceil() as usize;
            let mass: Vec<f64> = traj.records.iter().filter(|r| r.step >= burn).map(|r| r.policies[0][loser]).collect();
            let init = traj.records[0].policies[0][loser];
            let last = *mass.last().unwrap_or(&init);
            checks.push(Check::new(
                format!("loser mass shrinks under {}", instances[c.instance].prompts()[0].id),
                Some(kind),
                Some(lambda),
                Logic::All,
                vec![
                    Condition::new("final minus initial loser mass", last - init, Op::Lt, 0.0),
                    Condition::new("max checkpoint increase after burn-in", monotone_violation(&mass, false), Op::Le, 0.0),
                ],
            ));
        }
    }
    let echo = serde_json::json!({
        "pi_ref_a": pi_ref_a,
        "pi_ref_b": pi_ref_b,
        "lambdas": lambdas,
        "train": config,
    });
    let mut report = finish(
        "degeneracy",
        "pi* = (0.6, 0.3, 0.1) with total-order labels under two reference policies",
        instances,
        echo,
        cells,
        checks,
        start,
    );
    report.trajectories = report
        .cells
        .iter()
        .map(|c| format!("traj/{}", probe_trajectory_name(c, &report.instances)))
        .collect();
    Ok(report)
}

fn probe_trajectory_name(c: &CellRecord, instances: &[BanditInstance]) -> String {
    format!("{}_{}_{}.csv", c.method, c.lambda, instances[c.instance].prompts()[0].id)
}

/// Trains every method at every given lambda on a caller-supplied instance,
/// optionally on a fixed dataset. No thresholds apply; every cell keeps its
/// trajectory.
pub fn run_training(
    instance: &BanditInstance,
    methods: &[LossKind],
    lambdas: &[f64],
    config: &TrainConfig,
    data: Option<&PreferenceDataset>,
    exec: Execution,
) -> Result<ExperimentReport> {
    config.validate()?;
    if methods.is_empty() || lambdas.is_empty() {
        return Err(Error::validation("training needs at least one method and one lambda"));
    }
    let mut jobs = Vec::new();
    for &kind in methods {
        if kind == LossKind::QpoCustom {
            return Err(Error::validation("qpo-custom has no preset and cannot be trained from a name"));
        }
        for &lambda in lambdas {
            kind.validate_lambda(lambda)?;
            jobs.push(Job { kind, lambda, instance: 0, train: config.clone(), keep_trajectory: true });
        }
    }
    let start = Instant::now();
    let instances = vec![instance.clone()];
    let sets = data.map(|d| vec![d.tuples().to_vec()]);
    let cells = run_jobs(exec, &jobs, &instances, sets.as_deref());
    let checks = cells
        .iter()
        .filter(|c| !c.ok())
        .map(|c| Check::failed("cell", Some(c.method), Some(c.lambda), "aborted"))
        .collect();
    let echo = serde_json::json!({
        "methods": methods,
        "lambdas": lambdas,
        "train": config,
        "dataset": data.map(|d| d.provenance()),
    });
    Ok(finish("train", "custom training run", instances, echo, cells, checks, start))
}

/// serde_json formatter printing every float with 17 significant digits.
struct Float17;

impl serde_json::ser::Formatter for Float17 {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        writer.write_all(format_float(value).as_bytes())
    }
}

pub fn to_json_17<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Float17);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Json { context: "serializing report".into(), source: e })?;
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

/// Paths written by [`emit_report`].
#[derive(Clone, Debug)]
pub struct EmittedFiles {
    pub directory: PathBuf,
    pub summary: PathBuf,
    pub cells: PathBuf,
    pub timing: PathBuf,
    pub trajectories: Vec<PathBuf>,
}

pub const CELLS_HEADER: &str = "method,lambda,prompt_id,tv_star,tv_ref,tv_delta,pass";

/// Per-cell verdict: all checks naming this cell pass; empty when no check
/// names it.
fn cell_pass(report: &ExperimentReport, c: &CellRecord) -> &'static str {
    let mine: Vec<&Check> = report
        .checks
        .iter()
        .filter(|k| k.method == Some(c.method) && k.lambda == Some(c.lambda))
        .collect();
    if mine.is_empty() {
        ""
    } else if mine.iter().all(|k| k.passed) {
        "true"
    } else {
        "false"
    }
}

pub fn cells_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(CELLS_HEADER);
    out.push('\n');
    for c in &report.cells {
        let pass = cell_pass(report, c);
        if c.prompts.is_empty() {
            let ids: Vec<&str> = report.instances[c.instance].prompts().iter().map(|p| p.id.as_str()).collect();
            for id in ids {
                out.push_str(&format!("{},{},{id},,,,false\n", c.method, format_float(c.lambda)));
            }
            continue;
        }
        for p in &c.prompts {
            out.push_str(&format!(
                "{},{},{},{},{},{},{pass}\n",
                c.method,
                format_float(c.lambda),
                p.prompt_id,
                format_float(p.tv_star),
                format_float(p.tv_ref),
                format_float(p.tv_delta),
            ));
        }
    }
    out
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<experiment>/<hash>/{summary.json, cells.csv, traj/*.csv}`.
/// Wall-clock time goes to a separate `timing.json` so the other files are
/// byte-identical across reruns.
pub fn emit_report(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<EmittedFiles> {
    let root = dir.as_ref().join(&report.experiment).join(report.config_hash());
    let traj_dir = root.join("traj");
    std::fs::create_dir_all(&traj_dir).map_err(|e| Error::io(&traj_dir, e))?;

    let summary = root.join("summary.json");
    let mut text = to_json_17(report)?;
    text.push('\n');
    write(&summary, text.as_bytes())?;

    let cells = root.join("cells.csv");
    write(&cells, cells_csv(report).as_bytes())?;

    let timing = root.join("timing.json");
    let t = serde_json::json!({ "wall_clock_seconds": report.wall_clock_seconds });
    write(&timing, format!("{t}\n").as_bytes())?;

    let mut trajectories = Vec::new();
    let probe = report.experiment == "degeneracy";
    for c in &report.cells {
        if let Some(traj) = &c.trajectory {
            let name = if probe { probe_trajectory_name(c, &report.instances) } else { c.trajectory_name() };
            let path = traj_dir.join(name);
            traj.save_csv(&report.instances[c.instance], &path)?;
            trajectories.push(path);
        }
    }
    Ok(EmittedFiles { directory: root, summary, cells, timing, trajectories })
}
