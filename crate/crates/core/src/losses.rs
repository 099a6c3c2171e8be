//! Preference losses over a linear-softmax policy.
//!
//! The quasi-convex family evaluates psi(mu(ratio_w) - mu(ratio_l), lambda)
//! with ratio = pi_theta / pi_ref. DPO, IPO and the Jensen-Shannon f-DPO are
//! presets of it with closed forms computed in log space; `QpoCustom` takes
//! arbitrary shape and link functions and goes through the ratio directly.
//! The two EXPO losses live outside that family. `BtReward` treats the
//! logits themselves as a tabular reward.
//!
//! Every loss is an expectation over labeled tuples, taken either exactly
//! over the population or as a mean over sampled tuples. Gradients use the
//! chain rule through the softmax: each tuple contributes derivatives with
//! respect to log pi(y_w) and log pi(y_l), and
//! d log pi(y) / d logit(k) = [y == k] - pi(k).

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datagen::{population_weights, PairMode, PreferenceTuple, WeightedTuple};
use crate::error::{Error, Result};
use crate::instance::BanditInstance;
use crate::par::{self, Execution};
use crate::policy::{accumulate_feature_grad, PolicyModel};

pub mod gradcheck;
pub mod identities;

/// Lower clamp on probability ratios before a custom link is applied.
pub const RATIO_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Dpo,
    Ipo,
    FdpoJs,
    QpoCustom,
    ExpoComp,
    ExpoReg,
    BtReward,
}

impl LossKind {
    /// The comparison set used by experiments and `--methods all`.
    pub const PRESETS: [LossKind; 5] = [
        LossKind::Dpo,
        LossKind::Ipo,
        LossKind::FdpoJs,
        LossKind::ExpoComp,
        LossKind::ExpoReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dpo => "dpo",
            LossKind::Ipo => "ipo",
            LossKind::FdpoJs => "fdpo-js",
            LossKind::QpoCustom => "qpo-custom",
            LossKind::ExpoComp => "expo-comp",
            LossKind::ExpoReg => "expo-reg",
            LossKind::BtReward => "bt-reward",
        }
    }

    pub fn is_qpo(self) -> bool {
        matches!(
            self,
            LossKind::Dpo | LossKind::Ipo | LossKind::FdpoJs | LossKind::QpoCustom
        )
    }

    pub fn is_expo(self) -> bool {
        matches!(self, LossKind::ExpoComp | LossKind::ExpoReg)
    }

    pub fn validate_lambda(self, lambda: f64) -> Result<()> {
        let ok = match self {
            LossKind::ExpoReg => (0.0..=1.0).contains(&lambda),
            _ => lambda.is_finite() && lambda > 0.0,
        };
        if ok {
            Ok(())
        } else if self == LossKind::ExpoReg {
            Err(Error::validation(format!("expo-reg lambda must lie in [0, 1], got {lambda}")))
        } else {
            Err(Error::validation(format!("{} lambda must be > 0, got {lambda}", self.name())))
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dpo" => LossKind::Dpo,
            "ipo" => LossKind::Ipo,
            "fdpo-js" | "fdpo" => LossKind::FdpoJs,
            "qpo-custom" => LossKind::QpoCustom,
            "expo-comp" | "expo" => LossKind::ExpoComp,
            "expo-reg" => LossKind::ExpoReg,
            "bt-reward" => LossKind::BtReward,
            _ => return Err(Error::validation(format!("unknown loss kind `{s}`"))),
        })
    }
}

/// Differentiable quasi-convex shape psi(u, lambda).
pub trait ShapeFn: Send + Sync + fmt::Debug {
    fn value(&self, u: f64, lambda: f64) -> f64;
    fn derivative(&self, u: f64, lambda: f64) -> f64;
}

/// Monotonically increasing link mu: (0, inf) -> R.
pub trait LinkFn: Send + Sync + fmt::Debug {
    fn value(&self, ratio: f64) -> f64;
    fn derivative(&self, ratio: f64) -> f64;
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// psi(u, lambda) = -log sigmoid(lambda u)
#[derive(Clone, Copy, Debug)]
pub struct LogisticShape;

impl ShapeFn for LogisticShape {
    fn value(&self, u: f64, lambda: f64) -> f64 {
        softplus(-lambda * u)
    }
    fn derivative(&self, u: f64, lambda: f64) -> f64 {
        -lambda * sigmoid(-lambda * u)
    }
}

/// psi(u, lambda) = (u - 1/(2 lambda))^2
#[derive(Clone, Copy, Debug)]
pub struct SquaredShape;

impl ShapeFn for SquaredShape {
    fn value(&self, u: f64, lambda: f64) -> f64 {
        (u - 0.5 / lambda).powi(2)
    }
    fn derivative(&self, u: f64, lambda: f64) -> f64 {
        2.0 * (u - 0.5 / lambda)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LogLink;

impl LinkFn for LogLink {
    fn value(&self, ratio: f64) -> f64 {
        ratio.ln()
    }
    fn derivative(&self, ratio: f64) -> f64 {
        1.0 / ratio
    }
}

/// Derivative of the Jensen-Shannon generator
/// f(u) = u log u - (u + 1) log((u + 1) / 2), i.e. log(2u / (1 + u)).
#[derive(Clone, Copy, Debug)]
pub struct JensenShannonLink;

impl LinkFn for JensenShannonLink {
    fn value(&self, ratio: f64) -> f64 {
        (2.0 * ratio / (1.0 + ratio)).ln()
    }
    fn derivative(&self, ratio: f64) -> f64 {
        1.0 / (ratio * (1.0 + ratio))
    }
}

#[derive(Clone)]
struct CustomQpo {
    psi: Arc<dyn ShapeFn>,
    mu: Arc<dyn LinkFn>,
}

/// A loss with its trade-off parameter.
#[derive(Clone)]
pub struct LossSpec {
    kind: LossKind,
    lambda: f64,
    custom: Option<CustomQpo>,
}

impl fmt::Debug for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("LossSpec");
        d.field("kind", &self.kind).field("lambda", &self.lambda);
        if let Some(c) = &self.custom {
            d.field("psi", &c.psi).field("mu", &c.mu);
        }
        d.finish()
    }
}

/// Preset constructor. `QpoCustom` needs [`LossSpec::qpo_custom`].
pub fn make_loss_spec(kind: LossKind, lambda: f64) -> Result<LossSpec> {
    if kind == LossKind::QpoCustom {
        return Err(Error::validation(
            "qpo-custom needs shape and link functions; build it with LossSpec::qpo_custom",
        ));
    }
    kind.validate_lambda(lambda)?;
    Ok(LossSpec { kind, lambda, custom: None })
}

impl LossSpec {
    pub fn qpo_custom(psi: Arc<dyn ShapeFn>, mu: Arc<dyn LinkFn>, lambda: f64) -> Result<Self> {
        LossKind::QpoCustom.validate_lambda(lambda)?;
        if !mu.value(1.0).is_finite() {
            return Err(Error::validation("mu(1) must be finite"));
        }
        // 100 log-spaced points on [1e-6, 1e6]
        let grid: Vec<f64> = (0..100).map(|i| 10f64.powf(-6.0 + 12.0 * i as f64 / 99.0)).collect();
        for w in grid.windows(2) {
            let (a, b) = (mu.value(w[0]), mu.value(w[1]));
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(Error::validation(format!(
                    "mu must be strictly increasing: mu({:e}) = {a}, mu({:e}) = {b}",
                    w[0], w[1]
                )));
            }
        }
        Ok(LossSpec {
            kind: LossKind::QpoCustom,
            lambda,
            custom: Some(CustomQpo { psi, mu }),
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Same kind (and custom functions) with a different lambda.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        self.kind.validate_lambda(lambda)?;
        Ok(LossSpec { lambda, ..self.clone() })
    }

    /// QPO argument u = mu(ratio_w) - mu(ratio_l) for one tuple.
    pub fn qpo_argument(
        &self,
        model: &PolicyModel,
        instance: &BanditInstance,
        tuple: &PreferenceTuple,
    ) -> Result<f64> {
        let logp = model.log_policy(instance, tuple.prompt)?;
        let prompt = instance.prompt(tuple.prompt)?;
        self.qpo_argument_from_log_policy(&logp, &prompt.pi_ref, tuple.winner, tuple.loser)
    }

    /// As [`LossSpec::qpo_argument`], from a log-policy vector directly.
    pub fn qpo_argument_from_log_policy(
        &self,
        logp: &[f64],
        pi_ref: &[f64],
        winner: usize,
        loser: usize,
    ) -> Result<f64> {
        if !self.kind.is_qpo() {
            return Err(Error::validation(format!("{} is not a QPO loss", self.kind)));
        }
        if logp.len() != pi_ref.len() || winner >= logp.len() || loser >= logp.len() {
            return Err(Error::Shape("log-policy, reference and tuple disagree".into()));
        }
        let tw = logp[winner] - pi_ref[winner].ln();
        let tl = logp[loser] - pi_ref[loser].ln();
        Ok(match self.kind {
            LossKind::Dpo | LossKind::Ipo => tw - tl,
            LossKind::FdpoJs => js_link_log(tw) - js_link_log(tl),
            _ => {
                let c = self.custom.as_ref().expect("custom qpo has functions");
                c.mu.value(tw.exp().max(RATIO_FLOOR)) - c.mu.value(tl.exp().max(RATIO_FLOOR))
            }
        })
    }

    /// Per-tuple value and derivatives with respect to log pi(y_w) and
    /// log pi(y_l).
    fn tuple_term(
        &self,
        logp: &[f64],
        log_ref: &[f64],
        pi_ref: &[f64],
        t: &PreferenceTuple,
    ) -> Result<(f64, f64, f64)> {
        let (w, l) = (t.winner, t.loser);
        let lam = self.lambda;
        Ok(match self.kind {
            LossKind::Dpo => {
                let u = (logp[w] - log_ref[w]) - (logp[l] - log_ref[l]);
                let d = -lam * sigmoid(-lam * u);
                (softplus(-lam * u), d, -d)
            }
            LossKind::Ipo => {
                let u = (logp[w] - log_ref[w]) - (logp[l] - log_ref[l]);
                let c = 0.5 / lam;
                let d = 2.0 * (u - c);
                ((u - c).powi(2), d, -d)
            }
            LossKind::FdpoJs => {
                let tw = logp[w] - log_ref[w];
                let tl = logp[l] - log_ref[l];
                let u = js_link_log(tw) - js_link_log(tl);
                let d = -lam * sigmoid(-lam * u);
                // d mu / d log ratio = 1 / (1 + ratio) = sigmoid(-t)
                (softplus(-lam * u), d * sigmoid(-tw), -d * sigmoid(-tl))
            }
            LossKind::QpoCustom => {
                let c = self.custom.as_ref().expect("custom qpo has functions");
                let rw = (logp[w] - log_ref[w]).exp().max(RATIO_FLOOR);
                let rl = (logp[l] - log_ref[l]).exp().max(RATIO_FLOOR);
                let (mw, ml) = (c.mu.value(rw), c.mu.value(rl));
                if !(mw.is_finite() && ml.is_finite()) {
                    return Err(Error::Domain(format!(
                        "link produced non-finite value at ratios {rw:e}, {rl:e}"
                    )));
                }
                let u = mw - ml;
                let d = c.psi.derivative(u, lam);
                (
                    c.psi.value(u, lam),
                    d * c.mu.derivative(rw) * rw,
                    -d * c.mu.derivative(rl) * rl,
                )
            }
            LossKind::ExpoComp | LossKind::BtReward => {
                // log(1 + pi_l / pi_w) = softplus(log pi_l - log pi_w)
                let gap = logp[l] - logp[w];
                let s = sigmoid(gap);
                (softplus(gap), -s, s)
            }
            LossKind::ExpoReg => {
                let p = sigmoid(logp[w] - logp[l]);
                let p_ref = crate::oracle::bt_preference(pi_ref, w, l)?;
                let target = lam * p_ref + (1.0 - lam);
                let d = 2.0 * (p - target) * p * (1.0 - p);
                ((p - target).powi(2), d, -d)
            }
        })
    }
}

/// mu(exp(t)) for the Jensen-Shannon link, stable for any log ratio t.
fn js_link_log(t: f64) -> f64 {
    std::f64::consts::LN_2 + t - softplus(t)
}

#[derive(Serialize, Deserialize)]
struct LossSpecRecord {
    kind: LossKind,
    lambda: f64,
}

impl Serialize for LossSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.custom.is_some() {
            return Err(serde::ser::Error::custom("qpo-custom loss specs are code-only"));
        }
        LossSpecRecord { kind: self.kind, lambda: self.lambda }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LossSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = LossSpecRecord::deserialize(d)?;
        make_loss_spec(r.kind, r.lambda).map_err(serde::de::Error::custom)
    }
}

/// How the unsupervised EXPO term is evaluated in sampled mode.
#[derive(Clone, Copy, Debug, Default)]
pub enum ReferenceTerm<'a> {
    /// Exact expectation over each prompt's response support.
    #[default]
    Exact,
    /// Mean over (prompt, response) draws from D_x × pi_ref.
    Draws(&'a [(usize, usize)]),
}

#[derive(Clone, Copy, Debug)]
pub enum EvaluationMode<'a> {
    /// Exact expectation over all labeled outcomes.
    Population(PairMode),
    /// Empirical mean over a fixed tuple list.
    Sampled {
        tuples: &'a [PreferenceTuple],
        reference: ReferenceTerm<'a>,
    },
}

impl<'a> EvaluationMode<'a> {
    pub fn sampled(tuples: &'a [PreferenceTuple]) -> Self {
        EvaluationMode::Sampled { tuples, reference: ReferenceTerm::Exact }
    }
}

/// Log-policies and log-references of every prompt at the current theta.
pub(crate) struct PromptCache {
    pub logp: Vec<Vec<f64>>,
    pub log_ref: Vec<Vec<f64>>,
}

impl PromptCache {
    pub fn new(model: &PolicyModel, instance: &BanditInstance) -> Result<Self> {
        let logp = (0..instance.len())
            .map(|x| model.log_policy(instance, x))
            .collect::<Result<Vec<_>>>()?;
        let log_ref = instance
            .prompts()
            .iter()
            .map(|p| p.pi_ref.iter().map(|v| v.ln()).collect())
            .collect();
        Ok(PromptCache { logp, log_ref })
    }

    pub fn policy(&self, x: usize) -> Vec<f64> {
        self.logp[x].iter().map(|l| l.exp()).collect()
    }
}

/// sum_x P(x) * (-sum_y pi_ref(y) log pi_theta(y))
fn reference_cross_entropy(instance: &BanditInstance, cache: &PromptCache) -> f64 {
    instance
        .prompts()
        .iter()
        .zip(&cache.logp)
        .map(|(p, logp)| p.prob * p.pi_ref.iter().zip(logp).map(|(r, l)| -r * l).sum::<f64>())
        .sum()
}

/// Converts per-prompt derivatives with respect to log pi into a theta
/// gradient. `direct` holds extra derivatives taken with respect to logits.
pub(crate) fn theta_gradient(
    model: &PolicyModel,
    instance: &BanditInstance,
    cache: &PromptCache,
    dlogp: &[Vec<f64>],
    direct: Option<&[Vec<f64>]>,
) -> DMatrix<f64> {
    let mut grad = DMatrix::zeros(model.theta().nrows(), model.theta().ncols());
    for (x, g) in dlogp.iter().enumerate() {
        let pi = cache.policy(x);
        let total: f64 = g.iter().sum();
        let mut dlogits: Vec<f64> = g.iter().zip(&pi).map(|(gy, py)| gy - py * total).collect();
        if let Some(direct) = direct {
            for (d, e) in dlogits.iter_mut().zip(&direct[x]) {
                *d += e;
            }
        }
        accumulate_feature_grad(&mut grad, &instance.prompts()[x].features, &dlogits);
    }
    grad
}

fn weighted_items(
    instance: &BanditInstance,
    mode: &EvaluationMode<'_>,
) -> Result<Vec<WeightedTuple>> {
    match mode {
        EvaluationMode::Population(pairs) => population_weights(instance, *pairs),
        EvaluationMode::Sampled { tuples, .. } => {
            if tuples.is_empty() {
                return Err(Error::validation("sampled evaluation needs a nonempty dataset"));
            }
            let w = 1.0 / tuples.len() as f64;
            for t in tuples.iter() {
                let k = instance.prompt(t.prompt)?.responses.len();
                if t.winner >= k || t.loser >= k || t.winner == t.loser {
                    return Err(Error::validation(format!("invalid tuple {t:?}")));
                }
            }
            Ok(tuples.iter().map(|t| WeightedTuple { tuple: *t, weight: w }).collect())
        }
    }
}

/// Loss value and (optionally) its theta gradient.
pub fn loss_and_gradient_with(
    exec: Execution,
    spec: &LossSpec,
    model: &PolicyModel,
    instance: &BanditInstance,
    mode: &EvaluationMode<'_>,
    want_grad: bool,
) -> Result<(f64, Option<DMatrix<f64>>)> {
    let cache = PromptCache::new(model, instance)?;
    let items = weighted_items(instance, mode)?;
    let shapes: Vec<usize> = instance.response_counts();

    let partials = par::chunked(exec, &items, |chunk| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut value = 0.0;
        let mut dlogp: Vec<Vec<f64>> = shapes.iter().map(|k| vec![0.0; *k]).collect();
        for item in chunk {
            let t = &item.tuple;
            let (v, dw, dl) = spec.tuple_term(
                &cache.logp[t.prompt],
                &cache.log_ref[t.prompt],
                &instance.prompts()[t.prompt].pi_ref,
                t,
            )?;
            value += item.weight * v;
            if want_grad {
                dlogp[t.prompt][t.winner] += item.weight * dw;
                dlogp[t.prompt][t.loser] += item.weight * dl;
            }
        }
        Ok((value, dlogp))
    });

    let mut value = 0.0;
    let mut dlogp: Vec<Vec<f64>> = shapes.iter().map(|k| vec![0.0; *k]).collect();
    for part in partials {
        let (v, g) = part?;
        value += v;
        for (acc, gx) in dlogp.iter_mut().zip(&g) {
            for (a, b) in acc.iter_mut().zip(gx) {
                *a += b;
            }
        }
    }

    let mut direct: Option<Vec<Vec<f64>>> = None;
    if spec.kind == LossKind::ExpoComp && spec.lambda > 0.0 {
        let lam = spec.lambda;
        match mode {
            EvaluationMode::Sampled { reference: ReferenceTerm::Draws(draws), .. } => {
                if draws.is_empty() {
                    return Err(Error::validation("reference draws must be nonempty"));
                }
                let w = lam / draws.len() as f64;
                for &(x, y) in draws.iter() {
                    let logp = cache
                        .logp
                        .get(x)
                        .ok_or_else(|| Error::UnknownPrompt(format!("#{x}")))?;
                    let ly = *logp.get(y).ok_or(Error::UnknownResponse {
                        prompt: x,
                        index: y,
                        count: logp.len(),
                    })?;
                    value -= w * ly;
                    dlogp[x][y] -= w;
                }
            }
            _ => {
                value += lam * reference_cross_entropy(instance, &cache);
                let mut d = Vec::with_capacity(instance.len());
                for (x, prompt) in instance.prompts().iter().enumerate() {
                    let pi = cache.policy(x);
                    d.push(
                        pi.iter()
                            .zip(&prompt.pi_ref)
                            .map(|(p, r)| lam * prompt.prob * (p - r))
                            .collect(),
                    );
                }
                direct = Some(d);
            }
        }
    }

    let grad = want_grad.then(|| theta_gradient(model, instance, &cache, &dlogp, direct.as_deref()));
    Ok((value, grad))
}

pub fn loss_and_gradient(
    spec: &LossSpec,
    model: &PolicyModel,
    instance: &BanditInstance,
    mode: &EvaluationMode<'_>,
) -> Result<(f64, DMatrix<f64>)> {
    let (v, g) = loss_and_gradient_with(Execution::default(), spec, model, instance, mode, true)?;
    Ok((v, g.expect("gradient requested")))
}

pub fn evaluate_loss(
    spec: &LossSpec,
    model: &PolicyModel,
    instance: &BanditInstance,
    mode: &EvaluationMode<'_>,
) -> Result<f64> {
    Ok(loss_and_gradient_with(Execution::default(), spec, model, instance, mode, false)?.0)
}

pub fn loss_gradient(
    spec: &LossSpec,
    model: &PolicyModel,
    instance: &BanditInstance,
    mode: &EvaluationMode<'_>,
) -> Result<DMatrix<f64>> {
    Ok(loss_and_gradient(spec, model, instance, mode)?.1)
}

/// Per-tuple loss contributions on a sample; for `ExpoComp` the exact
/// unsupervised term is added to every entry so the mean equals the sampled
/// loss.
pub fn per_tuple_values(
    spec: &LossSpec,
    model: &PolicyModel,
    instance: &BanditInstance,
    tuples: &[PreferenceTuple],
) -> Result<Vec<f64>> {
    let cache = PromptCache::new(model, instance)?;
    let unsup = if spec.kind == LossKind::ExpoComp {
        spec.lambda * reference_cross_entropy(instance, &cache)
    } else {
        0.0
    };
    tuples
        .iter()
        .map(|t| {
            let prompt = instance.prompt(t.prompt)?;
            Ok(spec
                .tuple_term(&cache.logp[t.prompt], &cache.log_ref[t.prompt], &prompt.pi_ref, t)?
                .0
                + unsup)
        })
        .collect()
}

/// Central differences (f(theta + h e) - f(theta - h e)) / 2h per coordinate.
pub fn central_difference<F>(theta: &DMatrix<f64>, h: f64, mut f: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&DMatrix<f64>) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::validation(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut grad = DMatrix::zeros(theta.nrows(), theta.ncols());
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

pub fn finite_diff_gradient(
    spec: &LossSpec,
    model: &PolicyModel,
    instance: &BanditInstance,
    mode: &EvaluationMode<'_>,
    h: f64,
) -> Result<DMatrix<f64>> {
    central_difference(model.theta(), h, |theta| {
        evaluate_loss(spec, &model.with_theta(theta.clone()), instance, mode)
    })
}

/// ||a - b|| / max(||a||, ||b||, floor), Frobenius norms.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(floor)
}
