//! Closed-form oracles over a single prompt's response distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::BanditInstance;

/// Default tolerance on the BT-consistency residual.
pub const BT_RESIDUAL_TOL: f64 = 1e-9;

/// Additive smoothing inside the KL logarithms.
pub const KL_SMOOTHING: f64 = 1e-12;

fn entry(pi: &[f64], y: usize) -> Result<f64> {
    let v = *pi.get(y).ok_or_else(|| {
        Error::Shape(format!("response index {y} out of range for {} responses", pi.len()))
    })?;
    if !(v > 0.0) {
        return Err(Error::Domain(format!("probability of response {y} is {v}, must be > 0")));
    }
    Ok(v)
}

/// BT preference induced by a policy: pi(y1) / (pi(y1) + pi(y2)), and exactly
/// 1/2 for a self-comparison.
///
/// The lower-indexed response is always the one divided out, so
/// `bt_preference(pi, a, b) + bt_preference(pi, b, a) == 1.0` holds exactly.
pub fn bt_preference(pi: &[f64], y1: usize, y2: usize) -> Result<f64> {
    let a = entry(pi, y1)?;
    let b = entry(pi, y2)?;
    if y1 == y2 {
        return Ok(0.5);
    }
    if y1 < y2 {
        Ok(a / (a + b))
    } else {
        Ok(1.0 - b / (a + b))
    }
}

/// Pairwise preference table `t[i][j] = bt_preference(pi, i, j)`.
pub fn preference_table(pi: &[f64]) -> Result<Vec<Vec<f64>>> {
    (0..pi.len())
        .map(|i| (0..pi.len()).map(|j| bt_preference(pi, i, j)).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BtPolicy {
    pub policy: Vec<f64>,
    /// max over pairs of |bt_preference(policy, i, j) - table[i][j]|
    pub residual: f64,
}

/// Recovers the unique policy whose BT preferences reproduce `table`, using
/// the default residual tolerance.
pub fn bt_policy_from_preferences(table: &[Vec<f64>]) -> Result<BtPolicy> {
    bt_policy_from_preferences_with_tol(table, BT_RESIDUAL_TOL)
}

/// Anchors response 0 at unnormalized mass 1 and chains consecutive odds
/// ratios p(j≻j-1)/p(j-1≻j), then normalizes.
pub fn bt_policy_from_preferences_with_tol(table: &[Vec<f64>], tol: f64) -> Result<BtPolicy> {
    let k = table.len();
    if k < 2 {
        return Err(Error::Shape(format!("preference table needs >= 2 responses, has {k}")));
    }
    if let Some(row) = table.iter().position(|r| r.len() != k) {
        return Err(Error::Shape(format!("row {row} of preference table is not length {k}")));
    }
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let p = table[i][j];
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Domain(format!("p({i}≻{j}) = {p} outside (0, 1)")));
            }
            if (p + table[j][i] - 1.0).abs() > 1e-12 {
                return Err(Error::validation(format!(
                    "p({i}≻{j}) + p({j}≻{i}) = {} != 1",
                    p + table[j][i]
                )));
            }
        }
    }
    let mut mass = vec![1.0; k];
    for j in 1..k {
        mass[j] = mass[j - 1] * table[j][j - 1] / table[j - 1][j];
    }
    let total: f64 = mass.iter().sum();
    let policy: Vec<f64> = mass.iter().map(|m| m / total).collect();
    let mut residual = 0.0_f64;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                residual = residual.max((bt_preference(&policy, i, j)? - table[i][j]).abs());
            }
        }
    }
    if residual > tol {
        return Err(Error::Inconsistent { residual });
    }
    Ok(BtPolicy { policy, residual })
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// One-hot policy at the mode of `pi`.
pub fn mode_policy(pi: &[f64]) -> Vec<f64> {
    let m = argmax(pi);
    (0..pi.len()).map(|i| if i == m { 1.0 } else { 0.0 }).collect()
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::validation(format!("lambda must be a positive real, got {lambda}")));
    }
    Ok(())
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(())
}

/// Minimizer of the KL-regularized reward objective:
/// pi_ref(y) exp(r(y)/lambda) / Z.
pub fn rlhf_closed_form(pi_ref: &[f64], reward: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    check_same_len(pi_ref, reward)?;
    let logits = pi_ref
        .iter()
        .zip(reward)
        .enumerate()
        .map(|(y, (p, r))| {
            if !(*p > 0.0) {
                return Err(Error::Domain(format!("pi_ref({y}) = {p}, must be > 0")));
            }
            Ok(p.ln() + r / lambda)
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.iter().map(|v| v / z).collect())
}

/// -E_pi[r] + lambda * KL(pi || pi_ref), evaluated exactly.
pub fn rlhf_objective(pi: &[f64], pi_ref: &[f64], reward: &[f64], lambda: f64) -> Result<f64> {
    check_same_len(pi, pi_ref)?;
    check_same_len(pi, reward)?;
    let mut total = 0.0;
    for y in 0..pi.len() {
        total -= pi[y] * reward[y];
        if pi[y] > 0.0 {
            total += lambda * pi[y] * (pi[y] / pi_ref[y]).ln();
        }
    }
    Ok(total)
}

/// Shifts a reward vector so its entries sum to zero.
pub fn gauge_fix(r: &[f64]) -> Vec<f64> {
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    r.iter().map(|v| v - mean).collect()
}

/// Inverts [`rlhf_closed_form`]: lambda * log(pi_r / pi_ref), gauge fixed.
pub fn reward_from_policy(pi_r: &[f64], pi_ref: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    check_same_len(pi_r, pi_ref)?;
    let raw = pi_r
        .iter()
        .zip(pi_ref)
        .map(|(a, b)| {
            if !(*a > 0.0 && *b > 0.0) {
                return Err(Error::Domain("policies must be strictly positive".into()));
            }
            Ok(lambda * (a / b).ln())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(gauge_fix(&raw))
}

/// IPO reward r(y) = sum over y' of pi_ref(y') p*(y ≻ y'), self-comparison
/// included at 1/2. Returned without gauge fixing; apply [`gauge_fix`] for the
/// canonical view.
pub fn ipo_reward(instance: &BanditInstance, x: usize) -> Result<Vec<f64>> {
    let p = instance.prompt(x)?;
    let k = p.responses.len();
    (0..k)
        .map(|y| {
            (0..k).try_fold(0.0, |acc, y2| {
                Ok(acc + p.pi_ref[y2] * bt_preference(&p.pi_star, y, y2)?)
            })
        })
        .collect()
}

/// Per-prompt reward vectors in the sum-zero gauge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    rewards: Vec<Vec<f64>>,
}

impl RewardTable {
    pub fn new(rewards: Vec<Vec<f64>>) -> Result<Self> {
        if rewards.iter().flatten().any(|r| !r.is_finite()) {
            return Err(Error::Domain("reward entries must be finite".into()));
        }
        Ok(RewardTable {
            rewards: rewards.iter().map(|r| gauge_fix(r)).collect(),
        })
    }

    pub fn prompt(&self, x: usize) -> &[f64] {
        &self.rewards[x]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    /// Largest pairwise reward gap across all prompts.
    pub fn max_gap(&self) -> f64 {
        self.rewards
            .iter()
            .map(|r| {
                let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDistance {
    pub tv: f64,
    /// KL(p || q)
    pub kl_forward: f64,
    /// KL(q || p)
    pub kl_reverse: f64,
    pub argmax_match: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDistanceReport {
    pub prompt_id: String,
    #[serde(flatten)]
    pub distance: PolicyDistance,
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn smoothed_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| a * ((a + KL_SMOOTHING) / (b + KL_SMOOTHING)).ln())
        .sum::<f64>()
        .max(0.0)
}

pub fn policy_distance(p: &[f64], q: &[f64]) -> Result<PolicyDistance> {
    check_same_len(p, q)?;
    Ok(PolicyDistance {
        tv: total_variation(p, q).clamp(0.0, 1.0),
        kl_forward: smoothed_kl(p, q),
        kl_reverse: smoothed_kl(q, p),
        argmax_match: argmax(p) == argmax(q),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const STAR: [f64; 3] = [0.6, 0.3, 0.1];
    const REF: [f64; 3] = [0.4, 0.4, 0.2];

    #[test]
    fn bt_preference_examples() {
        assert!((bt_preference(&STAR, 0, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(bt_preference(&STAR, 2, 2).unwrap(), 0.5);
        assert!((bt_preference(&REF, 0, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!((bt_preference(&STAR, 1, 2).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bt_preference_rejects_zero_mass_and_bad_index() {
        assert!(matches!(bt_preference(&[0.0, 1.0], 0, 1), Err(Error::Domain(_))));
        assert!(matches!(bt_preference(&STAR, 0, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn policy_from_preferences_examples() {
        let t = preference_table(&STAR).unwrap();
        let rec = bt_policy_from_preferences(&t).unwrap();
        assert!(total_variation(&rec.policy, &STAR) < 1e-15);
        assert!(rec.residual < 1e-15);

        let half = vec![vec![0.5; 4]; 4];
        let rec = bt_policy_from_preferences(&half).unwrap();
        assert!(rec.policy.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn inconsistent_preferences_rejected() {
        let t = vec![
            vec![0.5, 2.0 / 3.0, 0.6],
            vec![1.0 / 3.0, 0.5, 0.75],
            vec![0.4, 0.25, 0.5],
        ];
        match bt_policy_from_preferences(&t) {
            Err(Error::Inconsistent { residual }) => {
                // chain forces p(0≻2) = 6/7
                assert!((residual - (6.0 / 7.0 - 0.6)).abs() < 1e-12, "{residual}");
            }
            other => panic!("expected inconsistency, got {other:?}"),
        }
    }

    #[test]
    fn mode_policy_examples() {
        assert_eq!(mode_policy(&STAR), vec![1.0, 0.0, 0.0]);
        assert_eq!(mode_policy(&[0.5, 0.5]), vec![1.0, 0.0]);
        assert_eq!(mode_policy(&[0.1, 0.2, 0.7]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn rlhf_closed_form_examples() {
        let p = rlhf_closed_form(&REF, &[3.0, 3.0, 3.0], 0.5).unwrap();
        assert!(total_variation(&p, &REF) < 1e-15);
        let p = rlhf_closed_form(&REF, &[2f64.ln(), 0.0, 0.0], 1.0).unwrap();
        let want = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        assert!(total_variation(&p, &want) < 1e-15);
        let p = rlhf_closed_form(&REF, &[2f64.ln(), 0.0, -1.0], 1e9).unwrap();
        assert!(total_variation(&p, &REF) < 1e-8);
        assert!(rlhf_closed_form(&REF, &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn rlhf_closed_form_survives_huge_rewards() {
        let p = rlhf_closed_form(&REF, &[1e6, 0.0, 0.0], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn reward_from_policy_examples() {
        assert!(reward_from_policy(&REF, &REF, 2.0).unwrap().iter().all(|r| *r == 0.0));
        let pi = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        let r = reward_from_policy(&pi, &REF, 1.0).unwrap();
        let want = gauge_fix(&[2f64.ln(), 0.0, 0.0]);
        for (a, b) in r.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
        let back = rlhf_closed_form(&REF, &r, 1.0).unwrap();
        assert!(total_variation(&back, &pi) < 1e-12);
        assert!(matches!(reward_from_policy(&[1.0, 0.0], &[0.5, 0.5], 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn ipo_reward_examples() {
        let sym = BanditInstance::single(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
        assert_eq!(ipo_reward(&sym, 0).unwrap(), vec![0.5, 0.5]);

        let inst = BanditInstance::single(STAR.to_vec(), REF.to_vec()).unwrap();
        let r = ipo_reward(&inst, 0).unwrap();
        let want = 0.4 * 0.5 + 0.4 * (2.0 / 3.0) + 0.2 * (6.0 / 7.0);
        assert!((r[0] - want).abs() < 1e-15);
        assert!((r[0] - 0.63810).abs() < 5e-6);

        let peaked = BanditInstance::single(STAR.to_vec(), vec![0.98, 0.01, 0.01]).unwrap();
        assert!((ipo_reward(&peaked, 0).unwrap()[0] - 0.5).abs() < 0.02);
    }

    #[test]
    fn policy_distance_examples() {
        let d = policy_distance(&STAR, &STAR).unwrap();
        assert_eq!((d.tv, d.kl_forward, d.kl_reverse, d.argmax_match), (0.0, 0.0, 0.0, true));
        assert!((policy_distance(&REF, &STAR).unwrap().tv - 0.2).abs() < 1e-15);
        let d = policy_distance(&[0.6, 0.2, 0.2], &[0.4, 0.2, 0.4]).unwrap();
        assert!((d.tv - 0.2).abs() < 1e-15);
        assert!(policy_distance(&[0.5, 0.5], &STAR).is_err());
    }

    #[test]
    fn kl_stays_finite_against_one_hot() {
        let d = policy_distance(&STAR, &[1.0, 0.0, 0.0]).unwrap();
        assert!(d.kl_forward.is_finite() && d.kl_forward > 0.0);
        assert!(d.kl_reverse.is_finite());
        assert!(!policy_distance(&[0.2, 0.8], &[1.0, 0.0]).unwrap().argmax_match);
    }

    #[test]
    fn reward_table_gauge_fixes() {
        let t = RewardTable::new(vec![vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(t.prompt(0), &[-1.0, 0.0, 1.0]);
        assert_eq!(t.max_gap(), 2.0);
        assert!(RewardTable::new(vec![vec![f64::NAN, 0.0]]).is_err());
    }
}
