//! Alternative population forms whose gradients coincide with the trained
//! losses. Used to cross-check the main implementation.

use nalgebra::DMatrix;

use super::{sigmoid, theta_gradient, PromptCache};
use crate::datagen::{pair_weights, PairMode};
use crate::error::{Error, Result};
use crate::instance::BanditInstance;
use crate::policy::PolicyModel;

/// E over unlabeled pairs of
/// (sigma(s_i - s_j) - (lambda p_ref(i ≻ j) + (1 - lambda) p*(i ≻ j)))^2.
///
/// Differs from the constant-target regression loss by a theta-independent
/// constant, so the two share a gradient.
pub fn expo_reg_true_target(
    model: &PolicyModel,
    instance: &BanditInstance,
    lambda: f64,
    mode: PairMode,
) -> Result<(f64, DMatrix<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let cache = PromptCache::new(model, instance)?;
    let mut dlogp: Vec<Vec<f64>> = instance.response_counts().iter().map(|k| vec![0.0; *k]).collect();
    let mut value = 0.0;
    for (x, i, j, w) in pair_weights(instance, mode) {
        let s = sigmoid(cache.logp[x][i] - cache.logp[x][j]);
        let target = lambda * instance.p_ref(x, i, j)? + (1.0 - lambda) * instance.p_star(x, i, j)?;
        value += w * (s - target).powi(2);
        let d = w * 2.0 * (s - target) * s * (1.0 - s);
        dlogp[x][i] += d;
        dlogp[x][j] -= d;
    }
    Ok((value, theta_gradient(model, instance, &cache, &dlogp, None)))
}

/// Pairwise KL between labels and model preferences,
/// sum W [u* ln(u*/u) + (1 - u*) ln((1 - u*)/(1 - u))] with u = sigma(s_i - s_j).
///
/// Its gradient W (u - u*) on s_i matches the supervised pairwise
/// cross-entropy.
pub fn supervised_kl(
    model: &PolicyModel,
    instance: &BanditInstance,
    mode: PairMode,
) -> Result<(f64, DMatrix<f64>)> {
    let cache = PromptCache::new(model, instance)?;
    let mut dlogp: Vec<Vec<f64>> = instance.response_counts().iter().map(|k| vec![0.0; *k]).collect();
    let mut value = 0.0;
    for (x, i, j, w) in pair_weights(instance, mode) {
        let gap = cache.logp[x][i] - cache.logp[x][j];
        let u = sigmoid(gap);
        let star = instance.p_star(x, i, j)?;
        // ln u = -softplus(-gap), ln(1 - u) = -softplus(gap)
        let kl = xlogx(star) + xlogx(1.0 - star)
            + star * super::softplus(-gap)
            + (1.0 - star) * super::softplus(gap);
        value += w * kl;
        dlogp[x][i] += w * (u - star);
        dlogp[x][j] -= w * (u - star);
    }
    Ok((value, theta_gradient(model, instance, &cache, &dlogp, None)))
}

fn xlogx(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}
