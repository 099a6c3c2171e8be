//! Linear-softmax policy: logits(x) = thetaᵀ φ(x), masked to the prompt's
//! valid responses.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::instance::BanditInstance;

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    theta: DMatrix<f64>,
    /// Valid responses per prompt; columns at or past the count are masked.
    response_counts: Vec<usize>,
}

impl PolicyModel {
    pub fn new(theta: DMatrix<f64>, instance: &BanditInstance) -> Result<Self> {
        let (f, k) = (instance.feature_dim(), instance.max_responses());
        if theta.shape() != (f, k) {
            return Err(Error::Shape(format!(
                "theta is {}x{}, instance needs {f}x{k}",
                theta.nrows(),
                theta.ncols()
            )));
        }
        Ok(PolicyModel {
            theta,
            response_counts: instance.response_counts(),
        })
    }

    pub fn zeros(instance: &BanditInstance) -> Self {
        PolicyModel {
            theta: DMatrix::zeros(instance.feature_dim(), instance.max_responses()),
            response_counts: instance.response_counts(),
        }
    }

    /// Parameters whose softmax reproduces `policies` exactly (per prompt),
    /// with each prompt's last valid logit pinned to 0. Fails when the feature
    /// vectors cannot express the requested logits.
    pub fn from_policies(instance: &BanditInstance, policies: &[Vec<f64>]) -> Result<Self> {
        let n = instance.len();
        if policies.len() != n {
            return Err(Error::Shape(format!("{} policies for {n} prompts", policies.len())));
        }
        let (f, k) = (instance.feature_dim(), instance.max_responses());
        let mut targets = DMatrix::zeros(n, k);
        for (x, pi) in policies.iter().enumerate() {
            let kx = instance.prompts()[x].responses.len();
            if pi.len() != kx {
                return Err(Error::Shape(format!("policy {x} has {} entries, want {kx}", pi.len())));
            }
            if pi.iter().any(|p| !(*p > 0.0)) {
                return Err(Error::Domain(format!("policy {x} is not strictly positive")));
            }
            let anchor = pi[kx - 1].ln();
            for y in 0..kx {
                targets[(x, y)] = pi[y].ln() - anchor;
            }
        }
        let features = DMatrix::from_fn(n, f, |x, j| instance.prompts()[x].features[j]);
        let theta = features
            .svd(true, true)
            .solve(&targets, 1e-12)
            .map_err(|e| Error::Domain(format!("feature solve failed: {e}")))?;
        let model = PolicyModel::new(theta, instance)?;
        for (x, pi) in policies.iter().enumerate() {
            let got = model.policy(instance, x)?;
            let err = got.iter().zip(pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if err > 1e-9 {
                return Err(Error::Domain(format!(
                    "prompt features cannot represent the requested policy for prompt {x} (error {err:e})"
                )));
            }
        }
        Ok(model)
    }

    /// Initialization at the reference policy.
    pub fn reference_init(instance: &BanditInstance) -> Result<Self> {
        let refs: Vec<Vec<f64>> = instance.prompts().iter().map(|p| p.pi_ref.clone()).collect();
        PolicyModel::from_policies(instance, &refs)
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.theta
    }

    pub fn with_theta(&self, theta: DMatrix<f64>) -> Self {
        assert_eq!(theta.shape(), self.theta.shape());
        PolicyModel {
            theta,
            response_counts: self.response_counts.clone(),
        }
    }

    pub fn response_counts(&self) -> &[usize] {
        &self.response_counts
    }

    fn check(&self, instance: &BanditInstance, x: usize) -> Result<usize> {
        let prompt = instance.prompt(x)?;
        if prompt.features.len() != self.theta.nrows() {
            return Err(Error::Shape(format!(
                "feature dimension {} does not match theta rows {}",
                prompt.features.len(),
                self.theta.nrows()
            )));
        }
        let kx = prompt.responses.len();
        if self.response_counts.get(x) != Some(&kx) {
            return Err(Error::Shape(format!("mask for prompt {x} does not match instance")));
        }
        Ok(kx)
    }

    pub fn logits(&self, instance: &BanditInstance, x: usize) -> Result<Vec<f64>> {
        let kx = self.check(instance, x)?;
        let phi = &instance.prompts()[x].features;
        Ok((0..kx)
            .map(|y| (0..phi.len()).map(|f| self.theta[(f, y)] * phi[f]).sum())
            .collect())
    }

    /// Log-softmax over the prompt's valid responses.
    pub fn log_policy(&self, instance: &BanditInstance, x: usize) -> Result<Vec<f64>> {
        let logits = self.logits(instance, x)?;
        Ok(log_softmax(&logits))
    }

    pub fn policy(&self, instance: &BanditInstance, x: usize) -> Result<Vec<f64>> {
        let logits = self.logits(instance, x)?;
        Ok(softmax(&logits))
    }

    pub fn policies(&self, instance: &BanditInstance) -> Result<Vec<Vec<f64>>> {
        (0..instance.len()).map(|x| self.policy(instance, x)).collect()
    }
}

/// softmax(thetaᵀ φ(x)) restricted to the prompt's responses.
pub fn softmax_policy(model: &PolicyModel, instance: &BanditInstance, x: usize) -> Result<Vec<f64>> {
    model.policy(instance, x)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

/// theta_grad[f, y] += φ_f(x) * dlogits[y]
pub(crate) fn accumulate_feature_grad(grad: &mut DMatrix<f64>, features: &[f64], dlogits: &[f64]) {
    for (f, phi) in features.iter().enumerate() {
        if *phi == 0.0 {
            continue;
        }
        for (y, d) in dlogits.iter().enumerate() {
            grad[(f, y)] += phi * d;
        }
    }
}
