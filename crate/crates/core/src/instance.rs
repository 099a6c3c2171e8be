//! The finite bandit world: prompt distribution, per-prompt responses, the
//! ground-truth policy and the reference policy.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::oracle;

/// Tolerance used when checking that probability vectors are normalized.
pub const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub prob: f64,
    pub features: Vec<f64>,
    pub responses: Vec<String>,
    pub pi_star: Vec<f64>,
    pub pi_ref: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct InstanceDoc {
    prompts: Vec<Prompt>,
}

/// A validated bandit instance. Construction (including deserialization)
/// rejects any document that breaks the probability or feature invariants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceDoc", into = "InstanceDoc")]
pub struct BanditInstance {
    prompts: Vec<Prompt>,
}

impl TryFrom<InstanceDoc> for BanditInstance {
    type Error = Error;

    fn try_from(doc: InstanceDoc) -> Result<Self> {
        BanditInstance::new(doc.prompts)
    }
}

impl From<BanditInstance> for InstanceDoc {
    fn from(instance: BanditInstance) -> Self {
        InstanceDoc {
            prompts: instance.prompts,
        }
    }
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if let Some(bad) = p.iter().find(|v| !(v.is_finite() && **v > 0.0 && **v < 1.0)) {
        return Err(Error::validation(format!(
            "{what}: entry {bad} outside (0, 1)"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::validation(format!("{what}: sums to {sum}, not 1")));
    }
    Ok(())
}

impl BanditInstance {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::validation("instance has no prompts"));
        }
        let dim = prompts[0].features.len();
        if dim == 0 {
            return Err(Error::validation("prompt features must be nonempty"));
        }
        for (i, p) in prompts.iter().enumerate() {
            if prompts[..i].iter().any(|q| q.id == p.id) {
                return Err(Error::validation(format!("duplicate prompt id `{}`", p.id)));
            }
            if !(p.prob.is_finite() && p.prob > 0.0 && p.prob <= 1.0) {
                return Err(Error::validation(format!(
                    "prompt `{}`: probability {} outside (0, 1]",
                    p.id, p.prob
                )));
            }
            if p.features.len() != dim {
                return Err(Error::validation(format!(
                    "prompt `{}`: feature dimension {} != {dim}",
                    p.id,
                    p.features.len()
                )));
            }
            if p.features.iter().any(|f| !f.is_finite()) {
                return Err(Error::validation(format!(
                    "prompt `{}`: non-finite feature",
                    p.id
                )));
            }
            let k = p.responses.len();
            if k < 2 {
                return Err(Error::validation(format!(
                    "prompt `{}`: needs at least 2 responses, has {k}",
                    p.id
                )));
            }
            for (j, r) in p.responses.iter().enumerate() {
                if p.responses[..j].contains(r) {
                    return Err(Error::validation(format!(
                        "prompt `{}`: duplicate response id `{r}`",
                        p.id
                    )));
                }
            }
            if p.pi_star.len() != k || p.pi_ref.len() != k {
                return Err(Error::validation(format!(
                    "prompt `{}`: policy length does not match {k} responses",
                    p.id
                )));
            }
            check_distribution(&format!("prompt `{}` pi_star", p.id), &p.pi_star)?;
            check_distribution(&format!("prompt `{}` pi_ref", p.id), &p.pi_ref)?;
            if prompts[..i].iter().any(|q| q.features == p.features) {
                return Err(Error::validation(format!(
                    "prompt `{}`: feature vector duplicates another prompt",
                    p.id
                )));
            }
        }
        let total: f64 = prompts.iter().map(|p| p.prob).sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::validation(format!(
                "prompt probabilities sum to {total}, not 1"
            )));
        }
        Ok(BanditInstance { prompts })
    }

    /// Single-prompt instance with feature `[1]` and responses `y0, y1, ...`.
    pub fn single(pi_star: Vec<f64>, pi_ref: Vec<f64>) -> Result<Self> {
        let responses = (0..pi_star.len()).map(|i| format!("y{i}")).collect();
        BanditInstance::new(vec![Prompt {
            id: "x".into(),
            prob: 1.0,
            features: vec![1.0],
            responses,
            pi_star,
            pi_ref,
        }])
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompt(&self, x: usize) -> Result<&Prompt> {
        self.prompts
            .get(x)
            .ok_or_else(|| Error::UnknownPrompt(format!("#{x}")))
    }

    pub fn prompt_index(&self, id: &str) -> Result<usize> {
        self.prompts
            .iter()
            .position(|p| p.id == id)
            .ok_or_else(|| Error::UnknownPrompt(id.to_string()))
    }

    pub fn response_index(&self, x: usize, id: &str) -> Result<usize> {
        let p = self.prompt(x)?;
        p.responses
            .iter()
            .position(|r| r == id)
            .ok_or_else(|| Error::validation(format!("prompt `{}` has no response `{id}`", p.id)))
    }

    pub fn feature_dim(&self) -> usize {
        self.prompts[0].features.len()
    }

    pub fn max_responses(&self) -> usize {
        self.prompts.iter().map(|p| p.responses.len()).max().unwrap_or(0)
    }

    pub fn response_counts(&self) -> Vec<usize> {
        self.prompts.iter().map(|p| p.responses.len()).collect()
    }

    /// Ground-truth preference p*(y1 ≻ y2 | x) under the BT-optimal policy.
    pub fn p_star(&self, x: usize, y1: usize, y2: usize) -> Result<f64> {
        oracle::bt_preference(&self.prompt(x)?.pi_star, y1, y2)
    }

    /// Reference-induced preference p_ref(y1 ≻ y2 | x).
    pub fn p_ref(&self, x: usize, y1: usize, y2: usize) -> Result<f64> {
        oracle::bt_preference(&self.prompt(x)?.pi_ref, y1, y2)
    }

    /// Copy of this instance with one prompt's reference policy replaced.
    pub fn with_pi_ref(&self, x: usize, pi_ref: Vec<f64>) -> Result<Self> {
        let mut prompts = self.prompts.clone();
        prompts
            .get_mut(x)
            .ok_or_else(|| Error::UnknownPrompt(format!("#{x}")))?
            .pi_ref = pi_ref;
        BanditInstance::new(prompts)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            context: "bandit instance".into(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over the compact JSON encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("instance serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    /// Random instance for property tests and gradient checks: dense real
    /// features, 2..=`max_responses` responses per prompt, all probabilities
    /// bounded away from zero.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_prompts: usize,
        feature_dim: usize,
        max_responses: usize,
    ) -> Result<Self> {
        assert!(n_prompts >= 1 && feature_dim >= 1 && max_responses >= 2);
        let weights: Vec<f64> = (0..n_prompts).map(|_| rng.random_range(0.2..1.0)).collect();
        let probs = normalize(&weights);
        let prompts = (0..n_prompts)
            .map(|i| {
                let k = rng.random_range(2..=max_responses);
                Prompt {
                    id: format!("x{i}"),
                    prob: probs[i],
                    features: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    responses: (0..k).map(|j| format!("y{j}")).collect(),
                    pi_star: random_distribution(rng, k),
                    pi_ref: random_distribution(rng, k),
                }
            })
            .collect();
        BanditInstance::new(prompts)
    }
}

/// Random strictly positive distribution, entries at least ~0.05/k.
pub fn random_distribution<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    normalize(&w)
}

pub(crate) fn normalize(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}
