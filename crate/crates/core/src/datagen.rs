//! Preference data following the labeled-tuple generative process: draw a
//! prompt, draw a response pair, then label it with p*.
//!
//! All sampling uses `ChaCha8Rng::seed_from_u64(seed)` and draws in a fixed
//! order per tuple: prompt, then pair, then label. Categorical draws invert
//! the cumulative distribution with one uniform `f64` each, so fixtures are
//! reproducible across platforms.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{BanditInstance, NORMALIZATION_TOL};

/// How a response pair is drawn for a prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    /// Uniform over unordered distinct pairs.
    #[default]
    UniformPairs,
    /// Both responses i.i.d. from pi_ref, resampled until distinct.
    RefProduct,
}

impl std::str::FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-pairs" | "uniform" => Ok(PairMode::UniformPairs),
            "ref-product" => Ok(PairMode::RefProduct),
            _ => Err(Error::validation(format!(
                "unknown pair mode `{s}` (expected uniform-pairs or ref-product)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub prompt: usize,
    pub winner: usize,
    pub loser: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedTuple {
    pub tuple: PreferenceTuple,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    UniformPairs,
    RefProduct,
    Degenerate,
}

impl From<PairMode> for DatasetMode {
    fn from(m: PairMode) -> Self {
        match m {
            PairMode::UniformPairs => DatasetMode::UniformPairs,
            PairMode::RefProduct => DatasetMode::RefProduct,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub mode: DatasetMode,
    pub n: usize,
    pub instance_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    tuples: Vec<PreferenceTuple>,
    provenance: Provenance,
}

/// Unordered distinct pairs (i < j) in lexical order.
pub fn unordered_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect()
}

fn draw_categorical<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn check_pairs(instance: &BanditInstance) -> Result<()> {
    if let Some(p) = instance.prompts().iter().find(|p| p.responses.len() < 2) {
        return Err(Error::validation(format!(
            "prompt `{}` has fewer than 2 responses",
            p.id
        )));
    }
    Ok(())
}

/// Draws `n` labeled tuples from an existing generator.
pub fn sample_with_rng<R: Rng + ?Sized>(
    instance: &BanditInstance,
    n: usize,
    mode: PairMode,
    rng: &mut R,
) -> Result<Vec<PreferenceTuple>> {
    check_pairs(instance)?;
    let prompt_probs: Vec<f64> = instance.prompts().iter().map(|p| p.prob).collect();
    let pairs: Vec<Vec<(usize, usize)>> = instance
        .prompts()
        .iter()
        .map(|p| unordered_pairs(p.responses.len()))
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = draw_categorical(rng, &prompt_probs);
        let prompt = &instance.prompts()[x];
        let (y1, y2) = match mode {
            PairMode::UniformPairs => pairs[x][rng.random_range(0..pairs[x].len())],
            PairMode::RefProduct => loop {
                let a = draw_categorical(rng, &prompt.pi_ref);
                let b = draw_categorical(rng, &prompt.pi_ref);
                if a != b {
                    break (a, b);
                }
            },
        };
        let p1 = instance.p_star(x, y1, y2)?;
        let u: f64 = rng.random();
        let (winner, loser) = if u < p1 { (y1, y2) } else { (y2, y1) };
        out.push(PreferenceTuple {
            prompt: x,
            winner,
            loser,
        });
    }
    Ok(out)
}

pub fn sample_tuples(
    instance: &BanditInstance,
    n: usize,
    mode: PairMode,
    seed: u64,
) -> Result<PreferenceDataset> {
    if n == 0 {
        return Err(Error::validation("sample count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tuples = sample_with_rng(instance, n, mode, &mut rng)?;
    Ok(PreferenceDataset {
        tuples,
        provenance: Provenance {
            seed: Some(seed),
            mode: mode.into(),
            n,
            instance_hash: instance.content_hash(),
        },
    })
}

/// Probability of each unordered pair {i, j} (i < j) for prompt `x`.
fn pair_probabilities(instance: &BanditInstance, x: usize, mode: PairMode) -> Vec<((usize, usize), f64)> {
    let prompt = &instance.prompts()[x];
    let pairs = unordered_pairs(prompt.responses.len());
    match mode {
        PairMode::UniformPairs => {
            let w = 1.0 / pairs.len() as f64;
            pairs.into_iter().map(|p| (p, w)).collect()
        }
        PairMode::RefProduct => {
            let r = &prompt.pi_ref;
            let distinct = 1.0 - r.iter().map(|v| v * v).sum::<f64>();
            pairs
                .into_iter()
                .map(|(i, j)| ((i, j), 2.0 * r[i] * r[j] / distinct))
                .collect()
        }
    }
}

/// Every ordered labeled outcome (x, winner, loser) with its exact
/// probability P(x) P(pair) p*(winner ≻ loser).
pub fn population_weights(instance: &BanditInstance, mode: PairMode) -> Result<Vec<WeightedTuple>> {
    check_pairs(instance)?;
    let mut out = Vec::new();
    for (x, prompt) in instance.prompts().iter().enumerate() {
        for ((i, j), pw) in pair_probabilities(instance, x, mode) {
            let p = instance.p_star(x, i, j)?;
            let base = prompt.prob * pw;
            out.push(WeightedTuple {
                tuple: PreferenceTuple { prompt: x, winner: i, loser: j },
                weight: base * p,
            });
            out.push(WeightedTuple {
                tuple: PreferenceTuple { prompt: x, winner: j, loser: i },
                weight: base * (1.0 - p),
            });
        }
    }
    let total: f64 = out.iter().map(|w| w.weight).sum();
    debug_assert!((total - 1.0).abs() < NORMALIZATION_TOL, "weights sum to {total}");
    Ok(out)
}

/// Unordered pair weights P(x) P(pair) without labels, used by oracles that
/// need E over pairs of a function of p*.
pub fn pair_weights(instance: &BanditInstance, mode: PairMode) -> Vec<(usize, usize, usize, f64)> {
    instance
        .prompts()
        .iter()
        .enumerate()
        .flat_map(|(x, prompt)| {
            pair_probabilities(instance, x, mode)
                .into_iter()
                .map(move |((i, j), w)| (x, i, j, prompt.prob * w))
        })
        .collect()
}

/// One tuple per unordered pair per prompt, the higher-pi_star response
/// always winning (lower index on ties).
pub fn degenerate_dataset(instance: &BanditInstance) -> PreferenceDataset {
    let mut tuples = Vec::new();
    for (x, prompt) in instance.prompts().iter().enumerate() {
        let s = &prompt.pi_star;
        for (i, j) in unordered_pairs(s.len()) {
            let (winner, loser) = if s[j] > s[i] { (j, i) } else { (i, j) };
            tuples.push(PreferenceTuple { prompt: x, winner, loser });
        }
    }
    let n = tuples.len();
    PreferenceDataset {
        tuples,
        provenance: Provenance {
            seed: None,
            mode: DatasetMode::Degenerate,
            n,
            instance_hash: instance.content_hash(),
        },
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    prompt_id: String,
    winner_id: String,
    loser_id: String,
}

impl PreferenceDataset {
    /// Validates tuples against `instance` and wraps them.
    pub fn from_tuples(
        instance: &BanditInstance,
        tuples: Vec<PreferenceTuple>,
        provenance: Provenance,
    ) -> Result<Self> {
        for (i, t) in tuples.iter().enumerate() {
            let prompt = instance.prompt(t.prompt)?;
            let k = prompt.responses.len();
            if t.winner >= k || t.loser >= k {
                return Err(Error::validation(format!("tuple {i}: response index out of range")));
            }
            if t.winner == t.loser {
                return Err(Error::validation(format!("tuple {i}: winner equals loser")));
            }
        }
        Ok(PreferenceDataset { tuples, provenance })
    }

    pub fn tuples(&self) -> &[PreferenceTuple] {
        &self.tuples
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn to_csv_string(&self, instance: &BanditInstance) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in &self.tuples {
            let p = instance.prompt(t.prompt)?;
            w.serialize(CsvRow {
                prompt_id: p.id.clone(),
                winner_id: p.responses[t.winner].clone(),
                loser_id: p.responses[t.loser].clone(),
            })
            .map_err(|source| Error::Csv { context: "dataset".into(), source })?;
        }
        if self.tuples.is_empty() {
            w.write_record(["prompt_id", "winner_id", "loser_id"])
                .map_err(|source| Error::Csv { context: "dataset".into(), source })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("provenance.json")
    }

    /// Writes the CSV and its provenance sidecar next to it.
    pub fn save(&self, instance: &BanditInstance, csv_path: impl AsRef<Path>) -> Result<()> {
        let path = csv_path.as_ref();
        std::fs::write(path, self.to_csv_string(instance)?).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(instance: &BanditInstance, csv_path: impl AsRef<Path>) -> Result<Self> {
        let path = csv_path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|source| Error::Csv {
            context: path.display().to_string(),
            source,
        })?;
        let mut tuples = Vec::new();
        for row in reader.deserialize::<CsvRow>() {
            let row = row.map_err(|source| Error::Csv {
                context: path.display().to_string(),
                source,
            })?;
            let x = instance.prompt_index(&row.prompt_id)?;
            tuples.push(PreferenceTuple {
                prompt: x,
                winner: instance.response_index(x, &row.winner_id)?,
                loser: instance.response_index(x, &row.loser_id)?,
            });
        }
        let side = Self::sidecar_path(path);
        let provenance = match std::fs::read_to_string(&side) {
            Ok(text) => serde_json::from_str(&text).map_err(|source| Error::Json {
                context: side.display().to_string(),
                source,
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Provenance {
                seed: None,
                mode: DatasetMode::UniformPairs,
                n: tuples.len(),
                instance_hash: instance.content_hash(),
            },
            Err(e) => return Err(Error::io(side, e)),
        };
        PreferenceDataset::from_tuples(instance, tuples, provenance)
    }
}
