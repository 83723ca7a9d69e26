//! Seeded simulations of the two noise mechanisms behind compressed-model behavior.
//!
//! * [`flip_balance_experiment`]: MCQ answers whose option logits receive iid
//!   Gaussian noise. Correct answers are generated with larger top margins than
//!   incorrect ones, which makes incorrect answers change more often and keeps
//!   correct→incorrect and incorrect→correct counts close.
//! * [`perplexity_invariance_experiment`]: a synthetic next-token stream whose
//!   log-likelihoods receive symmetric Gaussian noise. Perplexity stays put
//!   while greedy agreement falls and KL divergence grows.
//!
//! Every random draw comes from a ChaCha8 stream keyed by `(seed, stream)`:
//! stream 0 builds the baseline, stream `1 + i` holds the noise for the `i`-th
//! σ of the (sorted) sweep. Cells are independent, so running them in parallel
//! or serially gives identical output.

mod flips;
mod perplexity;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use flips::{
    flip_balance_experiment, pooled, read_flips_csv, sigma_for_flips, synthesize_paired_run,
    write_flips_csv, SimulationOutcome, FLIPS_CSV_COLUMNS,
};
pub use perplexity::{
    perplexity_invariance_experiment, read_noise_csv, write_noise_csv, NoiseRow, NOISE_CSV_COLUMNS,
};

#[derive(Debug, Error, PartialEq)]
pub enum NoiseLabError {
    #[error("bad noiselab config: {0}")]
    BadConfig(String),
}

/// Top-margin distribution for generated questions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginModel {
    /// Mean top margin of questions the baseline answers correctly.
    pub correct_margin_mean: f64,
    /// Mean top margin of questions the baseline answers incorrectly.
    pub incorrect_margin_mean: f64,
    /// Beta variance as a fraction of its maximum `μ(1-μ)`.
    pub margin_spread: f64,
}

impl Default for MarginModel {
    fn default() -> Self {
        Self {
            correct_margin_mean: 0.7,
            incorrect_margin_mean: 0.45,
            margin_spread: 0.2,
        }
    }
}

/// Where the gold answer sits on questions the baseline gets wrong.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldPlacement {
    /// Among the non-top options, with probability equal to the model's own
    /// (renormalized) belief in each.
    #[default]
    Proportional,
    /// Uniformly among the non-top options.
    Uniform,
}

/// What the perplexity experiment perturbs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    /// Noise is added to per-token log-likelihoods and perplexity is taken on
    /// the perturbed values as-is. This is the construction under which
    /// symmetric noise leaves perplexity unchanged.
    #[default]
    LogLikelihood,
    /// Noise is added to logits which are then renormalized; perplexity is
    /// taken on the renormalized distribution and is *not* preserved.
    Logits,
}

/// Parameters of both experiments. Every field has a default, so config
/// files only need the keys they change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseLabConfig {
    pub n_questions: usize,
    /// Options per question (k).
    pub n_options: usize,
    pub margin_model: MarginModel,
    pub baseline_accuracy_target: f64,
    /// σ used by [`synthesize_paired_run`]; sweeps override it.
    pub noise_std: f64,
    pub seed: u64,
    pub gold_placement: GoldPlacement,
    /// Token count of the perplexity corpus.
    pub n_tokens: usize,
    pub vocab_size: usize,
    /// Standard deviation of the synthetic next-token logits.
    pub logit_scale: f64,
    pub noise_target: NoiseTarget,
    /// Pair corpus positions so the log-likelihood noise at the scored token
    /// is `+ε` at one position and `-ε` at its partner.
    pub antithetic: bool,
}

impl Default for NoiseLabConfig {
    fn default() -> Self {
        Self {
            n_questions: 10_000,
            n_options: 4,
            margin_model: MarginModel::default(),
            baseline_accuracy_target: 0.63,
            noise_std: 0.0,
            seed: 0,
            gold_placement: GoldPlacement::default(),
            n_tokens: 100_000,
            vocab_size: 32,
            logit_scale: 2.5,
            noise_target: NoiseTarget::default(),
            antithetic: true,
        }
    }
}

fn open_unit(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl NoiseLabConfig {
    pub fn validate(&self) -> Result<(), NoiseLabError> {
        let bad = |m: &str| Err(NoiseLabError::BadConfig(m.to_string()));
        let mm = &self.margin_model;
        if self.n_options < 2 {
            return bad("n_options must be at least 2");
        }
        if self.n_questions == 0 {
            return bad("n_questions must be positive");
        }
        if ![
            mm.correct_margin_mean,
            mm.incorrect_margin_mean,
            mm.margin_spread,
        ]
        .into_iter()
        .all(open_unit)
        {
            return bad("margin means and spread must lie in (0, 1)");
        }
        if mm.correct_margin_mean <= mm.incorrect_margin_mean {
            return bad("correct_margin_mean must exceed incorrect_margin_mean");
        }
        if !open_unit(self.baseline_accuracy_target) {
            return bad("baseline_accuracy_target must lie in (0, 1)");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if self.n_tokens == 0 {
            return bad("n_tokens must be positive");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return bad("logit_scale must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, NoiseLabError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| NoiseLabError::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) const BASELINE_STREAM: u64 = 0;

/// RNG for the `index`-th σ of a sweep.
pub(crate) fn noise_stream(index: usize) -> u64 {
    1 + index as u64
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sorted copy of a σ sweep; rejects negative or non-finite values.
pub(crate) fn sorted_sweep(sweep: &[f64]) -> Result<Vec<f64>, NoiseLabError> {
    if let Some(bad) = sweep.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(NoiseLabError::BadConfig(format!(
            "invalid sigma {bad} in sweep"
        )));
    }
    let mut sorted = sweep.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}
