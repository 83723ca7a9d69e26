//! Seeded synthetic run generators shared by the benchmarks and the acceptance suite.

use modeldiff::{
    pair_runs, ModelRun, OptionScoring, PairedRun, RunHeader, SampleRecord, SparseDist, TokenScore,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const TASK: &str = "synthetic";

/// Shape of a generated baseline/candidate pair.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub n_samples: usize,
    pub n_options: usize,
    /// Tokens per option are drawn from `1..=max_tokens`.
    pub max_tokens: usize,
    pub vocab: usize,
    /// Store next-token distributions truncated to this many entries; `None` stores none.
    pub top_k: Option<usize>,
    /// Gaussian noise added to the baseline logits to get the candidate.
    pub sigma: f64,
}

impl Default for Shape {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            n_options: 4,
            max_tokens: 2,
            vocab: 16,
            top_k: None,
            sigma: 0.5,
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn token(id: u32, logits: &[f64], top_k: Option<usize>) -> TokenScore {
    let lp = log_softmax(logits);
    let t = TokenScore::new(id, lp[id as usize].min(0.0));
    match top_k {
        Some(k) => t.with_dist(SparseDist::dense(&lp).truncated(k)),
        None => t,
    }
}

/// Baseline and candidate runs sharing tokenization and gold answers.
pub fn runs(seed: u64, shape: Shape) -> (ModelRun, ModelRun) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = Vec::with_capacity(shape.n_samples);
    let mut cand = Vec::with_capacity(shape.n_samples);
    for s in 0..shape.n_samples {
        let id = format!("s{s:06}");
        let gold = rng.random_range(0..shape.n_options);
        let mut bo = Vec::with_capacity(shape.n_options);
        let mut co = Vec::with_capacity(shape.n_options);
        for o in 0..shape.n_options {
            let n_tok = rng.random_range(1..=shape.max_tokens);
            let mut bt = Vec::with_capacity(n_tok);
            let mut ct = Vec::with_capacity(n_tok);
            for _ in 0..n_tok {
                let tid = rng.random_range(0..shape.vocab) as u32;
                let logits: Vec<f64> = (0..shape.vocab)
                    .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let noisy: Vec<f64> = logits
                    .iter()
                    .map(|l| l + shape.sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                bt.push(token(tid, &logits, shape.top_k));
                ct.push(token(tid, &noisy, shape.top_k));
            }
            let text = format!("option {o} {}", "x".repeat(rng.random_range(0..8)));
            bo.push(OptionScoring::new(o, text.clone(), bt));
            co.push(OptionScoring::new(o, text, ct));
        }
        base.push(SampleRecord::multiple_choice(id.clone(), TASK, gold, bo));
        cand.push(SampleRecord::multiple_choice(id, TASK, gold, co));
    }
    let b = ModelRun::new(RunHeader::new("base", "fp16", TASK), base).expect("valid baseline");
    let c = ModelRun::new(
        RunHeader::new("base", format!("noise-{}", shape.sigma), TASK),
        cand,
    )
    .expect("valid candidate");
    (b, c)
}

pub fn paired_run(seed: u64, shape: Shape) -> PairedRun {
    let (b, c) = runs(seed, shape);
    pair_runs(b, c, true).expect("generated runs pair exactly")
}
