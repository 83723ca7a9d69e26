use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::{
    noise_stream, rng_for, sorted_sweep, NoiseLabConfig, NoiseLabError, NoiseTarget,
    BASELINE_STREAM,
};
use crate::metrics::argmax_first;
use crate::sum::{logsumexp, CompensatedSum};

/// One σ of the perplexity experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct NoiseRow {
    pub sigma: f64,
    /// Corpus perplexity of the noisy model.
    pub perplexity: f64,
    /// Percent of positions where the noisy model's argmax is the corpus token.
    pub pct_greedy_match: f64,
    /// Mean per-position `KL(baseline ‖ noisy)`.
    pub kl_div: f64,
}

/// Baseline next-token log-probabilities (row-major, `vocab` per position)
/// and the corpus sampled from them.
struct Stream {
    vocab: usize,
    logprobs: Vec<f64>,
    corpus: Vec<usize>,
}

impl Stream {
    fn generate(config: &NoiseLabConfig) -> Self {
        let vocab = config.vocab_size;
        let mut rng = rng_for(config.seed, BASELINE_STREAM);
        let mut logprobs = Vec::with_capacity(config.n_tokens * vocab);
        let mut corpus = Vec::with_capacity(config.n_tokens);
        let mut logits = vec![0.0; vocab];
        for _ in 0..config.n_tokens {
            for l in logits.iter_mut() {
                *l = config.logit_scale * rng.sample::<f64, _>(StandardNormal);
            }
            let norm = logsumexp(logits.to_vec());
            let row_start = logprobs.len();
            logprobs.extend(logits.iter().map(|l| l - norm));
            let row = &logprobs[row_start..];

            let mut u = rng.random::<f64>();
            let mut token = vocab - 1;
            for (v, lp) in row.iter().enumerate() {
                let p = lp.exp();
                if u < p {
                    token = v;
                    break;
                }
                u -= p;
            }
            corpus.push(token);
        }
        Self {
            vocab,
            logprobs,
            corpus,
        }
    }

    fn row(&self, t: usize) -> &[f64] {
        &self.logprobs[t * self.vocab..(t + 1) * self.vocab]
    }
}

fn noise_row(stream: &Stream, config: &NoiseLabConfig, sigma: f64, stream_id: u64) -> NoiseRow {
    let mut rng = rng_for(config.seed, stream_id);
    let vocab = stream.vocab;
    let mut scores = vec![0.0; vocab];
    let mut ll = CompensatedSum::new();
    let mut kl = CompensatedSum::new();
    let mut greedy = 0usize;
    let mut partner_eps = 0.0;

    for (t, &token) in stream.corpus.iter().enumerate() {
        let base = stream.row(t);
        for (s, lp) in scores.iter_mut().zip(base) {
            *s = lp + sigma * rng.sample::<f64, _>(StandardNormal);
        }
        if config.antithetic {
            // Odd positions mirror the scored-token noise of their even partner.
            let eps = scores[token] - base[token];
            if t % 2 == 1 {
                scores[token] = base[token] - partner_eps;
            } else {
                partner_eps = eps;
            }
        }

        let noisy_norm = logsumexp(scores.to_vec());
        ll.add(match config.noise_target {
            NoiseTarget::LogLikelihood => scores[token],
            NoiseTarget::Logits => scores[token] - noisy_norm,
        });
        greedy += usize::from(argmax_first(&scores) == token);

        let base_norm = logsumexp(base.to_vec());
        let mut pos_kl = CompensatedSum::new();
        for (lp, s) in base.iter().zip(&scores) {
            let lp = lp - base_norm;
            pos_kl.add(lp.exp() * (lp - (s - noisy_norm)));
        }
        kl.add(pos_kl.value());
    }

    let n = stream.corpus.len() as f64;
    NoiseRow {
        sigma,
        perplexity: (-ll.value() / n).exp(),
        pct_greedy_match: 100.0 * greedy as f64 / n,
        kl_div: kl.value() / n,
    }
}

/// Scores a seeded synthetic corpus under the baseline and under noisy copies
/// of it, one row per σ in ascending order.
pub fn perplexity_invariance_experiment(
    config: &NoiseLabConfig,
    sweep: &[f64],
) -> Result<Vec<NoiseRow>, NoiseLabError> {
    config.validate()?;
    let sweep = sorted_sweep(sweep)?;
    let stream = Stream::generate(config);
    Ok(sweep
        .par_iter()
        .enumerate()
        .map(|(i, &sigma)| noise_row(&stream, config, sigma, noise_stream(i)))
        .collect())
}

pub const NOISE_CSV_COLUMNS: [&str; 4] = ["sigma", "perplexity", "pct_greedy_match", "kl_div"];

pub fn write_noise_csv(rows: &[NoiseRow], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(NOISE_CSV_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_noise_csv(input: impl std::io::Read) -> csv::Result<Vec<NoiseRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> NoiseLabConfig {
        NoiseLabConfig {
            n_tokens: 20_000,
            seed,
            ..NoiseLabConfig::default()
        }
    }

    #[test]
    fn zero_sigma_row_is_baseline() {
        let c = cfg(1);
        let rows = perplexity_invariance_experiment(&c, &[0.0]).unwrap();
        let stream = Stream::generate(&c);
        let lls: Vec<f64> = (0..stream.corpus.len())
            .map(|t| stream.row(t)[stream.corpus[t]])
            .collect();
        let base_ppl = crate::metrics::perplexity(&lls).unwrap();
        assert_eq!(rows[0].kl_div, 0.0);
        assert_eq!(rows[0].perplexity, base_ppl);
        let greedy = (0..stream.corpus.len())
            .filter(|&t| argmax_first(stream.row(t)) == stream.corpus[t])
            .count();
        assert_eq!(rows[0].pct_greedy_match, 100.0 * greedy as f64 / 20_000.0);
    }

    #[test]
    fn antithetic_pairs_cancel_exactly_in_mean() {
        let rows = perplexity_invariance_experiment(&cfg(2), &[0.0, 4.0]).unwrap();
        assert!((rows[1].perplexity / rows[0].perplexity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iid_noise_is_close_but_not_exact() {
        let c = NoiseLabConfig {
            antithetic: false,
            ..cfg(3)
        };
        let rows = perplexity_invariance_experiment(&c, &[0.0, 2.0]).unwrap();
        let ratio = rows[1].perplexity / rows[0].perplexity;
        // Mean noise has sd 2/sqrt(20000) ~ 0.014; allow 5 sd.
        assert!((ratio - 1.0).abs() < 0.075, "ratio {ratio}");
        assert_ne!(ratio, 1.0);
    }

    #[test]
    fn logits_mode_changes_perplexity() {
        let c = NoiseLabConfig {
            noise_target: NoiseTarget::Logits,
            ..cfg(4)
        };
        let rows = perplexity_invariance_experiment(&c, &[0.0, 3.0]).unwrap();
        assert!(rows[1].perplexity > rows[0].perplexity * 1.5, "{rows:?}");
    }

    #[test]
    fn distances_grow_with_sigma() {
        let rows = perplexity_invariance_experiment(&cfg(5), &[0.0, 1.0, 3.0, 5.0]).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].kl_div > w[0].kl_div);
            assert!(w[1].pct_greedy_match < w[0].pct_greedy_match);
        }
    }

    #[test]
    fn deterministic() {
        let a = perplexity_invariance_experiment(&cfg(6), &[0.0, 1.0]).unwrap();
        let b = perplexity_invariance_experiment(&cfg(6), &[1.0, 0.0]).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_noise_csv(&a, &mut buf).unwrap();
        assert!(buf.starts_with(NOISE_CSV_COLUMNS.join(",").as_bytes()));
        assert_eq!(read_noise_csv(buf.as_slice()).unwrap(), a);
    }
}
