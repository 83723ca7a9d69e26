//! Token-level KL divergence between baseline and candidate distributions.
//!
//! Stored distributions are top-K plus a tail mass, so the divergence is taken
//! over a coarsened vocabulary: every token listed by *both* sides keeps its
//! own cell, and everything else (tokens listed by one side only, plus both
//! tails) is merged into one "rest" cell whose mass is known exactly on each
//! side. Coarsening a partition can only lower KL, so the result equals the
//! dense divergence when K covers the vocabulary and is a lower bound
//! otherwise. Results are comparable only at equal K, which is why reports
//! carry `kl_top_k`.

use rayon::prelude::*;

use super::{require_mcq, MetricsError};
use crate::ingest::{PairedRun, SampleRecord, SparseDist};
use crate::sum::{logsumexp, mean};

/// Why a single-token divergence could not be computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKlError {
    /// Baseline puts mass where the candidate has none.
    DegenerateSupport,
}

/// `KL(baseline ‖ candidate)` for one token position.
///
/// Both inputs are renormalized first so that the small mass slack allowed
/// by the file format cannot drive the result below zero.
pub fn token_kl(baseline: &SparseDist, candidate: &SparseDist) -> Result<f64, TokenKlError> {
    let norm_p = baseline.log_total();
    let norm_q = candidate.log_total();

    let mut q_sorted: Vec<(u32, f64)> = candidate.entries.clone();
    q_sorted.sort_unstable_by_key(|&(t, _)| t);
    let lookup = |t: u32| {
        q_sorted
            .binary_search_by_key(&t, |&(id, _)| id)
            .ok()
            .map(|i| q_sorted[i].1 - norm_q)
    };

    let mut shared_terms = Vec::with_capacity(baseline.entries.len());
    let mut p_rest = Vec::new();
    let mut shared_q = Vec::with_capacity(baseline.entries.len());
    for &(t, lp) in &baseline.entries {
        let lp = lp - norm_p;
        match lookup(t) {
            Some(lq) => {
                shared_q.push(t);
                shared_terms.push(cell_term(lp, lq)?);
            }
            None => p_rest.push(lp),
        }
    }
    p_rest.push(baseline.tail_logmass - norm_p);

    shared_q.sort_unstable();
    let mut q_rest: Vec<f64> = candidate
        .entries
        .iter()
        .filter(|(t, _)| shared_q.binary_search(t).is_err())
        .map(|&(_, lq)| lq - norm_q)
        .collect();
    q_rest.push(candidate.tail_logmass - norm_q);

    shared_terms.push(cell_term(logsumexp(p_rest), logsumexp(q_rest))?);
    Ok(crate::sum::sum(shared_terms))
}

/// `p · ln(p / q)` for one cell given log-masses.
fn cell_term(lp: f64, lq: f64) -> Result<f64, TokenKlError> {
    if lp == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    if lq == f64::NEG_INFINITY {
        return Err(TokenKlError::DegenerateSupport);
    }
    Ok(lp.exp() * (lp - lq))
}

/// Mean over options of the mean over tokens of the token divergence, for one sample.
fn sample_kl(
    baseline: &SampleRecord,
    candidate: &SampleRecord,
    top_k: Option<usize>,
) -> Result<f64, MetricsError> {
    let base_opts = require_mcq(baseline)?;
    let cand_opts = require_mcq(candidate)?;
    let missing = || MetricsError::MissingDistributions {
        sample_id: baseline.sample_id.clone(),
    };

    let mut per_option = vec![0.0; base_opts.len()];
    for bo in base_opts {
        let co = cand_opts
            .iter()
            .find(|o| o.option_index == bo.option_index)
            .ok_or_else(missing)?;
        let mut per_token = Vec::with_capacity(bo.tokens.len());
        for (pos, (bt, ct)) in bo.tokens.iter().zip(&co.tokens).enumerate() {
            let (Some(bd), Some(cd)) = (&bt.dist, &ct.dist) else {
                return Err(missing());
            };
            let kl = match top_k {
                Some(k) => token_kl(&bd.truncated(k), &cd.truncated(k)),
                None => token_kl(bd, cd),
            };
            per_token.push(kl.map_err(|TokenKlError::DegenerateSupport| {
                MetricsError::DegenerateSupport {
                    sample_id: baseline.sample_id.clone(),
                    option: bo.option_index,
                    position: pos,
                }
            })?);
        }
        per_option[bo.option_index] = mean(per_token).ok_or_else(missing)?;
    }
    // Options are averaged in option_index order.
    Ok(mean(per_option).unwrap_or(0.0))
}

/// Dataset KL: mean over samples of the mean over options of the mean over
/// tokens of `KL(baseline ‖ candidate)`.
pub fn kl_divergence(paired: &PairedRun) -> Result<f64, MetricsError> {
    kl_divergence_at(paired, None)
}

/// As [`kl_divergence`], first truncating every distribution to its `top_k`
/// most probable entries (the rest folded into the tail).
pub fn kl_divergence_at(paired: &PairedRun, top_k: Option<usize>) -> Result<f64, MetricsError> {
    // Per-sample work may run on any thread; the reduction below is sequential
    // in pairing order so the result does not depend on scheduling.
    let per_sample: Vec<Result<f64, MetricsError>> = (0..paired.len())
        .into_par_iter()
        .map(|i| {
            let (b, c) = paired.pair_at(i);
            sample_kl(b, c, top_k)
        })
        .collect();
    let values = per_sample.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(mean(values).unwrap_or(0.0))
}

/// Largest number of listed entries in any stored distribution of either run.
pub fn observed_top_k(paired: &PairedRun) -> Option<usize> {
    paired
        .pairs()
        .flat_map(|(b, c)| [b, c])
        .flat_map(|r| r.options())
        .flat_map(|o| &o.tokens)
        .filter_map(|t| t.dist.as_ref().map(|d| d.entries.len()))
        .max()
}
