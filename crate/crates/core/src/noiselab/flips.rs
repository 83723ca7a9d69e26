use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use super::{
    noise_stream, rng_for, sorted_sweep, GoldPlacement, NoiseLabConfig, NoiseLabError,
    BASELINE_STREAM,
};
use crate::ingest::{
    pair_runs, ModelRun, OptionScoring, PairedRun, RunHeader, SampleRecord, SparseDist, TokenScore,
};
use crate::metrics::{
    argmax_first, kl_divergence, mean_margin_by_verdict, transitions, Normalization,
    TransitionMatrix,
};
use crate::sum::{logsumexp, mean};

const TASK_ID: &str = "noiselab";

/// One generated question: option log-probabilities (summing to one) and the gold option.
#[derive(Debug, Clone)]
struct Question {
    logprobs: Vec<f64>,
    gold: usize,
}

fn draw_questions(config: &NoiseLabConfig) -> Result<Vec<Question>, NoiseLabError> {
    config.validate()?;
    let mm = config.margin_model;
    let concentration = 1.0 / mm.margin_spread - 1.0;
    let beta = |mu: f64| {
        Beta::new(mu * concentration, (1.0 - mu) * concentration)
            .map_err(|e| NoiseLabError::BadConfig(format!("margin distribution: {e}")))
    };
    let correct_margin = beta(mm.correct_margin_mean)?;
    let incorrect_margin = beta(mm.incorrect_margin_mean)?;

    let k = config.n_options;
    let mut rng = rng_for(config.seed, BASELINE_STREAM);
    let mut slots: Vec<usize> = (0..k).collect();
    let mut questions = Vec::with_capacity(config.n_questions);
    for _ in 0..config.n_questions {
        let correct = rng.random::<f64>() < config.baseline_accuracy_target;
        let margin = if correct {
            correct_margin.sample(&mut rng)
        } else {
            incorrect_margin.sample(&mut rng)
        };
        // Ranked probabilities: best = second + margin, the others are
        // fractions of the second so the ranking is preserved.
        let rest: Vec<f64> = (2..k).map(|_| rng.random::<f64>()).collect();
        let second = (1.0 - margin) / (2.0 + rest.iter().sum::<f64>());
        let mut ranked = Vec::with_capacity(k);
        ranked.push(second + margin);
        ranked.push(second);
        ranked.extend(rest.iter().map(|v| second * v));

        slots.shuffle(&mut rng);
        let mut probs = vec![0.0; k];
        for (rank, &slot) in slots.iter().enumerate() {
            probs[slot] = ranked[rank];
        }
        let best = slots[0];
        let gold = if correct {
            best
        } else {
            match config.gold_placement {
                GoldPlacement::Uniform => slots[1 + rng.random_range(0..k - 1)],
                GoldPlacement::Proportional => {
                    let others = &ranked[1..];
                    let total: f64 = others.iter().sum();
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = k - 1;
                    for (i, p) in others.iter().enumerate() {
                        if u < *p {
                            pick = i + 1;
                            break;
                        }
                        u -= p;
                    }
                    slots[pick]
                }
            }
        };
        let lp: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let norm = logsumexp(lp.to_vec());
        questions.push(Question {
            logprobs: lp.into_iter().map(|x| x - norm).collect(),
            gold,
        });
    }
    Ok(questions)
}

fn option_label(i: usize) -> String {
    if i < 26 {
        char::from(b'A' + i as u8).to_string()
    } else {
        format!("opt{i}")
    }
}

/// MCQ record with one token per option; every token carries the full
/// distribution over the k options.
fn question_record(index: usize, gold: usize, logprobs: &[f64]) -> SampleRecord {
    let dist = SparseDist::dense(logprobs);
    let options = logprobs
        .iter()
        .enumerate()
        .map(|(i, &lp)| {
            OptionScoring::new(
                i,
                option_label(i),
                vec![TokenScore::new(i as u32, lp).with_dist(dist.clone())],
            )
        })
        .collect();
    SampleRecord::multiple_choice(format!("q{index:07}"), TASK_ID, gold, options)
}

fn build_run(model: &str, label: String, records: Vec<SampleRecord>) -> ModelRun {
    ModelRun::new(RunHeader::new(model, label, TASK_ID), records)
        .expect("generated records satisfy run invariants")
}

fn perturb(logprobs: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let noisy: Vec<f64> = logprobs
        .iter()
        .map(|lp| lp + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = logsumexp(noisy.to_vec());
    noisy.into_iter().map(|x| x - norm).collect()
}

fn sigma_label(sigma: f64) -> String {
    format!("gauss-sigma{sigma}")
}

fn pair_for(
    questions: &[Question],
    baseline: &ModelRun,
    seed: u64,
    sigma: f64,
    stream: u64,
) -> PairedRun {
    let candidate = if sigma == 0.0 {
        let mut run = baseline.clone();
        run.header.model_id = "noiselab-candidate".into();
        run.header.config_label = sigma_label(sigma);
        run
    } else {
        let mut rng = rng_for(seed, stream);
        let records = questions
            .iter()
            .enumerate()
            .map(|(i, q)| question_record(i, q.gold, &perturb(&q.logprobs, sigma, &mut rng)))
            .collect();
        build_run("noiselab-candidate", sigma_label(sigma), records)
    };
    pair_runs(baseline.clone(), candidate, true).expect("generated runs pair structurally")
}

fn baseline_run(questions: &[Question]) -> ModelRun {
    let records = questions
        .iter()
        .enumerate()
        .map(|(i, q)| question_record(i, q.gold, &q.logprobs))
        .collect();
    build_run("noiselab-baseline", "reference".into(), records)
}

/// Generates a baseline run and a candidate whose option logits carry iid
/// `N(0, noise_std²)` noise, renormalized, as a strictly paired run.
pub fn synthesize_paired_run(config: &NoiseLabConfig) -> Result<PairedRun, NoiseLabError> {
    let questions = draw_questions(config)?;
    let baseline = baseline_run(&questions);
    Ok(pair_for(
        &questions,
        &baseline,
        config.seed,
        config.noise_std,
        noise_stream(0),
    ))
}

/// Metrics of one simulated (σ, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationOutcome {
    pub sigma: f64,
    pub seed: u64,
    pub transitions: TransitionMatrix,
    pub mean_margin_correct: Option<f64>,
    pub mean_margin_incorrect: Option<f64>,
    /// Candidate minus baseline accuracy, percentage points.
    pub delta_accuracy: f64,
    pub flips_pct: f64,
    pub allflips_pct: f64,
    pub changed_given_correct_pct: Option<f64>,
    pub changed_given_incorrect_pct: Option<f64>,
    /// Of the baseline-incorrect answers that changed, percent that became correct.
    pub landed_correct_pct: Option<f64>,
    pub kl_div: f64,
}

impl SimulationOutcome {
    fn from_parts(
        sigma: f64,
        seed: u64,
        t: TransitionMatrix,
        margins: (Option<f64>, Option<f64>),
        kl_div: f64,
    ) -> Self {
        let changed_incorrect = t.ic + t.ii_diff;
        Self {
            sigma,
            seed,
            transitions: t,
            mean_margin_correct: margins.0,
            mean_margin_incorrect: margins.1,
            delta_accuracy: t.delta_accuracy_pp(),
            flips_pct: t.flips_pct(),
            allflips_pct: t.allflips_pct(),
            changed_given_correct_pct: t.changed_given_correct_pct(),
            changed_given_incorrect_pct: t.changed_given_incorrect_pct(),
            landed_correct_pct: (changed_incorrect > 0)
                .then(|| 100.0 * t.ic as f64 / changed_incorrect as f64),
            kl_div,
        }
    }

    /// `|ic - ci| / (ic + ci)`; `None` without flips.
    pub fn flip_imbalance(&self) -> Option<f64> {
        let t = &self.transitions;
        let flips = t.ic + t.ci;
        (flips > 0).then(|| t.ic.abs_diff(t.ci) as f64 / flips as f64)
    }
}

/// Sums transition counts over several outcomes (typically repeated seeds at
/// one σ) and averages the real-valued fields.
pub fn pooled(outcomes: &[SimulationOutcome]) -> Option<SimulationOutcome> {
    let first = outcomes.first()?;
    let t = outcomes
        .iter()
        .fold(TransitionMatrix::default(), |mut acc, o| {
            let x = &o.transitions;
            acc.n_pairs += x.n_pairs;
            acc.cc += x.cc;
            acc.ci += x.ci;
            acc.ic += x.ic;
            acc.ii_same += x.ii_same;
            acc.ii_diff += x.ii_diff;
            acc
        });
    let margins = (
        mean(outcomes.iter().filter_map(|o| o.mean_margin_correct)),
        mean(outcomes.iter().filter_map(|o| o.mean_margin_incorrect)),
    );
    let sigma = mean(outcomes.iter().map(|o| o.sigma)).unwrap_or(first.sigma);
    let kl = mean(outcomes.iter().map(|o| o.kl_div)).unwrap_or(0.0);
    Some(SimulationOutcome::from_parts(
        sigma, first.seed, t, margins, kl,
    ))
}

fn outcome(
    paired: &PairedRun,
    sigma: f64,
    seed: u64,
    margins: (Option<f64>, Option<f64>),
) -> SimulationOutcome {
    let t = transitions(paired, Normalization::None).expect("generated records are MCQ");
    let kl = kl_divergence(paired).expect("generated records carry full distributions");
    SimulationOutcome::from_parts(sigma, seed, t, margins, kl)
}

/// Runs the simulation at every σ of `sweep`; outcomes come back in ascending σ.
pub fn flip_balance_experiment(
    config: &NoiseLabConfig,
    sweep: &[f64],
) -> Result<Vec<SimulationOutcome>, NoiseLabError> {
    let sweep = sorted_sweep(sweep)?;
    let questions = draw_questions(config)?;
    let baseline = baseline_run(&questions);
    let margins =
        mean_margin_by_verdict(&baseline, Normalization::None).expect("generated records are MCQ");
    Ok(sweep
        .par_iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let paired = pair_for(&questions, &baseline, config.seed, sigma, noise_stream(i));
            outcome(&paired, sigma, config.seed, margins)
        })
        .collect())
}

/// Flip count at `sigma` straight from the questions, replaying the noise
/// draws of [`flip_balance_experiment`] at sweep index 0.
fn flip_count(questions: &[Question], seed: u64, sigma: f64) -> usize {
    if sigma == 0.0 {
        return 0;
    }
    let mut rng = rng_for(seed, noise_stream(0));
    questions
        .iter()
        .filter(|q| {
            let base = argmax_first(&q.logprobs) == q.gold;
            let cand = argmax_first(&perturb(&q.logprobs, sigma, &mut rng)) == q.gold;
            base != cand
        })
        .count()
}

/// Pooled flips percentage at `sigma` over per-seed question sets.
fn pooled_flips(sets: &[(u64, Vec<Question>)], sigma: f64) -> f64 {
    let flips: usize = sets
        .par_iter()
        .map(|(seed, qs)| flip_count(qs, *seed, sigma))
        .sum();
    let n: usize = sets.iter().map(|(_, qs)| qs.len()).sum();
    100.0 * flips as f64 / n as f64
}

/// Bisects for the σ at which pooled flips over `seeds` reach `target_pct`.
pub fn sigma_for_flips(
    config: &NoiseLabConfig,
    target_pct: f64,
    seeds: &[u64],
) -> Result<f64, NoiseLabError> {
    if !(target_pct > 0.0 && target_pct < 100.0) || seeds.is_empty() {
        return Err(NoiseLabError::BadConfig(
            "target flips must lie in (0, 100) with at least one seed".into(),
        ));
    }
    let sets = seeds
        .iter()
        .map(|&seed| {
            draw_questions(&NoiseLabConfig {
                seed,
                ..config.clone()
            })
            .map(|q| (seed, q))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (mut lo, mut hi) = (0.0, 0.25);
    while pooled_flips(&sets, hi) < target_pct {
        lo = hi;
        hi *= 2.0;
        if hi > 1024.0 {
            return Err(NoiseLabError::BadConfig(format!(
                "flips never reach {target_pct}% for this config"
            )));
        }
    }
    for _ in 0..24 {
        let mid = 0.5 * (lo + hi);
        if pooled_flips(&sets, mid) < target_pct {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

pub const FLIPS_CSV_COLUMNS: [&str; 17] = [
    "sigma",
    "seed",
    "n_pairs",
    "cc",
    "ci",
    "ic",
    "ii_same",
    "ii_diff",
    "flips_pct",
    "allflips_pct",
    "delta_acc",
    "chg_correct_pct",
    "chg_incorrect_pct",
    "landed_correct_pct",
    "mean_margin_correct",
    "mean_margin_incorrect",
    "kl_div",
];

pub fn write_flips_csv(outcomes: &[SimulationOutcome], out: impl Write) -> csv::Result<()> {
    fn opt(v: Option<f64>) -> String {
        v.map(|x| x.to_string()).unwrap_or_default()
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FLIPS_CSV_COLUMNS)?;
    for o in outcomes {
        let t = &o.transitions;
        w.write_record([
            o.sigma.to_string(),
            o.seed.to_string(),
            t.n_pairs.to_string(),
            t.cc.to_string(),
            t.ci.to_string(),
            t.ic.to_string(),
            t.ii_same.to_string(),
            t.ii_diff.to_string(),
            o.flips_pct.to_string(),
            o.allflips_pct.to_string(),
            o.delta_accuracy.to_string(),
            opt(o.changed_given_correct_pct),
            opt(o.changed_given_incorrect_pct),
            opt(o.landed_correct_pct),
            opt(o.mean_margin_correct),
            opt(o.mean_margin_incorrect),
            o.kl_div.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(serde::Deserialize)]
struct FlipsCsvRow {
    sigma: f64,
    seed: u64,
    n_pairs: usize,
    cc: usize,
    ci: usize,
    ic: usize,
    ii_same: usize,
    ii_diff: usize,
    kl_div: f64,
    mean_margin_correct: Option<f64>,
    mean_margin_incorrect: Option<f64>,
}

/// Reads a table written by [`write_flips_csv`]; derived columns are recomputed from the counts.
pub fn read_flips_csv(input: impl std::io::Read) -> csv::Result<Vec<SimulationOutcome>> {
    csv::Reader::from_reader(input)
        .deserialize::<FlipsCsvRow>()
        .map(|row| {
            let r = row?;
            let t = TransitionMatrix {
                n_pairs: r.n_pairs,
                cc: r.cc,
                ci: r.ci,
                ic: r.ic,
                ii_same: r.ii_same,
                ii_diff: r.ii_diff,
            };
            Ok(SimulationOutcome::from_parts(
                r.sigma,
                r.seed,
                t,
                (r.mean_margin_correct, r.mean_margin_incorrect),
                r.kl_div,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::serialize_run;
    use crate::metrics::top_margin;

    fn small(seed: u64) -> NoiseLabConfig {
        NoiseLabConfig {
            n_questions: 4_000,
            seed,
            ..NoiseLabConfig::default()
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let p = synthesize_paired_run(&small(1)).unwrap();
        assert_eq!(p.len(), 4_000);
        for (b, c) in p.pairs() {
            assert_eq!(b.options, c.options);
        }
        let o = flip_balance_experiment(&small(1), &[0.0]).unwrap();
        assert_eq!(o.len(), 1);
        assert_eq!(o[0].flips_pct, 0.0);
        assert_eq!(o[0].allflips_pct, 0.0);
        assert_eq!(o[0].kl_div, 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = NoiseLabConfig {
            noise_std: 0.5,
            ..small(3)
        };
        let a = synthesize_paired_run(&cfg).unwrap();
        let b = synthesize_paired_run(&cfg).unwrap();
        assert_eq!(serialize_run(&a.baseline), serialize_run(&b.baseline));
        assert_eq!(serialize_run(&a.candidate), serialize_run(&b.candidate));
        let c = synthesize_paired_run(&NoiseLabConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(serialize_run(&a.candidate), serialize_run(&c.candidate));
    }

    #[test]
    fn sweep_order_does_not_matter() {
        let a = flip_balance_experiment(&small(2), &[1.0, 0.0, 0.5]).unwrap();
        let b = flip_balance_experiment(&small(2), &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.iter().map(|o| o.sigma).collect::<Vec<_>>(),
            [0.0, 0.5, 1.0]
        );
    }

    #[test]
    fn baseline_matches_targets() {
        let cfg = NoiseLabConfig {
            n_questions: 20_000,
            ..small(5)
        };
        let p = synthesize_paired_run(&cfg).unwrap();
        let acc = crate::metrics::accuracy(&p.baseline, Normalization::None).unwrap();
        assert!((acc - 0.63).abs() < 0.02, "accuracy {acc}");
        let (c, i) = mean_margin_by_verdict(&p.baseline, Normalization::None).unwrap();
        assert!((c.unwrap() - 0.7).abs() < 0.02, "correct margin {c:?}");
        assert!((i.unwrap() - 0.45).abs() < 0.02, "incorrect margin {i:?}");
        for rec in p.baseline.iter().take(50) {
            let m = top_margin(rec, Normalization::None).unwrap();
            assert!((0.0..=1.0).contains(&m));
            assert!(rec.check().is_ok());
        }
    }

    #[test]
    fn uniform_landing_is_one_in_k_minus_one() {
        let cfg = NoiseLabConfig {
            n_questions: 40_000,
            gold_placement: GoldPlacement::Uniform,
            ..small(11)
        };
        let o = flip_balance_experiment(&cfg, &[1.5]).unwrap();
        let landed = o[0].landed_correct_pct.unwrap() / 100.0;
        assert!((landed - 1.0 / 3.0).abs() < 0.03, "landed {landed}");
    }

    #[test]
    fn pooling_sums_counts() {
        let a = flip_balance_experiment(&small(1), &[0.8])
            .unwrap()
            .remove(0);
        let b = flip_balance_experiment(&small(2), &[0.8])
            .unwrap()
            .remove(0);
        let p = pooled(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(p.transitions.n_pairs, 8_000);
        assert_eq!(p.transitions.ci, a.transitions.ci + b.transitions.ci);
        assert!((p.kl_div - 0.5 * (a.kl_div + b.kl_div)).abs() < 1e-15);
        assert!(pooled(&[]).is_none());
    }

    #[test]
    fn csv_shape() {
        let o = flip_balance_experiment(&small(1), &[0.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_flips_csv(&o, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(&FLIPS_CSV_COLUMNS.join(",")));
        assert_eq!(read_flips_csv(buf.as_slice()).unwrap(), o);
    }

    #[test]
    fn fast_flip_count_matches_record_path() {
        let c = NoiseLabConfig {
            n_questions: 2000,
            seed: 3,
            ..NoiseLabConfig::default()
        };
        let qs = draw_questions(&c).unwrap();
        for sigma in [0.0, 0.4, 1.3] {
            let o = flip_balance_experiment(&c, &[sigma]).unwrap().remove(0);
            assert_eq!(
                flip_count(&qs, 3, sigma),
                o.transitions.ci + o.transitions.ic
            );
        }
    }
}
