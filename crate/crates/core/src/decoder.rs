//! Response generation with nucleus (top-p) sampling intersected with
//! top-k filtering, plus context polarity prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneBundle;
use crate::corpus::Polarity;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingConfig {
    pub top_p: f64,
    pub top_k: usize,
    /// Exponent of the `((5 + len) / 6)` length normalization used to rank
    /// candidates. With one candidate there is nothing to rank and it has no effect.
    pub length_penalty: f64,
    pub max_length: usize,
    pub num_candidates: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            top_p: 0.9,
            top_k: 10,
            length_penalty: 0.6,
            max_length: 40,
            num_candidates: 1,
            seed: 0,
            temperature: 1.0,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.top_k < 1 {
            return bad("top_k must be at least 1".into());
        }
        if self.max_length < 1 {
            return bad("max_length must be at least 1".into());
        }
        if self.num_candidates < 1 {
            return bad("num_candidates must be at least 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !self.length_penalty.is_finite() {
            return bad("length_penalty must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub token_ids: Vec<u32>,
    /// Size of the filtered support at every decoding step.
    pub per_step_kept_set_sizes: Vec<usize>,
    /// Probability rank (0 = most likely) of the token chosen at every step.
    pub per_step_chosen_ranks: Vec<usize>,
    /// Length-normalized scores of all candidates, when more than one was drawn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_scores: Vec<f64>,
}

/// Indices sorted by descending probability, lower index first on ties.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Number of leading ranked tokens that survive both filters: the smallest
/// prefix reaching cumulative mass `p`, cut to at most `k`. Always >= 1.
fn kept_count(probs: &[f64], order: &[usize], k: usize, p: f64) -> usize {
    let mut cumulative = 0.0;
    let mut nucleus = order.len();
    for (n, &i) in order.iter().enumerate() {
        cumulative += probs[i];
        if cumulative >= p {
            nucleus = n + 1;
            break;
        }
    }
    nucleus.min(k).max(1)
}

/// Zeroes everything outside the top-p nucleus intersected with the top-k
/// set and renormalizes the survivors.
pub fn filter_top_k_top_p(probs: &[f64], k: usize, p: f64) -> Vec<f64> {
    if probs.is_empty() {
        return Vec::new();
    }
    let order = ranked(probs);
    let kept = kept_count(probs, &order, k, p);
    let mass: f64 = order[..kept].iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &order[..kept] {
        out[i] = if mass > 0.0 { probs[i] / mass } else { 1.0 / kept as f64 };
    }
    out
}

/// Draws one index from an unnormalized non-negative weight vector.
pub fn sample_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        if u < w {
            return i;
        }
        u -= w;
        last = i;
    }
    last
}

/// Filters then samples. Returns the chosen index, its probability rank and
/// the kept support size.
pub fn sample_filtered(probs: &[f64], k: usize, p: f64, rng: &mut impl Rng) -> (usize, usize, usize) {
    let order = ranked(probs);
    let kept = kept_count(probs, &order, k, p);
    let weights: Vec<f64> = order[..kept].iter().map(|&i| probs[i]).collect();
    let rank = if weights.iter().all(|&w| w <= 0.0) {
        0
    } else {
        sample_index(&weights, rng)
    };
    (order[rank], rank, kept)
}

fn softmax(logits: &[f32], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l as f64 - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Length-normalized candidate score.
pub fn candidate_score(sum_log_prob: f64, length: usize, length_penalty: f64) -> f64 {
    sum_log_prob / ((5.0 + length as f64) / 6.0).powf(length_penalty)
}

struct Candidate {
    tokens: Vec<u32>,
    kept: Vec<usize>,
    ranks: Vec<usize>,
    score: f64,
}

pub fn generate(bundle: &BackboneBundle, context_text: &str, config: &DecodingConfig) -> Result<GenerationResult> {
    config.validate()?;
    if context_text.trim().is_empty() {
        return Err(Error::InvalidInput("empty context".into()));
    }
    let (memory, mask) = bundle.encode_text(context_text)?;
    let eos = bundle.eos_id();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut candidates = Vec::with_capacity(config.num_candidates);
    for _ in 0..config.num_candidates {
        let mut c = Candidate {
            tokens: Vec::new(),
            kept: Vec::new(),
            ranks: Vec::new(),
            score: 0.0,
        };
        let mut log_prob = 0.0;
        let mut steps = 0;
        while steps < config.max_length {
            let logits = bundle.next_token_logits(&memory, &mask, &c.tokens)?;
            let probs = softmax(&logits, config.temperature);
            let (token, rank, kept) = sample_filtered(&probs, config.top_k, config.top_p, &mut rng);
            log_prob += probs[token].ln();
            c.kept.push(kept);
            c.ranks.push(rank);
            steps += 1;
            if token as u32 == eos {
                break;
            }
            c.tokens.push(token as u32);
        }
        c.score = candidate_score(log_prob, steps, config.length_penalty);
        candidates.push(c);
    }
    let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s > scores[best] { i } else { best });
    let chosen = candidates.swap_remove(best);
    Ok(GenerationResult {
        text: bundle.tokenizer().decode(&chosen.tokens)?,
        token_ids: chosen.tokens,
        per_step_kept_set_sizes: chosen.kept,
        per_step_chosen_ranks: chosen.ranks,
        candidate_scores: if config.num_candidates > 1 { scores } else { Vec::new() },
    })
}

/// Argmax class and its softmax probability; ties resolve to positive.
pub fn polarity_from_logits(logits: &[f32]) -> Result<(Polarity, f64)> {
    if logits.len() != 2 || logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidInput(format!("expected two finite logits, got {logits:?}")));
    }
    let probs = softmax(logits, 1.0);
    let index = if probs[1] > probs[0] { 1 } else { 0 };
    let polarity = Polarity::from_index(index).expect("two classes");
    Ok((polarity, probs[index]))
}

pub fn predict_polarity(bundle: &BackboneBundle, context_text: &str) -> Result<(Polarity, f64)> {
    polarity_from_logits(&bundle.polarity_logits(context_text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let out = filter_top_k_top_p(&[0.5, 0.3, 0.15, 0.05], 10, 0.9);
        let expected = [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn top_k_one_is_argmax() {
        assert_eq!(filter_top_k_top_p(&[0.1, 0.6, 0.3], 1, 0.9), vec![0.0, 1.0, 0.0]);
        // Ties go to the lower index.
        assert_eq!(filter_top_k_top_p(&[0.4, 0.4, 0.2], 1, 1.0), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_filter() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let out = filter_top_k_top_p(&probs, probs.len(), 1.0);
        for (a, b) in out.iter().zip(probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn polarity_from_logits_cases() {
        assert_eq!(polarity_from_logits(&[0.0, 0.0]).unwrap(), (Polarity::Positive, 0.5));
        let (p, conf) = polarity_from_logits(&[3.0, -3.0]).unwrap();
        assert_eq!(p, Polarity::Positive);
        assert!((conf - 0.997_527_376).abs() < 1e-8);
        let (p, _) = polarity_from_logits(&[-1.0, 2.0]).unwrap();
        assert_eq!(p, Polarity::Negative);
        // Shift invariance of the argmax.
        let (a, ca) = polarity_from_logits(&[0.3, 1.1]).unwrap();
        let (b, cb) = polarity_from_logits(&[100.3, 101.1]).unwrap();
        assert_eq!(a, b);
        assert!((ca - cb).abs() < 1e-4);
    }

    #[test]
    fn config_validation() {
        assert!(DecodingConfig::default().validate().is_ok());
        let mut c = DecodingConfig::default();
        c.top_p = 1.5;
        assert!(c.validate().is_err());
        c.top_p = 0.0;
        assert!(c.validate().is_err());
        c = DecodingConfig { top_k: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn length_normalization() {
        assert_eq!(candidate_score(-6.0, 1, 0.6), -6.0);
        assert!((candidate_score(-6.0, 7, 1.0) - -3.0).abs() < 1e-12);
        assert_eq!(candidate_score(-6.0, 7, 0.0), -6.0);
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("non-zero mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-9).then(|| w.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn filtered_output_is_a_distribution(probs in simplex(12), k in 1usize..15, p in 0.01f64..=1.0) {
            let out = filter_top_k_top_p(&probs, k, p);
            prop_assert!(out.iter().all(|&x| x >= 0.0));
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(out.iter().filter(|&&x| x > 0.0).count() <= k);
            let argmax = ranked(&probs)[0];
            prop_assert!(out[argmax] > 0.0);
        }

        #[test]
        fn sampled_token_is_in_support(probs in simplex(9), k in 1usize..10, p in 0.01f64..=1.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (token, rank, kept) = sample_filtered(&probs, k, p, &mut rng);
            prop_assert!(rank < kept);
            prop_assert!(filter_top_k_top_p(&probs, k, p)[token] > 0.0 || probs[token] == 0.0 && kept == 1);
        }
    }
}
