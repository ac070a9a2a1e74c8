//! Automated evaluation (gold-response perplexity, corpus BLEU-1..4) and the
//! significance tests used for human preference and rating studies.

use std::collections::BTreeMap;
use std::collections::HashMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::backbone::BackboneBundle;
use crate::corpus::TrainingExample;
use crate::decoder::{generate, DecodingConfig};
use crate::error::{Error, Result};
use crate::objectives::token_nll_sum;
use crate::tokenizer::split_words;

pub const MAX_BLEU_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    /// Cumulative BLEU-n (geometric mean of precisions 1..=n, times the
    /// brevity penalty) for n = 1..=4.
    pub bleu_n: BTreeMap<usize, f64>,
    pub avg_bleu: f64,
    pub num_examples: usize,
}

/// Teacher-forced logits for gold targets, aligned with their ids and mask.
#[derive(Debug, Clone)]
pub struct ScoredBatch {
    pub logits: Tensor,
    pub targets: Tensor,
    pub mask: Tensor,
}

/// Anything that can score gold responses given their contexts.
pub trait TeacherForcedScorer {
    fn score_batch(&self, examples: &[TrainingExample]) -> Result<ScoredBatch>;
}

impl TeacherForcedScorer for BackboneBundle {
    fn score_batch(&self, examples: &[TrainingExample]) -> Result<ScoredBatch> {
        let batch = self.batch(examples)?;
        let enc = self.encode_context(&batch.context_ids, &batch.context_mask)?;
        let (logits, _) = self.decode_teacher_forced(&enc, &batch.context_mask, &batch.target_ids)?;
        Ok(ScoredBatch {
            logits,
            targets: batch.target_ids,
            mask: batch.target_mask,
        })
    }
}

/// Exponentiated token-weighted mean negative log-likelihood.
pub fn perplexity_from_nll(total_nll: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::InvalidInput("perplexity over zero tokens".into()));
    }
    Ok((total_nll / tokens as f64).exp())
}

/// Gold-response perplexity, pooling token counts across all examples.
pub fn perplexity<S: TeacherForcedScorer + ?Sized>(
    model: &S,
    examples: &[TrainingExample],
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("perplexity over an empty example set".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let scored = model.score_batch(chunk)?;
        let (nll, count) = token_nll_sum(&scored.logits, &scored.targets, &scored.mask)?;
        total += nll.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        tokens += count;
    }
    perplexity_from_nll(total, tokens)
}

fn bleu_tokens(text: &str) -> Vec<String> {
    split_words(text).into_iter().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// Corpus-level modified n-gram precision for n = 1..=4.
    pub precisions: [f64; MAX_BLEU_ORDER],
    pub brevity_penalty: f64,
    /// Cumulative BLEU-1..4.
    pub bleu: [f64; MAX_BLEU_ORDER],
    pub avg_bleu: f64,
}

/// Corpus BLEU over lowercased whitespace/punctuation tokens, one reference
/// per hypothesis, no smoothing.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::InvalidInput("BLEU over an empty corpus".into()));
    }
    let mut matches = [0usize; MAX_BLEU_ORDER];
    let mut totals = [0usize; MAX_BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h = bleu_tokens(h.as_ref());
        let r = bleu_tokens(r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_BLEU_ORDER {
            let ref_counts = ngram_counts(&r, n);
            for (gram, count) in ngram_counts(&h, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    let precisions: [f64; MAX_BLEU_ORDER] = std::array::from_fn(|i| {
        if totals[i] == 0 {
            0.0
        } else {
            matches[i] as f64 / totals[i] as f64
        }
    });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu: [f64; MAX_BLEU_ORDER] = std::array::from_fn(|i| {
        let p = &precisions[..=i];
        if p.iter().any(|&x| x == 0.0) {
            0.0
        } else {
            brevity_penalty * (p.iter().map(|x| x.ln()).sum::<f64>() / p.len() as f64).exp()
        }
    });
    Ok(BleuScore {
        precisions,
        brevity_penalty,
        bleu,
        avg_bleu: bleu.iter().sum::<f64>() / MAX_BLEU_ORDER as f64,
    })
}

/// Generates a reply for every example and reports gold perplexity and BLEU.
pub fn evaluate(
    bundle: &BackboneBundle,
    examples: &[TrainingExample],
    decoding: &DecodingConfig,
    batch_size: usize,
) -> Result<(EvalReport, Vec<String>)> {
    let ppl = perplexity(bundle, examples, batch_size)?;
    let mut hypotheses = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let config = DecodingConfig {
            seed: decoding.seed.wrapping_add(i as u64),
            ..decoding.clone()
        };
        hypotheses.push(generate(bundle, &ex.context_text, &config)?.text);
    }
    let references: Vec<&str> = examples.iter().map(|e| e.target_text.as_str()).collect();
    let bleu = corpus_bleu(&hypotheses, &references)?;
    let report = EvalReport {
        ppl,
        bleu_n: (1..=MAX_BLEU_ORDER).map(|n| (n, bleu.bleu[n - 1])).collect(),
        avg_bleu: bleu.avg_bleu,
        num_examples: examples.len(),
    };
    Ok((report, hypotheses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbTestResult {
    pub wins_a: u64,
    pub wins_b: u64,
    pub p_value: f64,
    pub significant_at_05: bool,
}

/// Row `n` of Pascal's triangle, exact for n <= 127.
fn binomial_row(n: u64) -> Vec<u128> {
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(1);
        next.extend(row.windows(2).map(|w| w[0] + w[1]));
        next.push(1);
        row = next;
    }
    row
}

fn ln_choose(n: u64, k: u64) -> f64 {
    statrs::function::factorial::ln_binomial(n, k)
}

/// Exact two-sided binomial test against p = 0.5: the probability of every
/// outcome no more likely than the observed one.
pub fn binomial_ab_test(wins_a: u64, n: u64) -> Result<AbTestResult> {
    if n == 0 || wins_a > n {
        return Err(Error::InvalidInput(format!("need 0 <= wins_a <= n and n >= 1, got {wins_a}/{n}")));
    }
    let p_value = if n <= 127 {
        let row = binomial_row(n);
        let observed = row[wins_a as usize];
        let tail: u128 = row.iter().filter(|&&c| c <= observed).sum();
        tail as f64 / 2f64.powi(n as i32)
    } else {
        // Relative slack for rounding in log space.
        let observed = ln_choose(n, wins_a);
        let ln2n = n as f64 * std::f64::consts::LN_2;
        (0..=n)
            .map(|i| ln_choose(n, i))
            .filter(|&c| c <= observed + 1e-7)
            .map(|c| (c - ln2n).exp())
            .sum::<f64>()
    }
    .min(1.0);
    Ok(AbTestResult {
        wins_a,
        wins_b: n - wins_a,
        p_value,
        significant_at_05: p_value < 0.05,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MwuMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTestResult {
    /// U for sample a: the number of (a, b) pairs with a > b, ties counting half.
    pub u_statistic: f64,
    /// U for sample b; `u_statistic + u_b = n_a * n_b`.
    pub u_b: f64,
    pub p_value: f64,
    pub method: MwuMethod,
}

/// Largest `n_a * n_b` for which the permutation distribution is enumerated.
pub const EXACT_MWU_LIMIT: usize = 144;

/// Twice the midranks of the pooled sample (integers even with ties).
fn doubled_midranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end; doubled mean = start+1+end.
        for &i in &order[start..end] {
            ranks[i] = (start + 1 + end) as u64;
        }
        start = end;
    }
    ranks
}

/// Two-sided Mann-Whitney U test. Exact when `n_a * n_b <= 144`, otherwise
/// a tie-corrected normal approximation with continuity correction.
pub fn mann_whitney_u(sample_a: &[f64], sample_b: &[f64]) -> Result<RatingTestResult> {
    let method = if sample_a.len() * sample_b.len() <= EXACT_MWU_LIMIT {
        MwuMethod::Exact
    } else {
        MwuMethod::Normal
    };
    mann_whitney_u_with(sample_a, sample_b, method)
}

pub fn mann_whitney_u_with(sample_a: &[f64], sample_b: &[f64], method: MwuMethod) -> Result<RatingTestResult> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::InvalidInput("Mann-Whitney U needs two non-empty samples".into()));
    }
    if sample_a.iter().chain(sample_b).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("Mann-Whitney U samples must be finite".into()));
    }
    let (n1, n2) = (sample_a.len() as u64, sample_b.len() as u64);
    let pooled: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    let ranks = doubled_midranks(&pooled);
    let rank_sum_a: u64 = ranks[..sample_a.len()].iter().sum();
    // 2U = 2R - n1(n1+1), an exact integer.
    let twice_u = rank_sum_a as i64 - (n1 * (n1 + 1)) as i64;
    let u_a = twice_u as f64 / 2.0;
    let product = (n1 * n2) as f64;
    let p_value = match method {
        MwuMethod::Exact if n1 <= n2 => exact_mwu_p(&ranks, sample_a.len(), twice_u),
        MwuMethod::Exact => {
            // The distribution is symmetric in the two samples; enumerate the smaller one.
            let swapped: Vec<u64> = ranks[sample_a.len()..].iter().chain(&ranks[..sample_a.len()]).copied().collect();
            exact_mwu_p(&swapped, sample_b.len(), 2 * (n1 * n2) as i64 - twice_u)
        }
        MwuMethod::Normal => normal_mwu_p(&ranks, n1, n2, u_a),
    };
    Ok(RatingTestResult {
        u_statistic: u_a,
        u_b: product - u_a,
        p_value: p_value.min(1.0),
        method,
    })
}

/// Enumerates the distribution of the doubled rank sum over every way of
/// choosing `n1` of the pooled ranks.
fn exact_mwu_p(ranks: &[u64], n1: usize, twice_u: i64) -> f64 {
    let max_sum: usize = ranks.iter().map(|&r| r as usize).sum();
    // ways[j][s]: subsets of size j with doubled rank sum s.
    let mut ways = vec![vec![0u128; max_sum + 1]; n1 + 1];
    ways[0][0] = 1;
    for &r in ranks {
        let r = r as usize;
        for j in (1..=n1).rev() {
            let (lower, upper) = ways.split_at_mut(j);
            let (prev, cur) = (&lower[j - 1], &mut upper[0]);
            for s in (r..=max_sum).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let n2 = (ranks.len() - n1) as i64;
    let centre = n1 as i64 * n2;
    let offset = (n1 * (n1 + 1)) as i64;
    let observed = (twice_u - centre).abs();
    let (mut extreme, mut total) = (0u128, 0u128);
    for (s, &count) in ways[n1].iter().enumerate() {
        if count == 0 {
            continue;
        }
        total += count;
        if (s as i64 - offset - centre).abs() >= observed {
            extreme += count;
        }
    }
    extreme as f64 / total as f64
}

fn normal_mwu_p(ranks: &[u64], n1: u64, n2: u64, u_a: f64) -> f64 {
    let n = (n1 + n2) as f64;
    let mut counts: HashMap<u64, u64> = HashMap::new();
    for &r in ranks {
        *counts.entry(r).or_default() += 1;
    }
    let tie_term: f64 = counts.values().map(|&t| (t * t * t - t) as f64).sum();
    let variance = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if variance <= 0.0 {
        return 1.0;
    }
    let mean = (n1 * n2) as f64 / 2.0;
    let z = ((u_a - mean).abs() - 0.5).max(0.0) / variance.sqrt();
    erfc(z / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_identity_and_disjoint() {
        let s = corpus_bleu(&["the cat sat on the mat"], &["The cat sat on the mat"]).unwrap();
        assert_eq!(s.bleu, [1.0; 4]);
        assert_eq!(s.avg_bleu, 1.0);
        let s = corpus_bleu(&["a b c d"], &["w x y z"]).unwrap();
        assert_eq!(s.bleu, [0.0; 4]);
        assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn bleu_brevity_penalty_case() {
        let s = corpus_bleu(&["the cat sat"], &["the cat sat down"]).unwrap();
        let bp = (1.0f64 - 4.0 / 3.0).exp();
        assert_eq!(s.precisions[0], 1.0);
        assert_eq!(s.precisions[1], 1.0);
        assert_eq!(s.precisions[2], 1.0);
        assert_eq!(s.precisions[3], 0.0);
        assert!((s.brevity_penalty - bp).abs() < 1e-12);
        assert!((s.bleu[0] - bp).abs() < 1e-12);
        assert!((s.bleu[1] - bp).abs() < 1e-12);
        assert_eq!(s.bleu[3], 0.0);
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        let s = corpus_bleu(&["the the the the"], &["the cat"]).unwrap();
        assert_eq!(s.precisions[0], 0.25);
    }

    #[test]
    fn binomial_cases() {
        assert_eq!(binomial_ab_test(5, 10).unwrap().p_value, 1.0);
        assert_eq!(binomial_ab_test(8, 10).unwrap().p_value, 0.109375);
        let r = binomial_ab_test(10, 10).unwrap();
        assert_eq!(r.p_value, 2.0 / 1024.0);
        assert!(r.significant_at_05);
        assert_eq!(r.wins_b, 0);
        assert!(binomial_ab_test(3, 2).is_err());
        assert!(binomial_ab_test(0, 0).is_err());
    }

    #[test]
    fn binomial_log_space_path_agrees_near_switch() {
        // n = 127 uses exact counts; compare with the log-space sum directly.
        let n = 127u64;
        for k in [40u64, 55, 63, 64, 80] {
            let exact = binomial_ab_test(k, n).unwrap().p_value;
            let observed = ln_choose(n, k);
            let approx: f64 = (0..=n)
                .map(|i| ln_choose(n, i))
                .filter(|&c| c <= observed + 1e-7)
                .map(|c| (c - n as f64 * std::f64::consts::LN_2).exp())
                .sum();
            assert!((exact - approx.min(1.0)).abs() < 1e-9, "k={k}: {exact} vs {approx}");
        }
        let big = binomial_ab_test(150, 200).unwrap();
        assert!(big.p_value < 1e-10);
    }

    #[test]
    fn mwu_cases() {
        let r = mann_whitney_u(&[1., 2., 3.], &[4., 5., 6.]).unwrap();
        assert_eq!(r.u_statistic, 0.0);
        assert_eq!(r.u_b, 9.0);
        assert!((r.p_value - 0.1).abs() < 1e-12);
        assert_eq!(r.method, MwuMethod::Exact);

        let r = mann_whitney_u(&[4., 5., 6.], &[1., 2., 3.]).unwrap();
        assert_eq!(r.u_statistic, 9.0);

        let r = mann_whitney_u(&[3.; 4], &[3.; 5]).unwrap();
        assert_eq!(r.u_statistic, 10.0);
        assert_eq!(r.p_value, 1.0);
        let r = mann_whitney_u_with(&[3.; 4], &[3.; 5], MwuMethod::Normal).unwrap();
        assert_eq!(r.p_value, 1.0);

        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn midranks() {
        assert_eq!(doubled_midranks(&[1., 2., 2., 4.]), vec![2, 5, 5, 8]);
    }

    #[test]
    fn normal_matches_reference_value() {
        // Continuity-corrected normal p for U = 0 with n1 = n2 = 5: z = 12 / sqrt(275/12).
        let a: Vec<f64> = (1..=5).map(f64::from).collect();
        let b: Vec<f64> = (6..=10).map(f64::from).collect();
        let r = mann_whitney_u_with(&a, &b, MwuMethod::Normal).unwrap();
        let z = 12.0 / (275.0f64 / 12.0).sqrt();
        assert!((r.p_value - erfc(z / std::f64::consts::SQRT_2)).abs() < 1e-12);
        assert!((r.p_value - 0.012185).abs() < 1e-5);
    }
}
