use std::collections::HashMap;

use super::ngram_counts;
use crate::error::{contract_err, Result};

/// Sentence BLEU with an explicit flag for the empty-candidate case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bleu {
    pub score: f64,
    pub empty_candidate: bool,
}

fn check_order(n: usize) -> Result<()> {
    if !(1..=4).contains(&n) {
        return contract_err(format!("BLEU order must be in 1..=4, got {n}"));
    }
    Ok(())
}

/// Closest reference length to `c`; ties go to the shorter reference.
fn closest_ref_len<R: AsRef<[usize]>>(c: usize, references: &[R]) -> usize {
    references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Clipped matches and candidate n-gram total for one order.
fn clipped_counts<R: AsRef<[usize]>>(
    candidate: &[usize],
    references: &[R],
    order: usize,
) -> (usize, usize) {
    let cand = ngram_counts(candidate, order);
    let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r.as_ref(), order) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    let total = cand.values().sum();
    (matched, total)
}

fn combine(matches: &[usize], totals: &[usize], c: usize, r: usize) -> f64 {
    if matches.iter().zip(totals).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let n = matches.len() as f64;
    let log_mean = matches
        .iter()
        .zip(totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n;
    let bp = (1.0 - r as f64 / c as f64).min(0.0).exp();
    bp * log_mean.exp()
}

/// BLEU-n of one candidate: geometric mean of the clipped precisions of
/// orders `1..=n` times the brevity penalty `exp(min(0, 1 − r/c))`.
pub fn bleu_n<R: AsRef<[usize]>>(candidate: &[usize], references: &[R], n: usize) -> Result<Bleu> {
    check_order(n)?;
    if candidate.is_empty() {
        log::warn!("BLEU of an empty candidate is 0");
        return Ok(Bleu {
            score: 0.0,
            empty_candidate: true,
        });
    }
    let (mut matches, mut totals) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for order in 1..=n {
        let (m, t) = clipped_counts(candidate, references, order);
        matches.push(m);
        totals.push(t);
    }
    let r = closest_ref_len(candidate.len(), references);
    Ok(Bleu {
        score: combine(&matches, &totals, candidate.len(), r),
        empty_candidate: false,
    })
}

/// Corpus-level BLEU-n: clipped counts and lengths are pooled over all
/// candidates before the precisions and brevity penalty are formed.
pub fn corpus_bleu<C, R>(pairs: &[(C, Vec<R>)], n: usize) -> Result<f64>
where
    C: AsRef<[usize]>,
    R: AsRef<[usize]>,
{
    check_order(n)?;
    let (mut matches, mut totals) = (vec![0; n], vec![0; n]);
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in pairs {
        let cand = cand.as_ref();
        for order in 1..=n {
            let (m, t) = clipped_counts(cand, refs, order);
            matches[order - 1] += m;
            totals[order - 1] += t;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
    }
    if c == 0 {
        return Ok(0.0);
    }
    Ok(combine(&matches, &totals, c, r))
}
