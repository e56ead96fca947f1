//! Caption metrics: BLEU-n, CIDEr-D and the evaluation aggregates.

mod bleu;
mod cider;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

pub use bleu::{bleu_n, corpus_bleu, Bleu};
pub use cider::{cider_d, IdfJson, IdfStats, CIDER_MAX_ORDER, CIDER_SIGMA};

/// Factor between the native per-sentence CIDEr-D and the ×100 reporting scale.
pub const REPORT_SCALE: f64 = 100.0;

/// Converts a threshold on the ×100 reporting scale to the native scale.
pub fn scaled_to_native(threshold: f64) -> f64 {
    threshold / REPORT_SCALE
}

/// Counts of every contiguous `n`-gram, in a fixed order so that float
/// sums over them are reproducible.
pub(crate) fn ngram_counts(tokens: &[usize], n: usize) -> BTreeMap<&[usize], usize> {
    let mut out = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

/// Fraction of scores strictly below `threshold`.
pub fn poor_quality_fraction(scores: &[f64], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return contract_err("poor-quality fraction of an empty score list");
    }
    let below = scores.iter().filter(|&&s| s < threshold).count();
    Ok(below as f64 / scores.len() as f64)
}

/// Fraction of `(requested, observed)` pairs that agree exactly.
pub fn control_compliance<T: PartialEq>(pairs: &[(T, T)]) -> Result<f64> {
    if pairs.is_empty() {
        return contract_err("compliance of an empty pair list");
    }
    let hits = pairs.iter().filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Median of a non-empty list (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return contract_err("median of an empty list");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return contract_err("spearman needs two equal-length lists of at least 2 values");
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut num = 0.0;
    let (mut dx, mut dy) = (0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx == 0.0 || dy == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (dx * dy).sqrt())
}

/// Aggregate scores of one evaluated system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu4: f64,
    /// Mean per-sentence CIDEr-D on the native 0 to 10 scale.
    pub cider: f64,
    pub poor_quality_fraction: f64,
    pub compliance: BTreeMap<String, f64>,
}

impl EvalReport {
    /// Mean CIDEr on the ×100 reporting scale.
    pub fn cider_scaled(&self) -> f64 {
        self.cider * REPORT_SCALE
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.bleu1) || !unit(self.bleu4) || !unit(self.poor_quality_fraction) {
            return contract_err(format!("report field outside [0,1]: {self:?}"));
        }
        if !(0.0..=10.0).contains(&self.cider) {
            return contract_err(format!("mean CIDEr-D outside [0,10]: {}", self.cider));
        }
        if self.compliance.values().any(|&c| !unit(c)) {
            return contract_err("compliance outside [0,1]");
        }
        Ok(())
    }
}
