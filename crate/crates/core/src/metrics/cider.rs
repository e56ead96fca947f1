use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::ngram_counts;
use crate::error::{Error, Result};

pub const CIDER_MAX_ORDER: usize = 4;
/// Standard deviation of the Gaussian length penalty.
pub const CIDER_SIGMA: f64 = 6.0;

/// Document frequencies of reference n-grams (orders 1..=4). One document is
/// the reference set of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdfStats {
    num_docs: usize,
    df: HashMap<Vec<usize>, usize>,
}

impl IdfStats {
    pub fn from_reference_sets<S, R>(sets: &[S]) -> Self
    where
        S: AsRef<[R]>,
        R: AsRef<[usize]>,
    {
        let mut df: HashMap<Vec<usize>, usize> = HashMap::new();
        for set in sets {
            let mut seen: HashSet<&[usize]> = HashSet::new();
            for r in set.as_ref() {
                for n in 1..=CIDER_MAX_ORDER {
                    seen.extend(ngram_counts(r.as_ref(), n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        IdfStats {
            num_docs: sets.len(),
            df,
        }
    }

    pub fn from_parts(num_docs: usize, df: HashMap<Vec<usize>, usize>) -> Result<Self> {
        if num_docs == 0 {
            return Err(Error::Contract(
                "idf statistics need at least one document".into(),
            ));
        }
        if let Some((g, &d)) = df.iter().find(|(_, &d)| d == 0 || d > num_docs) {
            return Err(Error::Contract(format!(
                "document frequency {d} of {g:?} outside 1..={num_docs}"
            )));
        }
        Ok(IdfStats { num_docs, df })
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn df(&self, ngram: &[usize]) -> usize {
        self.df.get(ngram).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Vec<usize>, &usize)> {
        self.df.iter()
    }

    /// `ln(N / df)`, with unseen n-grams treated as `df = 1`.
    pub fn idf(&self, ngram: &[usize]) -> f64 {
        let n = (self.num_docs.max(1)) as f64;
        n.ln() - (self.df(ngram).max(1) as f64).ln()
    }

    /// JSON sidecar form with n-grams rendered by `render`.
    pub fn to_json(&self, render: impl Fn(&[usize]) -> String) -> IdfJson {
        IdfJson {
            num_docs: self.num_docs,
            df: self.df.iter().map(|(g, &d)| (render(g), d)).collect(),
        }
    }

    pub fn from_json(json: &IdfJson, parse: impl Fn(&str) -> Result<Vec<usize>>) -> Result<Self> {
        let mut df = HashMap::with_capacity(json.df.len());
        for (k, &v) in &json.df {
            df.insert(parse(k)?, v);
        }
        Self::from_parts(json.num_docs, df)
    }
}

/// Serialized idf statistics: n-gram (space-joined tokens) → document frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdfJson {
    pub num_docs: usize,
    pub df: BTreeMap<String, usize>,
}

struct TfIdf<'a> {
    vecs: Vec<BTreeMap<&'a [usize], f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf<'a>(tokens: &'a [usize], idf: &IdfStats) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(CIDER_MAX_ORDER);
    let mut norms = Vec::with_capacity(CIDER_MAX_ORDER);
    for n in 1..=CIDER_MAX_ORDER {
        let v: BTreeMap<&[usize], f64> = ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, tf)| (g, tf as f64 * idf.idf(g)))
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        len: tokens.len(),
    }
}

/// CIDEr-D on the native 0 to 10 scale.
///
/// For each order the candidate's tf-idf vector is clipped by the reference
/// vector, cosine-normalised and damped by `exp(−Δl² / 2σ²)`; the result is
/// averaged over references and orders and scaled by 10.
pub fn cider_d<R: AsRef<[usize]>>(candidate: &[usize], references: &[R], idf: &IdfStats) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let cand = tfidf(candidate, idf);
    let mut total = 0.0;
    for r in references {
        let rv = tfidf(r.as_ref(), idf);
        let delta = cand.len as f64 - rv.len as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        for n in 0..CIDER_MAX_ORDER {
            let mut val: f64 = cand.vecs[n]
                .iter()
                .map(|(g, &c)| {
                    let r = rv.vecs[n].get(g).copied().unwrap_or(0.0);
                    c.min(r) * r
                })
                .sum();
            if cand.norms[n] != 0.0 && rv.norms[n] != 0.0 {
                val /= cand.norms[n] * rv.norms[n];
            }
            total += val * penalty;
        }
    }
    10.0 * total / (CIDER_MAX_ORDER as f64 * references.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_idf() -> IdfStats {
        IdfStats::from_reference_sets(&[
            vec![vec![1, 2, 3, 4, 5]],
            vec![vec![6, 7, 8, 9]],
            vec![vec![1, 7, 3, 9, 2]],
        ])
    }

    #[test]
    fn identical_single_reference_scores_ten() {
        // every n-gram of the candidate is rare (df = 1 of 3 documents)
        let idf = IdfStats::from_reference_sets(&[
            vec![vec![10, 11, 12, 13, 14]],
            vec![vec![1, 2]],
            vec![vec![3, 4]],
        ]);
        let c = [10, 11, 12, 13, 14];
        let s = cider_d(&c, &[c.to_vec()], &idf);
        assert!((s - 10.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn disjoint_scores_zero() {
        let idf = toy_idf();
        assert_eq!(cider_d(&[20, 21, 22], &[vec![1, 2, 3]], &idf), 0.0);
    }

    #[test]
    fn unseen_ngrams_get_max_idf() {
        let idf = toy_idf();
        assert!((idf.idf(&[42]) - 3f64.ln()).abs() < 1e-15);
        assert!((idf.idf(&[1]) - (3f64 / 2.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn df_counts_documents_not_occurrences() {
        let idf = IdfStats::from_reference_sets(&[vec![vec![1, 1, 1], vec![1, 2]], vec![vec![2]]]);
        assert_eq!(idf.df(&[1]), 1);
        assert_eq!(idf.df(&[2]), 2);
        assert_eq!(idf.df(&[1, 1]), 1);
    }

    #[test]
    fn from_parts_validates() {
        let mut df = HashMap::new();
        df.insert(vec![1], 3);
        assert!(IdfStats::from_parts(2, df).is_err());
        assert!(IdfStats::from_parts(0, HashMap::new()).is_err());
    }
}
