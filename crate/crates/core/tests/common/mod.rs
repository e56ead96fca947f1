//! Straight-from-the-formula metric implementations used as oracles.
//! Everything is linear scans over vectors: no maps, no shared helpers.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use capctl_core::captioner::{beam_decode, greedy_decode, Captioner, CaptionerConfig, Direction};
use capctl_core::corpus::{Control, RegionFeatureSet};
use capctl_core::tensor::{Graph, ParamId};

pub fn grams(s: &[usize], n: usize) -> Vec<Vec<usize>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<usize>], g: &[usize]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

fn clipped(c: &[usize], refs: &[Vec<usize>], k: usize) -> (usize, usize) {
    let cg = grams(c, k);
    let mut matched = 0;
    for g in distinct(&cg) {
        let best = refs
            .iter()
            .map(|r| count(&grams(r, k), &g))
            .max()
            .unwrap_or(0);
        matched += count(&cg, &g).min(best);
    }
    (matched, cg.len())
}

fn closest(c: usize, refs: &[Vec<usize>]) -> usize {
    let mut best = refs[0].len();
    for r in refs {
        let (d, bd) = (r.len().abs_diff(c), best.abs_diff(c));
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    best
}

fn bleu_from(m: &[usize], t: &[usize], c: usize, r: usize) -> f64 {
    let n = m.len() as f64;
    let mut prod = 1.0;
    for i in 0..m.len() {
        if m[i] == 0 || t[i] == 0 {
            return 0.0;
        }
        prod *= m[i] as f64 / t[i] as f64;
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * prod.powf(1.0 / n)
}

pub fn bleu(c: &[usize], refs: &[Vec<usize>], n: usize) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let (mut m, mut t) = (Vec::new(), Vec::new());
    for k in 1..=n {
        let (a, b) = clipped(c, refs, k);
        m.push(a);
        t.push(b);
    }
    bleu_from(&m, &t, c.len(), closest(c.len(), refs))
}

pub fn corpus_bleu(pairs: &[(Vec<usize>, Vec<Vec<usize>>)], n: usize) -> f64 {
    let (mut m, mut t) = (vec![0; n], vec![0; n]);
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in pairs {
        for k in 1..=n {
            let (a, b) = clipped(cand, refs, k);
            m[k - 1] += a;
            t[k - 1] += b;
        }
        c += cand.len();
        r += closest(cand.len(), refs);
    }
    if c == 0 {
        return 0.0;
    }
    bleu_from(&m, &t, c, r)
}

/// `ln(N / max(1, df))` with documents given as reference sets.
pub fn idf(docs: &[Vec<Vec<usize>>], g: &[usize]) -> f64 {
    let df = docs
        .iter()
        .filter(|set| set.iter().any(|r| count(&grams(r, g.len()), g) > 0))
        .count();
    (docs.len() as f64 / df.max(1) as f64).ln()
}

pub fn cider_d(c: &[usize], refs: &[Vec<usize>], docs: &[Vec<Vec<usize>>]) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    let sigma = 6.0;
    let mut total = 0.0;
    for r in refs {
        let delta = c.len() as f64 - r.len() as f64;
        let penalty = (-delta * delta / (2.0 * sigma * sigma)).exp();
        for k in 1..=4 {
            let (cg, rg) = (grams(c, k), grams(r, k));
            let vc = |g: &Vec<usize>| count(&cg, g) as f64 * idf(docs, g);
            let vr = |g: &Vec<usize>| count(&rg, g) as f64 * idf(docs, g);
            let mut num = 0.0;
            for g in distinct(&cg) {
                num += vc(&g).min(vr(&g)) * vr(&g);
            }
            let nc: f64 = distinct(&cg)
                .iter()
                .map(|g| vc(g).powi(2))
                .sum::<f64>()
                .sqrt();
            let nr: f64 = distinct(&rg)
                .iter()
                .map(|g| vr(g).powi(2))
                .sum::<f64>()
                .sqrt();
            let val = if nc != 0.0 && nr != 0.0 {
                num / (nc * nr)
            } else {
                num
            };
            total += val * penalty;
        }
    }
    10.0 * total / (4.0 * refs.len() as f64)
}

/// A random sentence over a small alphabet so n-grams collide often.
pub fn sentence<R: Rng>(rng: &mut R, max_len: usize, alphabet: usize) -> Vec<usize> {
    let len = rng.random_range(1..=max_len);
    (0..len)
        .map(|_| 3 + rng.random_range(0..alphabet))
        .collect()
}

pub fn reference_set<R: Rng>(rng: &mut R) -> Vec<Vec<usize>> {
    let n = rng.random_range(1..=5);
    (0..n).map(|_| sentence(rng, 8, 5)).collect()
}

/// One random metric case: candidate, its references, and the documents
/// the idf statistics are built from (the references are one of them).
pub struct MetricCase {
    pub candidate: Vec<usize>,
    pub refs: Vec<Vec<usize>>,
    pub docs: Vec<Vec<Vec<usize>>>,
}

pub fn metric_case<R: Rng>(rng: &mut R) -> MetricCase {
    let refs = reference_set(rng);
    let mut docs: Vec<Vec<Vec<usize>>> = (0..rng.random_range(1..=5))
        .map(|_| reference_set(rng))
        .collect();
    docs.push(refs.clone());
    MetricCase {
        candidate: sentence(rng, 8, 5),
        refs,
        docs,
    }
}

/// Largest disagreement between the library metrics and the oracles over
/// `cases` random cases, as (bleu, corpus bleu, cider).
pub fn metric_oracle_gap(seed: u64, cases: usize) -> (f64, f64, f64) {
    use capctl_core::metrics::{bleu_n, cider_d as lib_cider, corpus_bleu as lib_corpus, IdfStats};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gb, mut gc, mut gd) = (0.0f64, 0.0f64, 0.0f64);
    let mut pairs = Vec::new();
    for _ in 0..cases {
        let case = metric_case(&mut rng);
        let stats = IdfStats::from_reference_sets(&case.docs);
        for n in 1..=4 {
            let lib = bleu_n(&case.candidate, &case.refs, n).unwrap().score;
            gb = gb.max((lib - bleu(&case.candidate, &case.refs, n)).abs());
        }
        let lib = lib_cider(&case.candidate, &case.refs, &stats);
        gd = gd.max((lib - cider_d(&case.candidate, &case.refs, &case.docs)).abs());
        pairs.push((case.candidate, case.refs));
    }
    for chunk in pairs.chunks(10) {
        for n in 1..=4 {
            let lib = lib_corpus(chunk, n).unwrap();
            gc = gc.max((lib - corpus_bleu(chunk, n)).abs());
        }
    }
    (gb, gc, gd)
}

/// A captioner with random small dimensions and random weights scaled up so
/// that greedy paths vary from model to model.
pub fn random_captioner(seed: u64, control: Control, direction: Direction) -> Captioner<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = CaptionerConfig {
        feat_dim: rng.random_range(2..6),
        proj_dim: rng.random_range(2..7),
        embed_dim: rng.random_range(2..6),
        hidden: rng.random_range(2..8),
        att_dim: rng.random_range(2..6),
        vocab_size: rng.random_range(4..16),
        control,
        direction,
        max_len: rng.random_range(1..9),
    };
    let mut m = Captioner::<f32>::new(config, &mut rng).unwrap();
    let ids: Vec<ParamId> = m.params().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for x in m.params_mut().get_mut(id).data_mut() {
            *x = rng.random_range(-2.0f32..2.0);
        }
    }
    m
}

pub fn random_regions(rng: &mut ChaCha8Rng, dim: usize) -> RegionFeatureSet {
    let k = rng.random_range(1..5);
    RegionFeatureSet {
        scene_id: rng.random(),
        features: (0..k)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect(),
    }
}

pub fn random_beta(rng: &mut ChaCha8Rng, control: Control) -> Vec<f64> {
    (0..control.beta_dim())
        .map(|_| f64::from(rng.random_range(0u8..16)))
        .collect()
}

pub const CONTROLS: [Control; 5] = [
    Control::Quality,
    Control::Length,
    Control::Tense,
    Control::Nouns,
    Control::Multi,
];

/// Random models on which width-one beam search and greedy decoding
/// disagree, out of `models`.
pub fn beam_greedy_mismatches(seed: u64, models: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for i in 0..models {
        let control = CONTROLS[i % CONTROLS.len()];
        let direction = if i % 2 == 0 {
            Direction::Forward
        } else {
            Direction::Backward
        };
        let m = random_captioner(rng.random(), control, direction);
        let f = random_regions(&mut rng, m.config().feat_dim);
        let beta = random_beta(&mut rng, control);
        let max_len = m.config().max_len;
        let greedy = greedy_decode(&m, &f, &beta, max_len).unwrap();
        let beam = beam_decode(&m, &f, &beta, 1, max_len).unwrap();
        if beam.len() != 1 || beam[0].tokens != greedy {
            bad += 1;
        }
    }
    bad
}

/// Random models whose greedy output still depends on β after the β
/// weights were zeroed, out of `models`.
pub fn beta_invariance_violations(seed: u64, models: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for i in 0..models {
        let control = CONTROLS[i % CONTROLS.len()];
        let mut m = random_captioner(rng.random(), control, Direction::Forward);
        m.zero_beta_weights();
        let f = random_regions(&mut rng, m.config().feat_dim);
        let max_len = m.config().max_len;
        let base = greedy_decode(&m, &f, &random_beta(&mut rng, control), max_len).unwrap();
        let g = Graph::new();
        let w = m.bind(&g).unwrap();
        let reference = [3.min(m.config().vocab_size - 1)];
        let loss = |beta: &[f64]| m.xe_loss(&g, &w, beta, &reference, &f).unwrap().item();
        let (b1, b2) = (
            random_beta(&mut rng, control),
            random_beta(&mut rng, control),
        );
        let other = greedy_decode(&m, &f, &b1, max_len).unwrap();
        if other != base || loss(&b1) != loss(&b2) {
            bad += 1;
        }
    }
    bad
}
