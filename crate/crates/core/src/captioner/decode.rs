use std::cmp::Ordering;

use rand::Rng;

use super::{Captioner, ContextTensors, StateTensors};
use crate::corpus::{RegionFeatureSet, TokenId, BOS, EOS, PAD};
use crate::error::{contract_err, Result};
use crate::tensor::{Real, Tensor};

/// A decoded caption in natural order with its summed log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
}

/// Anything that yields next-token log-probabilities for a batch of
/// hypothesis states.
pub trait StepModel {
    type State: Clone;

    fn initial_state(&self) -> Result<Self::State>;

    fn end_token(&self) -> TokenId;

    /// Log-probabilities over the vocabulary for each `(state, previous
    /// token)` pair, and the states after consuming those tokens.
    fn step(
        &self,
        states: &[Self::State],
        prev: &[TokenId],
    ) -> Result<(Vec<Vec<f64>>, Vec<Self::State>)>;
}

/// Descending score, then lexicographic tokens.
fn rank(a: &(Vec<TokenId>, f64), b: &(Vec<TokenId>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Beam search over summed log-probabilities. Returns up to `k` finished
/// sequences (end token stripped, decoder order), best first. Sequences still
/// open after `max_len` tokens are retired as they are.
pub fn beam_search<M: StepModel>(
    model: &M,
    k: usize,
    max_len: usize,
) -> Result<Vec<(Vec<TokenId>, f64)>> {
    if k == 0 || max_len == 0 {
        return contract_err(format!(
            "beam width and max_len must be positive, got {k} and {max_len}"
        ));
    }
    let eos = model.end_token();
    let mut live: Vec<(Vec<TokenId>, f64, M::State)> =
        vec![(Vec::new(), 0.0, model.initial_state()?)];
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let states: Vec<M::State> = live.iter().map(|h| h.2.clone()).collect();
        let prev: Vec<TokenId> = live.iter().map(|h| *h.0.last().unwrap_or(&BOS)).collect();
        let (log_probs, next) = model.step(&states, &prev)?;
        // (tokens, score, parent, ended)
        let mut cands: Vec<(Vec<TokenId>, f64, usize, bool)> = Vec::new();
        for (i, (h, lp)) in live.iter().zip(&log_probs).enumerate() {
            for (tok, &p) in lp.iter().enumerate() {
                if p == f64::NEG_INFINITY {
                    continue;
                }
                let mut toks = h.0.clone();
                let ended = tok == eos;
                if !ended {
                    toks.push(tok);
                }
                cands.push((toks, h.1 + p, i, ended));
            }
        }
        cands.sort_by(|a, b| {
            rank(&(a.0.clone(), a.1), &(b.0.clone(), b.1)).then_with(|| a.3.cmp(&b.3).reverse())
        });
        cands.truncate(k);
        let mut next_live = Vec::new();
        for (toks, score, parent, ended) in cands {
            if ended {
                finished.push((toks, score));
            } else {
                next_live.push((toks, score, next[parent].clone()));
            }
        }
        live = next_live;
    }
    finished.extend(live.into_iter().map(|(t, s, _)| (t, s)));
    finished.sort_by(rank);
    finished.truncate(k);
    Ok(finished)
}

/// Single-image stepping adapter for beam search.
struct ImageStepper<'a, F: Real> {
    model: &'a Captioner<F>,
    ctx: ContextTensors<F>,
}

impl<F: Real> StepModel for ImageStepper<'_, F> {
    type State = StateTensors<F>;

    fn initial_state(&self) -> Result<Self::State> {
        Ok(StateTensors::zeros(1, self.model.config().hidden))
    }

    fn end_token(&self) -> TokenId {
        EOS
    }

    fn step(
        &self,
        states: &[Self::State],
        prev: &[TokenId],
    ) -> Result<(Vec<Vec<f64>>, Vec<Self::State>)> {
        let stacked = stack_states(states)?;
        let ctx = self.ctx.select(&vec![0; states.len()])?;
        let (lp, next) = self.model.step_tensors(&ctx, &stacked, prev)?;
        let split = (0..states.len())
            .map(|i| next.select(&[i]))
            .collect::<Result<_>>()?;
        Ok((lp, split))
    }
}

fn stack_states<F: Real>(states: &[StateTensors<F>]) -> Result<StateTensors<F>> {
    let cat = |f: fn(&StateTensors<F>) -> &Tensor<F>| -> Result<Tensor<F>> {
        let h = f(&states[0]).shape()[1];
        let data: Vec<F> = states
            .iter()
            .flat_map(|s| f(s).data().iter().copied())
            .collect();
        Tensor::new(vec![data.len() / h, h], data)
    };
    Ok(StateTensors {
        h1: cat(|s| &s.h1)?,
        c1: cat(|s| &s.c1)?,
        h2: cat(|s| &s.h2)?,
        c2: cat(|s| &s.c2)?,
    })
}

/// Beam search for one scene; captions come back in natural order.
pub fn beam_decode<F: Real>(
    model: &Captioner<F>,
    feats: &RegionFeatureSet,
    beta: &[f64],
    k: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    let stepper = ImageStepper {
        model,
        ctx: model.context_tensors(&[feats], &[beta])?,
    };
    let dir = model.config().direction;
    Ok(beam_search(&stepper, k, max_len)?
        .into_iter()
        .map(|(t, s)| Hypothesis {
            tokens: dir.to_natural_order(&t),
            log_prob: s,
        })
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Decodes a batch of scenes token by token, choosing each next token with
/// `pick(row, log_probs)`. Returns decoder-order tokens, summed
/// log-probabilities and whether each row emitted the end token.
fn decode_rows<F: Real>(
    model: &Captioner<F>,
    feats: &[&RegionFeatureSet],
    betas: &[&[f64]],
    max_len: usize,
    mut pick: impl FnMut(usize, &[f64]) -> TokenId,
) -> Result<Vec<(Vec<TokenId>, f64, bool)>> {
    if max_len == 0 {
        return contract_err("max_len must be positive");
    }
    let n = feats.len();
    let ctx = model.context_tensors(feats, betas)?;
    let mut state = StateTensors::zeros(n, model.config().hidden);
    let mut out: Vec<(Vec<TokenId>, f64, bool)> = vec![(Vec::new(), 0.0, false); n];
    let mut prev = vec![BOS; n];
    for _ in 0..=max_len {
        if out.iter().all(|o| o.2 || o.0.len() >= max_len) {
            break;
        }
        let (lp, next) = model.step_tensors(&ctx, &state, &prev)?;
        for (row, o) in out.iter_mut().enumerate() {
            if o.2 || o.0.len() >= max_len {
                prev[row] = PAD;
                continue;
            }
            let tok = pick(row, &lp[row]);
            o.1 += lp[row][tok];
            if tok == EOS {
                o.2 = true;
                prev[row] = PAD;
            } else {
                o.0.push(tok);
                prev[row] = tok;
            }
        }
        state = next;
    }
    Ok(out)
}

/// Greedy captions (natural order) for a batch of scenes.
pub fn greedy_batch<F: Real>(
    model: &Captioner<F>,
    feats: &[&RegionFeatureSet],
    betas: &[&[f64]],
    max_len: usize,
) -> Result<Vec<Vec<TokenId>>> {
    let dir = model.config().direction;
    Ok(
        decode_rows(model, feats, betas, max_len, |_, lp| argmax(lp))?
            .into_iter()
            .map(|(t, _, _)| dir.to_natural_order(&t))
            .collect(),
    )
}

/// Greedy caption of one scene, in natural order.
pub fn greedy_decode<F: Real>(
    model: &Captioner<F>,
    feats: &RegionFeatureSet,
    beta: &[f64],
    max_len: usize,
) -> Result<Vec<TokenId>> {
    Ok(greedy_batch(model, &[feats], &[beta], max_len)?.remove(0))
}

/// A sampled caption in decoder order with its summed log-probability
/// (end token included when emitted).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub decoder_tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub ended: bool,
}

fn draw<R: Rng + ?Sized>(rng: &mut R, log_probs: &[f64]) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Multinomial samples for a batch of scenes.
pub fn sample_batch<F: Real, R: Rng + ?Sized>(
    model: &Captioner<F>,
    feats: &[&RegionFeatureSet],
    betas: &[&[f64]],
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    Ok(
        decode_rows(model, feats, betas, max_len, |_, lp| draw(rng, lp))?
            .into_iter()
            .map(|(t, lp, ended)| Sample {
                decoder_tokens: t,
                log_prob: lp,
                ended,
            })
            .collect(),
    )
}

/// One sampled caption in natural order and its total log-probability.
pub fn sample_decode<F: Real, R: Rng + ?Sized>(
    model: &Captioner<F>,
    feats: &RegionFeatureSet,
    beta: &[f64],
    max_len: usize,
    rng: &mut R,
) -> Result<(Vec<TokenId>, f64)> {
    let s = sample_batch(model, &[feats], &[beta], max_len, rng)?.remove(0);
    Ok((
        model.config().direction.to_natural_order(&s.decoder_tokens),
        s.log_prob,
    ))
}
