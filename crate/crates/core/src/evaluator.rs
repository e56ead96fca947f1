//! Evaluation protocols: whole-system scoring with optional matcher
//! reranking, control-signal sweeps, and attribute compliance studies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::captioner::{beam_decode, greedy_batch, Captioner};
use crate::config::{parse_value, unknown_key, KvSection};
use crate::corpus::{Attribute, SceneRecord, TokenId, Vocabulary};
use crate::error::{contract_err, Error, Result};
use crate::matcher::{argmax_first, Matcher};
use crate::metrics::{
    cider_d, control_compliance, corpus_bleu, mean, median, poor_quality_fraction,
    scaled_to_native, EvalReport, IdfStats,
};
use crate::trainer::{default_beta, BetaPolicy};

/// Environment variable bounding evaluation worker threads.
pub const THREADS_ENV: &str = "CAPCTL_THREADS";

/// Worker threads for per-scene evaluation (default 1).
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over contiguous chunks on up to `threads` workers, keeping order.
fn par_chunks<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&[T]) -> Result<Vec<U>> + Sync,
) -> Result<Vec<U>> {
    if threads <= 1 || items.len() < 2 {
        return f(items);
    }
    let size = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<U>>> = thread::scope(|s| {
        let handles: Vec<_> = items.chunks(size).map(|c| s.spawn(|| f(c))).collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Contract("evaluation worker panicked".into())))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Captioners, optional matcher and decoding settings under evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SystemUnderTest<'a> {
    pub forward: &'a Captioner<f32>,
    pub backward: Option<&'a Captioner<f32>>,
    pub matcher: Option<&'a Matcher<f32>>,
    pub decode: DecodeMode,
}

impl SystemUnderTest<'_> {
    pub fn validate(&self) -> Result<()> {
        if let DecodeMode::Beam(0) = self.decode {
            return contract_err("beam width must be positive");
        }
        if self.matcher.is_some()
            && self.backward.is_none()
            && !matches!(self.decode, DecodeMode::Beam(k) if k > 1)
        {
            return contract_err(
                "a matcher needs a backward captioner or a beam wider than 1 to choose from",
            );
        }
        if let Some(b) = self.backward {
            if b.config().beta_dim() != self.forward.config().beta_dim() {
                return contract_err(
                    "forward and backward captioners take different control signals",
                );
            }
        }
        Ok(())
    }
}

/// Where the reported caption of a scene came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Forward,
    Backward,
    Beam(usize),
}

impl Source {
    pub fn label(self) -> String {
        match self {
            Source::Forward => "fwd".into(),
            Source::Backward => "bwd".into(),
            Source::Beam(i) => format!("beam_{i}"),
        }
    }
}

/// Per-scene outcome of an evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneResult {
    pub scene_id: u64,
    pub tokens: Vec<TokenId>,
    pub cider: f64,
    pub source: Source,
    /// Every caption the selector chose from (empty without a choice).
    pub candidates: Vec<Vec<TokenId>>,
    /// Matcher scores of the candidates, when a matcher chose.
    pub candidate_scores: Vec<f64>,
}

/// Poor-quality threshold on the native CIDEr-D scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Median CIDEr-D of the forward captioner's greedy captions.
    ForwardMedian,
    /// Threshold on the ×100 reporting scale.
    Scaled(f64),
    Native(f64),
}

impl FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "median" {
            return Ok(Threshold::ForwardMedian);
        }
        let (kind, v) = s.split_once(':').ok_or_else(|| {
            Error::Config(format!(
                "threshold {s:?} is not median, scaled:X or native:X"
            ))
        })?;
        let v: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("bad threshold value {v:?}")))?;
        match kind {
            "scaled" => Ok(Threshold::Scaled(v)),
            "native" => Ok(Threshold::Native(v)),
            _ => Err(Error::Config(format!("unknown threshold kind {kind:?}"))),
        }
    }
}

impl std::fmt::Display for Threshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Threshold::ForwardMedian => write!(f, "median"),
            Threshold::Scaled(v) => write!(f, "scaled:{v}"),
            Threshold::Native(v) => write!(f, "native:{v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub threshold: Threshold,
    pub beam: usize,
    /// Control signal; `None` uses the model default.
    pub beta: Option<BetaPolicy>,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: Threshold::ForwardMedian,
            beam: 1,
            beta: None,
            threads: 1,
        }
    }
}

impl EvalConfig {
    pub fn policy(&self, model: &Captioner<f32>) -> BetaPolicy {
        self.beta
            .clone()
            .unwrap_or_else(|| BetaPolicy::Fixed(default_beta(model.config().control)))
    }
}

impl KvSection for EvalConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "threshold" => self.threshold = value.parse()?,
            "beam" => self.beam = parse_value(key, value)?,
            "beta" => {
                self.beta = match value {
                    "default" => None,
                    v => Some(v.parse()?),
                }
            }
            "threads" => self.threads = parse_value(key, value)?,
            _ => return unknown_key("eval", key),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("threshold".into(), self.threshold.to_string()),
            ("beam".into(), self.beam.to_string()),
            (
                "beta".into(),
                self.beta
                    .as_ref()
                    .map_or("default".into(), |b| b.to_string()),
            ),
            ("threads".into(), self.threads.to_string()),
        ]
    }
}

/// Rejects checkpoints built for another vocabulary.
pub fn check_vocab(expected: u64, found: u64, what: &str) -> Result<()> {
    if expected != found {
        return contract_err(format!(
            "{what} was trained with vocabulary {found:016x}, dataset has {expected:016x}"
        ));
    }
    Ok(())
}

fn pick_with_matcher(
    matcher: &Matcher<f32>,
    scene: &SceneRecord,
    candidates: &[&[TokenId]],
) -> Result<(usize, Vec<f64>)> {
    let usable: Vec<usize> = (0..candidates.len())
        .filter(|&i| !candidates[i].is_empty())
        .collect();
    if usable.is_empty() {
        return Ok((0, vec![f64::NEG_INFINITY; candidates.len()]));
    }
    let cands: Vec<&[TokenId]> = usable.iter().map(|&i| candidates[i]).collect();
    let s = matcher.scores(&scene.features, &cands)?;
    let mut scores = vec![f64::NEG_INFINITY; candidates.len()];
    for (&i, v) in usable.iter().zip(s) {
        scores[i] = v;
    }
    Ok((argmax_first(&scores).expect("non-empty"), scores))
}

/// Decodes and selects one caption per scene.
pub fn run_system(
    sut: &SystemUnderTest<'_>,
    scenes: &[SceneRecord],
    policy: &BetaPolicy,
    idf: &IdfStats,
    threads: usize,
) -> Result<Vec<SceneResult>> {
    sut.validate()?;
    let control = sut.forward.config().control;
    let max_len = sut.forward.config().max_len;
    par_chunks(scenes, threads, |chunk| {
        let betas = chunk
            .iter()
            .map(|s| policy.for_scene(s, control))
            .collect::<Result<Vec<_>>>()?;
        let beta_refs: Vec<&[f64]> = betas.iter().map(Vec::as_slice).collect();
        let feats: Vec<_> = chunk.iter().map(|s| &s.features).collect();
        let mut out = Vec::with_capacity(chunk.len());
        match sut.decode {
            DecodeMode::Greedy | DecodeMode::Beam(1) => {
                let fwd = greedy_batch(sut.forward, &feats, &beta_refs, max_len)?;
                let bwd = match (sut.backward, sut.matcher) {
                    (Some(b), Some(_)) => Some(greedy_batch(b, &feats, &beta_refs, max_len)?),
                    _ => None,
                };
                for (i, scene) in chunk.iter().enumerate() {
                    let (tokens, source, candidates, scores) = match (&bwd, sut.matcher) {
                        (Some(bwd), Some(m)) => {
                            let cands = [fwd[i].as_slice(), bwd[i].as_slice()];
                            let (idx, scores) = pick_with_matcher(m, scene, &cands)?;
                            let src = if idx == 0 {
                                Source::Forward
                            } else {
                                Source::Backward
                            };
                            (
                                cands[idx].to_vec(),
                                src,
                                vec![fwd[i].clone(), bwd[i].clone()],
                                scores,
                            )
                        }
                        _ => (fwd[i].clone(), Source::Forward, Vec::new(), Vec::new()),
                    };
                    out.push(SceneResult {
                        scene_id: scene.scene_id,
                        cider: cider_d(&tokens, &scene.reference_tokens(), idf),
                        tokens,
                        source,
                        candidates,
                        candidate_scores: scores,
                    });
                }
            }
            DecodeMode::Beam(k) => {
                for (i, scene) in chunk.iter().enumerate() {
                    let beams =
                        beam_decode(sut.forward, &scene.features, beta_refs[i], k, max_len)?;
                    let cands: Vec<&[TokenId]> =
                        beams.iter().map(|h| h.tokens.as_slice()).collect();
                    let (idx, scores) = match sut.matcher {
                        Some(m) => pick_with_matcher(m, scene, &cands)?,
                        None => (0, Vec::new()),
                    };
                    let tokens = cands.get(idx).map(|c| c.to_vec()).unwrap_or_default();
                    out.push(SceneResult {
                        scene_id: scene.scene_id,
                        cider: cider_d(&tokens, &scene.reference_tokens(), idf),
                        tokens,
                        source: Source::Beam(idx),
                        candidates: beams.into_iter().map(|h| h.tokens).collect(),
                        candidate_scores: scores,
                    });
                }
            }
        }
        Ok(out)
    })
}

/// Resolves a threshold to the native scale, decoding the forward
/// captioner when the median rule is used.
pub fn resolve_threshold(
    threshold: Threshold,
    forward: &Captioner<f32>,
    scenes: &[SceneRecord],
    policy: &BetaPolicy,
    idf: &IdfStats,
    threads: usize,
) -> Result<f64> {
    Ok(match threshold {
        Threshold::Native(v) => v,
        Threshold::Scaled(v) => scaled_to_native(v),
        Threshold::ForwardMedian => {
            let sut = SystemUnderTest {
                forward,
                backward: None,
                matcher: None,
                decode: DecodeMode::Greedy,
            };
            let r = run_system(&sut, scenes, policy, idf, threads)?;
            median(&r.iter().map(|x| x.cider).collect::<Vec<_>>())?
        }
    })
}

/// Aggregates per-scene results into a report. Compliance is measured for
/// every discrete attribute the control signal fixes.
pub fn summarize(
    results: &[SceneResult],
    scenes: &[SceneRecord],
    policy: &BetaPolicy,
    model: &Captioner<f32>,
    vocab: &Vocabulary,
    threshold: f64,
) -> Result<EvalReport> {
    if results.len() != scenes.len() || results.is_empty() {
        return contract_err("results and scenes differ or are empty");
    }
    let pairs: Vec<(&[TokenId], Vec<&[TokenId]>)> = results
        .iter()
        .zip(scenes)
        .map(|(r, s)| (r.tokens.as_slice(), s.reference_tokens()))
        .collect();
    let scores: Vec<f64> = results.iter().map(|r| r.cider).collect();
    let mut compliance = BTreeMap::new();
    if let BetaPolicy::Fixed(beta) = policy {
        for (a, &v) in model.config().control.layout().iter().zip(beta) {
            if a.is_discrete() {
                let obs = results
                    .iter()
                    .map(|r| Ok((a.observe(&r.tokens, vocab)?, v)))
                    .collect::<Result<Vec<_>>>()?;
                compliance.insert(a.name().to_string(), control_compliance(&obs)?);
            }
        }
    }
    let report = EvalReport {
        bleu1: corpus_bleu(&pairs, 1)?,
        bleu4: corpus_bleu(&pairs, 4)?,
        cider: mean(&scores),
        poor_quality_fraction: poor_quality_fraction(&scores, threshold)?,
        compliance,
    };
    report.validate()?;
    Ok(report)
}

/// Evaluates a system on a split: decode, select, score.
pub fn eval_system(
    sut: &SystemUnderTest<'_>,
    scenes: &[SceneRecord],
    idf: &IdfStats,
    vocab: &Vocabulary,
    config: &EvalConfig,
) -> Result<(EvalReport, Vec<SceneResult>)> {
    let policy = config.policy(sut.forward);
    let threshold = resolve_threshold(
        config.threshold,
        sut.forward,
        scenes,
        &policy,
        idf,
        config.threads,
    )?;
    let results = run_system(sut, scenes, &policy, idf, config.threads)?;
    let report = summarize(&results, scenes, &policy, sut.forward, vocab, threshold)?;
    Ok((report, results))
}

/// One evaluation of the forward captioner per control value, everything
/// else fixed. Values are given per dimension of the control signal.
pub fn beta_sweep(
    model: &Captioner<f32>,
    values: &[Vec<f64>],
    scenes: &[SceneRecord],
    idf: &IdfStats,
    vocab: &Vocabulary,
    config: &EvalConfig,
) -> Result<Vec<(Vec<f64>, EvalReport)>> {
    let sut = SystemUnderTest {
        forward: model,
        backward: None,
        matcher: None,
        decode: if config.beam > 1 {
            DecodeMode::Beam(config.beam)
        } else {
            DecodeMode::Greedy
        },
    };
    values
        .iter()
        .map(|v| {
            let cfg = EvalConfig {
                beta: Some(BetaPolicy::Fixed(v.clone())),
                ..config.clone()
            };
            Ok((v.clone(), eval_system(&sut, scenes, idf, vocab, &cfg)?.0))
        })
        .collect()
}

/// Compliance of one requested attribute value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub requested: f64,
    pub compliance: f64,
    pub mean_observed: f64,
    pub mean_cider: f64,
}

/// Control signal with `attribute` set to `value` and every other
/// dimension at its default.
pub fn request_beta(model: &Captioner<f32>, attribute: Attribute, value: f64) -> Result<Vec<f64>> {
    let layout = model.config().control.layout();
    let Some(pos) = layout.iter().position(|&a| a == attribute) else {
        return contract_err(format!(
            "model controls {} and cannot be asked for {}",
            model.config().control.name(),
            attribute.name()
        ));
    };
    let mut beta = default_beta(model.config().control);
    beta[pos] = value;
    Ok(beta)
}

/// Decodes every scene once per requested value and measures how often
/// the observed attribute equals the request.
pub fn control_study(
    model: &Captioner<f32>,
    attribute: Attribute,
    requested: &[f64],
    scenes: &[SceneRecord],
    idf: &IdfStats,
    vocab: &Vocabulary,
    threads: usize,
) -> Result<Vec<StudyRow>> {
    if !attribute.is_discrete() {
        return contract_err("compliance is defined for discrete attributes only");
    }
    let sut = SystemUnderTest {
        forward: model,
        backward: None,
        matcher: None,
        decode: DecodeMode::Greedy,
    };
    requested
        .iter()
        .map(|&v| {
            let policy = BetaPolicy::Fixed(request_beta(model, attribute, v)?);
            let results = run_system(&sut, scenes, &policy, idf, threads)?;
            let observed = results
                .iter()
                .map(|r| attribute.observe(&r.tokens, vocab))
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(f64, f64)> = observed.iter().map(|&o| (o, v)).collect();
            Ok(StudyRow {
                requested: v,
                compliance: control_compliance(&pairs)?,
                mean_observed: mean(&observed),
                mean_cider: mean(&results.iter().map(|r| r.cider).collect::<Vec<_>>()),
            })
        })
        .collect()
}

/// Parses `ATTR=lo..hi` (inclusive integer range) or `ATTR=v1,v2,...`.
pub fn parse_study(spec: &str) -> Result<(Attribute, Vec<f64>)> {
    let (attr, range) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("control study {spec:?} must look like ATTR=lo..hi"))
    })?;
    let attribute = Attribute::parse(attr.trim())?;
    let bad = || Error::Config(format!("bad control study values {range:?}"));
    let values = if let Some((lo, hi)) = range.split_once("..") {
        let lo: i64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: i64 = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).map(|v| v as f64).collect()
    } else {
        range
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() {
        return Err(bad());
    }
    Ok((attribute, values))
}

/// Per-scene CSV: `scene_id,caption,cider,selected_source`.
pub fn results_csv(results: &[SceneResult], vocab: &Vocabulary) -> String {
    let mut s = String::from("scene_id,caption,cider,selected_source\n");
    for r in results {
        let caption = vocab.decode(&r.tokens).replace('"', "\"\"");
        let _ = writeln!(
            s,
            "{},\"{}\",{},{}",
            r.scene_id,
            caption,
            r.cider,
            r.source.label()
        );
    }
    s
}

pub fn write_csv(path: &Path, results: &[SceneResult], vocab: &Vocabulary) -> Result<()> {
    fs::write(path, results_csv(results, vocab))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_specs() {
        let (a, v) = parse_study("length=7..12").unwrap();
        assert_eq!(a, Attribute::Length);
        assert_eq!(v, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(parse_study("nouns=2,4").unwrap().1, vec![2.0, 4.0]);
        assert!(parse_study("length=9..7").is_err());
        assert!(parse_study("colour=1..2").is_err());
        assert!(parse_study("length").is_err());
    }

    #[test]
    fn thresholds() {
        assert_eq!(
            "median".parse::<Threshold>().unwrap(),
            Threshold::ForwardMedian
        );
        assert_eq!(
            "scaled:90".parse::<Threshold>().unwrap(),
            Threshold::Scaled(90.0)
        );
        assert!("foo:1".parse::<Threshold>().is_err());
        assert_eq!(
            Threshold::Native(1.5)
                .to_string()
                .parse::<Threshold>()
                .unwrap(),
            Threshold::Native(1.5)
        );
    }

    #[test]
    fn chunked_map_keeps_order() {
        let items: Vec<usize> = (0..23).collect();
        let out = par_chunks(&items, 4, |c| Ok(c.iter().map(|x| x * 2).collect())).unwrap();
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn source_labels() {
        assert_eq!(Source::Forward.label(), "fwd");
        assert_eq!(Source::Beam(3).label(), "beam_3");
    }
}
