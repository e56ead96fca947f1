//! Image-text matcher with stacked cross attention (text attends to regions).
//!
//! Captions are encoded by a bi-directional GRU whose two passes are
//! averaged per word; each word attends over the regions, and the mean
//! cosine between words and their attended region vectors is the
//! image-sentence similarity `S(I, T)`.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_value, unknown_key, KvSection};
use crate::corpus::{RegionFeatureSet, TokenId};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::nn::{GruCell, GruIds, Linear, LinearIds};
use crate::tensor::{concat, xavier_uniform, Graph, ParamId, ParamSet, Real, Var};

/// Architecture and loss settings of the matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct MatcherConfig {
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub embed_dim: usize,
    /// Width of the GRU state and of the joint space.
    pub hidden: usize,
    /// Projects regions into the joint space; without it `hidden` must equal
    /// `feat_dim`.
    pub project: bool,
    pub margin: f64,
    pub tau: f64,
}

impl MatcherConfig {
    pub fn desk(feat_dim: usize, vocab_size: usize) -> Self {
        MatcherConfig {
            vocab_size,
            feat_dim,
            embed_dim: 64,
            hidden: feat_dim,
            project: false,
            margin: 0.2,
            tau: 9.0,
        }
    }

    pub fn full(feat_dim: usize, vocab_size: usize) -> Self {
        MatcherConfig {
            embed_dim: 300,
            hidden: 1024,
            project: true,
            ..Self::desk(feat_dim, vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.feat_dim == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("matcher dimensions must be positive".into()));
        }
        if !self.project && self.hidden != self.feat_dim {
            return Err(Error::Config(format!(
                "without a region projection the matcher hidden width ({}) must equal the region width ({})",
                self.hidden, self.feat_dim
            )));
        }
        if !(self.margin > 0.0 && self.margin.is_finite())
            || !(self.tau > 0.0 && self.tau.is_finite())
        {
            return Err(Error::Config(format!(
                "margin and temperature must be positive, got {} and {}",
                self.margin, self.tau
            )));
        }
        Ok(())
    }
}

impl KvSection for MatcherConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "project" => self.project = parse_value(key, value)?,
            "margin" => self.margin = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            _ => return unknown_key("matcher", key),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("project".into(), self.project.to_string()),
            ("margin".into(), self.margin.to_string()),
            ("tau".into(), self.tau.to_string()),
        ]
    }
}

/// Every intermediate of one similarity evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityBreakdown {
    /// `[k][n]` raw cosines.
    pub s: Vec<Vec<f64>>,
    /// `[k][n]` clipped cosines normalized over words.
    pub s_bar: Vec<Vec<f64>>,
    /// `[k][n]` attention over regions; each column sums to 1.
    pub alpha: Vec<Vec<f64>>,
    /// `[n][width]` attended region vector per word.
    pub a_v: Vec<Vec<f64>>,
    /// Per-word cosine between the word and its attended vector.
    pub r: Vec<f64>,
    pub score: f64,
}

/// Graph nodes of one similarity evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityVars<'g, F: Real> {
    pub s: Var<'g, F>,
    pub s_bar: Var<'g, F>,
    pub alpha: Var<'g, F>,
    pub a_v: Var<'g, F>,
    pub r: Var<'g, F>,
    pub score: Var<'g, F>,
}

/// `S(I, T)` of region matrix `v [k, w]` and word matrix `e [n, w]`.
pub fn similarity_vars<'g, F: Real>(
    v: &Var<'g, F>,
    e: &Var<'g, F>,
    tau: f64,
) -> Result<SimilarityVars<'g, F>> {
    let (vs, es) = (v.shape(), e.shape());
    if vs.len() != 2 || es.len() != 2 || vs[1] != es[1] {
        return dim_err(format!(
            "similarity: region shape {vs:?} and word shape {es:?} disagree"
        ));
    }
    let vn = v.normalize_rows()?;
    let en = e.normalize_rows()?;
    let s = vn.matmul(&en.transpose()?)?;
    let s_bar = s.relu().normalize_rows()?;
    let alpha = s_bar.scale(tau).softmax(0)?;
    let a_v = alpha.transpose()?.matmul(v)?;
    let r = en.mul(&a_v.normalize_rows()?)?.sum_last();
    let score = r.mean();
    Ok(SimilarityVars {
        s,
        s_bar,
        alpha,
        a_v,
        r,
        score,
    })
}

fn rows(v: &Var<'_, f64>) -> Vec<Vec<f64>> {
    let cols = *v.shape().last().expect("matrix");
    v.to_vec().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn matrix<'g>(g: &'g Graph<f64>, m: &[Vec<f64>], what: &str) -> Result<Var<'g, f64>> {
    let w = m.first().map(Vec::len).unwrap_or(0);
    if m.is_empty() || w == 0 || m.iter().any(|r| r.len() != w) {
        return dim_err(format!("{what} must be a non-empty rectangular matrix"));
    }
    g.constant_from(vec![m.len(), w], m.concat())
}

/// Similarity of explicit region and word vectors, with all intermediates.
pub fn similarity(
    regions: &[Vec<f64>],
    words: &[Vec<f64>],
    tau: f64,
) -> Result<SimilarityBreakdown> {
    let g = Graph::new();
    let sv = similarity_vars(
        &matrix(&g, regions, "regions")?,
        &matrix(&g, words, "words")?,
        tau,
    )?;
    Ok(SimilarityBreakdown {
        s: rows(&sv.s),
        s_bar: rows(&sv.s_bar),
        alpha: rows(&sv.alpha),
        a_v: rows(&sv.a_v),
        r: sv.r.to_vec(),
        score: sv.score.item(),
    })
}

/// `[δ − S(I,T) + S(I,T̂)]₊`.
pub fn triplet_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (margin - s_pos + s_neg).max(0.0)
}

/// Graph form of [`triplet_loss`].
pub fn triplet_loss_var<'g, F: Real>(
    s_pos: &Var<'g, F>,
    s_neg: &Var<'g, F>,
    margin: f64,
) -> Result<Var<'g, F>> {
    Ok(s_neg.sub(s_pos)?.add_scalar(margin).relu())
}

/// Index of the best score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
struct Ids {
    embed: ParamId,
    gru_f: GruIds,
    gru_b: GruIds,
    proj: Option<LinearIds>,
}

impl Ids {
    fn lookup<F: Real>(p: &ParamSet<F>, c: &MatcherConfig) -> Result<Self> {
        let id = |n: &str| p.require(&format!("matcher/{n}"));
        let gru = |d: &str| -> Result<GruIds> {
            Ok(GruIds {
                w_ih: id(&format!("{d}/w_ih"))?,
                w_hh: id(&format!("{d}/w_hh"))?,
                b_ih: id(&format!("{d}/b_ih"))?,
                b_hh: id(&format!("{d}/b_hh"))?,
                input: c.embed_dim,
                hidden: c.hidden,
            })
        };
        Ok(Ids {
            embed: id("embed")?,
            gru_f: gru("gru_f")?,
            gru_b: gru("gru_b")?,
            proj: if c.project {
                Some(LinearIds {
                    weight: id("proj/weight")?,
                    bias: Some(id("proj/bias")?),
                })
            } else {
                None
            },
        })
    }
}

/// Matcher parameters bound into one graph.
pub struct Bound<'g, F: Real> {
    embed: Var<'g, F>,
    gru_f: GruCell<'g, F>,
    gru_b: GruCell<'g, F>,
    proj: Option<Linear<'g, F>>,
}

#[derive(Clone, Debug)]
pub struct Matcher<F: Real> {
    config: MatcherConfig,
    params: ParamSet<F>,
    ids: Ids,
}

impl<F: Real> Matcher<F> {
    pub fn new<R: Rng + ?Sized>(config: MatcherConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut p = ParamSet::new();
        p.insert(
            "matcher/embed",
            xavier_uniform(c.vocab_size, c.embed_dim, rng),
        )?;
        GruIds::register(&mut p, "matcher/gru_f", c.embed_dim, c.hidden, rng)?;
        GruIds::register(&mut p, "matcher/gru_b", c.embed_dim, c.hidden, rng)?;
        if c.project {
            LinearIds::register(&mut p, "matcher/proj", c.feat_dim, c.hidden, true, rng)?;
        }
        Self::from_parts(config, p)
    }

    pub fn from_parts(config: MatcherConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        let ids = Ids::lookup(&params, &config)?;
        let c = &config;
        let mut expect = vec![(ids.embed, vec![c.vocab_size, c.embed_dim])];
        for gru in [ids.gru_f, ids.gru_b] {
            expect.push((gru.w_ih, vec![c.embed_dim, 3 * c.hidden]));
            expect.push((gru.w_hh, vec![c.hidden, 3 * c.hidden]));
            expect.push((gru.b_ih, vec![3 * c.hidden]));
            expect.push((gru.b_hh, vec![3 * c.hidden]));
        }
        if let Some(proj) = ids.proj {
            expect.push((proj.weight, vec![c.feat_dim, c.hidden]));
            expect.push((proj.bias.expect("proj has a bias"), vec![c.hidden]));
        }
        for (id, shape) in expect {
            if params.get(id).shape() != shape.as_slice() {
                return dim_err(format!(
                    "{} has shape {:?}, expected {shape:?}",
                    params.name(id),
                    params.get(id).shape()
                ));
            }
        }
        Ok(Matcher {
            config,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn cast<G: Real>(&self) -> Matcher<G> {
        Matcher {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids,
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph<F>) -> Bound<'g, F> {
        Bound {
            embed: g.param(&self.params, self.ids.embed),
            gru_f: self.ids.gru_f.bind(g, &self.params),
            gru_b: self.ids.gru_b.bind(g, &self.params),
            proj: self.ids.proj.map(|p| p.bind(g, &self.params)),
        }
    }

    /// Word features `e_t = (h⃗_t + h⃖_t) / 2`, one row per token.
    pub fn encode_text<'g>(
        &self,
        g: &'g Graph<F>,
        w: &Bound<'g, F>,
        tokens: &[TokenId],
    ) -> Result<Var<'g, F>> {
        if tokens.is_empty() {
            return contract_err("cannot encode an empty caption");
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return contract_err(format!(
                "token {bad} outside vocabulary of {}",
                self.config.vocab_size
            ));
        }
        let n = tokens.len();
        let x = w.embed.gather_rows(tokens)?;
        let h0 = g.constant_from(
            vec![1, self.config.hidden],
            vec![F::zero(); self.config.hidden],
        )?;
        let mut fwd = Vec::with_capacity(n);
        let mut h = h0;
        for t in 0..n {
            h = w.gru_f.step(&x.narrow(0, t, 1)?, &h)?;
            fwd.push(h);
        }
        let mut bwd = vec![h0; n];
        let mut h = h0;
        for t in (0..n).rev() {
            h = w.gru_b.step(&x.narrow(0, t, 1)?, &h)?;
            bwd[t] = h;
        }
        concat(&fwd, 0)?
            .add(&concat(&bwd, 0)?)
            .map(|s| s.scale(0.5))
    }

    /// Region matrix in the joint space.
    pub fn encode_regions<'g>(
        &self,
        g: &'g Graph<F>,
        w: &Bound<'g, F>,
        feats: &RegionFeatureSet,
    ) -> Result<Var<'g, F>> {
        let k = feats.num_regions();
        if k == 0 {
            return contract_err(format!("scene {} has no regions", feats.scene_id));
        }
        if feats
            .features
            .iter()
            .any(|r| r.len() != self.config.feat_dim)
        {
            return dim_err(format!(
                "region features must have width {}",
                self.config.feat_dim
            ));
        }
        let data = feats
            .flat()
            .iter()
            .map(|&x| F::from_f64_lossy(f64::from(x)))
            .collect();
        let v = g.constant_from(vec![k, self.config.feat_dim], data)?;
        match &w.proj {
            Some(p) => p.forward(&v),
            None => Ok(v),
        }
    }

    /// `S(I, T)` as a graph node.
    pub fn score_var<'g>(
        &self,
        g: &'g Graph<F>,
        w: &Bound<'g, F>,
        regions: &Var<'g, F>,
        tokens: &[TokenId],
    ) -> Result<Var<'g, F>> {
        let e = self.encode_text(g, w, tokens)?;
        Ok(similarity_vars(regions, &e, self.config.tau)?.score)
    }

    /// Mean triplet loss over `(scene, better, worse)` triples.
    pub fn triplet_batch<'g>(
        &self,
        g: &'g Graph<F>,
        w: &Bound<'g, F>,
        triples: &[(&RegionFeatureSet, &[TokenId], &[TokenId])],
    ) -> Result<Var<'g, F>> {
        if triples.is_empty() {
            return contract_err("empty triplet batch");
        }
        let mut losses = Vec::with_capacity(triples.len());
        for &(feats, pos, neg) in triples {
            let v = self.encode_regions(g, w, feats)?;
            let sp = self.score_var(g, w, &v, pos)?;
            let sn = self.score_var(g, w, &v, neg)?;
            losses.push(triplet_loss_var(&sp, &sn, self.config.margin)?);
        }
        Ok(concat(&losses, 0)?.mean())
    }

    /// Similarity of every candidate to the scene.
    pub fn scores(&self, feats: &RegionFeatureSet, candidates: &[&[TokenId]]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let w = self.bind(&g);
        let v = self.encode_regions(&g, &w, feats)?;
        candidates
            .iter()
            .map(|c| Ok(self.score_var(&g, &w, &v, c)?.item().as_f64()))
            .collect()
    }

    /// Full breakdown of one image-caption pair.
    pub fn breakdown(
        &self,
        feats: &RegionFeatureSet,
        tokens: &[TokenId],
    ) -> Result<SimilarityBreakdown> {
        let g = Graph::new();
        let w = self.bind(&g);
        let v = self.encode_regions(&g, &w, feats)?;
        let e = self.encode_text(&g, &w, tokens)?;
        let to_rows = |x: &Var<'_, F>| -> Vec<Vec<f64>> {
            let cols = *x.shape().last().expect("matrix");
            x.to_vec()
                .chunks(cols)
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect()
        };
        let sv = similarity_vars(&v, &e, self.config.tau)?;
        Ok(SimilarityBreakdown {
            s: to_rows(&sv.s),
            s_bar: to_rows(&sv.s_bar),
            alpha: to_rows(&sv.alpha),
            a_v: to_rows(&sv.a_v),
            r: sv.r.to_vec().iter().map(|v| v.as_f64()).collect(),
            score: sv.score.item().as_f64(),
        })
    }

    /// Picks the candidate most similar to the scene (ties → lowest index).
    pub fn select_caption(
        &self,
        feats: &RegionFeatureSet,
        candidates: &[&[TokenId]],
    ) -> Result<(usize, Vec<f64>)> {
        if candidates.is_empty() {
            return contract_err("no candidate captions to select from");
        }
        let scores = self.scores(feats, candidates)?;
        Ok((argmax_first(&scores).expect("non-empty"), scores))
    }
}

impl Matcher<f32> {
    pub fn to_checkpoint(&self, vocab_hash: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.insert_params(&self.params)?;
        ck.set_meta("meta/tau", self.config.tau)?;
        ck.set_meta("meta/margin", self.config.margin)?;
        ck.set_meta("meta/project", if self.config.project { 1.0 } else { 0.0 })?;
        ck.set_vocab_hash(vocab_hash)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let embed = ck.require("matcher/embed")?.shape().to_vec();
        let hh = ck.require("matcher/gru_f/w_hh")?.shape().to_vec();
        if embed.len() != 2 || hh.len() != 2 {
            return Err(Error::Format("matcher tensors must be matrices".into()));
        }
        let project = ck.meta_u64("meta/project")? == 1;
        let feat_dim = if project {
            ck.require("matcher/proj/weight")?.shape()[0]
        } else {
            hh[0]
        };
        let config = MatcherConfig {
            vocab_size: embed[0],
            feat_dim,
            embed_dim: embed[1],
            hidden: hh[0],
            project,
            margin: f64::from(ck.meta("meta/margin")? as f32),
            tau: f64::from(ck.meta("meta/tau")? as f32),
        };
        let params = ck.params_with_prefix("matcher/")?;
        Self::from_parts(config, params).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests;
