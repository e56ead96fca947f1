//! Control-conditioned two-LSTM attention decoder.
//!
//! Region features are projected (`v_i = W_v f_i + b_v`) and mean-pooled into
//! `v̄`. At every step the attention LSTM reads `[β; h²_{t−1}; v̄; X_{t−1}]`,
//! its hidden state queries the regions through additive attention, and the
//! language LSTM reads `[v̂_t; h¹_t]` to produce the next-token distribution.

mod decode;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_value, unknown_key, KvSection};
use crate::corpus::{reverse_caption, Control, RegionFeatureSet, TokenId, BOS, EOS, PAD};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::nn::{lstm_activate, Linear, LinearIds, LstmCell, LstmIds};
use crate::tensor::{concat, xavier_uniform, Graph, ParamId, ParamSet, Real, Tensor, Var};

pub use decode::{
    beam_decode, beam_search, greedy_batch, greedy_decode, sample_batch, sample_decode, Hypothesis,
    Sample, StepModel,
};

/// Pre-softmax bias that removes padded regions from attention.
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn code(self) -> u8 {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Direction::Forward),
            1 => Ok(Direction::Backward),
            _ => Err(Error::Format(format!("unknown direction code {c}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fwd" | "forward" => Ok(Direction::Forward),
            "bwd" | "backward" => Ok(Direction::Backward),
            _ => Err(Error::Config(format!("unknown direction {s:?}"))),
        }
    }

    /// Token order the decoder works in.
    pub fn to_decoder_order(self, tokens: &[TokenId]) -> Vec<TokenId> {
        match self {
            Direction::Forward => tokens.to_vec(),
            Direction::Backward => reverse_caption(tokens),
        }
    }

    /// Natural reading order of decoded tokens.
    pub fn to_natural_order(self, tokens: &[TokenId]) -> Vec<TokenId> {
        self.to_decoder_order(tokens)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionerConfig {
    pub feat_dim: usize,
    /// Width D of projected region features.
    pub proj_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub att_dim: usize,
    pub vocab_size: usize,
    pub control: Control,
    pub direction: Direction,
    pub max_len: usize,
}

impl CaptionerConfig {
    pub fn desk(feat_dim: usize, vocab_size: usize) -> Self {
        CaptionerConfig {
            feat_dim,
            proj_dim: 128,
            embed_dim: 64,
            hidden: 128,
            att_dim: 64,
            vocab_size,
            control: Control::Quality,
            direction: Direction::Forward,
            max_len: 16,
        }
    }

    pub fn full(feat_dim: usize, vocab_size: usize) -> Self {
        CaptionerConfig {
            proj_dim: 1000,
            embed_dim: 1000,
            hidden: 1000,
            att_dim: 512,
            ..Self::desk(feat_dim, vocab_size)
        }
    }

    pub fn beta_dim(&self) -> usize {
        self.control.beta_dim()
    }

    /// Width of the attention-LSTM input `[β; h²; v̄; X]`.
    pub fn lstm1_input(&self) -> usize {
        self.beta_dim() + self.hidden + self.proj_dim + self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feat_dim,
            self.proj_dim,
            self.embed_dim,
            self.hidden,
            self.att_dim,
            self.vocab_size,
            self.max_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "captioner dimensions must be positive: {self:?}"
            )));
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config(
                "vocabulary must contain the reserved tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Architecture keys settable from a config file. Vocabulary and feature
/// widths come from the dataset, direction and control from the command.
impl KvSection for CaptionerConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "proj_dim" => self.proj_dim = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "att_dim" => self.att_dim = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            _ => return unknown_key("captioner", key),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("proj_dim", self.proj_dim),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("att_dim", self.att_dim),
            ("max_len", self.max_len),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Ids {
    proj: LinearIds,
    embed: ParamId,
    lstm1: LstmIds,
    att_v: ParamId,
    att_h: ParamId,
    att_w: ParamId,
    lstm2: LstmIds,
    out: LinearIds,
}

impl Ids {
    fn lookup<F: Real>(params: &ParamSet<F>, c: &CaptionerConfig) -> Result<Self> {
        let id = |n: &str| params.require(&format!("captioner/{n}"));
        Ok(Ids {
            proj: LinearIds {
                weight: id("proj/weight")?,
                bias: Some(id("proj/bias")?),
            },
            embed: id("embed")?,
            lstm1: LstmIds {
                w_ih: id("lstm1/w_ih")?,
                w_hh: id("lstm1/w_hh")?,
                bias: id("lstm1/bias")?,
                input: c.lstm1_input(),
                hidden: c.hidden,
            },
            att_v: id("att_v")?,
            att_h: id("att_h")?,
            att_w: id("att_w")?,
            lstm2: LstmIds {
                w_ih: id("lstm2/w_ih")?,
                w_hh: id("lstm2/w_hh")?,
                bias: id("lstm2/bias")?,
                input: c.proj_dim + c.hidden,
                hidden: c.hidden,
            },
            out: LinearIds {
                weight: id("out/weight")?,
                bias: Some(id("out/bias")?),
            },
        })
    }
}

/// Decoder parameters plus the architecture they were built for.
#[derive(Clone, Debug)]
pub struct Captioner<F: Real> {
    config: CaptionerConfig,
    params: ParamSet<F>,
    ids: Ids,
}

/// Parameters bound into one graph.
pub struct Bound<'g, F: Real> {
    proj: Linear<'g, F>,
    embed: Var<'g, F>,
    lstm1: LstmCell<'g, F>,
    w1_beta: Var<'g, F>,
    w1_h2: Var<'g, F>,
    w1_vbar: Var<'g, F>,
    w1_x: Var<'g, F>,
    att_v: Var<'g, F>,
    att_h: Var<'g, F>,
    att_w: Var<'g, F>,
    lstm2: LstmCell<'g, F>,
    out: Linear<'g, F>,
}

/// Per-image quantities computed once per sequence.
#[derive(Clone, Copy, Debug)]
pub struct Context<'g, F: Real> {
    pub n: usize,
    /// Padded region count.
    pub k: usize,
    /// `[n, k, D]` projected regions.
    pub v3: Var<'g, F>,
    /// `[n·k, A]` region half of the attention score.
    pub v_att: Var<'g, F>,
    /// `[n·k, 1]` zero for real regions, large negative for padding.
    pub mask: Var<'g, F>,
    /// `[n, D]` mean of the real projected regions.
    pub v_bar: Var<'g, F>,
    /// `[n, 4H]` β and v̄ contributions to the attention-LSTM gates plus bias.
    pub static_gates: Var<'g, F>,
}

/// Plain-tensor copy of a [`Context`], used to carry it between graphs.
#[derive(Clone, Debug)]
pub struct ContextTensors<F: Real> {
    n: usize,
    k: usize,
    v3: Tensor<F>,
    v_att: Tensor<F>,
    mask: Tensor<F>,
    v_bar: Tensor<F>,
    static_gates: Tensor<F>,
}

impl<F: Real> ContextTensors<F> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bind<'g>(&self, g: &'g Graph<F>) -> Context<'g, F> {
        Context {
            n: self.n,
            k: self.k,
            v3: g.constant(&self.v3),
            v_att: g.constant(&self.v_att),
            mask: g.constant(&self.mask),
            v_bar: g.constant(&self.v_bar),
            static_gates: g.constant(&self.static_gates),
        }
    }

    /// Context whose row `j` is row `rows[j]` of this one.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() || rows.iter().any(|&r| r >= self.n) {
            return contract_err(format!("context rows {rows:?} outside 0..{}", self.n));
        }
        let pick = |t: &Tensor<F>, per_row: usize| -> Result<Tensor<F>> {
            let mut shape = t.shape().to_vec();
            let mut data = Vec::with_capacity(rows.len() * per_row);
            for &r in rows {
                data.extend_from_slice(&t.data()[r * per_row..(r + 1) * per_row]);
            }
            shape[0] = shape[0] / self.n * rows.len();
            Tensor::new(shape, data)
        };
        let per = |t: &Tensor<F>| t.numel() / self.n;
        Ok(ContextTensors {
            n: rows.len(),
            k: self.k,
            v3: pick(&self.v3, per(&self.v3))?,
            v_att: pick(&self.v_att, per(&self.v_att))?,
            mask: pick(&self.mask, per(&self.mask))?,
            v_bar: pick(&self.v_bar, per(&self.v_bar))?,
            static_gates: pick(&self.static_gates, per(&self.static_gates))?,
        })
    }
}

impl<'g, F: Real> Context<'g, F> {
    pub fn to_tensors(&self) -> ContextTensors<F> {
        ContextTensors {
            n: self.n,
            k: self.k,
            v3: self.v3.value(),
            v_att: self.v_att.value(),
            mask: self.mask.value(),
            v_bar: self.v_bar.value(),
            static_gates: self.static_gates.value(),
        }
    }
}

/// Hidden and cell states of both LSTMs, each `[n, H]`.
#[derive(Clone, Copy, Debug)]
pub struct State<'g, F: Real> {
    pub h1: Var<'g, F>,
    pub c1: Var<'g, F>,
    pub h2: Var<'g, F>,
    pub c2: Var<'g, F>,
}

/// Plain-tensor decoder state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTensors<F: Real> {
    pub h1: Tensor<F>,
    pub c1: Tensor<F>,
    pub h2: Tensor<F>,
    pub c2: Tensor<F>,
}

impl<F: Real> StateTensors<F> {
    pub fn zeros(n: usize, hidden: usize) -> Self {
        let z = Tensor::zeros(&[n, hidden]);
        StateTensors {
            h1: z.clone(),
            c1: z.clone(),
            h2: z.clone(),
            c2: z,
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph<F>) -> State<'g, F> {
        State {
            h1: g.constant(&self.h1),
            c1: g.constant(&self.c1),
            h2: g.constant(&self.h2),
            c2: g.constant(&self.c2),
        }
    }

    /// State whose row `j` is row `rows[j]` of this one.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor<F>| {
            let h = t.shape()[1];
            let mut data = Vec::with_capacity(rows.len() * h);
            for &r in rows {
                data.extend_from_slice(&t.data()[r * h..(r + 1) * h]);
            }
            Tensor::new(vec![rows.len(), h], data)
        };
        Ok(StateTensors {
            h1: pick(&self.h1)?,
            c1: pick(&self.c1)?,
            h2: pick(&self.h2)?,
            c2: pick(&self.c2)?,
        })
    }
}

impl<'g, F: Real> State<'g, F> {
    pub fn to_tensors(&self) -> StateTensors<F> {
        StateTensors {
            h1: self.h1.value(),
            c1: self.c1.value(),
            h2: self.h2.value(),
            c2: self.c2.value(),
        }
    }
}

/// Outputs of one decoding step.
pub struct StepOut<'g, F: Real> {
    /// `[n, V]` log-probabilities of the next token.
    pub log_probs: Var<'g, F>,
    /// `[n, k]` attention weights over regions.
    pub alpha: Var<'g, F>,
    /// `[n, D]` attended feature.
    pub v_hat: Var<'g, F>,
    pub state: State<'g, F>,
}

fn features_of<F: Real>(
    feats: &[&RegionFeatureSet],
    d_f: usize,
) -> Result<(usize, Vec<F>, Vec<F>, Vec<F>)> {
    let n = feats.len();
    let k = feats.iter().map(|f| f.num_regions()).max().unwrap_or(0);
    if n == 0 || k == 0 {
        return contract_err("no regions to encode");
    }
    let mut flat = vec![F::zero(); n * k * d_f];
    let mut mask = vec![F::from_f64_lossy(MASKED); n * k];
    let mut avg = vec![F::zero(); n * n * k];
    for (b, f) in feats.iter().enumerate() {
        let kb = f.num_regions();
        if kb == 0 {
            return contract_err(format!("scene {} has no regions", f.scene_id));
        }
        for (i, row) in f.features.iter().enumerate() {
            if row.len() != d_f {
                return dim_err(format!(
                    "region feature width {} does not match D_f = {d_f}",
                    row.len()
                ));
            }
            let base = (b * k + i) * d_f;
            for (dst, &x) in flat[base..base + d_f].iter_mut().zip(row) {
                *dst = F::from_f64_lossy(f64::from(x));
            }
            mask[b * k + i] = F::zero();
            avg[b * n * k + b * k + i] = F::from_f64_lossy(1.0 / kb as f64);
        }
    }
    Ok((k, flat, mask, avg))
}

impl<F: Real> Captioner<F> {
    pub fn new<R: Rng + ?Sized>(config: CaptionerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut p = ParamSet::new();
        LinearIds::register(&mut p, "captioner/proj", c.feat_dim, c.proj_dim, true, rng)?;
        p.insert(
            "captioner/embed",
            xavier_uniform(c.vocab_size, c.embed_dim, rng),
        )?;
        LstmIds::register(&mut p, "captioner/lstm1", c.lstm1_input(), c.hidden, rng)?;
        p.insert(
            "captioner/att_v",
            xavier_uniform(c.proj_dim, c.att_dim, rng),
        )?;
        p.insert("captioner/att_h", xavier_uniform(c.hidden, c.att_dim, rng))?;
        p.insert("captioner/att_w", xavier_uniform(c.att_dim, 1, rng))?;
        LstmIds::register(
            &mut p,
            "captioner/lstm2",
            c.proj_dim + c.hidden,
            c.hidden,
            rng,
        )?;
        LinearIds::register(&mut p, "captioner/out", c.hidden, c.vocab_size, true, rng)?;
        Self::from_parts(config, p)
    }

    /// Wraps existing parameters, checking every expected name and shape.
    pub fn from_parts(config: CaptionerConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        let ids = Ids::lookup(&params, &config)?;
        let c = &config;
        let expect = [
            (ids.proj.weight, vec![c.feat_dim, c.proj_dim]),
            (ids.proj.bias.expect("proj has a bias"), vec![c.proj_dim]),
            (ids.embed, vec![c.vocab_size, c.embed_dim]),
            (ids.lstm1.w_ih, vec![c.lstm1_input(), 4 * c.hidden]),
            (ids.lstm1.w_hh, vec![c.hidden, 4 * c.hidden]),
            (ids.lstm1.bias, vec![4 * c.hidden]),
            (ids.att_v, vec![c.proj_dim, c.att_dim]),
            (ids.att_h, vec![c.hidden, c.att_dim]),
            (ids.att_w, vec![c.att_dim, 1]),
            (ids.lstm2.w_ih, vec![c.proj_dim + c.hidden, 4 * c.hidden]),
            (ids.lstm2.w_hh, vec![c.hidden, 4 * c.hidden]),
            (ids.lstm2.bias, vec![4 * c.hidden]),
            (ids.out.weight, vec![c.hidden, c.vocab_size]),
            (ids.out.bias.expect("out has a bias"), vec![c.vocab_size]),
        ];
        for (id, shape) in expect {
            if params.get(id).shape() != shape.as_slice() {
                return dim_err(format!(
                    "{} has shape {:?}, expected {shape:?}",
                    params.name(id),
                    params.get(id).shape()
                ));
            }
        }
        Ok(Captioner {
            config,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &CaptionerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<F> {
        self.params
    }

    /// Same model in another precision.
    pub fn cast<G: Real>(&self) -> Captioner<G> {
        Captioner {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids,
        }
    }

    /// Sets the rows of the attention-LSTM input weights that read β to zero.
    pub fn zero_beta_weights(&mut self) {
        let rows = self.config.beta_dim() * 4 * self.config.hidden;
        self.params.get_mut(self.ids.lstm1.w_ih).data_mut()[..rows]
            .iter_mut()
            .for_each(|x| *x = F::zero());
    }

    pub fn bind<'g>(&self, g: &'g Graph<F>) -> Result<Bound<'g, F>> {
        let c = &self.config;
        let lstm1 = self.ids.lstm1.bind(g, &self.params);
        let (b, h, d) = (c.beta_dim(), c.hidden, c.proj_dim);
        Ok(Bound {
            proj: self.ids.proj.bind(g, &self.params),
            embed: g.param(&self.params, self.ids.embed),
            w1_beta: lstm1.w_ih.narrow(0, 0, b)?,
            w1_h2: lstm1.w_ih.narrow(0, b, h)?,
            w1_vbar: lstm1.w_ih.narrow(0, b + h, d)?,
            w1_x: lstm1.w_ih.narrow(0, b + h + d, c.embed_dim)?,
            lstm1,
            att_v: g.param(&self.params, self.ids.att_v),
            att_h: g.param(&self.params, self.ids.att_h),
            att_w: g.param(&self.params, self.ids.att_w),
            lstm2: self.ids.lstm2.bind(g, &self.params),
            out: self.ids.out.bind(g, &self.params),
        })
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.config.beta_dim() {
            return contract_err(format!(
                "control signal has {} values but the model expects {}",
                beta.len(),
                self.config.beta_dim()
            ));
        }
        Ok(())
    }

    /// `v_i = W_v f_i + b_v` for every region, and their mean `v̄`.
    pub fn project_features<'g>(
        &self,
        g: &'g Graph<F>,
        w: &Bound<'g, F>,
        feats: &RegionFeatureSet,
    ) -> Result<(Var<'g, F>, Var<'g, F>)> {
        let (k, flat, _, avg) = features_of::<F>(&[feats], self.config.feat_dim)?;
        let f = g.constant_from(vec![k, self.config.feat_dim], flat)?;
        let v = w.proj.forward(&f)?;
        let v_bar = g.constant_from(vec![1, k], avg)?.matmul(&v)?;
        Ok((v, v_bar))
    }

    /// Per-image context for a batch of scenes with one β each.
    pub fn encode<'g>(
        &self,
        g: &'g Graph<F>,
        w: &Bound<'g, F>,
        feats: &[&RegionFeatureSet],
        betas: &[&[f64]],
    ) -> Result<Context<'g, F>> {
        let c = &self.config;
        if feats.len() != betas.len() {
            return contract_err(format!(
                "{} scenes but {} control signals",
                feats.len(),
                betas.len()
            ));
        }
        let n = feats.len();
        let (k, flat, mask, avg) = features_of::<F>(feats, c.feat_dim)?;
        let mut beta_flat = Vec::with_capacity(n * c.beta_dim());
        for b in betas {
            self.check_beta(b)?;
            beta_flat.extend(b.iter().map(|&x| F::from_f64_lossy(x)));
        }
        let f = g.constant_from(vec![n * k, c.feat_dim], flat)?;
        let v = w.proj.forward(&f)?;
        let v_bar = g.constant_from(vec![n, n * k], avg)?.matmul(&v)?;
        let v_att = v.matmul(&w.att_v)?;
        let beta = g.constant_from(vec![n, c.beta_dim()], beta_flat)?;
        let static_gates = beta
            .matmul(&w.w1_beta)?
            .add(&v_bar.matmul(&w.w1_vbar)?)?
            .add_row(&w.lstm1.bias)?;
        Ok(Context {
            n,
            k,
            v3: v.reshape(vec![n, k, c.proj_dim])?,
            v_att,
            mask: g.constant_from(vec![n * k, 1], mask)?,
            v_bar,
            static_gates,
        })
    }

    pub fn zero_state<'g>(&self, g: &'g Graph<F>, n: usize) -> State<'g, F> {
        StateTensors::zeros(n, self.config.hidden).bind(g)
    }

    /// One decoding step for every row of the context.
    pub fn step<'g>(
        &self,
        w: &Bound<'g, F>,
        ctx: &Context<'g, F>,
        state: &State<'g, F>,
        prev: &[TokenId],
    ) -> Result<StepOut<'g, F>> {
        let (n, k, h) = (ctx.n, ctx.k, self.config.hidden);
        if prev.len() != n {
            return contract_err(format!("{} previous tokens for {n} rows", prev.len()));
        }
        let x = w.embed.gather_rows(prev)?;
        let gates1 = x
            .matmul(&w.w1_x)?
            .add(&state.h2.matmul(&w.w1_h2)?)?
            .add(&state.h1.matmul(&w.lstm1.w_hh)?)?
            .add(&ctx.static_gates)?;
        let (h1, c1) = lstm_activate(&gates1, &state.c1, h)?;

        let query = h1.matmul(&w.att_h)?.repeat_rows(k)?;
        let z = ctx
            .v_att
            .add(&query)?
            .tanh()
            .matmul(&w.att_w)?
            .add(&ctx.mask)?;
        let alpha = z.reshape(vec![n, k])?.softmax(1)?;
        let v_hat = alpha
            .reshape(vec![n, 1, k])?
            .batch_matmul(&ctx.v3)?
            .reshape(vec![n, self.config.proj_dim])?;

        let (h2, c2) = w
            .lstm2
            .step(&concat(&[v_hat, h1], 1)?, &state.h2, &state.c2)?;
        let log_probs = w.out.forward(&h2)?.log_softmax()?;
        Ok(StepOut {
            log_probs,
            alpha,
            v_hat,
            state: State { h1, c1, h2, c2 },
        })
    }

    /// Teacher-forced `Σ_rows weight_row · Σ_t log p(y_t)` over sequences
    /// given in decoder order. The end token is scored after a sequence when
    /// its `score_end` flag is set.
    pub fn weighted_log_likelihood<'g>(
        &self,
        g: &'g Graph<F>,
        w: &Bound<'g, F>,
        feats: &[&RegionFeatureSet],
        betas: &[&[f64]],
        seqs: &[&[TokenId]],
        weights: &[f64],
        score_end: &[bool],
    ) -> Result<Var<'g, F>> {
        let n = seqs.len();
        if feats.len() != n || weights.len() != n || score_end.len() != n {
            return contract_err("batch parts differ in length");
        }
        let vocab = self.config.vocab_size;
        if let Some(&bad) = seqs.iter().flat_map(|s| s.iter()).find(|&&t| t >= vocab) {
            return contract_err(format!("token {bad} outside vocabulary of {vocab}"));
        }
        let ctx = self.encode(g, w, feats, betas)?;
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
        let mut state = self.zero_state(g, n);
        let mut picked = Vec::with_capacity(steps);
        let mut mask = Vec::with_capacity(steps * n);
        for t in 0..steps {
            let prev: Vec<TokenId> = seqs
                .iter()
                .map(|s| {
                    if t == 0 {
                        BOS
                    } else {
                        s.get(t - 1).copied().unwrap_or(PAD)
                    }
                })
                .collect();
            let target: Vec<TokenId> = seqs
                .iter()
                .map(|s| match t.cmp(&s.len()) {
                    std::cmp::Ordering::Less => s[t],
                    std::cmp::Ordering::Equal => EOS,
                    std::cmp::Ordering::Greater => PAD,
                })
                .collect();
            mask.extend(
                seqs.iter()
                    .zip(weights)
                    .zip(score_end)
                    .map(|((s, &wt), &end)| {
                        let scored = t < s.len() || (t == s.len() && end);
                        F::from_f64_lossy(if scored { wt } else { 0.0 })
                    }),
            );
            let out = self.step(w, &ctx, &state, &prev)?;
            picked.push(out.log_probs.pick(&target)?);
            state = out.state;
        }
        let all = concat(&picked, 0)?;
        let m = g.constant_from(vec![steps * n], mask)?;
        Ok(all.mul(&m)?.sum())
    }

    /// Summed cross-entropy of a batch of references given in natural order,
    /// and the number of scored tokens (end tokens included).
    pub fn xe_loss_batch<'g>(
        &self,
        g: &'g Graph<F>,
        w: &Bound<'g, F>,
        feats: &[&RegionFeatureSet],
        betas: &[&[f64]],
        references: &[&[TokenId]],
    ) -> Result<(Var<'g, F>, usize)> {
        if references.iter().any(|r| r.is_empty()) {
            return contract_err("reference caption is empty");
        }
        let ordered: Vec<Vec<TokenId>> = references
            .iter()
            .map(|r| self.config.direction.to_decoder_order(r))
            .collect();
        let seqs: Vec<&[TokenId]> = ordered.iter().map(Vec::as_slice).collect();
        let n = seqs.len();
        let ll =
            self.weighted_log_likelihood(g, w, feats, betas, &seqs, &vec![1.0; n], &vec![true; n])?;
        let tokens = references.iter().map(|r| r.len() + 1).sum();
        Ok((ll.neg(), tokens))
    }

    /// `−Σ_t log p(y*_t | y*_{<t}, β)` of one reference.
    pub fn xe_loss<'g>(
        &self,
        g: &'g Graph<F>,
        w: &Bound<'g, F>,
        beta: &[f64],
        reference: &[TokenId],
        feats: &RegionFeatureSet,
    ) -> Result<Var<'g, F>> {
        Ok(self.xe_loss_batch(g, w, &[feats], &[beta], &[reference])?.0)
    }

    /// Encodes scenes into a reusable plain-tensor context (no gradients).
    pub fn context_tensors(
        &self,
        feats: &[&RegionFeatureSet],
        betas: &[&[f64]],
    ) -> Result<ContextTensors<F>> {
        let g = Graph::new();
        let w = self.bind(&g)?;
        Ok(self.encode(&g, &w, feats, betas)?.to_tensors())
    }

    /// One step outside any training graph: log-probabilities `[n][V]` and
    /// the next state.
    pub fn step_tensors(
        &self,
        ctx: &ContextTensors<F>,
        state: &StateTensors<F>,
        prev: &[TokenId],
    ) -> Result<(Vec<Vec<f64>>, StateTensors<F>)> {
        let g = Graph::new();
        let w = self.bind(&g)?;
        let out = self.step(&w, &ctx.bind(&g), &state.bind(&g), prev)?;
        let v = self.config.vocab_size;
        let lp = out.log_probs.to_vec();
        let rows = lp
            .chunks(v)
            .map(|r| r.iter().map(|x| x.as_f64()).collect())
            .collect();
        Ok((rows, out.state.to_tensors()))
    }
}

impl Captioner<f32> {
    /// Parameters plus the metadata needed to rebuild the model.
    pub fn to_checkpoint(&self, vocab_hash: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.insert_params(&self.params)?;
        let c = &self.config;
        ck.set_meta("meta/beta_dim", c.beta_dim() as f64)?;
        ck.set_meta("meta/direction", f64::from(c.direction.code()))?;
        ck.set_meta("meta/control", f64::from(c.control.code()))?;
        ck.set_meta("meta/max_len", c.max_len as f64)?;
        ck.set_vocab_hash(vocab_hash)?;
        Ok(ck)
    }

    /// Rebuilds a captioner; dimensions are read off the stored shapes.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let shape = |n: &str| -> Result<Vec<usize>> {
            Ok(ck.require(&format!("captioner/{n}"))?.shape().to_vec())
        };
        let proj = shape("proj/weight")?;
        let embed = shape("embed")?;
        let att = shape("att_v")?;
        let hh = shape("lstm1/w_hh")?;
        if proj.len() != 2 || embed.len() != 2 || att.len() != 2 || hh.len() != 2 {
            return Err(Error::Format("captioner tensors must be matrices".into()));
        }
        let control = Control::from_code(ck.meta_u64("meta/control")? as u8)?;
        let beta_dim = ck.meta_u64("meta/beta_dim")? as usize;
        if beta_dim != control.beta_dim() {
            return Err(Error::Format(format!(
                "meta/beta_dim {beta_dim} disagrees with control {}",
                control.name()
            )));
        }
        let config = CaptionerConfig {
            feat_dim: proj[0],
            proj_dim: proj[1],
            embed_dim: embed[1],
            hidden: hh[0],
            att_dim: att[1],
            vocab_size: embed[0],
            control,
            direction: Direction::from_code(ck.meta_u64("meta/direction")? as u8)?,
            max_len: ck.meta_u64("meta/max_len")? as usize,
        };
        let params = ck.params_with_prefix("captioner/")?;
        Self::from_parts(config, params).map_err(|e| Error::Format(e.to_string()))
    }
}
