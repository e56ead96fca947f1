//! Training loops: teacher-forced cross-entropy, self-critical CIDEr
//! optimization, and triplet training of the matcher on caption pairs.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{greedy_batch, sample_batch, Captioner};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_value, unknown_key, KvSection};
use crate::corpus::{Caption, Control, ControlSignal, SceneRecord, TokenId};
use crate::error::{contract_err, Error, Result};
use crate::matcher::Matcher;
use crate::metrics::{cider_d, mean, IdfStats};
use crate::rng::stream;
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Graph, ParamSet};

/// Scenes decoded together during validation and pair construction.
const DECODE_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Xe,
    Scst,
    Matcher,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Xe => "xe",
            TrainMode::Scst => "scst",
            TrainMode::Matcher => "matcher",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xe" => Ok(TrainMode::Xe),
            "scst" => Ok(TrainMode::Scst),
            "matcher" => Ok(TrainMode::Matcher),
            _ => Err(Error::Config(format!("unknown training mode {s:?}"))),
        }
    }
}

/// How the control signal of a training or decoding example is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum BetaPolicy {
    /// Attributes of the reference being fitted; for scene-level decoding,
    /// those of the scene's first reference.
    FromLabel,
    Fixed(Vec<f64>),
}

impl BetaPolicy {
    pub fn for_caption(&self, caption: &Caption, control: Control) -> Vec<f64> {
        match self {
            BetaPolicy::FromLabel => ControlSignal::from_caption(caption, control)
                .values()
                .to_vec(),
            BetaPolicy::Fixed(v) => v.clone(),
        }
    }

    pub fn for_scene(&self, scene: &SceneRecord, control: Control) -> Result<Vec<f64>> {
        match self {
            BetaPolicy::FromLabel => match scene.captions.first() {
                Some(c) => Ok(self.for_caption(c, control)),
                None => contract_err(format!("scene {} has no references", scene.scene_id)),
            },
            BetaPolicy::Fixed(v) => Ok(v.clone()),
        }
    }
}

impl fmt::Display for BetaPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaPolicy::FromLabel => write!(f, "label"),
            BetaPolicy::Fixed(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

impl FromStr for BetaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "label" {
            return Ok(BetaPolicy::FromLabel);
        }
        let values = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad control value {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() || values.len() > 4 || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "control signal {s:?} must hold 1 to 4 finite values"
            )));
        }
        Ok(BetaPolicy::Fixed(values))
    }
}

/// Inference-time control signal used when none is requested: quality 4,
/// length 9, tense 3, noun count 3.
pub fn default_beta(control: Control) -> Vec<f64> {
    let per = |a| match a {
        crate::corpus::Attribute::Quality => 4.0,
        crate::corpus::Attribute::Length => 9.0,
        crate::corpus::Attribute::Tense => 3.0,
        crate::corpus::Attribute::Nouns => 3.0,
    };
    control.layout().into_iter().map(per).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    /// Control signal while fitting; cross-entropy requires `FromLabel`.
    pub beta: BetaPolicy,
    /// Control signal for validation decoding; `None` uses the model default.
    pub val_beta: Option<BetaPolicy>,
    pub clip_norm: f64,
    /// Validation scenes decoded per epoch (0 = all).
    pub val_limit: usize,
    /// Adds (scene, reference) positives against in-batch negatives.
    pub append_references: bool,
}

impl TrainConfig {
    pub fn desk(mode: TrainMode) -> Self {
        TrainConfig {
            mode,
            epochs: match mode {
                TrainMode::Xe => 30,
                TrainMode::Scst => 20,
                TrainMode::Matcher => 10,
            },
            batch_size: 32,
            lr: 5e-4,
            lr_decay: 0.8,
            decay_every: 3,
            seed: 1,
            beta: BetaPolicy::FromLabel,
            val_beta: None,
            clip_norm: 5.0,
            val_limit: 0,
            append_references: false,
        }
    }

    pub fn full(mode: TrainMode) -> Self {
        TrainConfig {
            epochs: match mode {
                TrainMode::Xe => 35,
                TrainMode::Scst => 40,
                TrainMode::Matcher => 10,
            },
            ..Self::desk(mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "decay factor must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config(
                "epochs, batch size and decay interval must be positive".into(),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }

    /// `lr₀ · factor^⌊epoch / interval⌋` for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

impl KvSection for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "lr_decay" => self.lr_decay = parse_value(key, value)?,
            "decay_every" => self.decay_every = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "beta" => self.beta = value.parse()?,
            "val_beta" => {
                self.val_beta = match value {
                    "default" => None,
                    v => Some(v.parse()?),
                }
            }
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "val_limit" => self.val_limit = parse_value(key, value)?,
            "append_references" => self.append_references = parse_value(key, value)?,
            _ => return unknown_key("train", key),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("mode".into(), self.mode.name().into()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("lr_decay".into(), self.lr_decay.to_string()),
            ("decay_every".into(), self.decay_every.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("beta".into(), self.beta.to_string()),
            (
                "val_beta".into(),
                self.val_beta
                    .as_ref()
                    .map_or("default".into(), |b| b.to_string()),
            ),
            ("clip_norm".into(), self.clip_norm.to_string()),
            ("val_limit".into(), self.val_limit.to_string()),
            (
                "append_references".into(),
                self.append_references.to_string(),
            ),
        ]
    }
}

/// Summary of one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Cross-entropy per scored token (end tokens included).
    pub token_loss: Option<f64>,
    pub mean_reward: Option<f64>,
    pub val_cider: Option<f64>,
    /// Seconds spent in the epoch; the only non-deterministic field.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }
}

/// Called after every epoch with its record and a checkpoint of the model
/// and optimizer state.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord, &Checkpoint) -> Result<()>;

fn captioner_checkpoint(
    model: &Captioner<f32>,
    adam: &Adam<f32>,
    vocab_hash: u64,
) -> Result<Checkpoint> {
    let mut ck = model.to_checkpoint(vocab_hash)?;
    ck.insert_adam(model.params(), adam)?;
    Ok(ck)
}

fn apply_update(
    params: &mut ParamSet<f32>,
    adam: &mut Adam<f32>,
    g: &Graph<f32>,
    clip: f64,
) -> Result<()> {
    params.zero_grads();
    params.accumulate_grads(g);
    params.fill_missing_grads();
    clip_grad_norm(params, clip);
    adam.step(params)
}

/// Greedy captions (natural order) for scenes under a policy.
pub fn greedy_captions(
    model: &Captioner<f32>,
    scenes: &[&SceneRecord],
    policy: &BetaPolicy,
) -> Result<Vec<Vec<TokenId>>> {
    let control = model.config().control;
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(DECODE_BATCH) {
        let betas = chunk
            .iter()
            .map(|s| policy.for_scene(s, control))
            .collect::<Result<Vec<_>>>()?;
        let beta_refs: Vec<&[f64]> = betas.iter().map(Vec::as_slice).collect();
        let feats: Vec<_> = chunk.iter().map(|s| &s.features).collect();
        out.extend(greedy_batch(
            model,
            &feats,
            &beta_refs,
            model.config().max_len,
        )?);
    }
    Ok(out)
}

/// Mean CIDEr-D of greedy captions against each scene's references.
pub fn mean_greedy_cider(
    model: &Captioner<f32>,
    scenes: &[SceneRecord],
    policy: &BetaPolicy,
    idf: &IdfStats,
) -> Result<f64> {
    let refs: Vec<&SceneRecord> = scenes.iter().collect();
    let caps = greedy_captions(model, &refs, policy)?;
    let scores: Vec<f64> = caps
        .iter()
        .zip(scenes)
        .map(|(c, s)| cider_d(c, &s.reference_tokens(), idf))
        .collect();
    Ok(mean(&scores))
}

fn validation(
    model: &Captioner<f32>,
    val: &[SceneRecord],
    cfg: &TrainConfig,
    idf: &IdfStats,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let n = if cfg.val_limit == 0 {
        val.len()
    } else {
        cfg.val_limit.min(val.len())
    };
    let policy = cfg
        .val_beta
        .clone()
        .unwrap_or_else(|| BetaPolicy::Fixed(default_beta(model.config().control)));
    Ok(Some(mean_greedy_cider(model, &val[..n], &policy, idf)?))
}

fn check_beta_width(policy: &BetaPolicy, control: Control) -> Result<()> {
    if let BetaPolicy::Fixed(v) = policy {
        if v.len() != control.beta_dim() {
            return contract_err(format!(
                "control signal has {} values but the model expects {}",
                v.len(),
                control.beta_dim()
            ));
        }
    }
    Ok(())
}

/// Scenes, split and idf a captioner is fitted on.
pub struct CaptionData<'a> {
    pub train: &'a [SceneRecord],
    pub val: &'a [SceneRecord],
    pub idf: &'a IdfStats,
    pub vocab_hash: u64,
}

/// Teacher-forced cross-entropy: mini-batch Adam on the mean per-caption
/// loss, visiting every (scene, reference) pair once per epoch.
pub fn train_xe(
    model: &mut Captioner<f32>,
    data: &CaptionData<'_>,
    cfg: &TrainConfig,
    on_epoch: EpochHook<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if cfg.beta != BetaPolicy::FromLabel {
        return contract_err("cross-entropy training takes the control signal from each reference");
    }
    let mut pairs: Vec<(usize, usize)> = data
        .train
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.captions.len()).map(move |j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return contract_err("no training captions");
    }
    let control = model.config().control;
    let mut rng = stream(cfg.seed, "shuffle");
    let mut adam = Adam::new(cfg.adam(), model.params());
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        adam.set_lr(cfg.lr_at(epoch));
        pairs.shuffle(&mut rng);
        let (mut loss_sum, mut tokens_sum) = (0.0, 0usize);
        for batch in pairs.chunks(cfg.batch_size) {
            let feats: Vec<_> = batch
                .iter()
                .map(|&(i, _)| &data.train[i].features)
                .collect();
            let caps: Vec<&Caption> = batch
                .iter()
                .map(|&(i, j)| &data.train[i].captions[j])
                .collect();
            let betas: Vec<Vec<f64>> = caps
                .iter()
                .map(|c| cfg.beta.for_caption(c, control))
                .collect();
            let beta_refs: Vec<&[f64]> = betas.iter().map(Vec::as_slice).collect();
            let refs: Vec<&[TokenId]> = caps.iter().map(|c| c.tokens.as_slice()).collect();
            let g = Graph::new();
            let w = model.bind(&g)?;
            let (total, tokens) = model.xe_loss_batch(&g, &w, &feats, &beta_refs, &refs)?;
            let loss = total.scale(1.0 / batch.len() as f64);
            if !loss.item().is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss in epoch {}",
                    epoch + 1
                )));
            }
            g.backward(loss)?;
            loss_sum += f64::from(total.item());
            tokens_sum += tokens;
            apply_update(model.params_mut(), &mut adam, &g, cfg.clip_norm)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: cfg.lr_at(epoch),
            mean_loss: loss_sum / pairs.len() as f64,
            token_loss: Some(loss_sum / tokens_sum as f64),
            mean_reward: None,
            val_cider: validation(model, data.val, cfg, data.idf)?,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "xe epoch {} loss {:.4} ({:.4}/token) val cider {:?}",
            record.epoch,
            record.mean_loss,
            loss_sum / tokens_sum as f64,
            record.val_cider
        );
        on_epoch(
            &record,
            &captioner_checkpoint(model, &adam, data.vocab_hash)?,
        )?;
        log.records.push(record);
    }
    Ok(log)
}

/// Outcome of one self-critical batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ScstBatch {
    pub sample_rewards: Vec<f64>,
    pub greedy_rewards: Vec<f64>,
    /// Rows with a non-zero advantage.
    pub updated_rows: usize,
}

/// One self-critical update on `scenes`: a sampled caption per scene is
/// rewarded with CIDEr-D relative to the greedy caption, and
/// `−(r(yˢ) − r(ŷ)) · log p(yˢ)` averaged over the batch is minimized.
/// Rows whose advantage is zero contribute nothing.
pub fn scst_step<R: Rng + ?Sized>(
    model: &mut Captioner<f32>,
    adam: &mut Adam<f32>,
    scenes: &[&SceneRecord],
    beta: &[f64],
    idf: &IdfStats,
    clip_norm: f64,
    rng: &mut R,
) -> Result<ScstBatch> {
    let n = scenes.len();
    let max_len = model.config().max_len;
    let dir = model.config().direction;
    let feats: Vec<_> = scenes.iter().map(|s| &s.features).collect();
    let betas = vec![beta; n];
    let samples = sample_batch(model, &feats, &betas, max_len, rng)?;
    let greedy = greedy_batch(model, &feats, &betas, max_len)?;
    let mut sample_rewards = Vec::with_capacity(n);
    let mut greedy_rewards = Vec::with_capacity(n);
    for ((s, gcap), scene) in samples.iter().zip(&greedy).zip(scenes) {
        let refs = scene.reference_tokens();
        sample_rewards.push(cider_d(
            &dir.to_natural_order(&s.decoder_tokens),
            &refs,
            idf,
        ));
        greedy_rewards.push(cider_d(gcap, &refs, idf));
    }
    let rows: Vec<usize> = (0..n)
        .filter(|&i| sample_rewards[i] != greedy_rewards[i])
        .collect();
    if !rows.is_empty() {
        let g = Graph::new();
        let w = model.bind(&g)?;
        let f: Vec<_> = rows.iter().map(|&i| feats[i]).collect();
        let b: Vec<&[f64]> = rows.iter().map(|_| beta).collect();
        let seqs: Vec<&[TokenId]> = rows
            .iter()
            .map(|&i| samples[i].decoder_tokens.as_slice())
            .collect();
        let weights: Vec<f64> = rows
            .iter()
            .map(|&i| (sample_rewards[i] - greedy_rewards[i]) / n as f64)
            .collect();
        let ended: Vec<bool> = rows.iter().map(|&i| samples[i].ended).collect();
        let loss = model
            .weighted_log_likelihood(&g, &w, &f, &b, &seqs, &weights, &ended)?
            .neg();
        g.backward(loss)?;
        apply_update(model.params_mut(), adam, &g, clip_norm)?;
    }
    Ok(ScstBatch {
        sample_rewards,
        greedy_rewards,
        updated_rows: rows.len(),
    })
}

/// Self-critical sequence training from a cross-entropy initialization with
/// a fixed control signal.
pub fn train_scst(
    model: &mut Captioner<f32>,
    data: &CaptionData<'_>,
    cfg: &TrainConfig,
    on_epoch: EpochHook<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let BetaPolicy::Fixed(beta) = &cfg.beta else {
        return contract_err("self-critical training needs a fixed control signal");
    };
    check_beta_width(&cfg.beta, model.config().control)?;
    if data.train.is_empty() {
        return contract_err("no training scenes");
    }
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle = stream(cfg.seed, "shuffle");
    let mut sampling = stream(cfg.seed, "sampling");
    let mut adam = Adam::new(cfg.adam(), model.params());
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        adam.set_lr(cfg.lr_at(epoch));
        order.shuffle(&mut shuffle);
        let (mut reward_sum, mut loss_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let scenes: Vec<&SceneRecord> = batch.iter().map(|&i| &data.train[i]).collect();
            let out = scst_step(
                model,
                &mut adam,
                &scenes,
                beta,
                data.idf,
                cfg.clip_norm,
                &mut sampling,
            )?;
            reward_sum += out.sample_rewards.iter().sum::<f64>();
            loss_sum += out
                .sample_rewards
                .iter()
                .zip(&out.greedy_rewards)
                .map(|(s, g)| g - s)
                .sum::<f64>();
        }
        let n = order.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: cfg.lr_at(epoch),
            mean_loss: loss_sum / n,
            token_loss: None,
            mean_reward: Some(reward_sum / n),
            val_cider: validation(model, data.val, cfg, data.idf)?,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "scst epoch {} reward {:.4} val cider {:?}",
            record.epoch,
            reward_sum / n,
            record.val_cider
        );
        on_epoch(
            &record,
            &captioner_checkpoint(model, &adam, data.vocab_hash)?,
        )?;
        log.records.push(record);
    }
    Ok(log)
}

/// A scene with its better (`T`) and worse (`T̂`) generated caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherPair {
    pub scene_id: u64,
    pub better: Vec<TokenId>,
    pub worse: Vec<TokenId>,
    pub cider_better: f64,
    pub cider_worse: f64,
}

/// CIDEr gap below which a forward/backward pair counts as a tie.
pub const PAIR_TIE_EPS: f64 = 1e-6;

/// Orders two scored captions into a pair, or `None` for a tie.
pub fn order_pair(
    scene_id: u64,
    a: (&[TokenId], f64),
    b: (&[TokenId], f64),
) -> Option<MatcherPair> {
    if (a.1 - b.1).abs() < PAIR_TIE_EPS {
        return None;
    }
    let (hi, lo) = if a.1 > b.1 { (a, b) } else { (b, a) };
    Some(MatcherPair {
        scene_id,
        better: hi.0.to_vec(),
        worse: lo.0.to_vec(),
        cider_better: hi.1,
        cider_worse: lo.1,
    })
}

/// Greedy-decodes every scene with both captioners and keeps the
/// non-tied pairs, better caption first.
pub fn make_matcher_pairs(
    fwd: &Captioner<f32>,
    bwd: &Captioner<f32>,
    scenes: &[SceneRecord],
    policy: &BetaPolicy,
    idf: &IdfStats,
) -> Result<Vec<MatcherPair>> {
    let refs: Vec<&SceneRecord> = scenes.iter().collect();
    let f = greedy_captions(fwd, &refs, policy)?;
    let b = greedy_captions(bwd, &refs, policy)?;
    let mut pairs = Vec::new();
    for ((cf, cb), s) in f.iter().zip(&b).zip(scenes) {
        let r = s.reference_tokens();
        if cf.is_empty() || cb.is_empty() {
            continue;
        }
        let pair = order_pair(
            s.scene_id,
            (cf, cider_d(cf, &r, idf)),
            (cb, cider_d(cb, &r, idf)),
        );
        pairs.extend(pair);
    }
    Ok(pairs)
}

type Triple<'a> = (
    &'a crate::corpus::RegionFeatureSet,
    &'a [TokenId],
    &'a [TokenId],
);

fn matcher_triples<'a, R: Rng + ?Sized>(
    batch: &[&'a MatcherPair],
    scenes: &HashMap<u64, &'a SceneRecord>,
    append_references: bool,
    rng: &mut R,
) -> Result<Vec<Triple<'a>>> {
    let mut out = Vec::with_capacity(batch.len() * 2);
    let lookup = |id: u64| {
        scenes
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Contract(format!("pair refers to unknown scene {id}")))
    };
    for p in batch {
        out.push((
            &lookup(p.scene_id)?.features,
            p.better.as_slice(),
            p.worse.as_slice(),
        ));
    }
    if append_references && batch.len() > 1 {
        for (i, p) in batch.iter().enumerate() {
            let own = lookup(p.scene_id)?;
            let other = lookup(batch[(i + 1) % batch.len()].scene_id)?;
            if own.captions.is_empty()
                || other.captions.is_empty()
                || own.scene_id == other.scene_id
            {
                continue;
            }
            let pos = &own.captions[rng.random_range(0..own.captions.len())].tokens;
            let neg = &other.captions[rng.random_range(0..other.captions.len())].tokens;
            out.push((&own.features, pos.as_slice(), neg.as_slice()));
        }
    }
    Ok(out)
}

/// Mean triplet loss of the matcher over all pairs.
pub fn mean_matcher_loss(
    matcher: &Matcher<f32>,
    pairs: &[MatcherPair],
    scenes: &[SceneRecord],
) -> Result<f64> {
    let index: HashMap<u64, &SceneRecord> = scenes.iter().map(|s| (s.scene_id, s)).collect();
    let refs: Vec<&MatcherPair> = pairs.iter().collect();
    let mut total = 0.0;
    for batch in refs.chunks(64) {
        let triples = matcher_triples(batch, &index, false, &mut stream(0, "unused"))?;
        let g = Graph::new();
        let w = matcher.bind(&g);
        total += f64::from(matcher.triplet_batch(&g, &w, &triples)?.item()) * batch.len() as f64;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Adam on the mean triplet loss over shuffled mini-batches of pairs.
pub fn train_matcher(
    matcher: &mut Matcher<f32>,
    pairs: &[MatcherPair],
    scenes: &[SceneRecord],
    cfg: &TrainConfig,
    vocab_hash: u64,
    on_epoch: EpochHook<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if pairs.is_empty() {
        return contract_err("no caption pairs to train the matcher on");
    }
    let index: HashMap<u64, &SceneRecord> = scenes.iter().map(|s| (s.scene_id, s)).collect();
    let mut order: Vec<&MatcherPair> = pairs.iter().collect();
    let mut shuffle = stream(cfg.seed, "shuffle");
    let mut sampling = stream(cfg.seed, "sampling");
    let mut adam = Adam::new(cfg.adam(), matcher.params());
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        adam.set_lr(cfg.lr_at(epoch));
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let triples = matcher_triples(batch, &index, cfg.append_references, &mut sampling)?;
            let g = Graph::new();
            let w = matcher.bind(&g);
            let loss = matcher.triplet_batch(&g, &w, &triples)?;
            loss_sum += f64::from(loss.item()) * triples.len() as f64;
            g.backward(loss)?;
            apply_update(matcher.params_mut(), &mut adam, &g, cfg.clip_norm)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: cfg.lr_at(epoch),
            mean_loss: loss_sum / pairs.len() as f64,
            token_loss: None,
            mean_reward: None,
            val_cider: None,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "matcher epoch {} loss {:.4}",
            record.epoch,
            record.mean_loss
        );
        let mut ck = matcher.to_checkpoint(vocab_hash)?;
        ck.insert_adam(matcher.params(), &adam)?;
        on_epoch(&record, &ck)?;
        log.records.push(record);
    }
    Ok(log)
}
