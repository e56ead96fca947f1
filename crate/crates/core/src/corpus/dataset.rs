use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotate::reference_qualities;
use super::grammar::{render_references, GrammarConfig};
use super::lexicon::{TokenId, Vocabulary};
use super::scene::{
    generate_scene, region_features, FeatureProjector, RegionFeatureSet, SceneConfig,
};
use super::Caption;
use crate::config::{
    apply_section, parse_kv, parse_value, prefixed, render_kv, unknown_key, KvSection,
};
use crate::error::{Error, Result};
use crate::metrics::{IdfJson, IdfStats};
use crate::rng::{keyed, stream_seed};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const IDF_FILE: &str = "idf.json";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub feat_dim: usize,
    pub noise_sigma: f32,
    /// Score each reference against all five (itself included) instead of
    /// the other four.
    pub include_self_quality: bool,
    pub scene: SceneConfig,
    pub grammar: GrammarConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1,
            train_scenes: 1600,
            val_scenes: 200,
            test_scenes: 200,
            feat_dim: 64,
            noise_sigma: 0.05,
            include_self_quality: false,
            scene: SceneConfig::default(),
            grammar: GrammarConfig::default(),
        }
    }
}

impl CorpusConfig {
    /// 80/10/10 split of `total` scenes.
    pub fn with_total(total: usize) -> Self {
        let val = total / 10;
        let test = total / 10;
        CorpusConfig {
            train_scenes: total - val - test,
            val_scenes: val,
            test_scenes: test,
            ..Self::default()
        }
    }

    pub fn total(&self) -> usize {
        self.train_scenes + self.val_scenes + self.test_scenes
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.val_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::Config(format!(
                "split sizes must be positive, got {}/{}/{}",
                self.train_scenes, self.val_scenes, self.test_scenes
            )));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("feat_dim must be positive".into()));
        }
        let g = &self.grammar;
        for p in [g.definite_prob, g.modifier_prob, g.sloppy_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if g.tense_weights.iter().any(|w| !(*w >= 0.0))
            || g.tense_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(
                "tense weights must be non-negative with a positive sum".into(),
            ));
        }
        self.scene.validate()
    }
}

impl KvSection for CorpusConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "train_scenes" => self.train_scenes = parse_value(key, value)?,
            "val_scenes" => self.val_scenes = parse_value(key, value)?,
            "test_scenes" => self.test_scenes = parse_value(key, value)?,
            "feat_dim" => self.feat_dim = parse_value(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
            "include_self_quality" => self.include_self_quality = parse_value(key, value)?,
            "min_objects" => self.scene.min_objects = parse_value(key, value)?,
            "max_objects" => self.scene.max_objects = parse_value(key, value)?,
            "num_colors" => self.scene.num_colors = parse_value(key, value)?,
            "definite_prob" => self.grammar.definite_prob = parse_value(key, value)?,
            "modifier_prob" => self.grammar.modifier_prob = parse_value(key, value)?,
            "sloppy_prob" => self.grammar.sloppy_prob = parse_value(key, value)?,
            "tense_weights" => {
                let w: Vec<f64> = value
                    .split(',')
                    .map(|x| parse_value(key, x.trim()))
                    .collect::<Result<_>>()?;
                self.grammar.tense_weights = w
                    .try_into()
                    .map_err(|_| Error::Config("tense_weights needs 5 values".into()))?;
            }
            _ => return unknown_key("corpus", key),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let g = &self.grammar;
        let tw: Vec<String> = g.tense_weights.iter().map(|w| w.to_string()).collect();
        [
            ("seed", self.seed.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("val_scenes", self.val_scenes.to_string()),
            ("test_scenes", self.test_scenes.to_string()),
            ("feat_dim", self.feat_dim.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            (
                "include_self_quality",
                self.include_self_quality.to_string(),
            ),
            ("min_objects", self.scene.min_objects.to_string()),
            ("max_objects", self.scene.max_objects.to_string()),
            ("num_colors", self.scene.num_colors.to_string()),
            ("definite_prob", g.definite_prob.to_string()),
            ("modifier_prob", g.modifier_prob.to_string()),
            ("sloppy_prob", g.sloppy_prob.to_string()),
            ("tense_weights", tw.join(",")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// One scene with its region features and five annotated references.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub features: RegionFeatureSet,
    pub captions: Vec<Caption>,
}

impl SceneRecord {
    pub fn reference_tokens(&self) -> Vec<&[TokenId]> {
        self.captions.iter().map(|c| c.tokens.as_slice()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CaptionJson {
    tokens: Vec<String>,
    tense: u8,
    noun_count: usize,
    length: usize,
    quality: f64,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    scene_id: u64,
    features: Vec<Vec<f32>>,
    captions: Vec<CaptionJson>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: CorpusConfig,
    pub vocab: Vocabulary,
    /// Document frequencies over the training references.
    pub idf: IdfStats,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

/// Generates all splits. The result depends only on `config`.
pub fn build_dataset(config: &CorpusConfig) -> Result<Dataset> {
    config.validate()?;
    let vocab = Vocabulary::standard();
    let corpus_seed = stream_seed(config.seed, "corpus");
    let projector = FeatureProjector::new(config.feat_dim, &mut keyed(corpus_seed, u64::MAX))?;

    let mut raw = Vec::with_capacity(config.total());
    for id in 0..config.total() as u64 {
        let mut rng = keyed(corpus_seed, id);
        let scene = generate_scene(&mut rng, &config.scene, id)?;
        let features = region_features(&scene, &projector, config.noise_sigma, &mut rng)?;
        let refs: Vec<Vec<TokenId>> = render_references(&scene, &config.grammar, &mut rng)
            .iter()
            .map(|w| vocab.encode_words(w))
            .collect::<Result<_>>()?;
        raw.push((id, features, refs));
    }

    let train_refs: Vec<&Vec<Vec<TokenId>>> = raw[..config.train_scenes]
        .iter()
        .map(|(_, _, r)| r)
        .collect();
    let idf = IdfStats::from_reference_sets(&train_refs);

    let mut records = Vec::with_capacity(raw.len());
    for (scene_id, features, refs) in raw {
        let q = reference_qualities(&refs, &idf, config.include_self_quality)?;
        let captions = refs
            .into_iter()
            .zip(q)
            .map(|(t, q)| Caption::annotate(t, &vocab, q))
            .collect::<Result<_>>()?;
        records.push(SceneRecord {
            scene_id,
            features,
            captions,
        });
    }
    let test = records.split_off(config.train_scenes + config.val_scenes);
    let val = records.split_off(config.train_scenes);
    Ok(Dataset {
        config: config.clone(),
        vocab,
        idf,
        train: records,
        val,
        test,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SceneRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn find_scene(&self, scene_id: u64) -> Option<&SceneRecord> {
        Split::ALL
            .iter()
            .flat_map(|&s| self.split(s))
            .find(|r| r.scene_id == scene_id)
    }

    /// Writes the three JSONL splits plus vocabulary, idf and config sidecars.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for split in Split::ALL {
            let mut w = BufWriter::new(File::create(dir.join(split.file_name()))?);
            for r in self.split(split) {
                serde_json::to_writer(&mut w, &self.record_json(r))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let idf = self.idf.to_json(|g| self.vocab.decode(g));
        fs::write(
            dir.join(IDF_FILE),
            serde_json::to_string_pretty(&idf)? + "\n",
        )?;
        fs::write(
            dir.join(CONFIG_FILE),
            render_kv(&prefixed(&self.config, "corpus")),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut config = CorpusConfig::default();
        let cfg_path = dir.join(CONFIG_FILE);
        if cfg_path.exists() {
            apply_section(
                &mut config,
                "corpus",
                &parse_kv(&fs::read_to_string(cfg_path)?)?,
            )?;
        }
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let idf_json: IdfJson = serde_json::from_str(&fs::read_to_string(dir.join(IDF_FILE))?)?;
        let idf = IdfStats::from_json(&idf_json, |s| vocab.encode(s))?;
        let mut splits = Vec::with_capacity(3);
        for split in Split::ALL {
            let f = BufReader::new(File::open(dir.join(split.file_name()))?);
            let mut recs = Vec::new();
            for (n, line) in f.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: RecordJson = serde_json::from_str(&line).map_err(|e| {
                    Error::Format(format!("{} line {}: {e}", split.file_name(), n + 1))
                })?;
                recs.push(record_from_json(r, &vocab)?);
            }
            splits.push(recs);
        }
        let test = splits.pop().unwrap_or_default();
        let val = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        config.train_scenes = train.len();
        config.val_scenes = val.len();
        config.test_scenes = test.len();
        Ok(Dataset {
            config,
            vocab,
            idf,
            train,
            val,
            test,
        })
    }

    fn record_json(&self, r: &SceneRecord) -> RecordJson {
        RecordJson {
            scene_id: r.scene_id,
            features: r.features.features.clone(),
            captions: r
                .captions
                .iter()
                .map(|c| CaptionJson {
                    tokens: c.tokens.iter().map(|&t| self.vocab.decode(&[t])).collect(),
                    tense: c.tense,
                    noun_count: c.noun_count,
                    length: c.length,
                    quality: c.quality,
                })
                .collect(),
        }
    }
}

fn record_from_json(r: RecordJson, vocab: &Vocabulary) -> Result<SceneRecord> {
    let dim = r.features.first().map_or(0, Vec::len);
    if r.features.is_empty()
        || dim == 0
        || r.features
            .iter()
            .any(|f| f.len() != dim || f.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::Format(format!(
            "scene {}: ragged, empty or non-finite features",
            r.scene_id
        )));
    }
    let captions = r
        .captions
        .into_iter()
        .map(|c| {
            let tokens = vocab.encode_words(&c.tokens)?;
            Ok(Caption {
                length: c.length,
                tense: c.tense,
                noun_count: c.noun_count,
                quality: c.quality,
                tokens,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SceneRecord {
        scene_id: r.scene_id,
        features: RegionFeatureSet {
            scene_id: r.scene_id,
            features: r.features,
        },
        captions,
    })
}
