//! Synthetic scenes, their reference captions and the attribute annotators.
//!
//! Scenes are drawn from a closed world of agents, things and scenery.
//! Region features are a fixed random projection of each object's noun,
//! color and position plus Gaussian noise. Every caption comes from a small
//! grammar, so its tense and noun count are known exactly.

mod annotate;
mod dataset;
mod grammar;
pub mod lexicon;
mod scene;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use annotate::{assign_quality, count_nouns, reference_qualities, tag_tense};
pub use dataset::{build_dataset, CorpusConfig, Dataset, SceneRecord, Split};
pub use grammar::{
    realize, render_references, sample_realization, GrammarConfig, Realization,
    REFERENCES_PER_SCENE,
};
pub use lexicon::{TokenId, Vocabulary, BOS, EOS, PAD, UNK};
pub use scene::{
    generate_scene, region_features, FeatureProjector, RegionFeatureSet, Relation, Scene,
    SceneConfig, SceneObject, MAX_OBJECTS, NEAR,
};

/// A token sequence with its annotated attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<TokenId>,
    pub length: usize,
    pub tense: u8,
    pub noun_count: usize,
    pub quality: f64,
}

impl Caption {
    pub fn annotate(tokens: Vec<TokenId>, vocab: &Vocabulary, quality: f64) -> Result<Self> {
        Ok(Caption {
            length: tokens.len(),
            tense: tag_tense(&tokens, vocab)?,
            noun_count: count_nouns(&tokens, vocab)?,
            quality,
            tokens,
        })
    }

    pub fn attribute(&self, a: Attribute) -> f64 {
        match a {
            Attribute::Quality => self.quality,
            Attribute::Length => self.length as f64,
            Attribute::Tense => f64::from(self.tense),
            Attribute::Nouns => self.noun_count as f64,
        }
    }
}

/// Exact reversal of a token sequence.
pub fn reverse_caption(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens.iter().rev().copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Quality,
    Length,
    Tense,
    Nouns,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Quality,
        Attribute::Length,
        Attribute::Tense,
        Attribute::Nouns,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Quality => "quality",
            Attribute::Length => "length",
            Attribute::Tense => "tense",
            Attribute::Nouns => "nouns",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attribute {s:?}")))
    }

    /// Whether the attribute takes integer values.
    pub fn is_discrete(self) -> bool {
        self != Attribute::Quality
    }

    /// Value observed on a generated caption.
    pub fn observe(self, tokens: &[TokenId], vocab: &Vocabulary) -> Result<f64> {
        Ok(match self {
            Attribute::Quality => {
                return Err(Error::Contract(
                    "quality is not observable without references".into(),
                ))
            }
            Attribute::Length => tokens.len() as f64,
            Attribute::Tense => f64::from(tag_tense(tokens, vocab)?),
            Attribute::Nouns => count_nouns(tokens, vocab)? as f64,
        })
    }
}

/// Which attributes a model is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Control {
    Quality,
    Length,
    Tense,
    Nouns,
    /// All four attributes in the order quality, length, tense, nouns.
    Multi,
}

impl Control {
    pub fn layout(self) -> Vec<Attribute> {
        match self {
            Control::Quality => vec![Attribute::Quality],
            Control::Length => vec![Attribute::Length],
            Control::Tense => vec![Attribute::Tense],
            Control::Nouns => vec![Attribute::Nouns],
            Control::Multi => Attribute::ALL.to_vec(),
        }
    }

    pub fn beta_dim(self) -> usize {
        self.layout().len()
    }

    pub fn code(self) -> u8 {
        match self {
            Control::Quality => 0,
            Control::Length => 1,
            Control::Tense => 2,
            Control::Nouns => 3,
            Control::Multi => 4,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Control::Quality,
            1 => Control::Length,
            2 => Control::Tense,
            3 => Control::Nouns,
            4 => Control::Multi,
            _ => return Err(Error::Format(format!("unknown control code {c}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Control::Multi => "multi",
            c => c.layout()[0].name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "multi" {
            return Ok(Control::Multi);
        }
        Ok(match Attribute::parse(s)? {
            Attribute::Quality => Control::Quality,
            Attribute::Length => Control::Length,
            Attribute::Tense => Control::Tense,
            Attribute::Nouns => Control::Nouns,
        })
    }
}

/// The control vector β with the attribute carried by each dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSignal {
    values: Vec<f64>,
    layout: Vec<Attribute>,
}

impl ControlSignal {
    pub fn new(values: Vec<f64>, layout: Vec<Attribute>) -> Result<Self> {
        if values.is_empty() || values.len() > 4 || values.len() != layout.len() {
            return Err(Error::Contract(format!(
                "control signal needs 1-4 values matching its layout, got {} values for {} attributes",
                values.len(),
                layout.len()
            )));
        }
        for (v, a) in values.iter().zip(&layout) {
            if !v.is_finite() || (a.is_discrete() && (*v < 0.0 || v.fract() != 0.0)) {
                return Err(Error::Contract(format!("invalid {} value {v}", a.name())));
            }
        }
        Ok(ControlSignal { values, layout })
    }

    pub fn for_control(values: Vec<f64>, control: Control) -> Result<Self> {
        Self::new(values, control.layout())
    }

    /// β read off a reference caption.
    pub fn from_caption(caption: &Caption, control: Control) -> Self {
        let layout = control.layout();
        ControlSignal {
            values: layout.iter().map(|&a| caption.attribute(a)).collect(),
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[Attribute] {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_examples() {
        assert_eq!(reverse_caption(&[4, 5, 6]), vec![6, 5, 4]);
        assert_eq!(reverse_caption(&reverse_caption(&[4, 5, 6])), vec![4, 5, 6]);
        assert!(reverse_caption(&[]).is_empty());
    }

    #[test]
    fn control_signal_checks() {
        assert!(ControlSignal::for_control(vec![4.0], Control::Quality).is_ok());
        assert!(ControlSignal::for_control(vec![2.5], Control::Length).is_err());
        assert!(ControlSignal::for_control(vec![1.0, 2.0], Control::Tense).is_err());
        assert_eq!(Control::Multi.beta_dim(), 4);
        for c in [
            Control::Quality,
            Control::Length,
            Control::Tense,
            Control::Nouns,
            Control::Multi,
        ] {
            assert_eq!(Control::from_code(c.code()).unwrap(), c);
            assert_eq!(Control::parse(c.name()).unwrap(), c);
        }
    }
}
