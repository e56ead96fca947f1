//! Shared fixtures for the benchmarks.

use capctl_core::captioner::{Captioner, CaptionerConfig};
use capctl_core::corpus::{build_dataset, Control, CorpusConfig, Dataset};
use capctl_core::matcher::{Matcher, MatcherConfig};
use capctl_core::rng::stream;

/// A 200-scene corpus at the default feature width.
pub fn dataset() -> Dataset {
    build_dataset(&CorpusConfig::with_total(200)).expect("default corpus config is valid")
}

/// An untrained desk-size captioner for `data`.
pub fn captioner(data: &Dataset, control: Control) -> Captioner<f32> {
    let config = CaptionerConfig {
        control,
        ..CaptionerConfig::desk(data.config.feat_dim, data.vocab.len())
    };
    Captioner::new(config, &mut stream(1, "init")).expect("desk config is valid")
}

pub fn matcher(data: &Dataset) -> Matcher<f32> {
    Matcher::new(
        MatcherConfig::desk(data.config.feat_dim, data.vocab.len()),
        &mut stream(2, "init"),
    )
    .expect("desk config is valid")
}
