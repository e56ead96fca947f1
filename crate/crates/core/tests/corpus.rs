use std::collections::BTreeSet;

use proptest::prelude::*;

use capctl_core::corpus::{build_dataset, Caption, CorpusConfig, Dataset, Split, Vocabulary};

fn small(seed: u64) -> Dataset {
    let config = CorpusConfig {
        seed,
        feat_dim: 8,
        ..CorpusConfig::with_total(40)
    };
    build_dataset(&config).unwrap()
}

fn all(d: &Dataset) -> impl Iterator<Item = &capctl_core::corpus::SceneRecord> {
    d.train.iter().chain(&d.val).chain(&d.test)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn annotations_match_the_taggers(seed in any::<u64>()) {
        let d = small(seed);
        for rec in all(&d) {
            prop_assert_eq!(rec.captions.len(), 5);
            prop_assert_eq!(rec.features.dim(), 8);
            for c in &rec.captions {
                let again = Caption::annotate(c.tokens.clone(), &d.vocab, c.quality).unwrap();
                prop_assert_eq!(&again, c);
                prop_assert!((1..=5).contains(&c.tense));
                prop_assert!((4..=16).contains(&c.length));
                prop_assert!(c.noun_count >= 1);
                prop_assert!((0.0..=10.0).contains(&c.quality));
            }
        }
    }

    #[test]
    fn quality_is_zero_without_shared_words(seed in any::<u64>()) {
        let d = small(seed);
        for rec in all(&d) {
            for (i, c) in rec.captions.iter().enumerate() {
                let own: BTreeSet<usize> = c.tokens.iter().copied().collect();
                let shared = rec.captions.iter().enumerate()
                    .filter(|&(j, _)| j != i)
                    .any(|(_, o)| o.tokens.iter().any(|t| own.contains(t)));
                if !shared {
                    prop_assert_eq!(c.quality, 0.0);
                }
                if c.quality > 0.0 {
                    prop_assert!(shared);
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized(seed in any::<u64>()) {
        let d = small(seed);
        prop_assert_eq!((d.train.len(), d.val.len(), d.test.len()), (32, 4, 4));
        let ids: BTreeSet<u64> = all(&d).map(|r| r.scene_id).collect();
        prop_assert_eq!(ids.len(), 40);
        for split in [Split::Train, Split::Val, Split::Test] {
            for rec in d.split(split) {
                prop_assert_eq!(d.find_scene(rec.scene_id), Some(rec));
            }
        }
    }

    #[test]
    fn vocabulary_round_trips(seed in any::<u64>()) {
        let d = small(seed);
        for rec in all(&d) {
            for c in &rec.captions {
                let text = d.vocab.decode(&c.tokens);
                prop_assert_eq!(d.vocab.encode(&text).unwrap(), c.tokens.clone());
            }
        }
    }
}

#[test]
fn generation_depends_only_on_the_config() {
    assert_eq!(small(3), small(3));
    assert_ne!(small(3).train, small(4).train);
}

#[test]
fn saved_corpus_loads_back() {
    let d = small(9);
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), d);
}

#[test]
fn standard_vocabulary_is_stable() {
    let v = Vocabulary::standard();
    assert_eq!(v.hash(), Vocabulary::standard().hash());
    let back = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
    assert_eq!(back.hash(), v.hash());
}
