use rand::seq::index::sample;
use rand::Rng;

use super::lexicon::{AGENTS, COLORS, SCENERY, THINGS, VERBS};
use super::scene::Scene;

/// Grammar choices behind one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    /// Tense category 1..=5.
    pub tense: u8,
    /// Index into the relation's verb alternatives.
    pub lemma: usize,
    pub definite_agent: bool,
    pub agent_modifier: bool,
    pub thing_modifier: bool,
    pub relation_phrase: bool,
    /// Left-to-right scenery indices to mention, with a color flag each.
    pub scenery: Vec<(usize, bool)>,
}

impl Realization {
    pub fn plain(tense: u8) -> Self {
        Realization {
            tense,
            lemma: 0,
            definite_agent: false,
            agent_modifier: false,
            thing_modifier: false,
            relation_phrase: false,
            scenery: Vec::new(),
        }
    }
}

/// Sampling probabilities of the reference generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GrammarConfig {
    /// Weights of tense categories 1..=5.
    pub tense_weights: [f64; 5],
    pub definite_prob: f64,
    pub modifier_prob: f64,
    /// Probability that a reference gets one wrong noun or color.
    pub sloppy_prob: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            tense_weights: [0.12, 0.2, 0.4, 0.16, 0.12],
            definite_prob: 0.15,
            modifier_prob: 0.5,
            sloppy_prob: 0.25,
        }
    }
}

pub const REFERENCES_PER_SCENE: usize = 5;

/// Verb table rows usable for each thing.
fn lemmas(thing: usize) -> &'static [usize] {
    match thing {
        0 => &[0, 1],
        1 => &[2],
        2 => &[3],
        3 => &[4],
        4 => &[5],
        5 => &[6],
        6 => &[7],
        _ => &[8, 9],
    }
}

pub fn num_lemmas(thing: usize) -> usize {
    lemmas(thing).len()
}

fn is_mass(thing: usize) -> bool {
    THINGS[thing] == "tennis"
}

fn relation_phrase(scene: &Scene, thing: usize) -> [&'static str; 3] {
    match thing {
        0 if scene.is_animal_agent() => ["in", "its", "mouth"],
        0 if AGENTS[scene.agent()] == "girl" => ["in", "her", "hand"],
        0 => ["in", "his", "hand"],
        1 => ["across", "the", "field"],
        2 => ["in", "the", "sky"],
        3 => ["down", "the", "street"],
        4 => ["on", "the", "court"],
        5 => ["on", "the", "field"],
        6 => ["at", "the", "table"],
        _ => ["down", "the", "street"],
    }
}

/// Indefinite article for the word that follows it.
fn article(next: &str) -> &'static str {
    if next.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn preposition(thing: usize) -> &'static str {
    match THINGS[thing] {
        "bike" => "on",
        "tennis" => "at",
        _ => "with",
    }
}

/// Words of the caption described by `r`. Scenes without a thing object
/// fall back to the agent noun phrase alone.
pub fn realize(scene: &Scene, r: &Realization) -> Vec<&'static str> {
    let mut w = Vec::with_capacity(16);
    let agent = &scene.objects[0];
    let modifier = r.agent_modifier.then(|| {
        if scene.is_animal_agent() {
            COLORS[agent.color]
        } else {
            "young"
        }
    });
    let head = modifier.unwrap_or(AGENTS[agent.noun]);
    w.push(if r.definite_agent {
        "the"
    } else {
        article(head)
    });
    w.extend(modifier);
    w.push(AGENTS[agent.noun]);
    let Some(thing) = scene.thing() else {
        return w;
    };
    let forms = VERBS[lemmas(thing)[r.lemma.min(num_lemmas(thing) - 1)]];
    match r.tense {
        1 => w.push(preposition(thing)),
        2 => w.extend(["is", forms[2]]),
        3 => w.push(forms[2]),
        4 => w.push(forms[1]),
        _ => w.push(forms[3]),
    }
    if is_mass(thing) {
        w.push(THINGS[thing]);
    } else {
        let modifier = r.thing_modifier.then(|| COLORS[scene.objects[1].color]);
        w.push(article(modifier.unwrap_or(THINGS[thing])));
        w.extend(modifier);
        w.push(THINGS[thing]);
    }
    if r.relation_phrase {
        w.extend(relation_phrase(scene, thing));
    }
    let scenery = scene.scenery_left_to_right();
    for &(i, colored) in &r.scenery {
        let Some(o) = scenery.get(i) else { continue };
        let noun = SCENERY[o.noun - AGENTS.len() - THINGS.len()];
        let modifier = colored.then(|| COLORS[o.color]);
        w.extend(["near", article(modifier.unwrap_or(noun))]);
        w.extend(modifier);
        w.push(noun);
    }
    w
}

fn sample_tense<R: Rng>(rng: &mut R, weights: &[f64; 5]) -> u8 {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i as u8 + 1;
        }
        u -= w;
    }
    5
}

pub fn sample_realization<R: Rng>(
    scene: &Scene,
    config: &GrammarConfig,
    rng: &mut R,
) -> Realization {
    let tense = sample_tense(rng, &config.tense_weights);
    let thing = scene.thing().unwrap_or(0);
    let lemma = rng.random_range(0..num_lemmas(thing));
    let definite_agent = rng.random_bool(config.definite_prob);
    let agent_modifier = rng.random_bool(config.modifier_prob);
    let thing_modifier = !is_mass(thing) && rng.random_bool(config.modifier_prob);
    // Extra phrases: the relation phrase plus one per scenery object.
    let n_scenery = scene.objects.len().saturating_sub(2);
    let available = 1 + n_scenery;
    let n_phrases = rng.random_range(0..=2usize.min(available));
    let mut picked = sample(rng, available, n_phrases).into_vec();
    picked.sort_unstable();
    let relation_phrase = picked.first() == Some(&0);
    let scenery = picked
        .into_iter()
        .filter(|&p| p > 0)
        .map(|p| (p - 1, rng.random_bool(config.modifier_prob)))
        .collect();
    Realization {
        tense,
        lemma,
        definite_agent,
        agent_modifier,
        thing_modifier,
        relation_phrase,
        scenery,
    }
}

/// Replaces one color, agent noun or scenery noun with a wrong one.
fn corrupt<R: Rng>(words: &mut [&'static str], scene: &Scene, rng: &mut R) {
    let mut slots: Vec<usize> = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if COLORS.contains(w) || SCENERY.contains(w) || AGENTS.contains(w) {
            slots.push(i);
        }
    }
    if slots.is_empty() {
        return;
    }
    let i = slots[rng.random_range(0..slots.len())];
    let pool: &[&'static str] = if COLORS.contains(&words[i]) {
        &COLORS
    } else if SCENERY.contains(&words[i]) {
        &SCENERY
    } else if scene.is_animal_agent() {
        &AGENTS[..3]
    } else {
        &AGENTS[3..]
    };
    let current = words[i];
    let others: Vec<&'static str> = pool.iter().copied().filter(|w| *w != current).collect();
    words[i] = others[rng.random_range(0..others.len())];
    if i > 0 && matches!(words[i - 1], "a" | "an") {
        words[i - 1] = article(words[i]);
    }
}

/// Five reference captions of a scene, as words.
pub fn render_references<R: Rng>(
    scene: &Scene,
    config: &GrammarConfig,
    rng: &mut R,
) -> Vec<Vec<&'static str>> {
    (0..REFERENCES_PER_SCENE)
        .map(|_| {
            let r = sample_realization(scene, config, rng);
            let mut words = realize(scene, &r);
            if rng.random_bool(config.sloppy_prob) {
                corrupt(&mut words, scene, rng);
            }
            words
        })
        .collect()
}
