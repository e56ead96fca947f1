use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Nouns that can appear as scene objects, in feature one-hot order.
pub const AGENTS: [&str; 6] = ["dog", "cat", "horse", "boy", "girl", "man"];
pub const THINGS: [&str; 8] = [
    "frisbee", "ball", "kite", "bike", "tennis", "bat", "cake", "cart",
];
pub const SCENERY: [&str; 6] = ["tree", "bench", "car", "fence", "house", "boat"];
/// Nouns used only inside relation phrases.
pub const SETTINGS: [&str; 7] = ["mouth", "hand", "field", "sky", "street", "court", "table"];
pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "black", "white", "brown", "orange",
];
pub const FUNCTION_WORDS: [&str; 16] = [
    "a", "an", "the", "its", "his", "her", "is", "are", "with", "on", "in", "near", "at", "across",
    "down", "young",
];
pub const COPULAS: [&str; 2] = ["is", "are"];

pub const NUM_OBJECT_NOUNS: usize = AGENTS.len() + THINGS.len() + SCENERY.len();

const PLURALS: [(&str, &str); 26] = [
    ("dog", "dogs"),
    ("cat", "cats"),
    ("horse", "horses"),
    ("boy", "boys"),
    ("girl", "girls"),
    ("man", "men"),
    ("frisbee", "frisbees"),
    ("ball", "balls"),
    ("kite", "kites"),
    ("bike", "bikes"),
    ("bat", "bats"),
    ("cake", "cakes"),
    ("cart", "carts"),
    ("tree", "trees"),
    ("bench", "benches"),
    ("car", "cars"),
    ("fence", "fences"),
    ("house", "houses"),
    ("boat", "boats"),
    ("mouth", "mouths"),
    ("hand", "hands"),
    ("field", "fields"),
    ("sky", "skies"),
    ("street", "streets"),
    ("court", "courts"),
    ("table", "tables"),
];

/// Verb form table: base, third person, -ing, past, participle.
pub const VERBS: [[&str; 5]; 10] = [
    ["hold", "holds", "holding", "held", "held"],
    ["carry", "carries", "carrying", "carried", "carried"],
    ["chase", "chases", "chasing", "chased", "chased"],
    ["fly", "flies", "flying", "flew", "flown"],
    ["ride", "rides", "riding", "rode", "ridden"],
    ["play", "plays", "playing", "played", "played"],
    ["swing", "swings", "swinging", "swung", "swung"],
    ["eat", "eats", "eating", "ate", "eaten"],
    ["push", "pushes", "pushing", "pushed", "pushed"],
    ["pull", "pulls", "pulling", "pulled", "pulled"],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VerbForm {
    Base,
    Third,
    Ing,
    Past,
    Participle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WordClass {
    Special,
    Function,
    Copula,
    Color,
    Noun,
    Verb(VerbForm),
    Other,
}

fn builtin_class(word: &str) -> WordClass {
    if SPECIALS.contains(&word) {
        return WordClass::Special;
    }
    if COPULAS.contains(&word) {
        return WordClass::Copula;
    }
    if FUNCTION_WORDS.contains(&word) {
        return WordClass::Function;
    }
    if COLORS.contains(&word) {
        return WordClass::Color;
    }
    if AGENTS.contains(&word)
        || THINGS.contains(&word)
        || SCENERY.contains(&word)
        || SETTINGS.contains(&word)
        || PLURALS.iter().any(|(_, p)| *p == word)
    {
        return WordClass::Noun;
    }
    for forms in VERBS {
        // Past and participle share a spelling for regular verbs; the past
        // reading is listed first.
        let kinds = [
            VerbForm::Base,
            VerbForm::Third,
            VerbForm::Ing,
            VerbForm::Past,
            VerbForm::Participle,
        ];
        for (f, k) in forms.iter().zip(kinds) {
            if *f == word {
                return WordClass::Verb(k);
            }
        }
    }
    WordClass::Other
}

/// Token strings and ids, with the closed lexicon classes attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    classes: Vec<WordClass>,
}

impl Vocabulary {
    /// The vocabulary of every word the grammar can produce, plus plurals.
    pub fn standard() -> Self {
        let mut words: Vec<&str> = SPECIALS.to_vec();
        words.extend(FUNCTION_WORDS);
        words.extend(COLORS);
        words.extend(AGENTS);
        words.extend(THINGS);
        words.extend(SCENERY);
        words.extend(SETTINGS);
        words.extend(PLURALS.iter().map(|(_, p)| *p));
        for forms in VERBS {
            for f in forms {
                if !words.contains(&f) {
                    words.push(f);
                }
            }
        }
        Self::from_tokens(words.into_iter().map(String::from).collect())
            .expect("built-in lexicon is consistent")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Lexicon(format!("ids 0-3 must be {SPECIALS:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Lexicon(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Lexicon(format!("duplicate token {t:?}")));
            }
        }
        let classes = tokens.iter().map(|t| builtin_class(t)).collect();
        Ok(Vocabulary {
            tokens,
            index,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Lexicon(format!("unknown word {word:?}")))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or_else(|| {
            Error::Lexicon(format!(
                "token id {id} outside vocabulary of {}",
                self.len()
            ))
        })
    }

    pub fn class(&self, id: TokenId) -> Result<WordClass> {
        self.classes.get(id).copied().ok_or_else(|| {
            Error::Lexicon(format!(
                "token id {id} outside vocabulary of {}",
                self.len()
            ))
        })
    }

    /// Splits on whitespace after lowercasing.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn words(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| self.token(i).map(String::from))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// First 64 bits of the SHA-256 of the newline-joined token list.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(String::from).collect())
    }

    pub fn id_of_noun(&self, object_noun: usize) -> TokenId {
        self.id(object_noun_word(object_noun))
            .expect("object nouns are in the vocabulary")
    }
}

/// Word of an object noun index (agents, then things, then scenery).
pub fn object_noun_word(noun: usize) -> &'static str {
    let (a, t) = (AGENTS.len(), THINGS.len());
    if noun < a {
        AGENTS[noun]
    } else if noun < a + t {
        THINGS[noun - a]
    } else {
        SCENERY[noun - a - t]
    }
}
