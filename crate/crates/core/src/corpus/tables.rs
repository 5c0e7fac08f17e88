//! Shared phrase table, query templates, vocabulary and tokenizer.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use serde::Deserialize;

use super::scene::ObjectClass;
use crate::error::{Error, Result};

pub const NUM_VIEWS: usize = 6;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<sep>", "<eos>"];

/// Largest count an answer can mention (4 objects max in each of 6 views).
pub const MAX_COUNT: usize = 24;

#[derive(Debug, Clone, Deserialize)]
pub struct Phrase {
    pub phrase: String,
    pub views: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PhraseTable {
    /// Canonical spoken name of each view, used to fill `{view}` slots.
    pub views: Vec<String>,
    pub phrases: Vec<Phrase>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Explicit,
    Implicit,
    Global,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Template {
    pub id: usize,
    pub text: String,
    pub kind: TemplateKind,
    #[serde(default)]
    pub views: Vec<usize>,
    pub answer: String,
}

pub fn phrase_table() -> &'static PhraseTable {
    static T: OnceLock<PhraseTable> = OnceLock::new();
    T.get_or_init(|| {
        serde_json::from_str(include_str!("../../data/phrases.json")).expect("valid phrases.json")
    })
}

pub fn templates() -> &'static [Template] {
    static T: OnceLock<Vec<Template>> = OnceLock::new();
    T.get_or_init(|| {
        serde_json::from_str(include_str!("../../data/templates.json")).expect("valid templates.json")
    })
}

pub fn template(id: usize) -> Result<&'static Template> {
    templates()
        .iter()
        .find(|t| t.id == id)
        .ok_or(Error::UnknownTemplate(id))
}

/// Lowercases and splits on whitespace; punctuation becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '\'' || ch == '<' || ch == '>' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Word-level vocabulary built from the phrase and template tables.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    pub fn standard() -> &'static Vocab {
        static V: OnceLock<Vocab> = OnceLock::new();
        V.get_or_init(|| {
            let mut words = BTreeSet::new();
            for t in templates() {
                words.extend(tokenize(&t.text.replace("{view}", "")));
            }
            let table = phrase_table();
            for v in &table.views {
                words.extend(tokenize(v));
            }
            for p in &table.phrases {
                words.extend(tokenize(&p.phrase));
            }
            for c in ObjectClass::ALL {
                words.insert(c.singular().to_string());
                words.insert(c.plural().to_string());
            }
            for w in ["and", "nothing", "yes", "no", "safe", "not", "slow", "down", "for", "keep", "going"] {
                words.insert(w.to_string());
            }
            for n in 0..=MAX_COUNT {
                words.insert(n.to_string());
            }
            let words: Vec<String> = SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
                .collect();
            let index = words
                .iter()
                .enumerate()
                .map(|(i, w)| (w.clone(), i as u32))
                .collect();
            Vocab { words, index }
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}
