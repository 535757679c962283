//! Token vocabulary with fixed special ids.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{BicaError, Result};

pub const EOS: usize = 0;
pub const PAD: usize = 1;

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const DIRECTIONS: [&str; 8] = [
    "east",
    "northeast",
    "north",
    "northwest",
    "west",
    "southwest",
    "south",
    "southeast",
];

const WORDS: [&str; 10] = [
    "the", "box", "next", "to", "near", "is", "most", "in", "room", "only",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[EOS] != "<eos>" || tokens[PAD] != "<pad>" {
            return Err(BicaError::Format(
                "vocabulary must start with <eos> and <pad>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(BicaError::Format(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(BicaError::Format(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// The fixed vocabulary of the scene caption templates.
    pub fn standard() -> Self {
        let tokens = ["<eos>", "<pad>"]
            .into_iter()
            .chain(WORDS)
            .chain(SIZES)
            .chain(COLORS)
            .chain(DIRECTIONS)
            .map(String::from)
            .collect();
        Vocabulary::from_tokens(tokens).expect("standard vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace-split ids followed by EOS.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = text
            .split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| BicaError::Invalid(format!("word {w:?} not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(EOS);
        Ok(ids)
    }

    /// Text up to the first EOS, skipping PAD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD)
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocabulary::from_text(&std::fs::read_to_string(path)?)
    }
}
