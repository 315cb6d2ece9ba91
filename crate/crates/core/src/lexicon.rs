//! Fixed word vocabulary shared by the QA templates, the tokenizer and the
//! symbolic video generator. Object nouns double as scene-object class tokens
//! and action verbs double as event tokens, so every answer word has a
//! corresponding visual feature.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::policy::{Role, TokenSeq, Vocab};

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

const WORDS: &[&str] = &[
    "<bos>", "<eos>", "<unk>", // specials, ids 0..3
    "the", "a", "is", "at", "in", "what", "does", "where", "how", "many", "color", "yes", "no",
    "first", "then", "left", "right", "top", "bottom", "near", "with", "reads", "sign", "it",
    "who", "appear", "video", // filler
    "red", "blue", "green", "yellow", // colors
    "one", "two", "three", "four", // count words
    "fast", "slow", // speeds
    "cat", "dog", "girl", "boy", "ball", "car", "bird", "fish", "tree", "lamp", // nouns
    "run", "walk", "jump", "sit", "spin", "fall", "eat", "sleep", // verbs
];

pub const NOUN_WORDS: &[&str] = &[
    "cat", "dog", "girl", "boy", "ball", "car", "bird", "fish", "tree", "lamp",
];
pub const VERB_WORDS: &[&str] = &["run", "walk", "jump", "sit", "spin", "fall", "eat", "sleep"];
pub const COLOR_WORDS: &[&str] = &["red", "blue", "green", "yellow"];
pub const COUNT_WORDS: &[&str] = &["one", "two", "three", "four"];
pub const SPEED_WORDS: &[&str] = &["fast", "slow"];

/// Symbol family of a token, used by the featurizer to place each family in
/// its own subspace of the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenFamily {
    /// Object class nouns (index within the noun list).
    Noun(usize),
    /// The "sign" class used by text-in-scene objects.
    Sign,
    Verb(usize),
    Color(usize),
    Speed(usize),
    /// Anything else; featurized by a generic hash direction.
    Other,
}

/// Family of a word from the canonical lexicon.
pub fn family_of_word(word: &str) -> TokenFamily {
    if let Some(i) = NOUN_WORDS.iter().position(|w| *w == word) {
        return TokenFamily::Noun(i);
    }
    if let Some(i) = VERB_WORDS.iter().position(|w| *w == word) {
        return TokenFamily::Verb(i);
    }
    if let Some(i) = COLOR_WORDS.iter().position(|w| *w == word) {
        return TokenFamily::Color(i);
    }
    if let Some(i) = SPEED_WORDS.iter().position(|w| *w == word) {
        return TokenFamily::Speed(i);
    }
    if word == "sign" {
        return TokenFamily::Sign;
    }
    TokenFamily::Other
}

/// Family of a token id under the canonical world lexicon.
pub fn family_of_token(id: u32) -> TokenFamily {
    match WORDS.get(id as usize) {
        Some(w) => family_of_word(w),
        None => TokenFamily::Other,
    }
}

/// Whitespace tokenizer over a fixed word list.
#[derive(Debug, Clone)]
pub struct TokenTable {
    words: Vec<String>,
    index: HashMap<String, u32>,
    unk: Option<u32>,
}

impl TokenTable {
    /// The canonical vocabulary used by the synthetic world.
    pub fn world() -> Self {
        Self::from_words(WORDS, Some(UNK_ID)).expect("builtin word list is valid")
    }

    pub fn from_words(words: &[&str], unk: Option<u32>) -> Result<Self> {
        if words.len() > 256 {
            return Err(Error::Config(format!(
                "vocabulary of {} words exceeds the 256 token limit",
                words.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.to_string(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate word '{w}'")));
            }
        }
        if let Some(u) = unk {
            if u as usize >= words.len() {
                return Err(Error::Config("unk id outside vocabulary".into()));
            }
        }
        Ok(Self {
            words: words.iter().map(|w| w.to_string()).collect(),
            index,
            unk,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.words.len(), BOS_ID, EOS_ID).expect("word list forms a valid vocab")
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    /// Token id for `word`, required to exist (used by the generator, whose
    /// templates only draw from the fixed word list).
    pub fn id_of(&self, word: &str) -> u32 {
        self.id(word)
            .unwrap_or_else(|| panic!("word '{word}' missing from lexicon"))
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    fn token_for(&self, word: &str) -> Result<u32> {
        match self.id(word) {
            Some(id) => Ok(id),
            None => self.unk.ok_or_else(|| {
                Error::InvalidInput(format!(
                    "word '{word}' is outside the vocabulary and no unknown token is configured"
                ))
            }),
        }
    }

    /// Whitespace-tokenizes `text`. Responses get the end-of-sequence token
    /// appended; prompts are taken verbatim.
    pub fn tokenize(&self, text: &str, role: Role) -> Result<TokenSeq> {
        let mut tokens = Vec::new();
        for word in text.split_whitespace() {
            tokens.push(self.token_for(word)?);
        }
        let vocab = self.vocab();
        match role {
            Role::Prompt => TokenSeq::prompt(tokens, &vocab),
            Role::Response => {
                tokens.push(EOS_ID);
                TokenSeq::response(tokens, &vocab)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_vocab_fits_limits() {
        let table = TokenTable::world();
        assert!(table.len() <= 64, "lexicon grew past the design limit");
        let vocab = table.vocab();
        assert_eq!(vocab.bos_id, BOS_ID);
        assert_eq!(vocab.eos_id, EOS_ID);
    }

    #[test]
    fn tokenize_appends_eos_to_responses() {
        let table = TokenTable::world();
        let seq = table.tokenize("the cat run", Role::Response).unwrap();
        assert_eq!(*seq.tokens().last().unwrap(), EOS_ID);
        assert_eq!(seq.tokens().len(), 4);
    }

    #[test]
    fn unknown_word_without_unk_errors() {
        let table = TokenTable::from_words(&["<bos>", "<eos>", "hello"], None).unwrap();
        let err = table.tokenize("hello world", Role::Prompt).unwrap_err();
        assert!(err.to_string().contains("world"));
    }

    #[test]
    fn unknown_word_maps_to_unk_when_configured() {
        let table = TokenTable::world();
        let seq = table.tokenize("the zebra", Role::Prompt).unwrap();
        assert_eq!(seq.tokens()[1], UNK_ID);
    }
}
