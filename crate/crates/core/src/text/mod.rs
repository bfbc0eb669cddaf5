//! Tokenization, vocabularies, caption encoding, stemming and stopwords.

mod porter;
mod stopwords;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

pub use porter::porter_stem;
pub use stopwords::{StopwordList, DEFAULT_STOPWORDS};

use crate::error::{Error, Result};

/// Characters removed outright by [`tokenize`].
pub const FILTERED_PUNCTUATION: &[char] = &['.', ',', '\'', '"', '-', '(', ')', '?', '!', ';', ':'];

const DIGIT_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

/// Lowercase, strip punctuation, map `&` to "and", spell out single digits,
/// drop longer numbers, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len());
    for ch in text.chars() {
        if ch == '&' {
            cleaned.push_str(" and ");
        } else if !FILTERED_PUNCTUATION.contains(&ch) {
            cleaned.extend(ch.to_lowercase());
        }
    }
    cleaned
        .split_whitespace()
        .filter_map(|tok| {
            if tok.chars().all(|c| c.is_ascii_digit()) {
                if tok.len() == 1 {
                    let d = tok.as_bytes()[0] - b'0';
                    Some(DIGIT_WORDS[d as usize].to_string())
                } else {
                    None
                }
            } else {
                Some(tok.to_string())
            }
        })
        .collect()
}

pub const PAD_TOKEN: &str = "<PAD>";
pub const START_TOKEN: &str = "<S>";
pub const END_TOKEN: &str = "<E>";

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;

/// Token ↔ id map. Id 0 is the pad word, which is not part of the
/// vocabulary proper; [`Vocabulary::size`] counts start, end and tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut id_to_token = vec![
            PAD_TOKEN.to_string(),
            START_TOKEN.to_string(),
            END_TOKEN.to_string(),
        ];
        id_to_token.extend(tokens);
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Domain(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
        })
    }

    /// Vocabulary size excluding the pad word.
    pub fn size(&self) -> usize {
        self.id_to_token.len() - 1
    }

    /// Number of decoder classes (`size + 1`, pad included).
    pub fn num_classes(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Ordinary (non-special) tokens in id order.
    pub fn words(&self) -> impl Iterator<Item = (usize, &str)> {
        self.id_to_token
            .iter()
            .enumerate()
            .skip(3)
            .map(|(i, t)| (i, t.as_str()))
    }

    /// Ids to tokens, dropping pad/start/end.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i > END_ID)
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    /// One token per line; line `n` (1-based) holds id `n - 1`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 3 || lines[0] != PAD_TOKEN || lines[1] != START_TOKEN || lines[2] != END_TOKEN {
            return Err(Error::Domain(
                "vocabulary file must start with <PAD>, <S>, <E>".into(),
            ));
        }
        Self::from_tokens(lines[3..].iter().map(|s| s.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text).map_err(|e| Error::data(path, e.to_string()))
    }
}

/// Keep the most frequent tokens so that start + end + tokens ≤ `max_size`.
/// Frequency ties break lexicographically.
pub fn build_vocab(captions: &[Vec<String>], max_size: usize) -> Result<Vocabulary> {
    if max_size < 3 {
        return Err(Error::Domain(format!(
            "max vocabulary size {max_size} leaves no room for tokens"
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in captions.iter().flatten() {
        *counts.entry(tok.as_str()).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::Domain("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - 2);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
}

/// A fixed-length encoded caption: start, ids, end, then pad.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    /// Number of real words (excluding start/end/pad).
    pub fn word_count(&self) -> usize {
        self.ids.iter().filter(|&&i| i > END_ID).count()
    }

    /// Position of the end token, if present.
    pub fn end_position(&self) -> Option<usize> {
        self.ids.iter().position(|&i| i == END_ID)
    }
}

/// Outcome of [`encode_caption`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Encoded {
    Sequence(TokenSequence),
    Discard,
}

/// Encode to `max_len + 2` ids, or discard on unknown tokens / overlength.
pub fn encode_caption(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Encoded {
    if tokens.len() > max_len {
        return Encoded::Discard;
    }
    let mut ids = Vec::with_capacity(max_len + 2);
    ids.push(START_ID);
    for t in tokens {
        match vocab.id(t) {
            Some(id) if id > END_ID => ids.push(id),
            _ => return Encoded::Discard,
        }
    }
    ids.push(END_ID);
    ids.resize(max_len + 2, PAD_ID);
    Encoded::Sequence(TokenSequence { ids })
}

/// Stopword-free, stemmed, deduplicated word set.
pub fn content_word_set(tokens: &[String], stopwords: &StopwordList) -> BTreeSet<String> {
    tokens
        .iter()
        .filter(|t| !stopwords.contains(t))
        .map(|t| porter_stem(t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(
            tokenize("A dog, 2 bikes & 1999 things."),
            toks("a dog two bikes and things")
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Dog dog DOG"), toks("dog dog dog"));
        assert_eq!(tokenize("t-shirt (red)"), toks("tshirt red"));
        assert_eq!(tokenize("What is the dog doing?"), toks("what is the dog doing"));
    }

    #[test]
    fn vocab_frequency_and_ties() {
        let mut corpus = vec![];
        corpus.extend(std::iter::repeat(toks("a")).take(5));
        corpus.extend(std::iter::repeat(toks("b")).take(3));
        corpus.push(toks("c"));
        let v = build_vocab(&corpus, 4).unwrap();
        assert!(v.id("a").is_some() && v.id("b").is_some() && v.id("c").is_none());
        assert_eq!(v.size(), 4);

        let all = build_vocab(&[toks("x y z")], 10).unwrap();
        assert_eq!(all.size(), 5);

        let tie = build_vocab(&[toks("b a b a")], 3).unwrap();
        assert!(tie.id("a").is_some() && tie.id("b").is_none());

        assert!(build_vocab(&[], 10).is_err());
        assert!(build_vocab(&[toks("a")], 2).is_err());
    }

    #[test]
    fn vocab_file_layout() {
        let v = build_vocab(&[toks("dog cat dog")], 10).unwrap();
        let text = v.to_file_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec!["<PAD>", "<S>", "<E>", "dog", "cat"]);
        assert_eq!(v.id("dog"), Some(3));
        assert_eq!(Vocabulary::from_file_string(&text).unwrap(), v);
        assert!(Vocabulary::from_file_string("dog\n").is_err());
    }

    #[test]
    fn encode_rules() {
        let v = build_vocab(&[toks("a red square")], 10).unwrap();
        let Encoded::Sequence(seq) = encode_caption(&toks("a red square"), &v, 16) else {
            panic!("discarded")
        };
        assert_eq!(seq.ids.len(), 18);
        assert_eq!(seq.ids[0], START_ID);
        assert_eq!(seq.ids[4], END_ID);
        assert!(seq.ids[5..].iter().all(|&i| i == PAD_ID));
        assert_eq!(v.decode(&seq.ids), toks("a red square"));

        assert_eq!(encode_caption(&toks("a blue square"), &v, 16), Encoded::Discard);
        let long: Vec<String> = std::iter::repeat("a".to_string()).take(17).collect();
        assert_eq!(encode_caption(&long, &v, 16), Encoded::Discard);
    }

    #[test]
    fn content_words_worked_examples() {
        let sw = StopwordList::default();
        let set = |s: &str| -> Vec<String> {
            content_word_set(&tokenize(s), &sw).into_iter().collect()
        };
        assert_eq!(
            set("a dog is sitting on the sidewalk next to a bike"),
            toks("bike dog next sidewalk sit")
        );
        assert_eq!(set("What is the dog doing?"), toks("dog"));
        assert_eq!(set("sleeping"), toks("sleep"));
        assert_eq!(set("a bicycle is parked next to a bike"), toks("bicycl bike next park"));
        assert_eq!(set("a dog is sitting on the ground with a bicycle"), toks("bicycl dog ground sit"));
        assert_eq!(set("a dog is sitting on a leash on a bike"), toks("bike dog leash sit"));
        assert!(set("the and of it is").is_empty());
    }
}
