//! Word-level tokenizer with character fallback.
//!
//! Structural tags and the two outcome literals are reserved, single-id tokens
//! that are never split. Other text is pre-split into words (a word may carry
//! one leading space), whitespace runs and punctuation; pieces missing from
//! the vocabulary are covered by greedy longest match, ending in single chars.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::serializer::{CORRECT, INCORRECT, TAGS};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Number of reserved ids: specials, tags and the outcome literals.
pub const RESERVED: usize = SPECIALS.len() + TAGS.len() + 2;

pub const DEFAULT_VOCAB_SIZE: usize = 2048;

fn reserved_tokens() -> impl Iterator<Item = &'static str> {
    SPECIALS.into_iter().chain(TAGS).chain([CORRECT, INCORRECT])
}

/// Immutable token table; the id of a token is its position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
    max_chars: usize,
}

/// A token id plus the `[start, end)` char range it covers in the source text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Piece<'a> {
    Reserved(&'a str),
    Text(&'a str),
}

fn attachable(c: char) -> bool {
    !c.is_whitespace() && c != '<'
}

fn tag_at(rest: &str) -> Option<&'static str> {
    TAGS.iter().copied().find(|t| rest.starts_with(t))
}

/// Splits text into pieces, each with its starting byte offset.
fn pretokenize(text: &str) -> Vec<(usize, Piece<'_>)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        let c = rest.chars().next().unwrap();
        if c == '<' {
            if let Some(tag) = tag_at(rest) {
                out.push((i, Piece::Reserved(&text[i..i + tag.len()])));
                i += tag.len();
                continue;
            }
        }
        let len = if c.is_alphanumeric() {
            alnum_len(rest)
        } else if c == ' ' && rest[1..].chars().next().is_some_and(attachable) {
            let next = rest[1..].chars().next().unwrap();
            1 + if next.is_alphanumeric() { alnum_len(&rest[1..]) } else { next.len_utf8() }
        } else if c.is_whitespace() {
            let mut n = 0;
            let mut chars = rest.char_indices().peekable();
            while let Some((b, ch)) = chars.next() {
                if !ch.is_whitespace() {
                    break;
                }
                // leave a final single space to attach to the following word
                if ch == ' ' && b > 0 && chars.peek().is_some_and(|&(_, nx)| attachable(nx)) {
                    break;
                }
                n = b + ch.len_utf8();
            }
            n
        } else {
            c.len_utf8()
        };
        let piece = &text[i..i + len];
        if piece == CORRECT || piece == INCORRECT {
            out.push((i, Piece::Reserved(piece)));
        } else {
            out.push((i, Piece::Text(piece)));
        }
        i += len;
    }
    out
}

fn alnum_len(s: &str) -> usize {
    s.char_indices().find(|(_, c)| !c.is_alphanumeric()).map_or(s.len(), |(b, _)| b)
}

/// Builds a vocabulary of at most `max_size` tokens from a corpus.
///
/// Order: reserved tokens, every character seen in the corpus (by frequency,
/// then lexicographically), printable ASCII not yet present, then multi-char
/// pieces by frequency then lexicographically, until `max_size` is reached.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocab> {
    if max_size <= RESERVED {
        bail!(Argument, "vocabulary size {max_size} must exceed the {RESERVED} reserved tokens");
    }
    let mut chars: BTreeMap<String, u64> = BTreeMap::new();
    let mut words: BTreeMap<String, u64> = BTreeMap::new();
    let mut empty = true;
    for text in corpus {
        empty &= text.is_empty();
        for (_, piece) in pretokenize(text) {
            if let Piece::Text(p) = piece {
                for c in p.chars() {
                    *chars.entry(c.to_string()).or_default() += 1;
                }
                if p.chars().nth(1).is_some() {
                    *words.entry(p.to_string()).or_default() += 1;
                }
            }
        }
    }
    if empty {
        bail!(Argument, "cannot build a vocabulary from an empty corpus");
    }
    let by_frequency = |m: BTreeMap<String, u64>| {
        let mut v: Vec<(String, u64)> = m.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v.into_iter().map(|(s, _)| s)
    };

    let mut tokens: Vec<String> = reserved_tokens().map(ToString::to_string).collect();
    let reserved: Vec<String> = tokens.clone();
    tokens.extend(by_frequency(chars));
    if tokens.len() > max_size {
        bail!(
            Argument,
            "vocabulary size {max_size} cannot hold the {} reserved tokens plus {} distinct characters",
            RESERVED,
            tokens.len() - RESERVED
        );
    }
    let ascii = (0x20u8..0x7f).chain([b'\n', b'\t']).map(|b| (b as char).to_string());
    let fill: Vec<String> = ascii.chain(by_frequency(words)).collect();
    let mut seen: alloc::collections::BTreeSet<String> = tokens.iter().cloned().collect();
    for tok in fill {
        if tokens.len() >= max_size {
            break;
        }
        if reserved.contains(&tok) || !seen.insert(tok.clone()) {
            continue;
        }
        tokens.push(tok);
    }
    Vocab::from_tokens(tokens)
}

impl Vocab {
    /// Rebuilds a vocabulary from its ordered token list (`vocab.json`).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED + 2 {
            bail!(Argument, "vocabulary has {} tokens, need at least {}", tokens.len(), RESERVED + 2);
        }
        for (i, expect) in reserved_tokens().enumerate() {
            if tokens[i] != expect {
                bail!(Integrity, "token {i} is {:?}, expected reserved {expect:?}", tokens[i]);
            }
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                bail!(Integrity, "token {i} is empty");
            }
            if index.insert(t.clone(), i as u32).is_some() {
                bail!(Integrity, "duplicate token {t:?}");
            }
        }
        let max_chars = tokens[RESERVED..].iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Self { tokens, index, max_chars })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn correct_id(&self) -> u32 {
        (SPECIALS.len() + TAGS.len()) as u32
    }

    pub fn incorrect_id(&self) -> u32 {
        self.correct_id() + 1
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        (id as usize) < RESERVED
    }

    /// Stable content fingerprint, recorded in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in &self.tokens {
            bytes.extend_from_slice(t.as_bytes());
            bytes.push(0);
        }
        crate::rng::fnv1a(&bytes)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_with_offsets(text).into_iter().map(|t| t.id).collect()
    }

    pub fn encode_with_offsets(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        let mut char_pos = 0;
        let mut byte_pos = 0;
        for (start, piece) in pretokenize(text) {
            char_pos += text[byte_pos..start].chars().count();
            byte_pos = start;
            match piece {
                Piece::Reserved(p) => {
                    let n = p.chars().count();
                    out.push(Token { id: self.index[p], start: char_pos, end: char_pos + n });
                    char_pos += n;
                    byte_pos += p.len();
                }
                Piece::Text(p) => {
                    self.encode_piece(p, char_pos, &mut out);
                    char_pos += p.chars().count();
                    byte_pos += p.len();
                }
            }
        }
        out
    }

    fn encode_piece(&self, piece: &str, mut char_pos: usize, out: &mut Vec<Token>) {
        if let Some(&id) = self.index.get(piece) {
            if !self.is_reserved(id) {
                out.push(Token { id, start: char_pos, end: char_pos + piece.chars().count() });
                return;
            }
        }
        let chars: Vec<(usize, char)> = piece.char_indices().collect();
        let mut i = 0;
        while i < chars.len() {
            let mut matched = None;
            let longest = self.max_chars.min(chars.len() - i);
            for n in (1..=longest).rev() {
                let end = if i + n < chars.len() { chars[i + n].0 } else { piece.len() };
                let candidate = &piece[chars[i].0..end];
                if let Some(&id) = self.index.get(candidate) {
                    if !self.is_reserved(id) {
                        matched = Some((id, n));
                        break;
                    }
                }
            }
            let (id, n) = matched.unwrap_or((UNK, 1));
            out.push(Token { id, start: char_pos, end: char_pos + n });
            char_pos += n;
            i += n;
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .tokens
                .get(id as usize)
                .ok_or_else(|| Error::Argument(format!("token id {id} outside vocabulary of {}", self.len())))?;
            out.push_str(tok);
        }
        Ok(out)
    }

    /// Token positions covering each char span exactly; errors if a span
    /// straddles token boundaries.
    pub fn span_positions(&self, tokens: &[Token], spans: &[(usize, usize)]) -> Result<Vec<usize>> {
        spans
            .iter()
            .map(|&(s, e)| {
                let pos = tokens.partition_point(|t| t.start < s);
                match tokens.get(pos) {
                    Some(t) if t.start == s && t.end == e => Ok(pos),
                    _ => Err(Error::Integrity(format!("span ({s}, {e}) does not align with a single token"))),
                }
            })
            .collect()
    }
}
