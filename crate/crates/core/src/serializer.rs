//! Renders `(history, target)` pairs into tagged instruction text and parses it back.
//!
//! Layout of a rendered example:
//!
//! ```text
//! <preamble>
//!
//! <history>:
//!     <Q>: <question>  <options>: A) .. B) .. </options> <QID>id</QID> <C>concepts</C> </Q><cr>Correct</cr>
//!     ...
//! </history>
//!
//! What do you predict they will answer for the target question:
//! <target><question> <options>
//! A) .. B) ..</options> <QID>id</QID> <C>concepts</C> </target>:Correct
//! ```
//!
//! Which fields appear inside `<Q>` and `<target>` depends on the [`Representation`].
//! The outcome after `</target>:` is the prediction target.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Exercise, Interaction};
use crate::error::{bail, Error, Result};

pub const CORRECT: &str = "Correct";
pub const INCORRECT: &str = "Incorrect";

/// Every structural tag, in vocabulary order.
pub const TAGS: [&str; 14] = [
    "<history>", "</history>", "<Q>", "</Q>", "<options>", "</options>", "<QID>", "</QID>", "<C>", "</C>", "<cr>",
    "</cr>", "<target>", "</target>",
];

pub const DEFAULT_PREAMBLE: &str = "Given the following student question and answer history, predict whether the student will answer the target question correctly or incorrectly. The target question is enclosed in <target> tags and the options are enclosed in <options> tags. Respond with \"Correct\" if you think they will answer correctly, or \"Incorrect\" if you think they will answer incorrectly.";

pub const TARGET_PROMPT: &str = "What do you predict they will answer for the target question: ";

/// The suffix marker after which the predicted outcome literal follows.
pub const ANSWER_MARKER: &str = "</target>:";

const CONCEPT_SEPARATOR: &str = ", ";

pub fn outcome_literal(correct: bool) -> &'static str {
    if correct {
        CORRECT
    } else {
        INCORRECT
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    FullText,
    ConceptOnly,
    IdOnly,
}

impl Representation {
    pub const ALL: [Representation; 3] = [Representation::FullText, Representation::ConceptOnly, Representation::IdOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Representation::FullText => "full_text",
            Representation::ConceptOnly => "concept_only",
            Representation::IdOnly => "id_only",
        }
    }

    fn shows_text(self) -> bool {
        self == Representation::FullText
    }

    fn shows_concepts(self) -> bool {
        self != Representation::IdOnly
    }
}

impl core::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Representation::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown representation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub preamble: String,
    /// Optional character budget; the oldest history items are dropped until the text fits.
    pub max_chars: Option<usize>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self { preamble: DEFAULT_PREAMBLE.to_string(), max_chars: None }
    }
}

/// A rendered example plus the character spans of every outcome literal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedExample {
    pub text: String,
    /// `(start, end)` in Unicode scalar values; the last span is the answer after `</target>:`.
    pub target_char_spans: Vec<(usize, usize)>,
    pub label: bool,
}

impl SerializedExample {
    /// The answer span (always the last one).
    pub fn answer_span(&self) -> (usize, usize) {
        *self.target_char_spans.last().expect("rendered examples always carry an answer span")
    }

    /// The text up to and including `</target>:`, i.e. the inference prompt.
    pub fn prompt(&self) -> &str {
        let (start, _) = self.answer_span();
        let byte = self.text.char_indices().nth(start).map_or(self.text.len(), |(b, _)| b);
        &self.text[..byte]
    }
}

fn options_text(options: &[String]) -> Result<String> {
    if options.len() > 26 {
        bail!(Argument, "at most 26 options can be lettered, got {}", options.len());
    }
    let mut out = String::new();
    for (i, opt) in options.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push((b'A' + i as u8) as char);
        out.push_str(") ");
        out.push_str(opt);
    }
    Ok(out)
}

fn metadata(ex: &Exercise, repr: Representation) -> String {
    let mut out = format!("<QID>{}</QID>", ex.exercise_id);
    if repr.shows_concepts() {
        out.push_str(&format!(" <C>{}</C>", ex.concepts.join(CONCEPT_SEPARATOR)));
    }
    out
}

/// Returns the rendered line and the char range of its outcome literal.
fn history_item(ex: &Exercise, outcome: bool, repr: Representation) -> Result<(String, (usize, usize))> {
    let mut body = String::from("    <Q>:");
    if repr.shows_text() {
        body.push_str(&format!(" {}  <options>: {} </options>", ex.question_text, options_text(&ex.options)?));
    }
    body.push(' ');
    body.push_str(&metadata(ex, repr));
    body.push_str(" </Q><cr>");
    let literal_at = body.chars().count();
    let literal = outcome_literal(outcome);
    body.push_str(literal);
    body.push_str("</cr> \n");
    Ok((body, (literal_at, literal_at + literal.len())))
}

fn target_block(ex: &Exercise, repr: Representation) -> Result<String> {
    let mut out = String::from("<target>");
    if repr.shows_text() {
        out.push_str(&format!("{} <options> \n{}</options> ", ex.question_text, options_text(&ex.options)?));
    }
    out.push_str(&metadata(ex, repr));
    out.push(' ');
    out.push_str(ANSWER_MARKER);
    Ok(out)
}

/// Renders one example. `history` must be ordered by timestep; `outcome` is
/// the label of the target interaction and is appended after `</target>:`.
pub fn render_example<'a>(
    history: &[Interaction],
    target: &Exercise,
    outcome: bool,
    exercises: impl Fn(&str) -> Option<&'a Exercise>,
    repr: Representation,
    template: &PromptTemplate,
) -> Result<SerializedExample> {
    let mut items = Vec::with_capacity(history.len());
    for it in history {
        let ex = exercises(&it.exercise_id)
            .ok_or_else(|| Error::Integrity(format!("history references unknown exercise {}", it.exercise_id)))?;
        items.push(history_item(ex, it.outcome, repr)?);
    }

    let head = format!("{}\n\n<history>:\n", template.preamble);
    let tail = format!("</history>\n\n{TARGET_PROMPT}\n{}", target_block(target, repr)?);
    let answer = outcome_literal(outcome);

    let mut first = 0;
    if let Some(budget) = template.max_chars {
        let fixed = head.chars().count() + tail.chars().count() + answer.len();
        let mut total = fixed + items.iter().map(|(s, _)| s.chars().count()).sum::<usize>();
        while first < items.len() && total > budget {
            total -= items[first].0.chars().count();
            first += 1;
        }
    }

    let mut text = head;
    let mut offset = text.chars().count();
    let mut spans = Vec::with_capacity(items.len() - first + 1);
    for (item, (lit_start, lit_end)) in &items[first..] {
        spans.push((offset + lit_start, offset + lit_end));
        offset += item.chars().count();
        text.push_str(item);
    }
    text.push_str(&tail);
    let start = text.chars().count();
    text.push_str(answer);
    spans.push((start, start + answer.len()));
    Ok(SerializedExample { text, target_char_spans: spans, label: outcome })
}

/// Renders the example for timestep `t` (1-based) of a learner: history is
/// `interactions[..t-1]`, the target is `interactions[t-1]`.
pub fn render_timestep(
    interactions: &[Interaction],
    t: usize,
    exercises: &BTreeMap<String, Exercise>,
    repr: Representation,
    template: &PromptTemplate,
) -> Result<SerializedExample> {
    if t == 0 || t > interactions.len() {
        bail!(Argument, "timestep {t} outside 1..={}", interactions.len());
    }
    let target = &interactions[t - 1];
    let ex = exercises
        .get(&target.exercise_id)
        .ok_or_else(|| Error::Integrity(format!("unknown target exercise {}", target.exercise_id)))?;
    render_example(&interactions[..t - 1], ex, target.outcome, |id| exercises.get(id), repr, template)
}

/// Fields recovered from one `<Q>` item or the `<target>` block.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedQuestion {
    pub question_text: Option<String>,
    pub options: Option<Vec<String>>,
    pub exercise_id: Option<String>,
    pub concepts: Option<Vec<String>>,
}

impl ParsedQuestion {
    /// What `render_example` shows of `ex` under `repr`.
    pub fn expected(ex: &Exercise, repr: Representation) -> Self {
        Self {
            question_text: repr.shows_text().then(|| ex.question_text.clone()),
            options: repr.shows_text().then(|| ex.options.clone()),
            exercise_id: Some(ex.exercise_id.clone()),
            concepts: repr.shows_concepts().then(|| ex.concepts.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedTarget {
    pub question: ParsedQuestion,
    /// Present when the text carries the answer after `</target>:`.
    pub outcome: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedExample {
    pub history: Vec<(ParsedQuestion, bool)>,
    /// `None` when the text stops after a complete history item.
    pub target: Option<ParsedTarget>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tag {
    History,
    Q,
    Options,
    Qid,
    C,
    Cr,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
enum Lexeme<'a> {
    Open(Tag),
    Close(Tag),
    Text(&'a str),
}

const TAG_TABLE: [(&str, Tag); 7] = [
    ("history", Tag::History),
    ("Q", Tag::Q),
    ("options", Tag::Options),
    ("QID", Tag::Qid),
    ("C", Tag::C),
    ("cr", Tag::Cr),
    ("target", Tag::Target),
];

fn tag_name(tag: Tag) -> &'static str {
    TAG_TABLE.iter().find(|(_, t)| *t == tag).unwrap().0
}

/// Splits text into tags and text runs; positions are char offsets.
fn lex(text: &str) -> Result<Vec<(usize, Lexeme<'_>)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut run_start = 0;
    let mut i = 0;
    let char_pos = |b: usize| text[..b].chars().count();
    while i < bytes.len() {
        if bytes[i] == b'<' {
            let close = bytes.get(i + 1) == Some(&b'/');
            let name_start = i + 1 + close as usize;
            let mut j = name_start;
            while j < bytes.len() && bytes[j].is_ascii_alphanumeric() {
                j += 1;
            }
            if j > name_start && bytes.get(j) == Some(&b'>') {
                let name = &text[name_start..j];
                let tag = TAG_TABLE
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| *t)
                    .ok_or_else(|| Error::Grammar { position: char_pos(i), message: format!("unknown tag <{}{name}>", if close { "/" } else { "" }) })?;
                if run_start < i {
                    out.push((char_pos(run_start), Lexeme::Text(&text[run_start..i])));
                }
                out.push((char_pos(i), if close { Lexeme::Close(tag) } else { Lexeme::Open(tag) }));
                i = j + 1;
                run_start = i;
                continue;
            }
        }
        i += 1;
    }
    if run_start < bytes.len() {
        out.push((char_pos(run_start), Lexeme::Text(&text[run_start..])));
    }
    Ok(out)
}

struct Parser<'a> {
    lexemes: Vec<(usize, Lexeme<'a>)>,
    pos: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Lexeme<'a>> {
        self.lexemes.get(self.pos).map(|(_, l)| l)
    }

    fn here(&self) -> usize {
        self.lexemes.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Grammar { position: self.here(), message: message.into() })
    }

    fn next(&mut self) -> Option<Lexeme<'a>> {
        let l = self.lexemes.get(self.pos).map(|(_, l)| l.clone());
        self.pos += 1;
        l
    }

    fn at_end(&self) -> bool {
        self.pos >= self.lexemes.len()
    }

    /// Consumes an optional text run, which must match `allowed` once trimmed.
    fn skip_filler(&mut self, allowed: &[&str]) -> Result<()> {
        if let Some(Lexeme::Text(s)) = self.peek() {
            let t = s.trim();
            if !allowed.contains(&t) {
                if t == CORRECT || t == INCORRECT {
                    return self.err(format!("outcome literal {t:?} outside <cr>"));
                }
                return self.err(format!("unexpected text {t:?}"));
            }
            self.pos += 1;
        }
        Ok(())
    }

    fn expect_open(&mut self, tag: Tag) -> Result<()> {
        match self.peek() {
            Some(Lexeme::Open(t)) if *t == tag => {
                self.pos += 1;
                Ok(())
            }
            None => self.err(format!("unbalanced: expected <{}> before end of text", tag_name(tag))),
            _ => self.err(format!("expected <{}>", tag_name(tag))),
        }
    }

    fn expect_close(&mut self, tag: Tag) -> Result<()> {
        match self.peek() {
            Some(Lexeme::Close(t)) if *t == tag => {
                self.pos += 1;
                Ok(())
            }
            None => self.err(format!("unbalanced: <{}> is never closed", tag_name(tag))),
            _ => self.err(format!("expected </{}>", tag_name(tag))),
        }
    }

    /// Text content of a leaf element whose open tag was already consumed.
    fn leaf(&mut self, tag: Tag) -> Result<&'a str> {
        let content = match self.peek() {
            Some(Lexeme::Text(s)) => {
                let s = *s;
                self.pos += 1;
                s
            }
            _ => "",
        };
        self.expect_close(tag)?;
        Ok(content)
    }

    /// Parses the optional options block, QID and concepts inside `<Q>` or `<target>`.
    fn question_fields(&mut self, q: &mut ParsedQuestion, options_prefix: &str) -> Result<()> {
        if let Some(Lexeme::Open(Tag::Options)) = self.peek() {
            self.pos += 1;
            let raw = self.leaf(Tag::Options)?;
            let body = raw.strip_prefix(options_prefix).unwrap_or(raw);
            q.options = Some(split_options(body.trim()).map_err(|m| Error::Grammar { position: self.here(), message: m })?);
            self.skip_filler(&[""])?;
        }
        if let Some(Lexeme::Open(Tag::Qid)) = self.peek() {
            self.pos += 1;
            q.exercise_id = Some(self.leaf(Tag::Qid)?.to_string());
            self.skip_filler(&[""])?;
        }
        if let Some(Lexeme::Open(Tag::C)) = self.peek() {
            self.pos += 1;
            let raw = self.leaf(Tag::C)?;
            q.concepts = Some(if raw.is_empty() {
                Vec::new()
            } else {
                raw.split(CONCEPT_SEPARATOR).map(ToString::to_string).collect()
            });
            self.skip_filler(&[""])?;
        }
        Ok(())
    }

    fn history_item(&mut self) -> Result<(ParsedQuestion, bool)> {
        self.expect_open(Tag::Q)?;
        let mut q = ParsedQuestion::default();
        match self.peek() {
            Some(Lexeme::Text(s)) => {
                let s = *s;
                let Some(rest) = s.strip_prefix(':') else {
                    return self.err("expected ':' after <Q>");
                };
                let text = rest.trim();
                if !text.is_empty() {
                    if matches!(self.lexemes.get(self.pos + 1).map(|l| &l.1), Some(Lexeme::Open(Tag::Options))) {
                        q.question_text = Some(rest.strip_prefix(' ').unwrap_or(rest).trim_end_matches(' ').to_string());
                    } else {
                        return self.err(format!("unexpected text {text:?} inside <Q>"));
                    }
                }
                self.pos += 1;
            }
            _ => return self.err("expected ':' after <Q>"),
        }
        self.question_fields(&mut q, ": ")?;
        self.expect_close(Tag::Q)?;
        if let Some(Lexeme::Text(s)) = self.peek() {
            let t = s.trim();
            if t == CORRECT || t == INCORRECT {
                return self.err(format!("outcome literal {t:?} outside <cr>"));
            }
            return self.err("expected <cr> directly after </Q>");
        }
        self.expect_open(Tag::Cr)?;
        let outcome = match self.leaf(Tag::Cr)? {
            CORRECT => true,
            INCORRECT => false,
            other => return self.err(format!("invalid outcome literal {other:?}")),
        };
        Ok((q, outcome))
    }

    fn target(&mut self) -> Result<ParsedTarget> {
        self.expect_open(Tag::Target)?;
        let mut q = ParsedQuestion::default();
        if let Some(Lexeme::Text(s)) = self.peek() {
            let s = *s;
            if matches!(self.lexemes.get(self.pos + 1).map(|l| &l.1), Some(Lexeme::Open(Tag::Options))) {
                q.question_text = Some(s.strip_suffix(' ').unwrap_or(s).to_string());
                self.pos += 1;
            } else if !s.trim().is_empty() {
                return self.err(format!("unexpected text {:?} in <target>", s.trim()));
            } else {
                self.pos += 1;
            }
        }
        self.question_fields(&mut q, "")?;
        self.expect_close(Tag::Target)?;
        let outcome = match self.next() {
            Some(Lexeme::Text(s)) => match s.strip_prefix(':') {
                Some("") => None,
                Some(CORRECT) => Some(true),
                Some(INCORRECT) => Some(false),
                Some(other) => return self.err(format!("invalid answer {other:?} after </target>:")),
                None => return self.err("expected ':' after </target>"),
            },
            None => return self.err("expected ':' after </target>"),
            Some(_) => return self.err("unexpected tag after </target>"),
        };
        if !self.at_end() {
            return self.err("trailing content after the answer");
        }
        Ok(ParsedTarget { question: q, outcome })
    }
}

fn split_options(body: &str) -> core::result::Result<Vec<String>, String> {
    let mut options = Vec::new();
    let mut rest = body;
    let mut letter = b'A';
    let first = format!("{}) ", letter as char);
    rest = rest.strip_prefix(first.as_str()).ok_or_else(|| format!("options must start with {first:?}"))?;
    loop {
        let next = format!(" {}) ", (letter + 1) as char);
        match rest.find(next.as_str()) {
            Some(i) if letter < b'Z' => {
                options.push(rest[..i].to_string());
                rest = &rest[i + next.len()..];
                letter += 1;
            }
            _ => {
                options.push(rest.to_string());
                return Ok(options);
            }
        }
    }
}

/// Parses rendered text back into its history items and target.
///
/// Text that stops right after a complete history item is accepted as a prefix
/// (with `target: None`); any other early end is an unbalanced-tag error.
pub fn parse_example(text: &str) -> Result<ParsedExample> {
    let lexemes = lex(text)?;
    let end = text.chars().count();
    let mut p = Parser { lexemes, pos: 0, end };

    // The preamble is free text up to <history>; it mentions tags and outcome words.
    while !matches!(p.peek(), Some(Lexeme::Open(Tag::History)) | None) {
        p.pos += 1;
    }
    p.expect_open(Tag::History)?;
    match p.peek() {
        Some(Lexeme::Text(s)) if s.starts_with(':') && s[1..].trim().is_empty() => p.pos += 1,
        _ => return p.err("expected ':' after <history>"),
    }

    let mut history = Vec::new();
    loop {
        match p.peek() {
            Some(Lexeme::Open(Tag::Q)) => {
                history.push(p.history_item()?);
                p.skip_filler(&[""])?;
                if p.at_end() {
                    return Ok(ParsedExample { history, target: None });
                }
            }
            Some(Lexeme::Close(Tag::History)) => {
                p.pos += 1;
                break;
            }
            None => return p.err("unbalanced: <history> is never closed"),
            Some(Lexeme::Text(s)) => {
                let t = s.trim();
                if t == CORRECT || t == INCORRECT {
                    return p.err(format!("outcome literal {t:?} outside <cr>"));
                }
                return p.err(format!("unexpected text {t:?} in <history>"));
            }
            Some(_) => return p.err("unexpected tag in <history>"),
        }
    }
    p.skip_filler(&[TARGET_PROMPT.trim()])?;
    let target = p.target()?;
    Ok(ParsedExample { history, target: Some(target) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ex(id: &str, text: &str) -> Exercise {
        Exercise {
            exercise_id: id.into(),
            question_text: text.into(),
            options: vec!["10".into(), "5".into(), "9".into(), "7".into()],
            concepts: vec!["addition-apples".into()],
        }
    }

    fn table() -> BTreeMap<String, Exercise> {
        [ex("q1", "Asha has 3 apples and gets 4 more. How many apples?"), ex("q2", "Ben has 9 coins and gives away 2.")]
            .into_iter()
            .map(|e| (e.exercise_id.clone(), e))
            .collect()
    }

    fn history() -> Vec<Interaction> {
        vec![
            Interaction { learner_id: "s".into(), timestep: 1, exercise_id: "q1".into(), outcome: true },
            Interaction { learner_id: "s".into(), timestep: 2, exercise_id: "q2".into(), outcome: false },
        ]
    }

    fn render(h: &[Interaction], repr: Representation) -> SerializedExample {
        let t = table();
        render_example(h, &t["q2"], true, |id| t.get(id), repr, &PromptTemplate::default()).unwrap()
    }

    fn substr(s: &str, (a, b): (usize, usize)) -> String {
        s.chars().skip(a).take(b - a).collect()
    }

    #[test]
    fn empty_history_has_one_span() {
        let e = render(&[], Representation::FullText);
        assert_eq!(e.target_char_spans.len(), 1);
        assert!(e.text.contains("<history>:\n</history>"));
        assert_eq!(substr(&e.text, e.answer_span()), "Correct");
        assert!(e.prompt().ends_with(ANSWER_MARKER));
    }

    #[test]
    fn two_item_history_full_text() {
        let e = render(&history(), Representation::FullText);
        assert_eq!(e.target_char_spans.len(), 3);
        let lits: Vec<String> = e.target_char_spans.iter().map(|s| substr(&e.text, *s)).collect();
        assert_eq!(lits, ["Correct", "Incorrect", "Correct"]);
        let body = &e.text[DEFAULT_PREAMBLE.len()..];
        for tag in ["history", "Q", "options", "QID", "C", "cr", "target"] {
            assert_eq!(
                body.matches(&format!("<{tag}>")).count(),
                body.matches(&format!("</{tag}>")).count(),
                "{tag}"
            );
        }
        assert!(e.text.contains(
            "    <Q>: Asha has 3 apples and gets 4 more. How many apples?  <options>: A) 10 B) 5 C) 9 D) 7 </options> <QID>q1</QID> <C>addition-apples</C> </Q><cr>Correct</cr> \n"
        ));
        assert!(e.text.ends_with(
            "<target>Ben has 9 coins and gives away 2. <options> \nA) 10 B) 5 C) 9 D) 7</options> <QID>q2</QID> <C>addition-apples</C> </target>:Correct"
        ));
    }

    #[test]
    fn id_only_hides_text_and_options() {
        let e = render(&history(), Representation::IdOnly);
        let t = table();
        for x in t.values() {
            assert!(!e.text.contains(x.question_text.as_str()));
        }
        assert!(!e.text.contains("A) 10"));
        assert!(!e.text.contains("<C>"));
        assert!(e.text.contains("<QID>q1</QID>"));
    }

    #[test]
    fn representation_lengths_are_monotone() {
        let h = history();
        let id = render(&h, Representation::IdOnly).text.len();
        let concept = render(&h, Representation::ConceptOnly).text.len();
        let full = render(&h, Representation::FullText).text.len();
        assert!(id <= concept && concept <= full);
    }

    #[test]
    fn round_trip_all_representations() {
        let t = table();
        for repr in Representation::ALL {
            let e = render(&history(), repr);
            let parsed = parse_example(&e.text).unwrap();
            assert_eq!(parsed.history.len(), 2);
            assert_eq!(parsed.history[0], (ParsedQuestion::expected(&t["q1"], repr), true));
            assert_eq!(parsed.history[1], (ParsedQuestion::expected(&t["q2"], repr), false));
            let target = parsed.target.unwrap();
            assert_eq!(target.question, ParsedQuestion::expected(&t["q2"], repr));
            assert_eq!(target.outcome, Some(true));
            let prompt_only = parse_example(e.prompt()).unwrap();
            assert_eq!(prompt_only.target.unwrap().outcome, None);
        }
    }

    #[test]
    fn truncation_drops_oldest_first() {
        let t = table();
        let full = render(&history(), Representation::FullText);
        let template = PromptTemplate { max_chars: Some(full.text.chars().count() - 5), ..Default::default() };
        let e = render_example(&history(), &t["q2"], false, |id| t.get(id), Representation::FullText, &template).unwrap();
        let parsed = parse_example(&e.text).unwrap();
        assert_eq!(parsed.history.len(), 1);
        assert_eq!(parsed.history[0].0.exercise_id.as_deref(), Some("q2"));
        assert_eq!(e.target_char_spans.len(), 2);
    }

    #[test]
    fn grammar_errors() {
        let e = render(&history(), Representation::ConceptOnly);
        let bad = e.text.replacen("<cr>Correct</cr>", "<cr>Maybe</cr>", 1);
        assert!(matches!(parse_example(&bad), Err(Error::Grammar { .. })));
        let outside = e.text.replacen("</Q><cr>Correct</cr>", "</Q>Correct<cr>Correct</cr>", 1);
        let err = parse_example(&outside).unwrap_err();
        assert!(matches!(err, Error::Grammar { ref message, .. } if message.contains("outside <cr>")), "{err:?}");
        let unknown = e.text.replacen("<QID>", "<XID>", 1);
        assert!(matches!(parse_example(&unknown), Err(Error::Grammar { ref message, .. }) if message.contains("unknown tag")));
        let unbalanced = e.text.replacen("</QID>", "", 1);
        assert!(matches!(parse_example(&unbalanced), Err(Error::Grammar { .. })));
        let cut = &e.text[..e.text.find("</history>").unwrap() + 3];
        assert!(matches!(parse_example(cut), Err(Error::Grammar { .. })));
    }

    #[test]
    fn prefix_after_complete_item_parses() {
        let e = render(&history(), Representation::FullText);
        let mut end = 0;
        let mut seen = 0;
        while let Some(i) = e.text[end..].find("</cr>") {
            end += i + "</cr>".len();
            seen += 1;
            let parsed = parse_example(&e.text[..end]).unwrap();
            assert_eq!(parsed.history.len(), seen);
            assert!(parsed.target.is_none());
        }
        assert_eq!(seen, 2);
    }

    #[test]
    fn unknown_history_exercise_is_integrity_error() {
        let t = table();
        let mut h = history();
        h[0].exercise_id = "nope".into();
        let err = render_example(&h, &t["q2"], true, |id| t.get(id), Representation::IdOnly, &PromptTemplate::default())
            .unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }
}
