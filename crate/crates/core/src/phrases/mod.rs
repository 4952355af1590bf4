//! Noun and prepositional phrase extraction from free-form instructions.
//!
//! A [`PhraseParser`] produces raw chunks, [`merge_adjacent`] fuses runs of
//! touching chunks, and [`pad_truncate`] fixes the count to `n_p_max` with a
//! mask for the padding slots.

mod tagger;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};
pub use tagger::{tag, tokenize, Tag, Token};

pub const DEFAULT_N_P_MAX: usize = 8;
pub const DEFAULT_PARSER: &str = "rule-chunker";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseKind {
    Np,
    Pp,
    /// Union of adjacent chunks.
    Merged,
    /// Whole-instruction fallback when nothing was extracted.
    Instruction,
}

/// A chunk over token indices `[start, end)`. `text` is the exact source
/// substring those tokens cover.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub kind: PhraseKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseSet {
    pub instruction: String,
    pub phrases: Vec<PhraseSpan>,
}

/// Fixed-length phrase list; `mask[k]` is false for padding slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddedPhrases {
    pub phrases: Vec<Option<PhraseSpan>>,
}

impl PaddedPhrases {
    pub fn n_p(&self) -> usize {
        self.phrases.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.phrases.iter().map(Option::is_some).collect()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.phrases.iter().flatten().map(|p| p.text.as_str()).collect()
    }
}

pub trait PhraseParser: Send {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    /// Raw chunks in source order, non-overlapping.
    fn parse(&mut self, text: &str) -> Result<Vec<PhraseSpan>>;
}

/// Looks a parser backend up by name.
pub fn parser_by_name(name: &str) -> Result<Box<dyn PhraseParser>> {
    match name {
        DEFAULT_PARSER => Ok(Box::new(RuleChunker)),
        other => Err(Error::ParserUnavailable(other.to_string())),
    }
}

/// Chunker over the lexicon tagger.
///
/// `NP = PRP | (DT|PRP$)? CD? (JJ|CD)* NN+ CD?` and `PP = IN+ NP`.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleChunker;

impl PhraseParser for RuleChunker {
    fn name(&self) -> &str {
        DEFAULT_PARSER
    }

    fn version(&self) -> &str {
        "1"
    }

    fn parse(&mut self, text: &str) -> Result<Vec<PhraseSpan>> {
        let tokens = tokenize(text);
        let tags = tag(&tokens);
        let mut out = Vec::new();
        let mut i = 0;
        while i < tags.len() {
            if tags[i] == Tag::Prep {
                let mut j = i;
                while j < tags.len() && tags[j] == Tag::Prep {
                    j += 1;
                }
                if let Some(end) = match_np(&tags, j) {
                    out.push(span(text, &tokens, i, end, PhraseKind::Pp));
                    i = end;
                    continue;
                }
                i = j;
            } else if let Some(end) = match_np(&tags, i) {
                out.push(span(text, &tokens, i, end, PhraseKind::Np));
                i = end;
            } else {
                i += 1;
            }
        }
        Ok(out)
    }
}

fn match_np(tags: &[Tag], start: usize) -> Option<usize> {
    let at = |k: usize| tags.get(k).copied();
    if at(start) == Some(Tag::Pron) {
        return Some(start + 1);
    }
    let mut k = start;
    if matches!(at(k), Some(Tag::Det | Tag::Poss)) {
        k += 1;
    }
    while matches!(at(k), Some(Tag::Adj | Tag::Num)) {
        k += 1;
    }
    let nouns = k;
    while at(k) == Some(Tag::Noun) {
        k += 1;
    }
    if k == nouns {
        return None;
    }
    if at(k) == Some(Tag::Num) {
        k += 1;
    }
    Some(k)
}

fn span(text: &str, tokens: &[Token], start: usize, end: usize, kind: PhraseKind) -> PhraseSpan {
    PhraseSpan {
        text: text[tokens[start].start..tokens[end - 1].end].to_string(),
        start,
        end,
        kind,
    }
}

/// Fuses every maximal run of chunks where each one starts exactly where the
/// previous ends. Spans must be sorted and non-overlapping.
pub fn merge_adjacent(instruction: &str, spans: &[PhraseSpan]) -> Result<PhraseSet> {
    let tokens = tokenize(instruction);
    let mut out: Vec<PhraseSpan> = Vec::new();
    let mut last_end = 0;
    for s in spans {
        if s.start >= s.end || s.end > tokens.len() {
            return Err(Error::Phrase(format!(
                "span [{}, {}) outside {} tokens",
                s.start,
                s.end,
                tokens.len()
            )));
        }
        if s.start < last_end {
            return Err(Error::Phrase(format!(
                "span [{}, {}) overlaps or precedes the previous span ending at {last_end}",
                s.start, s.end
            )));
        }
        last_end = s.end;
        match out.last_mut() {
            Some(prev) if prev.end == s.start => {
                *prev = span(instruction, &tokens, prev.start, s.end, PhraseKind::Merged);
            }
            _ => out.push(s.clone()),
        }
    }
    Ok(PhraseSet {
        instruction: instruction.to_string(),
        phrases: out,
    })
}

/// Truncates to `n_p_max` phrases and pads with masked slots. An empty set
/// falls back to the whole instruction as a single phrase.
pub fn pad_truncate(set: &PhraseSet, n_p_max: usize) -> Result<PaddedPhrases> {
    if n_p_max == 0 {
        return Err(Error::Config("n_p_max must be at least 1".into()));
    }
    let mut phrases: Vec<Option<PhraseSpan>> = if set.phrases.is_empty() {
        let tokens = tokenize(&set.instruction);
        if tokens.is_empty() {
            return Err(Error::Phrase("instruction has no tokens".into()));
        }
        vec![Some(span(
            &set.instruction,
            &tokens,
            0,
            tokens.len(),
            PhraseKind::Instruction,
        ))]
    } else {
        set.phrases.iter().take(n_p_max).cloned().map(Some).collect()
    };
    phrases.resize(n_p_max, None);
    Ok(PaddedPhrases { phrases })
}

/// Parse, merge and pad in one step.
pub fn extract(parser: &mut dyn PhraseParser, instruction: &str, n_p_max: usize) -> Result<PaddedPhrases> {
    let raw = parser.parse(instruction)?;
    let merged = merge_adjacent(instruction, &raw)?;
    pad_truncate(&merged, n_p_max)
}

/// One line of a golden file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenRecord {
    pub sample_id: String,
    pub instruction: String,
    pub phrases: Vec<PhraseSpan>,
}

/// Serializes merged phrase sets as JSON lines in input order.
pub fn golden_lines(
    parser: &mut dyn PhraseParser,
    items: &[(String, String)],
) -> Result<String> {
    let mut out = String::new();
    for (sample_id, instruction) in items {
        let raw = parser.parse(instruction)?;
        let merged = merge_adjacent(instruction, &raw)?;
        let rec = GoldenRecord {
            sample_id: sample_id.clone(),
            instruction: instruction.clone(),
            phrases: merged.phrases,
        };
        out.push_str(&serde_json::to_string(&rec).expect("golden record serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_golden(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_golden(path: &Path) -> Result<Vec<GoldenRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(set: &PhraseSet) -> Vec<&str> {
        set.phrases.iter().map(|p| p.text.as_str()).collect()
    }

    fn run(text: &str) -> PhraseSet {
        let raw = RuleChunker.parse(text).unwrap();
        merge_adjacent(text, &raw).unwrap()
    }

    #[test]
    fn dining_room_example() {
        let text = "Please go to the dining room which has a round table. Pick up the bottle on it.";
        let raw = RuleChunker.parse(text).unwrap();
        let raw_texts: Vec<&str> = raw.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(
            raw_texts,
            ["to the dining room", "a round table", "the bottle", "on it"]
        );
        assert_eq!(
            texts(&merge_adjacent(text, &raw).unwrap()),
            ["to the dining room", "a round table", "the bottle on it"]
        );
    }

    #[test]
    fn merges_touching_chunks() {
        let text = "Please pick up the bottle on the table";
        let spans = vec![
            PhraseSpan { text: "the bottle".into(), start: 3, end: 5, kind: PhraseKind::Np },
            PhraseSpan { text: "on the table".into(), start: 5, end: 8, kind: PhraseKind::Pp },
        ];
        let set = merge_adjacent(text, &spans).unwrap();
        assert_eq!(set.phrases.len(), 1);
        assert_eq!(set.phrases[0].text, "the bottle on the table");
        assert_eq!((set.phrases[0].start, set.phrases[0].end), (3, 8));
        assert_eq!(merge_adjacent(text, &set.phrases).unwrap(), set);
    }

    #[test]
    fn rejects_unsorted_spans() {
        let text = "Please pick up the bottle on the table";
        let spans = vec![
            PhraseSpan { text: "on the table".into(), start: 5, end: 8, kind: PhraseKind::Pp },
            PhraseSpan { text: "the bottle".into(), start: 3, end: 5, kind: PhraseKind::Np },
        ];
        assert!(matches!(merge_adjacent(text, &spans), Err(Error::Phrase(_))));
    }

    #[test]
    fn fallback_is_whole_instruction() {
        let text = "  Go now!";
        let set = run(text);
        assert!(set.phrases.is_empty());
        let padded = pad_truncate(&set, 4).unwrap();
        assert_eq!(padded.mask(), [true, false, false, false]);
        assert_eq!(padded.texts(), ["Go now!"]);
    }

    #[test]
    fn truncates_to_limit() {
        let text = "Take the cup, the plate, the fork, the knife and the spoon.";
        let padded = pad_truncate(&run(text), 3).unwrap();
        assert_eq!(padded.texts(), ["the cup", "the plate", "the fork"]);
        assert_eq!(padded.mask(), [true; 3]);
    }

    #[test]
    fn unknown_backend() {
        assert!(matches!(parser_by_name("stanza"), Err(Error::ParserUnavailable(_))));
        assert_eq!(parser_by_name(DEFAULT_PARSER).unwrap().name(), DEFAULT_PARSER);
    }

    #[test]
    fn towel_instruction() {
        let text = "Go to the bathroom with a picture of a wagon and bring me the towel directly across from the sink.";
        assert_eq!(
            texts(&run(text)),
            [
                "to the bathroom with a picture of a wagon",
                "me the towel",
                "across from the sink"
            ]
        );
    }

    proptest! {
        #[test]
        fn spans_are_exact_and_merge_is_idempotent(words in prop::collection::vec(
            prop::sample::select(vec![
                "the", "red", "cup", "on", "table", "go", "to", "and", "pick", "up", "it",
                "near", "a", "lamp", ",", "which", "has", "two", "chairs", "please", "next",
            ]), 1..24)) {
            let text = words.join(" ");
            let raw = RuleChunker.parse(&text).unwrap();
            let tokens = tokenize(&text);
            let set = merge_adjacent(&text, &raw).unwrap();
            for p in raw.iter().chain(&set.phrases) {
                prop_assert_eq!(
                    &text[tokens[p.start].start..tokens[p.end - 1].end], p.text.as_str()
                );
            }
            for w in set.phrases.windows(2) {
                prop_assert!(w[0].end < w[1].start);
            }
            prop_assert_eq!(merge_adjacent(&text, &set.phrases).unwrap(), set.clone());
            let padded = pad_truncate(&set, DEFAULT_N_P_MAX).unwrap();
            prop_assert_eq!(padded.n_p(), DEFAULT_N_P_MAX);
            prop_assert!(padded.mask()[0]);
        }
    }
}
