//! Corpus model and the text formats the toolkit reads and writes.
//!
//! Everything here works on pre-tokenized input. Token boundaries are taken
//! verbatim from the files; nothing is re-tokenized.
//!
//! Formats:
//!
//! * IOB2 corpus: `<token>\t<tag>` per line, a blank line between sentences,
//!   and an optional `#id <sentence_id>` line before a sentence. Sentences
//!   without an id line are named by their 0-based ordinal.
//! * Knowledge base / dictionary: `<name>\t<type>[\t<source>]`.
//! * Predictions: one JSON object per line with `sentence_id`, `start`,
//!   `end` (inclusive), `type`, and optional `score` and `surface`.
//! * Phrase list: one phrase per line.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{DictEntry, Dictionary, EntrySource};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn new<S: Into<String>>(id: impl Into<String>, words: impl IntoIterator<Item = S>) -> Result<Self> {
        let id = id.into();
        let tokens: Vec<Token> = words
            .into_iter()
            .enumerate()
            .map(|(index, w)| Token { text: w.into(), index })
            .collect();
        if tokens.is_empty() {
            return Err(Error::Invalid(format!("sentence {id:?} has no tokens")));
        }
        if let Some(t) = tokens.iter().find(|t| t.text.is_empty()) {
            return Err(Error::Invalid(format!(
                "sentence {id:?} has an empty token at {}",
                t.index
            )));
        }
        Ok(Sentence { id, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }

    /// Space-joined text of tokens `start..=end`.
    pub fn surface(&self, start: usize, end: usize) -> String {
        self.tokens[start..=end]
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check_span(&self, span: &Span) -> Result<()> {
        if span.start > span.end || span.end >= self.len() {
            return Err(Error::InvalidSpan {
                sentence_id: span.sentence_id.clone(),
                start: span.start,
                end: span.end,
                reason: format!("sentence has {} tokens", self.len()),
            });
        }
        Ok(())
    }
}

/// Token boundary `<start, end>`, both ends inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub sentence_id: String,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(sentence_id: impl Into<String>, start: usize, end: usize) -> Self {
        Span {
            sentence_id: sentence_id.into(),
            start,
            end,
        }
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.sentence_id == other.sentence_id && self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypedEntity {
    pub span: Span,
    pub entity_type: String,
    pub surface: String,
    pub score: Option<f64>,
}

/// Identity of a prediction for matching and voting: `(sentence_id, start, end, type)`.
pub type EntityKey = (String, usize, usize, String);

impl TypedEntity {
    pub fn key(&self) -> EntityKey {
        (
            self.span.sentence_id.clone(),
            self.span.start,
            self.span.end,
            self.entity_type.clone(),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaggingSpace(BTreeSet<String>);

impl TaggingSpace {
    /// Build a tagging space from labels. Labels must be non-empty and unique.
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for label in labels {
            let label = label.into();
            if label.is_empty() {
                return Err(Error::Invalid("empty entity type in tagging space".into()));
            }
            if !set.insert(label.clone()) {
                return Err(Error::Invalid(format!("duplicate entity type {label:?}")));
            }
        }
        if set.is_empty() {
            return Err(Error::Invalid("tagging space is empty".into()));
        }
        Ok(TaggingSpace(set))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.contains(label)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn union(&self, other: &TaggingSpace) -> TaggingSpace {
        TaggingSpace(self.0.union(&other.0).cloned().collect())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub gold: Vec<TypedEntity>,
    pub tagging_space: TaggingSpace,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Assemble a corpus, checking id uniqueness and that every gold entity
    /// points at a real span whose type lies in the tagging space.
    pub fn new(sentences: Vec<Sentence>, gold: Vec<TypedEntity>, tagging_space: TaggingSpace) -> Result<Self> {
        let mut index = HashMap::with_capacity(sentences.len());
        for (i, s) in sentences.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate sentence id {:?}", s.id)));
            }
        }
        let corpus = Corpus {
            sentences,
            gold,
            tagging_space,
            index,
        };
        for e in &corpus.gold {
            let s = corpus
                .sentence(&e.span.sentence_id)
                .ok_or_else(|| Error::Invalid(format!("gold entity in unknown sentence {:?}", e.span.sentence_id)))?;
            s.check_span(&e.span)?;
            if !corpus.tagging_space.contains(&e.entity_type) {
                return Err(Error::Invalid(format!(
                    "gold type {:?} outside the tagging space",
                    e.entity_type
                )));
            }
        }
        Ok(corpus)
    }

    pub fn sentence(&self, id: &str) -> Option<&Sentence> {
        self.index.get(id).map(|&i| &self.sentences[i])
    }

    pub fn surface_of(&self, span: &Span) -> Result<String> {
        let s = self
            .sentence(&span.sentence_id)
            .ok_or_else(|| Error::Invalid(format!("unknown sentence id {:?}", span.sentence_id)))?;
        s.check_span(span)?;
        Ok(s.surface(span.start, span.end))
    }

    /// Concatenate two corpora with disjoint sentence ids.
    pub fn concat(&self, other: &Corpus) -> Result<Corpus> {
        let sentences = self.sentences.iter().chain(&other.sentences).cloned().collect();
        let gold = self.gold.iter().chain(&other.gold).cloned().collect();
        Corpus::new(sentences, gold, self.tagging_space.union(&other.tagging_space))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IobMode {
    /// Dangling `I-T` tags start a new entity and are counted.
    #[default]
    Lenient,
    /// Dangling `I-T` tags are a parse error.
    Strict,
}

#[derive(Debug, Clone)]
pub struct ParsedIob {
    pub corpus: Corpus,
    /// Number of dangling `I-T` tags repaired to `B-T`.
    pub repaired: usize,
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Option<Tag<'_>> {
    if tag == "O" {
        return Some(Tag::Outside);
    }
    let (prefix, label) = tag.split_once('-')?;
    if label.is_empty() {
        return None;
    }
    match prefix {
        "B" => Some(Tag::Begin(label)),
        "I" => Some(Tag::Inside(label)),
        _ => None,
    }
}

#[derive(Default)]
struct SentenceBuilder {
    id: Option<String>,
    words: Vec<String>,
    // (type, start, end)
    entities: Vec<(String, usize, usize)>,
    open: Option<(String, usize)>,
}

impl SentenceBuilder {
    fn close(&mut self) {
        if let Some((ty, start)) = self.open.take() {
            self.entities.push((ty, start, self.words.len() - 1));
        }
    }
}

/// Parse an IOB2 corpus.
pub fn parse_iob<R: BufRead>(reader: R, mode: IobMode) -> Result<ParsedIob> {
    let mut sentences = Vec::new();
    let mut gold = Vec::new();
    let mut types = BTreeSet::new();
    let mut repaired = 0;
    let mut cur = SentenceBuilder::default();

    let mut flush = |cur: &mut SentenceBuilder, sentences: &mut Vec<Sentence>, line: usize| -> Result<()> {
        if cur.words.is_empty() {
            if cur.id.is_some() {
                return Err(Error::parse(line, "sentence id line not followed by tokens"));
            }
            return Ok(());
        }
        cur.close();
        let cur = std::mem::take(cur);
        let id = cur.id.unwrap_or_else(|| sentences.len().to_string());
        let sentence = Sentence::new(id, cur.words)?;
        for (ty, start, end) in cur.entities {
            gold.push(TypedEntity {
                span: Span::new(sentence.id.clone(), start, end),
                surface: sentence.surface(start, end),
                entity_type: ty,
                score: None,
            });
        }
        sentences.push(sentence);
        Ok(())
    };

    let mut lineno = 0;
    for line in reader.lines() {
        lineno += 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            flush(&mut cur, &mut sentences, lineno)?;
            continue;
        }
        if let Some(id) = line.strip_prefix("#id ").filter(|_| !line.contains('\t')) {
            if !cur.words.is_empty() {
                flush(&mut cur, &mut sentences, lineno)?;
            }
            let id = id.trim();
            if id.is_empty() {
                return Err(Error::parse(lineno, "empty sentence id"));
            }
            cur.id = Some(id.to_string());
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(Error::parse(
                lineno,
                format!("expected 2 tab-separated columns, found {}", cols.len()),
            ));
        }
        let (word, tag) = (cols[0], cols[1].trim());
        if word.is_empty() {
            return Err(Error::parse(lineno, "empty token"));
        }
        let tag = parse_tag(tag).ok_or_else(|| Error::parse(lineno, format!("malformed tag {tag:?}")))?;
        let pos = cur.words.len();
        match tag {
            Tag::Outside => cur.close(),
            Tag::Begin(ty) => {
                cur.close();
                types.insert(ty.to_string());
                cur.open = Some((ty.to_string(), pos));
            }
            Tag::Inside(ty) => match &cur.open {
                Some((open_ty, _)) if open_ty == ty => {}
                _ => {
                    if mode == IobMode::Strict {
                        return Err(Error::parse(lineno, format!("I-{ty} without a preceding B-{ty}")));
                    }
                    log::warn!("line {lineno}: repaired dangling I-{ty}");
                    repaired += 1;
                    cur.close();
                    types.insert(ty.to_string());
                    cur.open = Some((ty.to_string(), pos));
                }
            },
        }
        cur.words.push(word.to_string());
    }
    flush(&mut cur, &mut sentences, lineno + 1)?;

    let corpus = Corpus::new(sentences, gold, TaggingSpace(types))?;
    Ok(ParsedIob { corpus, repaired })
}

/// Write a corpus as IOB2 with explicit `#id` lines. Gold entities must not overlap.
pub fn write_iob<W: Write>(corpus: &Corpus, mut writer: W) -> Result<()> {
    let mut by_sentence: HashMap<&str, Vec<&TypedEntity>> = HashMap::new();
    for e in &corpus.gold {
        by_sentence.entry(e.span.sentence_id.as_str()).or_default().push(e);
    }
    for (i, s) in corpus.sentences.iter().enumerate() {
        let mut tags = vec!["O".to_string(); s.len()];
        for e in by_sentence.get(s.id.as_str()).into_iter().flatten() {
            for (pos, tag) in tags.iter_mut().enumerate().take(e.span.end + 1).skip(e.span.start) {
                if tag != "O" {
                    return Err(Error::Invalid(format!(
                        "overlapping gold entities at token {pos} of sentence {:?}",
                        s.id
                    )));
                }
                let prefix = if pos == e.span.start { "B" } else { "I" };
                *tag = format!("{prefix}-{}", e.entity_type);
            }
        }
        if i > 0 {
            writeln!(writer)?;
        }
        writeln!(writer, "#id {}", s.id)?;
        for (t, tag) in s.tokens.iter().zip(&tags) {
            writeln!(writer, "{}\t{}", t.text, tag)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct ParsedKb {
    pub entries: Vec<DictEntry>,
    /// Lines dropped because their `(name, type)` pair was already seen.
    pub duplicates: usize,
}

/// Parse `<name>\t<type>[\t<source>]` lines, keeping file order and dropping
/// repeated pairs. Entries without a source column are tagged as KB entries.
pub fn parse_kb<R: BufRead>(reader: R) -> Result<ParsedKb> {
    let mut seen = HashSet::new();
    let mut out = ParsedKb::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(Error::parse(
                lineno,
                format!("expected name<TAB>type[<TAB>source], found {} columns", cols.len()),
            ));
        }
        if cols[0].is_empty() {
            return Err(Error::parse(lineno, "empty entity name"));
        }
        if cols[1].is_empty() {
            return Err(Error::parse(lineno, "empty entity type"));
        }
        let source = match cols.get(2) {
            Some(s) => s.parse().map_err(|e: String| Error::parse(lineno, e))?,
            None => EntrySource::Kb,
        };
        if !seen.insert((cols[0].to_string(), cols[1].to_string())) {
            out.duplicates += 1;
            continue;
        }
        out.entries.push(DictEntry::new(cols[0], cols[1], source)?);
    }
    Ok(out)
}

pub fn write_dictionary<W: Write>(dict: &Dictionary, mut writer: W) -> Result<()> {
    for e in dict.entries() {
        writeln!(writer, "{}\t{}\t{}", e.name, e.entry_type, e.source)?;
    }
    Ok(())
}

/// Read a phrase list: one phrase per line, blank lines skipped, repeats dropped.
pub fn read_phrases<R: BufRead>(reader: R) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let phrase = line.trim();
        if !phrase.is_empty() && seen.insert(phrase.to_string()) {
            out.push(phrase.to_string());
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    sentence_id: String,
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    entity_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    surface: Option<String>,
}

/// Read a prediction file. With a corpus, every span is checked against it
/// and surfaces are filled from the sentence tokens.
pub fn read_predictions<R: BufRead>(reader: R, corpus: Option<&Corpus>) -> Result<Vec<TypedEntity>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        let span = Span::new(rec.sentence_id, rec.start, rec.end);
        if span.end < span.start {
            return Err(Error::parse(
                lineno,
                format!("end {} before start {}", span.end, span.start),
            ));
        }
        if rec.entity_type.is_empty() {
            return Err(Error::parse(lineno, "empty entity type"));
        }
        let surface = match corpus {
            Some(c) => c.surface_of(&span).map_err(|e| Error::parse(lineno, e.to_string()))?,
            None => rec.surface.unwrap_or_default(),
        };
        out.push(TypedEntity {
            span,
            entity_type: rec.entity_type,
            surface,
            score: rec.score,
        });
    }
    Ok(out)
}

pub fn write_predictions<W: Write>(entities: &[TypedEntity], mut writer: W) -> Result<()> {
    for e in entities {
        let rec = PredictionRecord {
            sentence_id: e.span.sentence_id.clone(),
            start: e.span.start,
            end: e.span.end,
            entity_type: e.entity_type.clone(),
            score: e.score,
            surface: (!e.surface.is_empty()).then(|| e.surface.clone()),
        };
        serde_json::to_writer(&mut writer, &rec).map_err(std::io::Error::from)?;
        writeln!(writer)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TypeCount {
    pub entities: usize,
    /// Sentences containing at least one entity of the type.
    pub sentences: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub tokens: usize,
    pub entities: usize,
    pub by_type: BTreeMap<String, TypeCount>,
}

impl std::ops::Add for CorpusStats {
    type Output = CorpusStats;

    fn add(mut self, rhs: CorpusStats) -> CorpusStats {
        self.sentences += rhs.sentences;
        self.tokens += rhs.tokens;
        self.entities += rhs.entities;
        for (ty, c) in rhs.by_type {
            let slot = self.by_type.entry(ty).or_default();
            slot.entities += c.entities;
            slot.sentences += c.sentences;
        }
        self
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut by_type: BTreeMap<String, TypeCount> = corpus
        .tagging_space
        .iter()
        .map(|t| (t.to_string(), TypeCount::default()))
        .collect();
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    for e in &corpus.gold {
        let slot = by_type.entry(e.entity_type.clone()).or_default();
        slot.entities += 1;
        if seen.insert((e.span.sentence_id.as_str(), e.entity_type.as_str())) {
            slot.sentences += 1;
        }
    }
    CorpusStats {
        sentences: corpus.sentences.len(),
        tokens: corpus.sentences.iter().map(Sentence::len).sum(),
        entities: corpus.gold.len(),
        by_type,
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sentences\t{}", self.sentences)?;
        writeln!(f, "tokens\t{}", self.tokens)?;
        writeln!(f, "entities\t{}", self.entities)?;
        writeln!(f, "type\tentities\tsentences")?;
        for (ty, c) in &self.by_type {
            writeln!(f, "{ty}\t{}\t{}", c.entities, c.sentences)?;
        }
        Ok(())
    }
}
