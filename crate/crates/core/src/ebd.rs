//! Span supply for the typing stage.
//!
//! Boundary detection itself is an external model; this module covers the
//! pieces around it that are pure computation:
//!
//! * decoding spans from start / end / span-pair probabilities,
//! * the masked binary cross-entropy losses used to train such a tagger on
//!   trusted labels while ignoring unknown ones,
//! * building trusted and unknown labels by dictionary and phrase matching,
//! * turning offline LLM answers into spans and voting across runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Span, TypedEntity};
use crate::error::{Error, Result};
use crate::matcher::Dictionary;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-12;

pub const DEFAULT_DECODE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SpanProbabilities {
    n: usize,
    p_start: Vec<f64>,
    p_end: Vec<f64>,
    /// Row-major `n × n`; entry `(i, j)` scores the span `i..=j`.
    p_span: Vec<f64>,
}

fn check_probs(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|p| !(p.is_finite() && (0.0..=1.0).contains(p))) {
        Some(i) => Err(Error::Invalid(format!("{name}[{i}] = {} is not a probability", v[i]))),
        None => Ok(()),
    }
}

impl SpanProbabilities {
    pub fn new(p_start: Vec<f64>, p_end: Vec<f64>, p_span: Vec<f64>) -> Result<Self> {
        let n = p_start.len();
        if p_end.len() != n || p_span.len() != n * n {
            return Err(Error::Shape(format!(
                "p_start has {n} entries, p_end {}, p_span {} (want {})",
                p_end.len(),
                p_span.len(),
                n * n
            )));
        }
        check_probs("p_start", &p_start)?;
        check_probs("p_end", &p_end)?;
        check_probs("p_span", &p_span)?;
        Ok(SpanProbabilities {
            n,
            p_start,
            p_end,
            p_span,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn p_start(&self) -> &[f64] {
        &self.p_start
    }

    pub fn p_end(&self) -> &[f64] {
        &self.p_end
    }

    pub fn p_span(&self, start: usize, end: usize) -> f64 {
        self.p_span[start * self.n + end]
    }

    /// Apply `f` to every probability. `f` must map [0, 1] into [0, 1].
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.p_start.iter().map(|&p| f(p)).collect(),
            self.p_end.iter().map(|&p| f(p)).collect(),
            self.p_span.iter().map(|&p| f(p)).collect(),
        )
    }
}

/// Spans whose start, end, and pairing probabilities all exceed `threshold`,
/// sorted by `(start, end)`. Nested and overlapping spans are allowed.
pub fn decode_spans(probs: &SpanProbabilities, threshold: f64, sentence_id: &str) -> Result<Vec<Span>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "decode threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let starts: Vec<usize> = (0..probs.n).filter(|&i| probs.p_start[i] > threshold).collect();
    let ends: Vec<usize> = (0..probs.n).filter(|&i| probs.p_end[i] > threshold).collect();
    let mut out = Vec::new();
    for &s in &starts {
        for &e in ends.iter().filter(|&&e| e >= s) {
            if probs.p_span(s, e) > threshold {
                out.push(Span::new(sentence_id, s, e));
            }
        }
    }
    Ok(out)
}

/// Trusted labels and unknown-masks for one sentence. `true` in a mask
/// means the position's loss term is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanLabels {
    n: usize,
    pub y_start: Vec<bool>,
    pub y_end: Vec<bool>,
    pub y_span: Vec<bool>,
    pub m_start: Vec<bool>,
    pub m_end: Vec<bool>,
    pub m_span: Vec<bool>,
}

impl SpanLabels {
    pub fn new(
        y_start: Vec<bool>,
        y_end: Vec<bool>,
        y_span: Vec<bool>,
        m_start: Vec<bool>,
        m_end: Vec<bool>,
        m_span: Vec<bool>,
    ) -> Result<Self> {
        let n = y_start.len();
        let shapes = [y_end.len(), m_start.len(), m_end.len()];
        if shapes.iter().any(|&l| l != n) || y_span.len() != n * n || m_span.len() != n * n {
            return Err(Error::Shape(format!("label arrays disagree with length {n}")));
        }
        let conflict = |y: &[bool], m: &[bool]| y.iter().zip(m).position(|(a, b)| *a && *b);
        for (name, y, m) in [
            ("start", &y_start, &m_start),
            ("end", &y_end, &m_end),
            ("span", &y_span, &m_span),
        ] {
            if let Some(i) = conflict(y, m) {
                return Err(Error::Invalid(format!(
                    "{name} position {i} is both trusted and masked"
                )));
            }
        }
        Ok(SpanLabels {
            n,
            y_start,
            y_end,
            y_span,
            m_start,
            m_end,
            m_span,
        })
    }

    /// All-negative trusted labels with nothing masked.
    pub fn empty(n: usize) -> Self {
        SpanLabels {
            n,
            y_start: vec![false; n],
            y_end: vec![false; n],
            y_span: vec![false; n * n],
            m_start: vec![false; n],
            m_end: vec![false; n],
            m_span: vec![false; n * n],
        }
    }

    /// Labels for an annotated sentence: trusted spans are positives,
    /// unknown spans mask their boundary and pair positions.
    pub fn from_annotation(a: &AnnotatedSentence) -> Result<Self> {
        let n = a.sentence.len();
        let mut l = SpanLabels::empty(n);
        for e in &a.trusted {
            a.sentence.check_span(&e.span)?;
            l.y_start[e.span.start] = true;
            l.y_end[e.span.end] = true;
            l.y_span[e.span.start * n + e.span.end] = true;
        }
        for s in &a.unknown {
            a.sentence.check_span(s)?;
            l.m_start[s.start] = !l.y_start[s.start];
            l.m_end[s.end] = !l.y_end[s.end];
            l.m_span[s.start * n + s.end] = !l.y_span[s.start * n + s.end];
        }
        Ok(l)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLosses {
    pub start: f64,
    pub end: f64,
    pub span: f64,
    pub total: f64,
}

/// Binary cross-entropy of probability `p` against label `y`, with `p` clamped.
pub fn binary_ce(p: f64, y: bool) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn masked_sum<'a>(terms: impl Iterator<Item = (&'a f64, (&'a bool, &'a bool))>) -> f64 {
    let mut acc = 0.0;
    for (&p, (&y, &masked)) in terms {
        if !masked {
            acc += binary_ce(p, y);
        }
    }
    acc
}

/// Start, end, and span losses with unknown positions masked out; the span
/// loss sums over pairs with `start <= end`.
pub fn masked_losses(probs: &SpanProbabilities, labels: &SpanLabels) -> Result<MaskedLosses> {
    if probs.n != labels.n {
        return Err(Error::Shape(format!(
            "probabilities cover {} tokens, labels {}",
            probs.n, labels.n
        )));
    }
    let n = probs.n;
    let start = masked_sum(probs.p_start.iter().zip(labels.y_start.iter().zip(&labels.m_start)));
    let end = masked_sum(probs.p_end.iter().zip(labels.y_end.iter().zip(&labels.m_end)));
    let mut span = 0.0;
    for i in 0..n {
        let row = i * n;
        span += masked_sum(
            probs.p_span[row + i..row + n].iter().zip(
                labels.y_span[row + i..row + n]
                    .iter()
                    .zip(&labels.m_span[row + i..row + n]),
            ),
        );
    }
    Ok(MaskedLosses {
        start,
        end,
        span,
        total: start + end + span,
    })
}

#[derive(Debug, Deserialize)]
struct ProbabilityRecord {
    #[serde(default)]
    sentence_id: Option<String>,
    n: usize,
    p_start: Vec<f64>,
    p_end: Vec<f64>,
    p_span: Vec<f64>,
}

/// Read probability tensors, one JSON record per line:
/// `{"sentence_id": .., "n": .., "p_start": [..], "p_end": [..], "p_span": [..row-major..]}`.
pub fn read_probabilities<R: BufRead>(reader: R) -> Result<Vec<(Option<String>, SpanProbabilities)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProbabilityRecord = serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if rec.p_start.len() != rec.n {
            return Err(Error::parse(
                i + 1,
                format!("n = {} but p_start has {}", rec.n, rec.p_start.len()),
            ));
        }
        let probs = SpanProbabilities::new(rec.p_start, rec.p_end, rec.p_span)
            .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        out.push((rec.sentence_id, probs));
    }
    Ok(out)
}

/// A sentence with trusted (typed) spans and unknown (masked) spans.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSentence {
    pub sentence: Sentence,
    pub trusted: Vec<TypedEntity>,
    pub unknown: Vec<Span>,
}

impl AnnotatedSentence {
    pub fn is_consistent(&self) -> bool {
        self.unknown
            .iter()
            .all(|u| self.trusted.iter().all(|t| !t.span.overlaps(u)))
    }
}

#[derive(Serialize)]
struct AnnotatedRecord<'a> {
    sentence_id: &'a str,
    tokens: Vec<&'a str>,
    trusted: Vec<TrustedRecord<'a>>,
    unknown: Vec<[usize; 2]>,
}

#[derive(Serialize)]
struct TrustedRecord<'a> {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    entity_type: &'a str,
}

pub fn write_annotated<W: std::io::Write>(items: &[AnnotatedSentence], mut writer: W) -> Result<()> {
    for a in items {
        let rec = AnnotatedRecord {
            sentence_id: &a.sentence.id,
            tokens: a.sentence.words().collect(),
            trusted: a
                .trusted
                .iter()
                .map(|e| TrustedRecord {
                    start: e.span.start,
                    end: e.span.end,
                    entity_type: &e.entity_type,
                })
                .collect(),
            unknown: a.unknown.iter().map(|s| [s.start, s.end]).collect(),
        };
        serde_json::to_writer(&mut writer, &rec).map_err(std::io::Error::from)?;
        writeln!(writer)?;
    }
    Ok(())
}

fn lower_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Case-insensitive multi-token phrase table with greedy longest-match scanning.
pub struct PhraseMatcher<T> {
    table: HashMap<Vec<String>, T>,
    max_len: usize,
}

impl<T: Clone> PhraseMatcher<T> {
    /// The first payload registered for a phrase wins.
    pub fn new<S: AsRef<str>>(phrases: impl IntoIterator<Item = (S, T)>) -> Self {
        let mut table = HashMap::new();
        let mut max_len = 0;
        for (text, payload) in phrases {
            let key = lower_tokens(text.as_ref());
            if key.is_empty() {
                continue;
            }
            max_len = max_len.max(key.len());
            table.entry(key).or_insert(payload);
        }
        PhraseMatcher { table, max_len }
    }

    /// Left-to-right, longest match first, non-overlapping.
    pub fn greedy_matches(&self, sentence: &Sentence) -> Vec<(Span, T)> {
        let words: Vec<String> = sentence.words().map(str::to_lowercase).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let longest = self.max_len.min(words.len() - i);
            let hit = (1..=longest)
                .rev()
                .find_map(|len| self.table.get(&words[i..i + len]).map(|p| (len, p)));
            match hit {
                Some((len, payload)) => {
                    out.push((Span::new(sentence.id.clone(), i, i + len - 1), payload.clone()));
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Dictionary matcher typed by the first dictionary entry carrying each name.
pub fn dictionary_matcher(dict: &Dictionary) -> PhraseMatcher<String> {
    PhraseMatcher::new(dict.entries().iter().map(|e| (e.name.as_str(), e.entry_type.clone())))
}

pub fn phrase_matcher<S: AsRef<str>>(phrases: &[S]) -> PhraseMatcher<()> {
    PhraseMatcher::new(phrases.iter().map(|p| (p.as_ref(), ())))
}

fn typed(sentence: &Sentence, span: Span, entity_type: String) -> TypedEntity {
    TypedEntity {
        surface: sentence.surface(span.start, span.end),
        span,
        entity_type,
        score: None,
    }
}

/// Trusted spans by dictionary matching, unknown spans by phrase matching,
/// with phrases that collide with a trusted span dropped.
pub fn distant_annotate<S: AsRef<str>>(
    sentence: &Sentence,
    trusted_dict: &Dictionary,
    phrases: &[S],
) -> AnnotatedSentence {
    annotate_with(sentence, &dictionary_matcher(trusted_dict), &phrase_matcher(phrases))
}

/// [`distant_annotate`] with prebuilt matchers, for annotating many sentences.
pub fn annotate_with(
    sentence: &Sentence,
    trusted: &PhraseMatcher<String>,
    phrases: &PhraseMatcher<()>,
) -> AnnotatedSentence {
    let trusted: Vec<TypedEntity> = trusted
        .greedy_matches(sentence)
        .into_iter()
        .map(|(span, ty)| typed(sentence, span, ty))
        .collect();
    let unknown = phrases
        .greedy_matches(sentence)
        .into_iter()
        .map(|(s, _)| s)
        .filter(|s| trusted.iter().all(|t| !t.span.overlaps(s)))
        .collect();
    AnnotatedSentence {
        sentence: sentence.clone(),
        trusted,
        unknown,
    }
}

/// Entity names from an answer that lists one entity per `-` line.
pub fn parse_llm_answer(answer_text: &str) -> Vec<String> {
    answer_text
        .lines()
        .filter_map(|line| line.trim_start().strip_prefix('-'))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Every case-insensitive token-sequence occurrence of every name, sorted and deduplicated.
pub fn align_names_to_spans<S: AsRef<str>>(sentence: &Sentence, names: &[S]) -> Vec<Span> {
    let words: Vec<String> = sentence.words().map(str::to_lowercase).collect();
    let mut out = BTreeSet::new();
    for name in names {
        let key = lower_tokens(name.as_ref());
        if key.is_empty() || key.len() > words.len() {
            continue;
        }
        for (i, w) in words.windows(key.len()).enumerate() {
            if w == key.as_slice() {
                out.insert(Span::new(sentence.id.clone(), i, i + key.len() - 1));
            }
        }
    }
    out.into_iter().collect()
}

/// Spans present in a strict majority of runs, sorted.
pub fn vote_llm_annotations(runs: &[Vec<Span>]) -> Vec<Span> {
    let mut votes: BTreeMap<&Span, usize> = BTreeMap::new();
    for run in runs {
        let distinct: BTreeSet<&Span> = run.iter().collect();
        for s in distinct {
            *votes.entry(s).or_default() += 1;
        }
    }
    votes
        .into_iter()
        .filter(|&(_, c)| 2 * c > runs.len())
        .map(|(s, _)| s.clone())
        .collect()
}

/// Which unknown-entity sources are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnknownSources {
    pub use_llm: bool,
    pub use_kb: bool,
}

impl Default for UnknownSources {
    fn default() -> Self {
        UnknownSources {
            use_llm: true,
            use_kb: true,
        }
    }
}

/// Union of the active unknown sources, minus anything overlapping a trusted span.
pub fn merge_unknowns(
    sentence: &Sentence,
    trusted: Vec<TypedEntity>,
    llm_spans: &[Span],
    distant_spans: &[Span],
    flags: UnknownSources,
) -> AnnotatedSentence {
    let mut unknown = BTreeSet::new();
    if flags.use_llm {
        unknown.extend(llm_spans.iter().cloned());
    }
    if flags.use_kb {
        unknown.extend(distant_spans.iter().cloned());
    }
    let unknown = unknown
        .into_iter()
        .filter(|u| trusted.iter().all(|t| !t.span.overlaps(u)))
        .collect();
    AnnotatedSentence {
        sentence: sentence.clone(),
        trusted,
        unknown,
    }
}

/// Where LLM answers come from. Tests and the CLI use files; a live client
/// can implement this too.
pub trait AnswerSource {
    /// Raw answer text for a sentence, or `None` if the source has no answer for it.
    fn answer(&self, sentence: &Sentence) -> Result<Option<String>>;
}

/// One run directory holding `<sentence_id>.txt` answer files.
#[derive(Debug, Clone)]
pub struct DirectoryAnswers {
    dir: PathBuf,
}

impl DirectoryAnswers {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "LLM run directory {} does not exist",
                dir.display()
            )));
        }
        Ok(DirectoryAnswers { dir: dir.to_path_buf() })
    }
}

impl AnswerSource for DirectoryAnswers {
    fn answer(&self, sentence: &Sentence) -> Result<Option<String>> {
        let path = self.dir.join(format!("{}.txt", sentence.id));
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::Io { path, source: e }),
        }
    }
}

/// Parse, align, and vote the answers of every run for one sentence.
/// A run with no answer counts as proposing nothing.
pub fn llm_spans(sentence: &Sentence, runs: &[&dyn AnswerSource]) -> Result<Vec<Span>> {
    let per_run = runs
        .iter()
        .map(|src| {
            Ok(match src.answer(sentence)? {
                Some(text) => align_names_to_spans(sentence, &parse_llm_answer(&text)),
                None => Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vote_llm_annotations(&per_run))
}
