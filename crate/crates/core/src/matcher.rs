//! Entity typing by nearest dictionary entry.
//!
//! A mention is embedded and compared by cosine similarity against every
//! dictionary name; the type of the most similar entry becomes the mention's
//! type. Equal similarities go to the entry with the lowest index. Types
//! outside the tagging space are dropped rather than emitted.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::corpus::{Span, TaggingSpace, TypedEntity};
use crate::embedding::{dot, EmbeddingVector, Encoder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntrySource {
    Train,
    Kb,
    Trusted,
}

impl fmt::Display for EntrySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntrySource::Train => "train",
            EntrySource::Kb => "kb",
            EntrySource::Trusted => "trusted",
        })
    }
}

impl FromStr for EntrySource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(EntrySource::Train),
            "kb" => Ok(EntrySource::Kb),
            "trusted" => Ok(EntrySource::Trusted),
            other => Err(format!("unknown entry source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DictEntry {
    pub name: String,
    pub entry_type: String,
    pub source: EntrySource,
}

impl DictEntry {
    pub fn new(name: impl Into<String>, entry_type: impl Into<String>, source: EntrySource) -> Result<Self> {
        let (name, entry_type) = (name.into(), entry_type.into());
        if name.is_empty() || entry_type.is_empty() {
            return Err(Error::Invalid(format!(
                "dictionary entry needs a name and a type, got ({name:?}, {entry_type:?})"
            )));
        }
        Ok(DictEntry {
            name,
            entry_type,
            source,
        })
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.name, &self.entry_type)
    }
}

/// Ordered list of entries, unique on `(name, type)`. Position is the
/// tie-break key for matching.
#[derive(Debug, Clone, Default)]
pub struct Dictionary {
    entries: Vec<DictEntry>,
    keys: HashSet<(String, String)>,
}

impl PartialEq for Dictionary {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Dictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Collect entries, keeping the first occurrence of each `(name, type)`.
    pub fn from_entries(entries: impl IntoIterator<Item = DictEntry>) -> Self {
        let mut d = Dictionary::new();
        for e in entries {
            d.push(e);
        }
        d
    }

    /// Append an entry. Returns false (and changes nothing) if its pair is present.
    pub fn push(&mut self, entry: DictEntry) -> bool {
        if !self.keys.insert((entry.name.clone(), entry.entry_type.clone())) {
            return false;
        }
        self.entries.push(entry);
        true
    }

    pub fn remove(&mut self, index: usize) -> DictEntry {
        let e = self.entries.remove(index);
        self.keys.remove(&(e.name.clone(), e.entry_type.clone()));
        e
    }

    pub fn contains(&self, name: &str, entry_type: &str) -> bool {
        self.keys.contains(&(name.to_string(), entry_type.to_string()))
    }

    pub fn entries(&self) -> &[DictEntry] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Option<&DictEntry> {
        self.entries.get(index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub entry_index: usize,
    pub similarity: f64,
    pub matched_type: String,
}

/// A mention proposed by boundary detection, not yet typed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub span: Span,
    pub surface: String,
}

/// Dictionary names embedded once for repeated queries.
pub struct DictionaryIndex<'d> {
    dict: &'d Dictionary,
    vectors: Vec<EmbeddingVector>,
    dim: usize,
}

impl<'d> DictionaryIndex<'d> {
    pub fn build(dict: &'d Dictionary, encoder: &dyn Encoder) -> Result<Self> {
        if dict.is_empty() {
            return Err(Error::EmptyDictionary);
        }
        let vectors = dict
            .entries()
            .par_iter()
            .map(|e| encoder.encode(&e.name).map(|v| v.into_owned()))
            .collect::<Result<Vec<_>>>()?;
        Ok(DictionaryIndex {
            dict,
            vectors,
            dim: encoder.dim(),
        })
    }

    pub fn dictionary(&self) -> &Dictionary {
        self.dict
    }

    /// Exhaustive scan; the first entry with the maximum similarity wins.
    pub fn nearest_vector(&self, query: &EmbeddingVector) -> Result<MatchResult> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let q = query.as_slice();
        let mut best_index = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, v) in self.vectors.iter().enumerate() {
            let sim = dot(q, v.as_slice());
            if sim > best {
                best = sim;
                best_index = i;
            }
        }
        Ok(MatchResult {
            entry_index: best_index,
            similarity: best,
            matched_type: self.dict.entries[best_index].entry_type.clone(),
        })
    }

    pub fn nearest(&self, surface: &str, encoder: &dyn Encoder) -> Result<MatchResult> {
        let q = encoder.encode(surface)?;
        self.nearest_vector(&q)
    }

    pub fn bem_type(
        &self,
        mention: &Mention,
        encoder: &dyn Encoder,
        space: &TaggingSpace,
    ) -> Result<Option<TypedEntity>> {
        let m = self.nearest(&mention.surface, encoder)?;
        if !space.contains(&m.matched_type) {
            log::debug!(
                "dropping {:?}: nearest type {} outside tagging space",
                mention.surface,
                m.matched_type
            );
            return Ok(None);
        }
        Ok(Some(TypedEntity {
            span: mention.span.clone(),
            entity_type: m.matched_type,
            surface: mention.surface.clone(),
            score: Some(m.similarity),
        }))
    }
}

/// Nearest dictionary entry for one surface string.
pub fn nearest(query_surface: &str, dict: &Dictionary, encoder: &dyn Encoder) -> Result<MatchResult> {
    DictionaryIndex::build(dict, encoder)?.nearest(query_surface, encoder)
}

/// Type a single mention; `None` when the matched type is outside `space`.
pub fn bem_type(
    mention: &Mention,
    dict: &Dictionary,
    encoder: &dyn Encoder,
    space: &TaggingSpace,
) -> Result<Option<TypedEntity>> {
    DictionaryIndex::build(dict, encoder)?.bem_type(mention, encoder, space)
}

/// Type every mention, omitting filtered ones. Output follows input order.
pub fn batch_match(
    mentions: &[Mention],
    dict: &Dictionary,
    encoder: &dyn Encoder,
    space: &TaggingSpace,
) -> Result<Vec<TypedEntity>> {
    if mentions.is_empty() {
        return Ok(Vec::new());
    }
    let index = DictionaryIndex::build(dict, encoder)?;
    let typed = mentions
        .par_iter()
        .map(|m| index.bem_type(m, encoder, space))
        .collect::<Result<Vec<_>>>()?;
    Ok(typed.into_iter().flatten().collect())
}
