//! Dictionary construction and greedy refinement against a labeled dev set.
//!
//! Refinement runs a fixed number of passes. Each pass:
//!
//! 1. Draws `batch_size` KB indices without replacement
//!    ([`Rng::sample_indices`]); the pool resets between passes and one RNG
//!    seeded from `rng_seed` drives all passes. A drawn entry whose
//!    `(name, type)` is already in the dictionary is skipped and still uses
//!    up its draw.
//! 2. For each candidate, in draw order, collects the dev mentions whose
//!    nearest entry over `D ∪ {candidate}` is the candidate (the candidate
//!    sits after every existing entry, so it must beat them strictly). It is
//!    appended iff same-type mentions outnumber different-type ones. Later
//!    candidates see earlier additions.
//! 3. Walks a snapshot of the dictionary in order. An entry is removed iff
//!    the mentions currently nearest to it contain more than `threshold_t`
//!    more different-type than same-type labels. Removals take effect
//!    immediately.
//!
//! Accuracy is the fraction of dev mentions whose nearest entry carries
//! the gold type; mentions with no entry to match count as wrong.

use std::collections::HashSet;
use std::io::Write;

use serde::Serialize;

use crate::corpus::{Corpus, Span, TypedEntity};
use crate::embedding::{dot, EmbeddingVector, Encoder};
use crate::error::{Error, Result};
use crate::matcher::{DictEntry, Dictionary, EntrySource};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinementConfig {
    pub threshold_t: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            threshold_t: 2,
            iterations: 20,
            batch_size: 4096,
            rng_seed: 0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DevExample {
    pub surface: String,
    pub gold_type: String,
}

impl DevExample {
    pub fn new(surface: impl Into<String>, gold_type: impl Into<String>) -> Result<Self> {
        let (surface, gold_type) = (surface.into(), gold_type.into());
        if surface.is_empty() || gold_type.is_empty() {
            return Err(Error::Invalid("dev example needs a surface and a gold type".into()));
        }
        Ok(DevExample { surface, gold_type })
    }
}

/// Dev examples from a labeled corpus. With `spans` (boundary-detector output
/// on the dev split), only spans that exactly hit a gold entity are kept and
/// take its type; otherwise the gold entities themselves are used.
pub fn dev_examples(corpus: &Corpus, spans: Option<&[Span]>) -> Result<Vec<DevExample>> {
    match spans {
        None => corpus
            .gold
            .iter()
            .map(|e| DevExample::new(e.surface.clone(), e.entity_type.clone()))
            .collect(),
        Some(spans) => {
            let mut out = Vec::new();
            for s in spans {
                for g in corpus.gold.iter().filter(|g| &g.span == s) {
                    out.push(DevExample::new(g.surface.clone(), g.entity_type.clone())?);
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Added,
    Removed,
}

/// One dictionary mutation with the counts that justified it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub iteration: usize,
    pub kind: EventKind,
    pub name: String,
    pub entry_type: String,
    pub cnt_p: usize,
    pub cnt_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassRecord {
    pub iteration: usize,
    pub accuracy: f64,
    pub added: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefinementTrace {
    pub initial_accuracy: f64,
    pub passes: Vec<PassRecord>,
    pub events: Vec<TraceEvent>,
}

impl RefinementTrace {
    pub fn final_accuracy(&self) -> f64 {
        self.passes.last().map_or(self.initial_accuracy, |p| p.accuracy)
    }

    /// JSON lines: an iteration-0 record for the starting dictionary, then one per pass.
    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        let start = PassRecord {
            iteration: 0,
            accuracy: self.initial_accuracy,
            added: 0,
            removed: 0,
        };
        for rec in std::iter::once(&start).chain(&self.passes) {
            serde_json::to_writer(&mut writer, rec).map_err(std::io::Error::from)?;
            writeln!(writer)?;
        }
        Ok(())
    }
}

struct Slot {
    entry: DictEntry,
    vector: EmbeddingVector,
    alive: bool,
}

struct Refiner<'a> {
    dev: &'a [DevExample],
    dev_vectors: Vec<EmbeddingVector>,
    slots: Vec<Slot>,
    keys: HashSet<(String, String)>,
    /// Per dev mention: (slot, similarity) of its nearest live entry.
    best: Vec<Option<(usize, f64)>>,
}

impl<'a> Refiner<'a> {
    fn rescan(&self, x: usize) -> Option<(usize, f64)> {
        let q = self.dev_vectors[x].as_slice();
        let mut best: Option<(usize, f64)> = None;
        for (i, slot) in self.slots.iter().enumerate().filter(|(_, s)| s.alive) {
            let sim = dot(q, slot.vector.as_slice());
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((i, sim));
            }
        }
        best
    }

    fn accuracy(&self) -> f64 {
        let hits = self
            .best
            .iter()
            .zip(self.dev)
            .filter(|(b, ex)| b.is_some_and(|(slot, _)| self.slots[slot].entry.entry_type == ex.gold_type))
            .count();
        hits as f64 / self.dev.len() as f64
    }

    fn counts<'b>(&self, members: impl Iterator<Item = &'b usize>, entry_type: &str) -> (usize, usize) {
        let (mut p, mut n) = (0, 0);
        for &x in members {
            if self.dev[x].gold_type == entry_type {
                p += 1;
            } else {
                n += 1;
            }
        }
        (p, n)
    }

    fn try_add(&mut self, candidate: &DictEntry, encoder: &dyn Encoder) -> Result<Option<(usize, usize)>> {
        let v = encoder.encode(&candidate.name)?.into_owned();
        let mut wins: Vec<(usize, f64)> = Vec::new();
        for (x, dv) in self.dev_vectors.iter().enumerate() {
            let sim = dot(dv.as_slice(), v.as_slice());
            if self.best[x].is_none_or(|(_, b)| sim > b) {
                wins.push((x, sim));
            }
        }
        let (p, n) = self.counts(wins.iter().map(|(x, _)| x), &candidate.entry_type);
        if p <= n {
            return Ok(None);
        }
        let slot = self.slots.len();
        self.keys.insert((candidate.name.clone(), candidate.entry_type.clone()));
        self.slots.push(Slot {
            entry: candidate.clone(),
            vector: v,
            alive: true,
        });
        for (x, sim) in wins {
            self.best[x] = Some((slot, sim));
        }
        Ok(Some((p, n)))
    }

    fn try_remove(&mut self, slot: usize, threshold: usize) -> Option<(usize, usize)> {
        let members: Vec<usize> = (0..self.dev.len())
            .filter(|&x| self.best[x].is_some_and(|(s, _)| s == slot))
            .collect();
        let (p, n) = self.counts(members.iter(), &self.slots[slot].entry.entry_type);
        if n <= p + threshold {
            return None;
        }
        let s = &mut self.slots[slot];
        s.alive = false;
        self.keys.remove(&(s.entry.name.clone(), s.entry.entry_type.clone()));
        for x in members {
            self.best[x] = self.rescan(x);
        }
        Some((p, n))
    }

    fn dictionary(&self) -> Dictionary {
        Dictionary::from_entries(self.slots.iter().filter(|s| s.alive).map(|s| s.entry.clone()))
    }
}

/// Greedy dictionary refinement. See the module docs for the exact procedure.
pub fn refine(
    d_init: &Dictionary,
    kb: &[DictEntry],
    dev: &[DevExample],
    encoder: &dyn Encoder,
    config: &RefinementConfig,
) -> Result<(Dictionary, RefinementTrace)> {
    config.validate()?;
    if dev.is_empty() {
        return Err(Error::Invalid(
            "refinement needs labeled dev examples; use the initial dictionary directly instead".into(),
        ));
    }
    if d_init.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let threshold = usize::try_from(config.threshold_t).unwrap_or(usize::MAX);

    let dev_vectors = dev
        .iter()
        .map(|d| encoder.encode(&d.surface).map(|v| v.into_owned()))
        .collect::<Result<Vec<_>>>()?;
    let slots = d_init
        .entries()
        .iter()
        .map(|e| {
            Ok(Slot {
                vector: encoder.encode(&e.name)?.into_owned(),
                entry: e.clone(),
                alive: true,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut r = Refiner {
        dev,
        dev_vectors,
        keys: d_init
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.entry_type.clone()))
            .collect(),
        slots,
        best: vec![None; dev.len()],
    };
    for x in 0..dev.len() {
        r.best[x] = r.rescan(x);
    }

    let mut trace = RefinementTrace {
        initial_accuracy: r.accuracy(),
        ..Default::default()
    };
    let mut rng = Rng::seeded(config.rng_seed);
    for iteration in 1..=config.iterations {
        let (mut added, mut removed) = (0, 0);
        for idx in rng.sample_indices(kb.len(), config.batch_size) {
            let cand = &kb[idx];
            if r.keys.contains(&(cand.name.clone(), cand.entry_type.clone())) {
                continue;
            }
            if let Some((cnt_p, cnt_n)) = r.try_add(cand, encoder)? {
                added += 1;
                trace.events.push(TraceEvent {
                    iteration,
                    kind: EventKind::Added,
                    name: cand.name.clone(),
                    entry_type: cand.entry_type.clone(),
                    cnt_p,
                    cnt_n,
                });
            }
        }
        let snapshot: Vec<usize> = (0..r.slots.len()).filter(|&i| r.slots[i].alive).collect();
        for slot in snapshot {
            if let Some((cnt_p, cnt_n)) = r.try_remove(slot, threshold) {
                removed += 1;
                let e = &r.slots[slot].entry;
                trace.events.push(TraceEvent {
                    iteration,
                    kind: EventKind::Removed,
                    name: e.name.clone(),
                    entry_type: e.entry_type.clone(),
                    cnt_p,
                    cnt_n,
                });
            }
        }
        let accuracy = r.accuracy();
        log::info!("refine pass {iteration}: accuracy {accuracy:.4}, +{added} -{removed}");
        trace.passes.push(PassRecord {
            iteration,
            accuracy,
            added,
            removed,
        });
    }
    Ok((r.dictionary(), trace))
}

/// `k` shuffled copies of the KB; copy `i` is shuffled by `Rng::seeded(seed + i)`.
pub fn build_variants(kb: &[DictEntry], k: usize, seed: u64) -> Vec<Vec<DictEntry>> {
    (0..k)
        .map(|i| {
            let mut v = kb.to_vec();
            Rng::seeded(seed.wrapping_add(i as u64)).shuffle(&mut v);
            v
        })
        .collect()
}

/// Initial dictionary from `(name, type)` pairs, first occurrence order.
pub fn init_dictionary<N, T>(pairs: impl IntoIterator<Item = (N, T)>, source: EntrySource) -> Result<Dictionary>
where
    N: Into<String>,
    T: Into<String>,
{
    let mut d = Dictionary::new();
    for (name, ty) in pairs {
        d.push(DictEntry::new(name, ty, source)?);
    }
    if d.is_empty() {
        return Err(Error::Invalid("cannot build a dictionary from an empty source".into()));
    }
    Ok(d)
}

/// Initial dictionary from gold (training) entities.
pub fn init_from_entities(entities: &[TypedEntity], source: EntrySource) -> Result<Dictionary> {
    init_dictionary(
        entities.iter().map(|e| (e.surface.clone(), e.entity_type.clone())),
        source,
    )
}
