//! Majority vote over predictions made with different dictionaries.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{EntityKey, Span, TypedEntity};
use crate::error::{Error, Result};

pub const DEFAULT_VOTE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRun {
    pub dictionary_id: String,
    pub entities: Vec<TypedEntity>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnsembleInput {
    pub runs: Vec<PredictionRun>,
}

impl EnsembleInput {
    pub fn new(runs: Vec<PredictionRun>) -> Self {
        EnsembleInput { runs }
    }
}

#[derive(Default)]
struct Group {
    votes: usize,
    scores: Vec<f64>,
    surface: Option<String>,
}

/// Vote with the default threshold: a `(span, type)` needs `⌈k/2⌉` of `k` runs.
pub fn vote(input: &EnsembleInput) -> Vec<TypedEntity> {
    vote_with_threshold(input, DEFAULT_VOTE_THRESHOLD).expect("default threshold is valid")
}

/// Keep `(sentence_id, start, end, type)` groups with at least
/// `⌈k · threshold⌉` votes (and at least one). When surviving groups share a
/// span, the one with more votes wins, then the higher summed score, then
/// the smaller type label. Output is sorted by `(sentence_id, start, end)`
/// and carries the maximum score among the votes.
pub fn vote_with_threshold(input: &EnsembleInput, threshold: f64) -> Result<Vec<TypedEntity>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "vote threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let k = input.runs.len();
    if k == 0 {
        return Ok(Vec::new());
    }
    let min_votes = ((k as f64 * threshold).ceil() as usize).max(1);

    let mut groups: BTreeMap<EntityKey, Group> = BTreeMap::new();
    for run in &input.runs {
        let mut seen = BTreeSet::new();
        for e in &run.entities {
            let key = e.key();
            if !seen.insert(key.clone()) {
                continue;
            }
            let g = groups.entry(key).or_default();
            g.votes += 1;
            if let Some(s) = e.score {
                g.scores.push(s);
            }
            if !e.surface.is_empty() && g.surface.as_ref().is_none_or(|cur| e.surface < *cur) {
                g.surface = Some(e.surface.clone());
            }
        }
    }

    // Summation in sorted order so the total does not depend on run order.
    let summed = |g: &Group| {
        let mut s = g.scores.clone();
        s.sort_by(f64::total_cmp);
        s.iter().sum::<f64>()
    };

    let mut best: BTreeMap<Span, (String, Group, f64)> = BTreeMap::new();
    for ((sid, start, end, ty), g) in groups {
        if g.votes < min_votes {
            continue;
        }
        let sum = summed(&g);
        let span = Span::new(sid, start, end);
        let replace = match best.get(&span) {
            None => true,
            Some((cur_ty, cur, cur_sum)) => {
                g.votes
                    .cmp(&cur.votes)
                    .then(sum.total_cmp(cur_sum))
                    .then_with(|| cur_ty.cmp(&ty))
                    == Ordering::Greater
            }
        };
        if replace {
            best.insert(span, (ty, g, sum));
        }
    }

    Ok(best
        .into_iter()
        .map(|(span, (entity_type, g, _))| TypedEntity {
            span,
            entity_type,
            surface: g.surface.unwrap_or_default(),
            score: g.scores.iter().copied().reduce(f64::max),
        })
        .collect())
}
