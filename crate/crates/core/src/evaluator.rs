//! Exact-match scoring and typing-stage accuracy.
//!
//! A prediction counts only if sentence, both boundaries, and type all match
//! a gold entity. Zero denominators score 0.

use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use crate::corpus::{EntityKey, TypedEntity};
use crate::dictionary::DevExample;
use crate::embedding::Encoder;
use crate::error::{Error, Result};
use crate::matcher::{Dictionary, DictionaryIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalReport {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision,
            recall,
            f1,
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        writeln!(f, "{:<10} {:>8}", "TP", self.true_positives)?;
        writeln!(f, "{:<10} {:>8}", "FP", self.false_positives)?;
        writeln!(f, "{:<10} {:>8}", "FN", self.false_negatives)?;
        writeln!(f, "{:<10} {:>8.4}", "precision", self.precision)?;
        writeln!(f, "{:<10} {:>8.4}", "recall", self.recall)?;
        writeln!(f, "{:<10} {:>8.4}", "F1", self.f1)
    }
}

pub fn evaluate(pred: &[TypedEntity], gold: &[TypedEntity]) -> EvalReport {
    let pred: HashSet<EntityKey> = pred.iter().map(TypedEntity::key).collect();
    let gold: HashSet<EntityKey> = gold.iter().map(TypedEntity::key).collect();
    let tp = pred.intersection(&gold).count();
    EvalReport::from_counts(tp, pred.len() - tp, gold.len() - tp)
}

/// Share of dev mentions whose nearest dictionary entry has the gold type.
pub fn bem_accuracy(dev: &[DevExample], dict: &Dictionary, encoder: &dyn Encoder) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::Invalid("no dev examples to score".into()));
    }
    let index = DictionaryIndex::build(dict, encoder)?;
    let mut hits = 0;
    for ex in dev {
        if index.nearest(&ex.surface, encoder)?.matched_type == ex.gold_type {
            hits += 1;
        }
    }
    Ok(hits as f64 / dev.len() as f64)
}
