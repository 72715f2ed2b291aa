//! Independent reference implementations used by the integration tests.
//!
//! Everything here works on plain strings, tuples and `Vec<f64>` and is
//! written for obviousness, not speed: nearest entries are found by a full
//! scan every time they are needed, nothing is cached between steps.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde_json::{json, Value};

pub fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

pub fn golden_report_path() -> PathBuf {
    toy_dir().join("golden_report.json")
}

/// Set to regenerate committed oracle outputs instead of comparing against them.
pub fn blessing() -> bool {
    std::env::var_os("DMNER_BLESS").is_some()
}

// ---- vectors ----

pub fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn trigram_vector(text: &str, dim: usize) -> Vec<f64> {
    let padded: Vec<char> = format!("#{}#", text.to_lowercase()).chars().collect();
    let mut v = vec![0.0; dim];
    for i in 0..padded.len().saturating_sub(2) {
        let gram: String = padded[i..i + 3].iter().collect();
        let h = fnv(gram.as_bytes());
        let sign = if h & (1 << 63) != 0 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    unit(v)
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        return e;
    }
    v.into_iter().map(|x| x / norm).collect()
}

pub fn sim(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s.clamp(-1.0, 1.0)
}

/// Index and similarity of the first entry with the highest similarity.
pub fn scan(query: &[f64], entries: &[Vec<f64>]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in entries.iter().enumerate() {
        let s = sim(query, e);
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best
}

// ---- randomness ----

pub struct Draws(Xoshiro256StarStar);

impl Draws {
    pub fn new(seed: u64) -> Self {
        Draws(Xoshiro256StarStar::seed_from_u64(seed))
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.0.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        let mut i = v.len();
        while i > 1 {
            i -= 1;
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }

    pub fn sample(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        let mut out = Vec::new();
        for i in 0..k.min(n) {
            let j = i + self.below(n - i);
            pool.swap(i, j);
            out.push(pool[i]);
        }
        out
    }
}

// ---- refinement ----

pub type Pair = (String, String);

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub iteration: usize,
    pub added: bool,
    pub name: String,
    pub entry_type: String,
    pub cnt_p: usize,
    pub cnt_n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub initial_accuracy: f64,
    /// (iteration, accuracy, added, removed)
    pub passes: Vec<(usize, f64, usize, usize)>,
    pub events: Vec<SimEvent>,
}

pub struct SimParams {
    pub t: usize,
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
}

fn nearest_of(dict: &[Pair], dev_vec: &[f64], vec_of: &dyn Fn(&str) -> Vec<f64>) -> Option<(usize, f64)> {
    let vectors: Vec<Vec<f64>> = dict.iter().map(|(n, _)| vec_of(n)).collect();
    scan(dev_vec, &vectors)
}

fn dev_accuracy(dict: &[Pair], dev: &[Pair], vec_of: &dyn Fn(&str) -> Vec<f64>) -> f64 {
    let mut right = 0;
    for (surface, gold) in dev {
        if let Some((i, _)) = nearest_of(dict, &vec_of(surface), vec_of) {
            if &dict[i].1 == gold {
                right += 1;
            }
        }
    }
    right as f64 / dev.len() as f64
}

/// Greedy add/remove refinement, step by step.
pub fn simulate_refinement(
    d_init: &[Pair],
    kb: &[Pair],
    dev: &[Pair],
    vec_of: &dyn Fn(&str) -> Vec<f64>,
    p: &SimParams,
) -> (Vec<Pair>, SimTrace) {
    let mut dict: Vec<Pair> = d_init.to_vec();
    let mut trace = SimTrace {
        initial_accuracy: dev_accuracy(&dict, dev, vec_of),
        passes: Vec::new(),
        events: Vec::new(),
    };
    let mut draws = Draws::new(p.seed);
    for it in 1..=p.iterations {
        let mut added = 0;
        let mut removed = 0;

        for idx in draws.sample(kb.len(), p.batch) {
            let cand = &kb[idx];
            if dict.contains(cand) {
                continue;
            }
            let cv = vec_of(&cand.0);
            let (mut pos, mut neg) = (0, 0);
            for (surface, gold) in dev {
                let dv = vec_of(surface);
                let beats = match nearest_of(&dict, &dv, vec_of) {
                    None => true,
                    Some((_, s)) => sim(&dv, &cv) > s,
                };
                if beats {
                    if gold == &cand.1 {
                        pos += 1;
                    } else {
                        neg += 1;
                    }
                }
            }
            if pos > neg {
                dict.push(cand.clone());
                added += 1;
                trace.events.push(SimEvent {
                    iteration: it,
                    added: true,
                    name: cand.0.clone(),
                    entry_type: cand.1.clone(),
                    cnt_p: pos,
                    cnt_n: neg,
                });
            }
        }

        let snapshot = dict.clone();
        for entry in snapshot {
            let Some(at) = dict.iter().position(|e| e == &entry) else {
                continue;
            };
            let (mut pos, mut neg) = (0, 0);
            for (surface, gold) in dev {
                if let Some((i, _)) = nearest_of(&dict, &vec_of(surface), vec_of) {
                    if i == at {
                        if gold == &entry.1 {
                            pos += 1;
                        } else {
                            neg += 1;
                        }
                    }
                }
            }
            if neg > pos + p.t {
                dict.remove(at);
                removed += 1;
                trace.events.push(SimEvent {
                    iteration: it,
                    added: false,
                    name: entry.0.clone(),
                    entry_type: entry.1.clone(),
                    cnt_p: pos,
                    cnt_n: neg,
                });
            }
        }
        trace
            .passes
            .push((it, dev_accuracy(&dict, dev, vec_of), added, removed));
    }
    (dict, trace)
}

// ---- files ----

#[derive(Debug, Clone)]
pub struct Sent {
    pub id: String,
    pub words: Vec<String>,
}

/// (sentence id, start, end, type)
pub type Key = (String, usize, usize, String);

type Candidates = Vec<(usize, f64, String)>;

/// Sentences and gold entities of a well-formed IOB2 file.
pub fn read_iob(path: &Path) -> (Vec<Sent>, Vec<Key>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut sents = Vec::new();
    let mut gold = Vec::new();
    let mut pending_id: Option<String> = None;
    let mut words: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.push("");
    for line in lines {
        if let Some(id) = line.strip_prefix("#id ") {
            pending_id = Some(id.trim().to_string());
            continue;
        }
        if !line.trim().is_empty() {
            let mut cols = line.split('\t');
            words.push(cols.next().unwrap().to_string());
            tags.push(cols.next().unwrap().to_string());
            continue;
        }
        if words.is_empty() {
            continue;
        }
        let id = pending_id.take().unwrap_or_else(|| sents.len().to_string());
        let mut open: Option<(usize, String)> = None;
        for (i, tag) in tags.iter().chain(std::iter::once(&"O".to_string())).enumerate() {
            let inside = tag.strip_prefix("I-");
            if let Some((s, ty)) = &open {
                if inside != Some(ty.as_str()) {
                    gold.push((id.clone(), *s, i - 1, ty.clone()));
                    open = None;
                }
            }
            if let Some(ty) = tag.strip_prefix("B-") {
                open = Some((i, ty.to_string()));
            }
        }
        sents.push(Sent {
            id,
            words: std::mem::take(&mut words),
        });
        tags.clear();
    }
    (sents, gold)
}

pub fn surface(sents: &[Sent], sid: &str, start: usize, end: usize) -> String {
    let s = sents.iter().find(|s| s.id == sid).unwrap();
    s.words[start..=end].join(" ")
}

pub fn read_pairs(path: &Path) -> Vec<Pair> {
    let mut out: Vec<Pair> = Vec::new();
    for line in std::fs::read_to_string(path).unwrap().lines() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let pair = (cols[0].trim().to_string(), cols[1].trim().to_string());
        if !out.contains(&pair) {
            out.push(pair);
        }
    }
    out
}

pub fn read_spans(path: &Path) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for line in std::fs::read_to_string(path).unwrap().lines() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).unwrap();
        let span = (
            v["sentence_id"].as_str().unwrap().to_string(),
            v["start"].as_u64().unwrap() as usize,
            v["end"].as_u64().unwrap() as usize,
        );
        if !out.contains(&span) {
            out.push(span);
        }
    }
    out
}

/// The flat `key = value` lines of a config file.
pub fn read_conf(path: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k.trim().to_string(), v.trim().to_string())
        })
        .collect()
}

// ---- voting and scoring ----

/// Majority vote over `(key, score)` runs with threshold one half.
pub fn majority(runs: &[Vec<(Key, f64)>]) -> Vec<Key> {
    let k = runs.len();
    let need = k.div_ceil(2).max(1);
    let mut votes: BTreeMap<Key, (usize, Vec<f64>)> = BTreeMap::new();
    for run in runs {
        let mut seen = HashSet::new();
        for (key, score) in run {
            if seen.insert(key.clone()) {
                let v = votes.entry(key.clone()).or_default();
                v.0 += 1;
                v.1.push(*score);
            }
        }
    }
    let mut per_span: BTreeMap<(String, usize, usize), Candidates> = BTreeMap::new();
    for ((sid, s, e, ty), (n, mut scores)) in votes {
        if n >= need {
            scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
            per_span
                .entry((sid, s, e))
                .or_default()
                .push((n, scores.iter().sum(), ty));
        }
    }
    per_span
        .into_iter()
        .map(|((sid, s, e), mut cands)| {
            cands.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.partial_cmp(&a.1).unwrap()).then(a.2.cmp(&b.2)));
            (sid, s, e, cands[0].2.clone())
        })
        .collect()
}

/// (tp, fp, fn, precision, recall, f1)
pub fn score(pred: &[Key], gold: &[Key]) -> (usize, usize, usize, f64, f64, f64) {
    let p: BTreeSet<&Key> = pred.iter().collect();
    let g: BTreeSet<&Key> = gold.iter().collect();
    let tp = p.iter().filter(|k| g.contains(*k)).count();
    let (fp, fn_) = (p.len() - tp, g.len() - tp);
    let prec = if p.is_empty() { 0.0 } else { tp as f64 / p.len() as f64 };
    let rec = if g.is_empty() { 0.0 } else { tp as f64 / g.len() as f64 };
    let f1 = if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    };
    (tp, fp, fn_, prec, rec, f1)
}

// ---- the toy pipeline ----

pub struct ToyOracle {
    pub report: Value,
    /// Every distinct surface the pipeline has to embed.
    pub surfaces: BTreeSet<String>,
    pub dictionaries: Vec<Vec<Pair>>,
    pub traces: Vec<SimTrace>,
}

/// The whole toy pipeline, recomputed from the fixture files.
pub fn toy_oracle() -> ToyOracle {
    let dir = toy_dir();
    let conf = read_conf(&dir.join("toy.conf"));
    let num = |k: &str| conf[k].parse::<usize>().unwrap();
    let dim = num("dim");
    let k = num("k");
    let seed: u64 = conf["seed"].parse().unwrap();
    let params = |seed| SimParams {
        t: num("t"),
        iterations: num("iter"),
        batch: num("batch-size"),
        seed,
    };

    let (train_s, train_g) = read_iob(&dir.join(&conf["train"]));
    let (dev_s, dev_g) = read_iob(&dir.join(&conf["dev"]));
    let (test_s, test_g) = read_iob(&dir.join(&conf["corpus"]));
    let kb = read_pairs(&dir.join(&conf["kb"]));
    let mentions = read_spans(&dir.join(&conf["spans"]));

    let mut d_init: Vec<Pair> = Vec::new();
    for (sid, s, e, ty) in &train_g {
        let pair = (surface(&train_s, sid, *s, *e), ty.clone());
        if !d_init.contains(&pair) {
            d_init.push(pair);
        }
    }
    let dev: Vec<Pair> = dev_g
        .iter()
        .map(|(sid, s, e, ty)| (surface(&dev_s, sid, *s, *e), ty.clone()))
        .collect();
    let space: BTreeSet<&String> = test_g.iter().map(|k| &k.3).collect();

    let vec_of = |t: &str| trigram_vector(t, dim);
    let mut dictionaries = Vec::new();
    let mut traces = Vec::new();
    for i in 0..k {
        let mut variant = kb.clone();
        Draws::new(seed + i as u64).shuffle(&mut variant);
        let (d, tr) = simulate_refinement(&d_init, &variant, &dev, &vec_of, &params(seed));
        dictionaries.push(d);
        traces.push(tr);
    }

    let mut runs = Vec::new();
    for d in &dictionaries {
        let vectors: Vec<Vec<f64>> = d.iter().map(|(n, _)| vec_of(n)).collect();
        let mut run = Vec::new();
        for (sid, s, e) in &mentions {
            let (i, sc) = scan(&vec_of(&surface(&test_s, sid, *s, *e)), &vectors).unwrap();
            if space.contains(&d[i].1) {
                run.push(((sid.clone(), *s, *e, d[i].1.clone()), sc));
            }
        }
        runs.push(run);
    }
    let voted = majority(&runs);
    let (tp, fp, fn_, p, r, f1) = score(&voted, &test_g);
    let bem: Vec<f64> = dictionaries.iter().map(|d| dev_accuracy(d, &dev, &vec_of)).collect();

    let mut surfaces: BTreeSet<String> = BTreeSet::new();
    surfaces.extend(d_init.iter().map(|p| p.0.clone()));
    surfaces.extend(kb.iter().map(|p| p.0.clone()));
    surfaces.extend(dev.iter().map(|p| p.0.clone()));
    surfaces.extend(mentions.iter().map(|(sid, s, e)| surface(&test_s, sid, *s, *e)));

    ToyOracle {
        report: json!({
            "overall": {
                "true_positives": tp,
                "false_positives": fp,
                "false_negatives": fn_,
                "precision": p,
                "recall": r,
                "f1": f1,
            },
            "bem_accuracy": bem,
        }),
        surfaces,
        dictionaries,
        traces,
    }
}
