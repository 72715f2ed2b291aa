//! File-mediated pipeline steps behind the CLI subcommands.
//!
//! Each step reads its inputs from the configured paths and the output
//! directory and writes its artifacts back there. Steps share no state other
//! than these files:
//!
//! | step        | writes                                             |
//! |-------------|----------------------------------------------------|
//! | embed-build | `embeddings.tsv`                                   |
//! | annotate    | `annotated.jsonl`                                  |
//! | refine      | `dict-<i>.tsv`, `trace-<i>.jsonl`                  |
//! | match       | `predictions-<i>.jsonl`                            |
//! | ensemble    | `predictions.jsonl`                                |
//! | eval        | `report.json`, `report.txt`                        |

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{EncoderMode, PipelineConfig, TrustedSource};
use crate::corpus::{
    corpus_stats, parse_iob, parse_kb, read_phrases, read_predictions, write_dictionary, write_predictions, Corpus,
    CorpusStats, Span, TaggingSpace, TypedEntity,
};
use crate::dictionary::{build_variants, dev_examples, init_from_entities, refine, DevExample};
use crate::ebd::{
    annotate_with, decode_spans, dictionary_matcher, llm_spans, merge_unknowns, phrase_matcher, read_probabilities,
    write_annotated, AnswerSource, DirectoryAnswers, PhraseMatcher,
};
use crate::embedding::{embed_all, load_store, save_store, Encoder, HashedEncoder, StoreEncoder};
use crate::ensemble::{vote_with_threshold, EnsembleInput, PredictionRun};
use crate::error::{Error, Result};
use crate::evaluator::{bem_accuracy, evaluate, EvalReport};
use crate::matcher::{batch_match, DictEntry, Dictionary, EntrySource, Mention};

pub const STORE_FILE: &str = "embeddings.tsv";
pub const ANNOTATED_FILE: &str = "annotated.jsonl";
pub const ENSEMBLE_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

pub fn dictionary_file(out: &Path, i: usize) -> PathBuf {
    out.join(format!("dict-{i}.tsv"))
}

pub fn trace_file(out: &Path, i: usize) -> PathBuf {
    out.join(format!("trace-{i}.jsonl"))
}

pub fn predictions_file(out: &Path, i: usize) -> PathBuf {
    out.join(format!("predictions-{i}.jsonl"))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let file = File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|e| e.in_file(path))?;
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is required for this step")))
}

pub fn load_corpus(path: &Path, cfg: &PipelineConfig) -> Result<Corpus> {
    let parsed = parse_iob(open(path)?, cfg.iob_mode).map_err(|e| e.in_file(path))?;
    if parsed.repaired > 0 {
        log::warn!("{}: repaired {} dangling I- tags", path.display(), parsed.repaired);
    }
    Ok(parsed.corpus)
}

pub fn load_entries(path: &Path) -> Result<Vec<DictEntry>> {
    let kb = parse_kb(open(path)?).map_err(|e| e.in_file(path))?;
    if kb.duplicates > 0 {
        log::info!("{}: dropped {} duplicate entries", path.display(), kb.duplicates);
    }
    Ok(kb.entries)
}

pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    Ok(Dictionary::from_entries(load_entries(path)?))
}

/// The initial dictionary: `dict-init` if given, else the gold entities of `train`.
pub fn initial_dictionary(cfg: &PipelineConfig) -> Result<Dictionary> {
    if let Some(path) = &cfg.dict_init {
        let d = load_dictionary(path)?;
        if d.is_empty() {
            return Err(Error::Config(format!(
                "{}: initial dictionary is empty",
                path.display()
            )));
        }
        return Ok(d);
    }
    if let Some(path) = &cfg.train {
        let train = load_corpus(path, cfg)?;
        return init_from_entities(&train.gold, EntrySource::Train).map_err(|e| e.in_file(path));
    }
    Err(Error::Config(
        "an initial dictionary needs `dict-init` or `train`".into(),
    ))
}

pub fn encoder(cfg: &PipelineConfig) -> Result<Box<dyn Encoder>> {
    match cfg.encoder {
        EncoderMode::Hashed => Ok(Box::new(HashedEncoder::new(cfg.dim)?)),
        EncoderMode::Store => {
            let path = required(&cfg.store, "store")?;
            let loaded = load_store(open(path)?).map_err(|e| e.in_file(path))?;
            if loaded.renormalized > 0 {
                log::warn!("{}: renormalized {} vectors", path.display(), loaded.renormalized);
            }
            Ok(Box::new(StoreEncoder::new(loaded.store, cfg.fallback)?))
        }
    }
}

/// Point a missing-vector error at the store it was looked up in.
fn in_store(cfg: &PipelineConfig, e: Error) -> Error {
    match (&e, &cfg.store, cfg.encoder) {
        (Error::MissingEmbedding(_), Some(store), EncoderMode::Store) => e.in_file(store),
        _ => e,
    }
}

fn tagging_space(cfg: &PipelineConfig, corpus: &Corpus) -> Result<TaggingSpace> {
    match &cfg.tagging_space {
        Some(types) => TaggingSpace::new(types.iter().cloned()),
        None if !corpus.tagging_space.is_empty() => Ok(corpus.tagging_space.clone()),
        None => Err(Error::Config(
            "corpus has no gold types; set `tagging-space` explicitly".into(),
        )),
    }
}

/// Mentions to type: from a span file (types ignored) or decoded from
/// probability tensors. Spans are deduplicated, keeping first occurrence.
pub fn load_mentions(cfg: &PipelineConfig, corpus: &Corpus) -> Result<Vec<Mention>> {
    let spans: Vec<Span> = if let Some(path) = &cfg.spans {
        read_predictions(open(path)?, Some(corpus))
            .map_err(|e| e.in_file(path))?
            .into_iter()
            .map(|e| e.span)
            .collect()
    } else if let Some(path) = &cfg.probs {
        let records = read_probabilities(open(path)?).map_err(|e| e.in_file(path))?;
        let mut spans = Vec::new();
        for (i, (sid, probs)) in records.into_iter().enumerate() {
            let sentence = match &sid {
                Some(id) => corpus.sentence(id),
                None => corpus.sentences.get(i),
            }
            .ok_or_else(|| Error::Invalid(format!("record {} names no sentence of the corpus", i + 1)).in_file(path))?;
            if probs.len() != sentence.len() {
                return Err(Error::Shape(format!(
                    "record {} has n = {} but sentence {:?} has {} tokens",
                    i + 1,
                    probs.len(),
                    sentence.id,
                    sentence.len()
                ))
                .in_file(path));
            }
            spans.extend(decode_spans(&probs, cfg.decode_threshold, &sentence.id)?);
        }
        spans
    } else {
        return Err(Error::Config("`spans` or `probs` is required to match".into()));
    };
    let mut seen = HashSet::new();
    spans
        .into_iter()
        .filter(|s| seen.insert(s.clone()))
        .map(|span| {
            Ok(Mention {
                surface: corpus.surface_of(&span)?,
                span,
            })
        })
        .collect()
}

fn dev_set(cfg: &PipelineConfig) -> Result<Option<Vec<DevExample>>> {
    let Some(path) = &cfg.dev else { return Ok(None) };
    let dev = load_corpus(path, cfg)?;
    let spans = match &cfg.dev_spans {
        Some(sp) => Some(
            read_predictions(open(sp)?, Some(&dev))
                .map_err(|e| e.in_file(sp))?
                .into_iter()
                .map(|e| e.span)
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    let examples = dev_examples(&dev, spans.as_deref())?;
    if examples.is_empty() {
        return Err(Error::Invalid("dev split has no labeled mentions".into()).in_file(path));
    }
    Ok(Some(examples))
}

#[derive(Debug, Clone)]
pub struct EmbedSummary {
    pub path: PathBuf,
    pub count: usize,
}

/// Embed every surface later steps will look up.
pub fn cmd_embed_build(cfg: &PipelineConfig) -> Result<EmbedSummary> {
    let mut texts: Vec<String> = Vec::new();
    texts.extend(initial_dictionary(cfg)?.entries().iter().map(|e| e.name.clone()));
    if let Some(kb) = &cfg.kb {
        texts.extend(load_entries(kb)?.into_iter().map(|e| e.name));
    }
    if let Some(dev) = dev_set(cfg)? {
        texts.extend(dev.into_iter().map(|d| d.surface));
    }
    if let Some(path) = &cfg.corpus {
        if cfg.spans.is_some() || cfg.probs.is_some() {
            let corpus = load_corpus(path, cfg)?;
            texts.extend(load_mentions(cfg, &corpus)?.into_iter().map(|m| m.surface));
        }
    }
    let enc = encoder(cfg)?;
    let store = embed_all(&texts, enc.as_ref())?;
    let path = cfg.out_dir.join(STORE_FILE);
    write_file(&path, |w| save_store(&store, w))?;
    log::info!("wrote {} vectors to {}", store.len(), path.display());
    Ok(EmbedSummary {
        path,
        count: store.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotateSummary {
    pub path: PathBuf,
    pub sentences: usize,
    pub trusted: usize,
    pub unknown: usize,
}

/// Build trusted and unknown labels for the training text in `corpus`.
pub fn cmd_annotate(cfg: &PipelineConfig) -> Result<AnnotateSummary> {
    let corpus_path = required(&cfg.corpus, "corpus")?;
    let corpus = load_corpus(corpus_path, cfg)?;

    let trusted_matcher = match cfg.trusted {
        TrustedSource::Dict => Some(dictionary_matcher(&initial_dictionary(cfg)?)),
        TrustedSource::Gold => None,
    };
    let mut distant_names: Vec<String> = Vec::new();
    if cfg.unknowns.use_kb {
        if let Some(p) = &cfg.phrases {
            distant_names.extend(read_phrases(open(p)?).map_err(|e| e.in_file(p))?);
        }
        if let Some(kb) = &cfg.kb {
            distant_names.extend(load_entries(kb)?.into_iter().map(|e| e.name));
        }
    }
    let distant: PhraseMatcher<()> = phrase_matcher(&distant_names);
    let runs: Vec<DirectoryAnswers> = if cfg.unknowns.use_llm {
        if cfg.llm_runs.is_empty() {
            return Err(Error::Config(
                "use-llm is on but no `llm-runs` directories are set".into(),
            ));
        }
        cfg.llm_runs.iter().map(DirectoryAnswers::open).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let run_refs: Vec<&dyn AnswerSource> = runs.iter().map(|r| r as &dyn AnswerSource).collect();
    let no_phrases: PhraseMatcher<()> = phrase_matcher::<&str>(&[]);

    let mut items = Vec::with_capacity(corpus.sentences.len());
    for sentence in &corpus.sentences {
        let trusted: Vec<TypedEntity> = match &trusted_matcher {
            Some(m) => annotate_with(sentence, m, &no_phrases).trusted,
            None => corpus
                .gold
                .iter()
                .filter(|e| e.span.sentence_id == sentence.id)
                .cloned()
                .collect(),
        };
        let distant_spans: Vec<Span> = distant.greedy_matches(sentence).into_iter().map(|(s, _)| s).collect();
        let llm = if run_refs.is_empty() {
            Vec::new()
        } else {
            llm_spans(sentence, &run_refs)?
        };
        items.push(merge_unknowns(sentence, trusted, &llm, &distant_spans, cfg.unknowns));
    }

    let path = cfg.out_dir.join(ANNOTATED_FILE);
    write_file(&path, |w| write_annotated(&items, w))?;
    let summary = AnnotateSummary {
        path,
        sentences: items.len(),
        trusted: items.iter().map(|a| a.trusted.len()).sum(),
        unknown: items.iter().map(|a| a.unknown.len()).sum(),
    };
    log::info!(
        "annotated {} sentences: {} trusted, {} unknown",
        summary.sentences,
        summary.trusted,
        summary.unknown
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineSummary {
    pub dictionaries: Vec<PathBuf>,
    pub traces: Vec<PathBuf>,
    pub initial_accuracy: Option<f64>,
    pub final_accuracies: Vec<f64>,
}

/// Refine one dictionary per KB shuffle, or copy the initial dictionary when
/// refinement is off.
pub fn cmd_refine(cfg: &PipelineConfig) -> Result<RefineSummary> {
    let d_init = initial_dictionary(cfg)?;
    let out = &cfg.out_dir;

    if !cfg.refine {
        if cfg.k > 1 {
            return Err(Error::Config(
                "ensembling needs distinct dictionaries; with refine = false there is only the initial one (set k = 1)"
                    .into(),
            ));
        }
        let path = dictionary_file(out, 0);
        write_file(&path, |w| write_dictionary(&d_init, w))?;
        return Ok(RefineSummary {
            dictionaries: vec![path],
            traces: Vec::new(),
            initial_accuracy: None,
            final_accuracies: Vec::new(),
        });
    }

    let dev = dev_set(cfg)?.ok_or_else(|| {
        Error::Config(
            "refinement needs a labeled dev split (`dev`); without one, set refine = false to use the initial dictionary directly"
                .into(),
        )
    })?;
    let kb_path = required(&cfg.kb, "kb")?;
    let kb = load_entries(kb_path)?;
    let seed = cfg.require_seed()?;
    let enc = encoder(cfg)?;
    let mut params = cfg.refinement.clone();
    params.rng_seed = seed;

    let mut summary = RefineSummary {
        dictionaries: Vec::new(),
        traces: Vec::new(),
        initial_accuracy: None,
        final_accuracies: Vec::new(),
    };
    for (i, variant) in build_variants(&kb, cfg.k, seed).into_iter().enumerate() {
        let (dict, trace) = refine(&d_init, &variant, &dev, enc.as_ref(), &params).map_err(|e| in_store(cfg, e))?;
        let dpath = dictionary_file(out, i);
        let tpath = trace_file(out, i);
        write_file(&dpath, |w| write_dictionary(&dict, w))?;
        write_file(&tpath, |w| trace.write(w))?;
        log::info!(
            "dictionary {i}: {} entries, dev accuracy {:.4} -> {:.4}",
            dict.len(),
            trace.initial_accuracy,
            trace.final_accuracy()
        );
        summary.initial_accuracy = Some(trace.initial_accuracy);
        summary.final_accuracies.push(trace.final_accuracy());
        summary.dictionaries.push(dpath);
        summary.traces.push(tpath);
    }
    Ok(summary)
}

/// Dictionary files `dict-0.tsv ..` present in the output directory.
fn existing_dictionaries(out: &Path) -> Vec<PathBuf> {
    (0..)
        .map(|i| dictionary_file(out, i))
        .take_while(|p| p.is_file())
        .collect()
}

fn sort_predictions(p: &mut [TypedEntity]) {
    p.sort_by(|a, b| a.span.cmp(&b.span).then_with(|| a.entity_type.cmp(&b.entity_type)));
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchSummary {
    pub predictions: Vec<PathBuf>,
    pub mentions: usize,
    pub typed: Vec<usize>,
}

/// Type the mentions with every refined dictionary.
pub fn cmd_match(cfg: &PipelineConfig) -> Result<MatchSummary> {
    let corpus = load_corpus(required(&cfg.corpus, "corpus")?, cfg)?;
    let space = tagging_space(cfg, &corpus)?;
    let mentions = load_mentions(cfg, &corpus)?;
    let dicts = existing_dictionaries(&cfg.out_dir);
    if dicts.len() != cfg.k {
        return Err(Error::Config(format!(
            "k = {} but {} dictionaries found in {}",
            cfg.k,
            dicts.len(),
            cfg.out_dir.display()
        )));
    }
    let enc = encoder(cfg)?;
    let mut summary = MatchSummary {
        predictions: Vec::new(),
        mentions: mentions.len(),
        typed: Vec::new(),
    };
    for (i, dpath) in dicts.iter().enumerate() {
        let dict = load_dictionary(dpath)?;
        let mut typed = batch_match(&mentions, &dict, enc.as_ref(), &space).map_err(|e| in_store(cfg, e))?;
        sort_predictions(&mut typed);
        let path = predictions_file(&cfg.out_dir, i);
        write_file(&path, |w| write_predictions(&typed, w))?;
        summary.typed.push(typed.len());
        summary.predictions.push(path);
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsembleSummary {
    pub path: PathBuf,
    pub runs: usize,
    pub entities: usize,
}

/// Vote the per-dictionary predictions into one set.
pub fn cmd_ensemble(cfg: &PipelineConfig) -> Result<EnsembleSummary> {
    let out = &cfg.out_dir;
    let pred_files: Vec<PathBuf> = (0..)
        .map(|i| predictions_file(out, i))
        .take_while(|p| p.is_file())
        .collect();
    let dicts = existing_dictionaries(out);
    if pred_files.len() != cfg.k || dicts.len() != cfg.k {
        return Err(Error::Config(format!(
            "k = {} but found {} dictionaries and {} prediction sets in {}",
            cfg.k,
            dicts.len(),
            pred_files.len(),
            out.display()
        )));
    }
    if cfg.k > 1 {
        let contents = dicts
            .iter()
            .map(|p| {
                std::fs::read(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if contents.iter().all(|c| c == &contents[0]) {
            return Err(Error::Config(
                "all dictionaries are identical; ensembling needs at least two distinct dictionaries".into(),
            ));
        }
    }
    let runs = pred_files
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(PredictionRun {
                dictionary_id: i.to_string(),
                entities: read_predictions(open(p)?, None).map_err(|e| e.in_file(p))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let voted = vote_with_threshold(&EnsembleInput::new(runs), cfg.vote_threshold)?;
    let path = out.join(ENSEMBLE_FILE);
    write_file(&path, |w| write_predictions(&voted, w))?;
    Ok(EnsembleSummary {
        path,
        runs: cfg.k,
        entities: voted.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub overall: EvalReport,
    /// Typing accuracy of each dictionary on the dev mentions, when a dev split is configured.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub bem_accuracy: Vec<f64>,
}

impl std::fmt::Display for PipelineReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.overall)?;
        for (i, a) in self.bem_accuracy.iter().enumerate() {
            writeln!(f, "{:<10} {:>8.4}", format!("bem-acc-{i}"), a)?;
        }
        Ok(())
    }
}

/// Score predictions (`predictions`, else the ensemble output) against the gold of `corpus`.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<PipelineReport> {
    let corpus = load_corpus(required(&cfg.corpus, "corpus")?, cfg)?;
    let pred_path = cfg
        .predictions
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(ENSEMBLE_FILE));
    let pred = read_predictions(open(&pred_path)?, Some(&corpus)).map_err(|e| e.in_file(&pred_path))?;
    let overall = evaluate(&pred, &corpus.gold);

    let mut bem = Vec::new();
    if let Some(dev) = dev_set(cfg)? {
        let dicts = existing_dictionaries(&cfg.out_dir);
        if !dicts.is_empty() {
            let enc = encoder(cfg)?;
            for d in &dicts {
                bem.push(bem_accuracy(&dev, &load_dictionary(d)?, enc.as_ref()).map_err(|e| in_store(cfg, e))?);
            }
        }
    }
    let report = PipelineReport {
        overall,
        bem_accuracy: bem,
    };
    write_file(&cfg.out_dir.join(REPORT_JSON), |w| {
        serde_json::to_writer_pretty(&mut *w, &report).map_err(std::io::Error::from)?;
        writeln!(w)?;
        Ok(())
    })?;
    write_file(&cfg.out_dir.join(REPORT_TXT), |w| {
        write!(w, "{report}")?;
        Ok(())
    })?;
    Ok(report)
}

pub fn cmd_stats(cfg: &PipelineConfig) -> Result<CorpusStats> {
    let path = required(&cfg.corpus, "corpus")?;
    Ok(corpus_stats(&load_corpus(path, cfg)?))
}

#[derive(Debug, Clone)]
pub struct RunAllSummary {
    pub embed: EmbedSummary,
    pub refine: RefineSummary,
    pub matched: MatchSummary,
    pub ensemble: EnsembleSummary,
    pub report: PipelineReport,
}

/// embed-build, refine, match, ensemble, eval. Steps after embed-build read
/// vectors only from the freshly built store, so a missing surface fails loudly.
pub fn run_all(cfg: &PipelineConfig) -> Result<RunAllSummary> {
    let embed = cmd_embed_build(cfg)?;
    let mut downstream = cfg.clone();
    downstream.encoder = EncoderMode::Store;
    downstream.store = Some(embed.path.clone());
    downstream.fallback = false;
    let refine = cmd_refine(&downstream)?;
    let matched = cmd_match(&downstream)?;
    let ensemble = cmd_ensemble(&downstream)?;
    let report = cmd_eval(&downstream)?;
    Ok(RunAllSummary {
        embed,
        refine,
        matched,
        ensemble,
        report,
    })
}
