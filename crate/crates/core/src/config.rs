//! Pipeline configuration.
//!
//! The config file is flat `key = value` text; lines starting with `#` are
//! comments. Keys use the same names as the command-line flags (`-` and `_`
//! are interchangeable). Relative paths in a config file are resolved
//! against the file's directory; relative paths given as overrides are used
//! as is.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::corpus::IobMode;
use crate::dictionary::RefinementConfig;
use crate::ebd::{UnknownSources, DEFAULT_DECODE_THRESHOLD};
use crate::ensemble::DEFAULT_VOTE_THRESHOLD;
use crate::error::{Error, Result};

/// Keys whose values are paths.
pub const PATH_KEYS: &[&str] = &[
    "corpus",
    "train",
    "dev",
    "dev-spans",
    "kb",
    "dict-init",
    "spans",
    "probs",
    "phrases",
    "llm-runs",
    "store",
    "out",
    "predictions",
];

pub const OTHER_KEYS: &[&str] = &[
    "encoder",
    "dim",
    "fallback",
    "k",
    "seed",
    "t",
    "iter",
    "batch-size",
    "vote-threshold",
    "decode-threshold",
    "use-llm",
    "use-kb-unknowns",
    "refine",
    "tagging-space",
    "trusted",
    "iob-mode",
];

/// Boolean keys; on the command line these may be given without a value.
pub const BOOL_KEYS: &[&str] = &["fallback", "use-llm", "use-kb-unknowns", "refine"];

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMode {
    Hashed,
    Store,
}

/// Where trusted labels come from when annotating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrustedSource {
    /// Dictionary matching against the initial dictionary.
    Dict,
    /// The corpus' own (partial) gold labels.
    Gold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub dev_spans: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub dict_init: Option<PathBuf>,
    pub spans: Option<PathBuf>,
    pub probs: Option<PathBuf>,
    pub phrases: Option<PathBuf>,
    pub llm_runs: Vec<PathBuf>,
    pub store: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub encoder: EncoderMode,
    pub dim: usize,
    pub fallback: bool,
    pub refinement: RefinementConfig,
    pub seed: Option<u64>,
    pub k: usize,
    pub vote_threshold: f64,
    pub decode_threshold: f64,
    pub unknowns: UnknownSources,
    pub refine: bool,
    pub tagging_space: Option<Vec<String>>,
    pub trusted: TrustedSource,
    pub iob_mode: IobMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus: None,
            train: None,
            dev: None,
            dev_spans: None,
            kb: None,
            dict_init: None,
            spans: None,
            probs: None,
            phrases: None,
            llm_runs: Vec::new(),
            store: None,
            predictions: None,
            out_dir: PathBuf::from("out"),
            encoder: EncoderMode::Hashed,
            dim: DEFAULT_DIM,
            fallback: false,
            refinement: RefinementConfig::default(),
            seed: None,
            k: 1,
            vote_threshold: DEFAULT_VOTE_THRESHOLD,
            decode_threshold: DEFAULT_DECODE_THRESHOLD,
            unknowns: UnknownSources {
                use_llm: false,
                use_kb: true,
            },
            refine: true,
            tagging_space: None,
            trusted: TrustedSource::Dict,
            iob_mode: IobMode::Lenient,
        }
    }
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

fn check_key(key: &str) -> Result<()> {
    if PATH_KEYS.contains(&key) || OTHER_KEYS.contains(&key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key {key:?}")))
    }
}

/// Parse config text into normalized `key -> value` pairs.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, format!("expected key = value, got {line:?}")))?;
        let key = normalize_key(key);
        check_key(&key).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

fn resolve(base: &Path, value: &str) -> String {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            let p = Path::new(v);
            if p.is_absolute() {
                v.to_string()
            } else {
                base.join(p).to_string_lossy().into_owned()
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

impl PipelineConfig {
    /// Load an optional config file and apply `overrides` on top.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let base = path.parent().unwrap_or(Path::new("."));
            for (k, v) in parse_config_text(&text).map_err(|e| e.in_file(path))? {
                let v = if PATH_KEYS.contains(&k.as_str()) {
                    resolve(base, &v)
                } else {
                    v
                };
                map.insert(k, v);
            }
        }
        for (k, v) in overrides {
            let k = normalize_key(k);
            check_key(&k)?;
            map.insert(k, v.clone());
        }
        Self::from_map(&map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = PipelineConfig::default();
        for (key, v) in map {
            let path = || Some(PathBuf::from(v));
            match key.as_str() {
                "corpus" => c.corpus = path(),
                "train" => c.train = path(),
                "dev" => c.dev = path(),
                "dev-spans" => c.dev_spans = path(),
                "kb" => c.kb = path(),
                "dict-init" => c.dict_init = path(),
                "spans" => c.spans = path(),
                "probs" => c.probs = path(),
                "phrases" => c.phrases = path(),
                "store" => c.store = path(),
                "predictions" => c.predictions = path(),
                "out" => c.out_dir = PathBuf::from(v),
                "llm-runs" => {
                    c.llm_runs = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(PathBuf::from)
                        .collect()
                }
                "encoder" => {
                    c.encoder = match v.as_str() {
                        "hashed" => EncoderMode::Hashed,
                        "store" => EncoderMode::Store,
                        _ => return Err(Error::Config(format!("encoder: expected hashed or store, got {v:?}"))),
                    }
                }
                "dim" => c.dim = parse_num(key, v)?,
                "fallback" => c.fallback = parse_bool(key, v)?,
                "k" => c.k = parse_num(key, v)?,
                "seed" => c.seed = Some(parse_num(key, v)?),
                "t" => c.refinement.threshold_t = parse_num(key, v)?,
                "iter" => c.refinement.iterations = parse_num(key, v)?,
                "batch-size" => c.refinement.batch_size = parse_num(key, v)?,
                "vote-threshold" => c.vote_threshold = parse_num(key, v)?,
                "decode-threshold" => c.decode_threshold = parse_num(key, v)?,
                "use-llm" => c.unknowns.use_llm = parse_bool(key, v)?,
                "use-kb-unknowns" => c.unknowns.use_kb = parse_bool(key, v)?,
                "refine" => c.refine = parse_bool(key, v)?,
                "tagging-space" => {
                    c.tagging_space = Some(
                        v.split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect(),
                    )
                }
                "trusted" => {
                    c.trusted = match v.as_str() {
                        "dict" => TrustedSource::Dict,
                        "gold" => TrustedSource::Gold,
                        _ => return Err(Error::Config(format!("trusted: expected dict or gold, got {v:?}"))),
                    }
                }
                "iob-mode" => {
                    c.iob_mode = match v.as_str() {
                        "lenient" => IobMode::Lenient,
                        "strict" => IobMode::Strict,
                        _ => {
                            return Err(Error::Config(format!(
                                "iob-mode: expected lenient or strict, got {v:?}"
                            )))
                        }
                    }
                }
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.encoder == EncoderMode::Store && self.store.is_none() {
            return Err(Error::Config("encoder = store needs a store path".into()));
        }
        if !(self.vote_threshold > 0.0 && self.vote_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "vote-threshold must lie in (0, 1], got {}",
                self.vote_threshold
            )));
        }
        if !(self.decode_threshold > 0.0 && self.decode_threshold < 1.0) {
            return Err(Error::Config(format!(
                "decode-threshold must lie in (0, 1), got {}",
                self.decode_threshold
            )));
        }
        self.refinement.validate()
    }

    /// The seed, which refinement requires to be set explicitly.
    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("seed is required (set `seed` in the config or pass --seed)".into()))
    }
}
