use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use dmner_core::config::{BOOL_KEYS, OTHER_KEYS, PATH_KEYS};
use dmner_core::pipeline;
use dmner_core::{PipelineConfig, Result};

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("embed-build", "Embed every surface the later steps look up"),
    ("annotate", "Build trusted and unknown span labels for `corpus`"),
    ("refine", "Refine one dictionary per KB shuffle against the dev split"),
    ("match", "Type mentions with each refined dictionary"),
    ("ensemble", "Majority-vote the per-dictionary predictions"),
    ("eval", "Score predictions against the gold labels of `corpus`"),
    ("stats", "Print sentence, token and entity counts of `corpus`"),
    ("run-all", "embed-build, refine, match, ensemble and eval in order"),
];

fn key_args() -> Vec<Arg> {
    PATH_KEYS
        .iter()
        .chain(OTHER_KEYS)
        .map(|&key| {
            let arg = Arg::new(key).long(key).value_name("VALUE").global(true);
            if BOOL_KEYS.contains(&key) {
                arg.num_args(0..=1).default_missing_value("true")
            } else {
                arg
            }
        })
        .collect()
}

fn cli() -> Command {
    Command::new("dmner")
        .about("Dictionary-matching biomedical NER pipeline")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .global(true)
                .action(ArgAction::Set)
                .help("Flat key = value config file; flags override its keys"),
        )
        .args(key_args())
        .subcommands(SUBCOMMANDS.iter().map(|&(name, about)| Command::new(name).about(about)))
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    PATH_KEYS
        .iter()
        .chain(OTHER_KEYS)
        .filter_map(|&key| m.get_one::<String>(key).map(|v| (key.to_string(), v.clone())))
        .collect()
}

fn run(name: &str, cfg: &PipelineConfig) -> Result<()> {
    match name {
        "embed-build" => {
            let s = pipeline::cmd_embed_build(cfg)?;
            println!("{} vectors -> {}", s.count, s.path.display());
        }
        "annotate" => {
            let s = pipeline::cmd_annotate(cfg)?;
            println!(
                "sentences\t{}\ntrusted\t{}\nunknown\t{}",
                s.sentences, s.trusted, s.unknown
            );
            println!("-> {}", s.path.display());
        }
        "refine" => {
            let s = pipeline::cmd_refine(cfg)?;
            if let Some(a) = s.initial_accuracy {
                println!("initial dev accuracy\t{a:.4}");
            }
            for (i, p) in s.dictionaries.iter().enumerate() {
                match s.final_accuracies.get(i) {
                    Some(a) => println!("{}\t{a:.4}", p.display()),
                    None => println!("{}", p.display()),
                }
            }
        }
        "match" => {
            let s = pipeline::cmd_match(cfg)?;
            for (p, n) in s.predictions.iter().zip(&s.typed) {
                println!("{}\t{n}/{}", p.display(), s.mentions);
            }
        }
        "ensemble" => {
            let s = pipeline::cmd_ensemble(cfg)?;
            println!("{} entities from {} runs -> {}", s.entities, s.runs, s.path.display());
        }
        "eval" => print!("{}", pipeline::cmd_eval(cfg)?),
        "stats" => print!("{}", pipeline::cmd_stats(cfg)?),
        "run-all" => print!("{}", pipeline::run_all(cfg)?.report),
        other => unreachable!("unknown subcommand {other}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DMNER_LOG", "error")).init();
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let config = sub
        .get_one::<PathBuf>("config")
        .or(matches.get_one::<PathBuf>("config"));
    let mut keys = overrides(&matches);
    keys.extend(overrides(sub));

    let result = PipelineConfig::load(config.map(PathBuf::as_path), &keys).and_then(|cfg| run(name, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
