//! `cfpose`: simulate, train-gen, synth-cf, train-hpe and eval.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use cfpose_core::{Error, ErrorKind, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{flag_name, RunConfig, KEYS};

const COMMANDS: &[(&str, &str)] = &[
    ("simulate", "write a synthetic multi-domain benchmark to paths.data"),
    ("train-gen", "train the conditional signal generator"),
    ("synth-cf", "synthesize counterfactual regularization targets with the frozen generator"),
    ("train-hpe", "train the pose estimator over the lambda sweep and repetitions"),
    ("eval", "evaluate a trained pose estimator on the test split"),
];

fn cli() -> Command {
    let mut root = Command::new("cfpose")
        .about("Counterfactual-regularized RF human pose estimation")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut sub = Command::new(*name).about(*about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("config file of `section.key = value` lines"),
        );
        for (key, default, help) in KEYS {
            let help = if default.is_empty() {
                help.to_string()
            } else {
                format!("{help} [default: {default}]")
            };
            sub = sub.arg(
                Arg::new(*key)
                    .long(flag_name(key))
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(help),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let overrides: BTreeMap<String, String> = KEYS
        .iter()
        .filter_map(|(k, _, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    let cfg = RunConfig::resolve(m.get_one::<PathBuf>("config").map(PathBuf::as_path), &overrides)?;
    match name {
        "simulate" => commands::simulate_cmd(&cfg).map(drop),
        "train-gen" => commands::train_gen(&cfg).map(drop),
        "synth-cf" => commands::synth_cf(&cfg).map(drop),
        "train-hpe" => commands::train_hpe_cmd(&cfg).map(drop),
        "eval" => commands::eval_cmd(&cfg).map(drop),
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Configuration => 2,
        ErrorKind::Validation => 3,
        ErrorKind::Dependency => 4,
        ErrorKind::Divergence => 5,
        ErrorKind::Contract => 6,
        ErrorKind::Io => 7,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
