mod commands;
mod fail;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Arg, ArgAction, ArgMatches, Command};

use fail::{Failure, CONFIG};
use settings::{keys_for, Settings};

const COMMANDS: &[(&str, &str)] = &[
    ("gen-corpus", "Generate train/val/test JSONL splits of the echo task"),
    ("train", "Train a model on a generated corpus"),
    ("generate", "Decode responses for a file of prompts"),
    ("eval", "Decode a held-out split and score it"),
    ("verify", "Check the loss bound, estimator agreement and gradients"),
    ("mask-dump", "Write the attention mask of a layout as CSV and PGM"),
];

fn cli() -> Command {
    let mut app = Command::new("interlace")
        .about("Hybrid autoregressive text / masked-diffusion audio sequence model")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key=value configuration file"),
        );
        for k in keys_for(name) {
            let mut arg = Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .overrides_with(k.name)
                .help(format!("{} [default: {}]", k.help, k.default));
            if matches!(k.default, "true" | "false") {
                arg = arg.num_args(0..=1).default_missing_value("true");
            }
            sub = sub.arg(arg);
        }
        app = app.subcommand(sub);
    }
    app
}

fn settings(name: &str, m: &ArgMatches) -> Result<Settings, Failure> {
    let flags: Vec<(String, String)> = keys_for(name)
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    let env = [
        ("seed", std::env::var("SEED").ok()),
        ("out_dir", std::env::var("OUT_DIR").ok()),
    ];
    Settings::resolve(name, m.get_one::<PathBuf>("config").map(PathBuf::as_path), &env, &flags)
}

fn run(name: &str, m: &ArgMatches) -> Result<(), Failure> {
    let s = settings(name, m)?;
    match name {
        "gen-corpus" => commands::gen_corpus(&s),
        "train" => {
            let stop = Arc::new(AtomicBool::new(false));
            let flag = stop.clone();
            ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
                .map_err(|e| Failure::new(fail::IO, format!("cannot install signal handler: {e}")))?;
            commands::train(&s, stop)
        }
        "generate" => commands::generate(&s),
        "eval" => commands::eval(&s),
        "verify" => commands::verify(&s),
        "mask-dump" => commands::mask_dump(&s),
        other => Err(Failure::new(CONFIG, format!("unknown command {other}"))),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definitions_are_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn every_key_becomes_a_flag() {
        let m = cli()
            .try_get_matches_from(["interlace", "train", "--total_steps", "3", "--resume"])
            .unwrap();
        let (name, sub) = m.subcommand().unwrap();
        let s = settings(name, sub).unwrap();
        assert_eq!(s.str("total_steps"), "3");
        assert!(s.flag("resume").unwrap());
        assert!(cli().try_get_matches_from(["interlace", "train", "--bogus", "1"]).is_err());
    }
}
