mod commands;

use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use cskd::config::RunConfig;

/// Flags shared by every subcommand that reads a [`RunConfig`]: `--config`
/// plus one `--<key> <value>` flag per config key.
fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value config file; flags override it"),
    );
    RunConfig::KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .help_heading("Config keys"),
        )
    })
}

fn checkpoint_arg(multiple: bool) -> Arg {
    let arg = Arg::new("checkpoint")
        .long("checkpoint")
        .value_name("PATH")
        .required(true)
        .help("student checkpoint");
    if multiple {
        arg.action(ArgAction::Append)
    } else {
        arg
    }
}

fn out_arg(help: &'static str) -> Arg {
    Arg::new("out").long("out").value_name("PATH").help(help)
}

fn cli() -> Command {
    Command::new("cskd")
        .about("Distill a convolutional teacher into a vision transformer with dense patch-token supervision")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-data")
                .about("Write a synthetic digit dataset in IDX format")
                .arg(Arg::new("out").long("out").value_name("DIR").required(true))
                .arg(num_arg("train", "training samples", "6000"))
                .arg(num_arg("val", "validation samples", "1000"))
                .arg(num_arg("classes", "number of classes", "10"))
                .arg(num_arg("size", "image side in pixels", "32"))
                .arg(num_arg("seed", "generator seed", "0")),
        )
        .subcommand(config_args(Command::new("train-teacher").about("Train the convolutional teacher")))
        .subcommand(config_args(
            Command::new("distill").about("Distill the teacher at `teacher_ckpt` into a fresh student"),
        ))
        .subcommand(config_args(
            Command::new("eval")
                .about("Validation top-1 of a student checkpoint")
                .arg(checkpoint_arg(false))
                .arg(
                    Arg::new("mode")
                        .long("mode")
                        .value_name("MODE")
                        .action(ArgAction::Append)
                        .help("deit or cskd_ensemble; repeatable, default both"),
                ),
        ))
        .subcommand(
            Command::new("analyze")
                .about("Diagnostics over checkpoints and metrics")
                .subcommand_required(true)
                .subcommand(config_args(
                    Command::new("attention")
                        .about("Per-layer, per-head mean attention distance over validation images")
                        .arg(checkpoint_arg(false))
                        .arg(
                            Arg::new("images")
                                .long("images")
                                .value_name("N")
                                .value_parser(clap::value_parser!(u64))
                                .help("number of validation images (alias of --attention_images)"),
                        )
                        .arg(Arg::new("dump").long("dump").value_name("PATH").help("also save the raw attention"))
                        .arg(out_arg("CSV destination (default stdout)")),
                ))
                .subcommand(config_args(
                    Command::new("responses")
                        .about("Patch response maps of validation images, one CSV per image")
                        .arg(checkpoint_arg(true))
                        .arg(num_arg("images", "number of validation images", "4"))
                        .arg(Arg::new("out").long("out").value_name("DIR").required(true)),
                ))
                .subcommand(
                    Command::new("dynamics")
                        .about("Per-epoch metrics, with a delta column against a baseline run")
                        .arg(Arg::new("metrics").long("metrics").value_name("CSV").required(true))
                        .arg(Arg::new("baseline").long("baseline").value_name("CSV"))
                        .arg(out_arg("CSV destination (default stdout)")),
                ),
        )
}

fn num_arg(name: &'static str, help: &'static str, default: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("N")
        .help(help)
        .value_parser(clap::value_parser!(u64))
        .default_value(default)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches: ArgMatches = cli().get_matches();
    match commands::dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
