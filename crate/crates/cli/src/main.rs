use std::process::ExitCode;

use clap::Parser;
use midpose_cli::{configure_threads, run, write_run_log, Cli, CliError, RunLogger};

static LOGGER: RunLogger = RunLogger::new();

fn main() -> ExitCode {
    let cli = Cli::parse();
    log::set_logger(&LOGGER).expect("logger installed once");
    log::set_max_level(log::LevelFilter::Info);
    let result = configure_threads().and_then(|()| run(&cli));
    if let Err(e) = &result {
        log::error!("{e}");
    }
    // The output directory is only known for certain after the config loads;
    // the flag wins, and a config-file `out` is picked up by `run` itself.
    let out = cli.command.common().out.clone().or_else(|| {
        let common = cli.command.common();
        midpose_cli::RunConfig::load(common.config.as_deref(), common).ok().and_then(|c| c.out)
    });
    if let Some(out) = out {
        if let Err(e) = write_run_log(&out, &LOGGER.take()) {
            eprintln!("midpose: writing run log: {e}");
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => ExitCode::from(CliError::exit_code(&e) as u8),
    }
}
