//! Command-line front end for featsplat.

use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub mod commands;
pub mod verify;

use commands::*;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "featsplat", version, about = "Feature splatting, lifting, compression and token sampling")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with planted feature prototypes.
    Synth(SynthArgs),
    /// Render a field from every camera, optionally scoring against GT.
    Render(RenderArgs),
    /// Lift 2D feature maps onto the Gaussians of a field.
    Lift(LiftArgs),
    /// Train the feature autoencoder.
    TrainAe(TrainAeArgs),
    /// Choose a token subset of Gaussians.
    Sample(SampleArgs),
    /// Decode selected Gaussian features into a token file.
    ExportTokens(ExportArgs),
    /// Compare rendered maps against ground truth.
    Eval(EvalArgs),
    /// Run the oracle suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    /// Run only these checks (e.g. 1,4,6b); all by default.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
}

/// Raised when `verify` ran but a check failed.
#[derive(Debug, thiserror::Error)]
#[error("{failed} verification check(s) failed")]
pub struct VerifyFailed {
    pub failed: usize,
}

pub fn cmd_verify(g: &Global, args: &VerifyArgs) -> Result<verify::VerifyReport> {
    prepare_out("verify", g, args)?;
    let report = verify::run_checks(&args.only, &g.render_options());
    let text = report.to_text();
    print!("{text}");
    featsplat::io::atomic_write(&g.out.join("verify.txt"), text.as_bytes())?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    featsplat::io::atomic_write(&g.out.join("verify.json"), json.as_bytes())?;
    if !report.passed() {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        return Err(VerifyFailed { failed }.into());
    }
    Ok(report)
}

/// Maps an error to the process exit code: 1 for invalid inputs, 2 for
/// filesystem failures, 3 for failed verification.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<VerifyFailed>() {
            return EXIT_VERIFY;
        }
        if let Some(fe) = cause.downcast_ref::<featsplat::Error>() {
            return if fe.is_io() { EXIT_IO } else { EXIT_VALIDATION };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

fn init_logging(g: &Global) {
    let level = match (g.quiet, g.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => cmd_synth(g, a),
        Command::Render(a) => cmd_render(g, a).map(|r| {
            if let Some(r) = r {
                print!("{}", r.to_table());
            }
        }),
        Command::Lift(a) => cmd_lift(g, a).map(drop),
        Command::TrainAe(a) => cmd_train_ae(g, a).map(drop),
        Command::Sample(a) => cmd_sample(g, a).map(drop),
        Command::ExportTokens(a) => cmd_export_tokens(g, a).map(drop),
        Command::Eval(a) => cmd_eval(g, a).map(|r| print!("{}", r.to_table())),
        Command::Verify(a) => cmd_verify(g, a).map(drop),
    }
}

/// Entry point shared by the binary and tests.
pub fn run(cli: Cli) -> ExitCode {
    init_logging(&cli.global);
    if let Some(n) = cli.global.thread_count() {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn exit_codes() {
        let io = featsplat::scene::load_field(std::path::Path::new("/nonexistent.gsf")).unwrap_err();
        assert_eq!(exit_code(&anyhow::Error::new(io).context("loading")), EXIT_IO);
        let bad = featsplat::scene::decode_field(std::path::Path::new("x"), b"FSGF").unwrap_err();
        assert_eq!(exit_code(&bad.into()), EXIT_VALIDATION);
        let raw: Result<()> = Err(std::io::Error::other("disk")).context("writing");
        assert_eq!(exit_code(&raw.unwrap_err()), EXIT_IO);
        assert_eq!(exit_code(&VerifyFailed { failed: 2 }.into()), EXIT_VERIFY);
        assert_eq!(exit_code(&anyhow::anyhow!("usage")), EXIT_VALIDATION);
    }
}
