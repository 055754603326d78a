//! `stprot`: predict spatial protein expression from spatial RNA.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod manifest;
mod svg;

use commands::{
    ClusterArgs, EvaluateArgs, PlotArgs, PredictArgs, PreprocessArgs, SweepArgs, SynthArgs, TrainCmdArgs,
};

#[derive(Parser, Debug)]
#[command(name = "stprot", version, about = "Graph-attention autoencoder mapping spatial RNA to spatial protein")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the RNA and protein pipelines and write model-ready matrices.
    Preprocess(PreprocessArgs),
    /// Train on paired RNA + protein data and write a checkpoint.
    Train(TrainCmdArgs),
    /// Predict protein expression for RNA-only spots.
    Predict(PredictArgs),
    /// Gaussian-mixture clustering of an embedding into spatial domains.
    Cluster(ClusterArgs),
    /// RMSE and clustering agreement scores.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic paired dataset with known domains.
    Synth(SynthArgs),
    /// Scatter plot of spots as SVG.
    Plot(PlotArgs),
    /// Train across a parameter grid and tabulate the scores.
    Sweep(SweepArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { error::EXIT_USAGE as u8 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Synth(a) => commands::synth(a),
        Command::Plot(a) => commands::plot(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let name = match &e {
                error::CliError::Core(stprot::Error::ProteinMissing) => "ProteinMissing: ",
                _ => "",
            };
            eprintln!("error: {name}{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
