use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::*;

/// Synthetic vessel re-identification and multi-object tracking.
#[derive(Parser)]
#[command(name = "thermreid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic vessel dataset with masks and a manifest
    Synth(SynthArgs),
    /// Train the foreground segmenter on a manifest's training split
    TrainSeg(TrainSegArgs),
    /// Train the four-space embedding head
    TrainHead(TrainHeadArgs),
    /// Embed a manifest split into a gallery
    Enroll(EnrollArgs),
    /// Rank gallery identities for one image, optionally matching or enrolling it
    Query(QueryArgs),
    /// Score held-out queries against a gallery (Top-1, Top-5, mAP)
    EvalReid(EvalReidArgs),
    /// Run the tracker on detections and score it (MOTA, IDF1)
    EvalTrack(EvalTrackArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a.resolve()?),
        Command::TrainSeg(a) => commands::train_seg(&a.resolve()?),
        Command::TrainHead(a) => commands::train_head_cmd(&a.resolve()?),
        Command::Enroll(a) => commands::enroll(&a.resolve()?),
        Command::Query(a) => commands::query(&a.resolve()?),
        Command::EvalReid(a) => commands::eval_reid(&a.resolve()?),
        Command::EvalTrack(a) => commands::eval_track(&a.resolve()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
