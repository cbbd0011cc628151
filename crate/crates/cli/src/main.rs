//! `semap`: synthesize RGB-D sequences, run the mapping + pose pipeline,
//! and evaluate the outputs.

mod eval;
mod run;
mod stub;
mod synth;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "semap", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a frame dataset on disk.
    Synth(synth::SynthArgs),
    /// Run the full pipeline over a synthesized dataset.
    Run(run::RunArgs),
    /// Evaluate a track log against ground truth.
    Eval(eval::EvalArgs),
    /// Reference measurement provider speaking the line-JSON protocol:
    /// reads requests on stdin, answers each with a fixed pose.
    ProviderStub(stub::StubArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => synth::main(args),
        Command::Run(args) => run::main(args),
        Command::Eval(args) => eval::main(args),
        Command::ProviderStub(args) => stub::main(args),
    };
    if let Err(err) = result {
        eprintln!("{}", serde_json::json!({"error": err.to_string()}));
        std::process::exit(1);
    }
}
