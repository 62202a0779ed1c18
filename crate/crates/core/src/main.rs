//! `mixlm` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 training
//! divergence. Worker count for parallel fine-tuning is capped with the
//! `RAYON_NUM_THREADS` environment variable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mixlm::corpus::{generate_synthetic_lines, MarkovSpec};
use mixlm::error::Error;
use mixlm::runspec::{run_eval, run_train, RunSpec};

#[derive(Parser)]
#[command(
    name = "mixlm",
    version,
    about = "Multi-corpus language model training with adaptive corpus sampling"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model as described by a run config file.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override train.strategy.
        #[arg(long)]
        strategy: Option<String>,
        /// Override train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on test corpora.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocab file the checkpoint was trained with.
        #[arg(long)]
        vocab: PathBuf,
        /// Test corpus paths (repeatable).
        #[arg(long, required = true, num_args = 1..)]
        test: Vec<PathBuf>,
        /// Where to write results.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus from a Markov source spec.
    Synth {
        /// Markov source spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of records to generate.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Combine eval results from finished run directories.
    Report {
        /// Run output directories (repeatable).
        #[arg(long, required = true, num_args = 1..)]
        run: Vec<PathBuf>,
        /// Where to write the combined results.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn dispatch(cli: Cli) -> mixlm::Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            strategy,
            seed,
            epochs,
            out,
            quiet,
        } => {
            let mut spec = RunSpec::load(&config)?;
            if let Some(s) = strategy {
                spec.train.strategy = s;
            }
            if let Some(s) = seed {
                spec.train.seed = s;
            }
            if let Some(e) = epochs {
                spec.train.epochs = e;
            }
            if let Some(o) = out {
                spec.output.dir = o;
            }
            spec.validate()?;
            let outcome = run_train(&spec, quiet)?;
            if !quiet {
                for e in &outcome.evals {
                    println!(
                        "test {:<20} ppl={:.2} ({} tokens)",
                        e.corpus_name, e.ppl, e.tokens
                    );
                }
                println!("artifacts written to {}", outcome.out_dir.display());
            }
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            vocab,
            test,
            out,
        } => {
            let evals = run_eval(&checkpoint, &vocab, &test, out.as_deref())?;
            for e in &evals {
                println!(
                    "{:<20} nll/token={:.4} ppl={:.2} tokens={}",
                    e.corpus_name, e.nll_per_token, e.ppl, e.tokens
                );
            }
            Ok(())
        }
        Cmd::Synth { spec, out, n, seed } => {
            let spec = MarkovSpec::from_file(&spec)?;
            let lines = generate_synthetic_lines(&spec, n, seed)?;
            let text = lines.join("\n") + "\n";
            std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
            println!("wrote {n} records to {}", out.display());
            Ok(())
        }
        Cmd::Report { run, out } => cmd_report(&run, out.as_deref()),
    }
}

/// Merge the `eval.csv` of each run directory into one results table and
/// print a summary line per run.
fn cmd_report(runs: &[PathBuf], out: Option<&std::path::Path>) -> mixlm::Result<()> {
    let mut combined = String::from("strategy,corpora,test_set,ppl\n");
    for dir in runs {
        let eval_path = dir.join("eval.csv");
        let traj_path = dir.join("trajectory.csv");
        let eval_text = std::fs::read_to_string(&eval_path)
            .map_err(|e| Error::io(&eval_path, e))?;
        for line in eval_text.lines().skip(1) {
            combined.push_str(line);
            combined.push('\n');
            println!("{}: {line}", dir.display());
        }
        if let Ok(traj) = std::fs::read_to_string(&traj_path) {
            if let Some(last) = traj.lines().last() {
                if !last.starts_with("epoch") {
                    println!("{}: final epoch {last}", dir.display());
                }
            }
        }
    }
    if let Some(path) = out {
        std::fs::write(path, combined).map_err(|e| Error::io(path, e))?;
        println!("combined results written to {}", path.display());
    }
    Ok(())
}
