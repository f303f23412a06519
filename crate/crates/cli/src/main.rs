//! `malvis`: corpus generation, training, obfuscation, explanations and the
//! robustness experiments from one binary.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "malvis", version, about = "Byte-image malware classification and robustness experiments")]
pub struct Cli {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and MALVIS_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObfuscateMode {
    Pack,
    Morph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Occlusion,
    Hirescam,
    Shap,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Partition {
    All,
    Train,
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labelled synthetic corpus.
    GenCorpus {
        /// Family spec (TOML, or JSON by extension); the config's corpus otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every sample as a full-resolution byte-plot PGM.
    Convert {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training partition of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Which split partition to score; `all` uses every sample.
        #[arg(long, value_enum, default_value = "all")]
        partition: Partition,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pack or morph every base sample of a manifest.
    Obfuscate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: ObfuscateMode,
        /// Morph passes; the config value when omitted.
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append packed and morphed copies of random subsets.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pack_fraction: Option<f64>,
        #[arg(long)]
        morph_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Heatmaps for one sample or cumulative maps for one class.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, conflicts_with = "class", required_unless_present = "class")]
        sample: Option<String>,
        #[arg(long)]
        class: Option<String>,
        #[arg(long, value_enum, default_value = "all")]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full robustness experiment and write the report.
    Experiment {
        /// Use this corpus instead of generating one from the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory; the config's out_dir when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
