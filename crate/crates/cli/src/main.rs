//! `msd`: score captions against images with vMF mixture divergences.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use msd_core::MsdError;

use config::ConfigArgs;

#[derive(Debug, Parser)]
#[command(name = "msd", version, about = "Mixture-divergence caption scoring")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Soft-MSD scores for every candidate of every manifest record.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        /// Score file (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise accuracy with buckets, bootstrap intervals and McNemar.
    Pairwise {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Field under test.
        #[arg(long, default_value = "soft_msd")]
        metric: String,
        /// Field compared against.
        #[arg(long, default_value = "global")]
        baseline: String,
        /// Equal-count cosine-margin bins.
        #[arg(long, default_value_t = 5)]
        bins: usize,
        /// Caption-length bucket edges.
        #[arg(long, value_delimiter = ',', default_value = "10,20,40")]
        length_edges: Vec<usize>,
        /// Bootstrap resamples; 0 disables intervals.
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        /// Cosine gap above which the rank-aggregation baseline trusts cosine.
        #[arg(long, default_value_t = 0.05)]
        tau_r: f64,
    },
    /// Agreement with human preferences, per caption and per model.
    Agree {
        #[arg(long)]
        scores: PathBuf,
        /// Manifest whose records carry `human` labels.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "soft_msd")]
        field: String,
    },
    /// Coverage, penalty and support maps for one caption.
    Attribute {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        cand: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Bi-KL change after masking the patches ranked highest or lowest.
    MaskProbe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        /// Any of top, bottom, random.
        #[arg(long, value_delimiter = ',', default_value = "top,bottom,random")]
        modes: Vec<String>,
        /// Ranking map: penalty, coverage or support.
        #[arg(long, default_value = "penalty")]
        map: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Planted-pair dataset as containers plus a manifest.
    Synth {
        /// JSON dataset description.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Seed stability and responsibility entropy of EM on one container.
    EmDiag {
        #[arg(long)]
        container: PathBuf,
        #[arg(long)]
        k: usize,
        /// Number of seeds.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// Concentrations to sweep; defaults to the configured kappa.
        #[arg(long, value_delimiter = ',')]
        kappas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Score { .. } => "score",
            Command::Pairwise { .. } => "pairwise",
            Command::Agree { .. } => "agree",
            Command::Attribute { .. } => "attribute",
            Command::MaskProbe { .. } => "mask-probe",
            Command::Synth { .. } => "synth",
            Command::EmDiag { .. } => "em-diag",
        }
    }
}

/// 2 for bad input or configuration, 1 for I/O and other runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<MsdError>()) {
        Some(MsdError::Io(_)) | None => 1,
        Some(_) => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = cli.config.resolve()?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    eprintln!("# msd {} started at unix {stamp}", cli.command.name());
    eprint!("{}", settings.describe());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads)
        .build()?;
    pool.install(|| match cli.command {
        Command::Score { manifest, out } => commands::score(&settings, &manifest, &out),
        Command::Pairwise {
            scores,
            out_dir,
            metric,
            baseline,
            bins,
            length_edges,
            bootstrap,
            tau_r,
        } => commands::pairwise(
            &settings,
            &commands::PairwiseOptions {
                scores,
                out_dir,
                metric,
                baseline,
                bins,
                length_edges,
                bootstrap,
                tau_r,
            },
        ),
        Command::Agree {
            scores,
            labels,
            out_dir,
            field,
        } => commands::agree(&settings, &scores, &labels, &out_dir, &field),
        Command::Attribute {
            manifest,
            id,
            cand,
            out_dir,
        } => commands::attribute(&settings, &manifest, &id, &cand, &out_dir),
        Command::MaskProbe {
            manifest,
            fraction,
            modes,
            map,
            out_dir,
        } => commands::mask_probe(&settings, &manifest, fraction, &modes, &map, &out_dir),
        Command::Synth { spec, out_dir } => commands::synth(&spec, &out_dir),
        Command::EmDiag {
            container,
            k,
            seeds,
            kappas,
            out,
        } => commands::em_diag(&settings, &container, k, seeds, &kappas, &out),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
