//! `sulcal-ssl`: synthesize skeleton corpora, train contrastive models, embed,
//! probe and sweep hyperparameter grids.
//!
//! Exit codes: 0 on success, 1 on a runtime or contract failure, 2 on a usage
//! error. `SULCAL_SSL_THREADS` caps the number of worker threads; results do
//! not depend on it.

mod commands;
mod config;
mod grid;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sulcal_ssl::augment::{AugmentSpec, Strategy};
use sulcal_ssl::contrastive::Representation;
use sulcal_ssl::nn::HeadKind;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] sulcal_ssl::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "sulcal-ssl",
    version,
    about = "Contrastive learning on cortical-fold skeleton crops"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic skeleton corpus
    Synth(SynthCmd),
    /// Train a contrastive model on a corpus
    Train(TrainCmd),
    /// Embed a corpus with a trained checkpoint
    Embed(EmbedCmd),
    /// Fit the linear probe on embeddings and report the AUC
    Probe(ProbeCmd),
    /// Train and evaluate one model per grid cell (resumable)
    Gridsearch(GridCmd),
    /// Probe several checkpoints on one split and summarize their AUCs
    Report(ReportCmd),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON run configuration; flags given on the command line win
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthCmd {
    #[command(flatten)]
    config: ConfigArg,
    /// Output corpus directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of subjects [default: 100]
    #[arg(long)]
    n: Option<usize>,
    /// Fraction of double-parallel (label 1) subjects [default: 0.3]
    #[arg(long)]
    prevalence: Option<f64>,
    /// Corpus seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Mean fraction of non-zero voxels [default: 0.04]
    #[arg(long)]
    target_sparsity: Option<f64>,
    /// Amplitude of the positional wobble of each sheet, in mm [default: 2.0]
    #[arg(long)]
    jitter_mm: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainFlags {
    /// Adam learning rate [default: 0.0004]
    #[arg(long)]
    lr: Option<f64>,
    /// Subjects per batch (2N views) [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// NT-Xent temperature [default: 0.5]
    #[arg(long)]
    tau: Option<f64>,
    /// Training epochs [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// Latent dimension d [default: 10]
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Projection head: linear or nonlinear [default: linear]
    #[arg(long)]
    head: Option<HeadKind>,
    /// Augmentation: cutout or branch_clip [default: branch_clip]
    #[arg(long)]
    augment: Option<Strategy>,
    /// Cutout block edge as a fraction of each volume edge [default: 0.55]
    #[arg(long)]
    cutout_frac: Option<f64>,
    /// Minimum removed voxel fraction for branch clipping [default: 0.40]
    #[arg(long)]
    clip_frac: Option<f64>,
    /// Largest rotation about each axis, in degrees [default: 6]
    #[arg(long)]
    max_rotation_deg: Option<f64>,
    /// Keep bottom-line voxels [default: true for cutout, false for branch_clip]
    #[arg(long)]
    keep_bottom: Option<bool>,
    /// Dropout rate after every convolution [default: 0.05]
    #[arg(long)]
    dropout: Option<f64>,
    /// Training seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated channels of the six convolutions [default: 4,8,8,8,8,8]
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Comma-separated strides of the six convolutions [default: 2,2,2,1,1,1]
    #[arg(long, value_delimiter = ',')]
    strides: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct ProbeFlags {
    /// Probe hinge-term weight C [default: 1.0]
    #[arg(long)]
    c: Option<f64>,
    /// Fraction of each stratum used to fit the probe [default: 0.5]
    #[arg(long)]
    split_frac: Option<f64>,
    /// Seed of the stratified split [default: 0]
    #[arg(long)]
    split_seed: Option<u64>,
    /// Representation to probe: latent or projection [default: latent]
    #[arg(long)]
    representation: Option<Representation>,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    config: ConfigArg,
    /// Corpus directory (with manifest.csv)
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output root; artifacts go to <out>/<run-id>/
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name [default: seed-<seed>]
    #[arg(long)]
    run_id: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    probe: ProbeFlags,
}

#[derive(Args, Debug)]
struct EmbedCmd {
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoint file
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory (with manifest.csv)
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output embeddings CSV
    #[arg(long)]
    out: PathBuf,
    /// Representation: latent or projection [default: latent]
    #[arg(long)]
    representation: Option<Representation>,
}

#[derive(Args, Debug)]
struct ProbeCmd {
    #[command(flatten)]
    config: ConfigArg,
    /// Embeddings CSV
    #[arg(long)]
    embeddings: PathBuf,
    /// Corpus directory whose manifest holds labels and strata
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Existing split CSV (subject_id,part); drawn from the manifest otherwise
    #[arg(long)]
    split: Option<PathBuf>,
    /// Where to write the split that was used
    #[arg(long)]
    split_out: Option<PathBuf>,
    /// Report JSON path
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    probe: ProbeFlags,
}

#[derive(Args, Debug)]
struct ReportCmd {
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoints to evaluate
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    /// Corpus directory (with manifest.csv)
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Report JSON path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plot-ready CSV (seed,auc)
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also probe a PCA baseline with this many components
    #[arg(long)]
    pca_dim: Option<usize>,
    #[command(flatten)]
    probe: ProbeFlags,
}

#[derive(Args, Debug)]
struct GridCmd {
    #[command(flatten)]
    config: ConfigArg,
    /// Corpus directory (with manifest.csv)
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output root; the sweep lives in <out>/<run-id>/
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sweep directory name [default: grid]
    #[arg(long)]
    run_id: Option<String>,
    /// Learning rates to sweep, e.g. 2e-4,4e-4
    #[arg(long, value_delimiter = ',')]
    grid_lr: Option<Vec<f64>>,
    /// Batch sizes to sweep, e.g. 16,32
    #[arg(long, value_delimiter = ',')]
    grid_batch_size: Option<Vec<usize>>,
    /// Cutout fractions to sweep, e.g. 0.30,0.45,0.55
    #[arg(long, value_delimiter = ',')]
    grid_cutout_frac: Option<Vec<f64>>,
    /// Branch clipping fractions to sweep, e.g. 0.30,0.40,0.50
    #[arg(long, value_delimiter = ',')]
    grid_clip_frac: Option<Vec<f64>>,
    /// Dropout rates to sweep, e.g. 0,0.05,0.1
    #[arg(long, value_delimiter = ',')]
    grid_dropout: Option<Vec<f64>>,
    /// Latent sizes to sweep, e.g. 4,10,30
    #[arg(long, value_delimiter = ',')]
    grid_latent_dim: Option<Vec<usize>>,
    /// Heads to sweep, e.g. linear,nonlinear
    #[arg(long, value_delimiter = ',')]
    grid_head: Option<Vec<HeadKind>>,
    /// Augmentations to sweep, e.g. cutout,branch_clip
    #[arg(long, value_delimiter = ',')]
    grid_augment: Option<Vec<Strategy>>,
    /// Models per cell [default: 1]
    #[arg(long)]
    repeats: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    probe: ProbeFlags,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl TrainFlags {
    fn apply(self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.lr, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.tau, self.tau);
        set(&mut t.epochs, self.epochs);
        set(&mut t.latent_dim, self.latent_dim);
        set(&mut t.head, self.head);
        if let Some(s) = self.augment {
            if s != t.augment.strategy {
                // Switching strategy brings its own bottom-voxel policy.
                t.augment.strategy = s;
                t.augment.keep_bottom = AugmentSpec::for_strategy(s).keep_bottom;
            }
        }
        set(&mut t.augment.cutout_frac, self.cutout_frac);
        set(&mut t.augment.clip_frac, self.clip_frac);
        set(&mut t.augment.max_rotation_deg, self.max_rotation_deg);
        set(&mut t.augment.keep_bottom, self.keep_bottom);
        set(&mut t.dropout_p, self.dropout);
        set(&mut t.seed, self.seed);
        set(&mut t.channels, self.channels);
        set(&mut t.strides, self.strides);
    }
}

impl ProbeFlags {
    fn apply(self, cfg: &mut RunConfig) {
        let p = &mut cfg.probe;
        set(&mut p.c, self.c);
        set(&mut p.split_frac, self.split_frac);
        set(&mut p.split_seed, self.split_seed);
        set(&mut p.representation, self.representation);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = RunConfig::load(a.config.config.as_deref())?;
            let s = &mut cfg.synth;
            set(&mut s.n_subjects, a.n);
            set(&mut s.prevalence, a.prevalence);
            set(&mut s.seed, a.seed);
            set(&mut s.target_sparsity, a.target_sparsity);
            set(&mut s.jitter_mm, a.jitter_mm);
            if a.out.is_some() {
                cfg.paths.out = a.out;
            }
            commands::synth(&cfg)
        }
        Command::Train(a) => {
            let mut cfg = RunConfig::load(a.config.config.as_deref())?;
            set(&mut cfg.paths.corpus, a.corpus.map(Some));
            set(&mut cfg.paths.out, a.out.map(Some));
            set(&mut cfg.paths.run_id, a.run_id.map(Some));
            a.train.apply(&mut cfg);
            a.probe.apply(&mut cfg);
            commands::train(&cfg)
        }
        Command::Embed(a) => {
            let mut cfg = RunConfig::load(a.config.config.as_deref())?;
            set(&mut cfg.paths.corpus, a.corpus.map(Some));
            set(&mut cfg.probe.representation, a.representation);
            commands::embed(&cfg, &a.checkpoint, &a.out)
        }
        Command::Probe(a) => {
            let mut cfg = RunConfig::load(a.config.config.as_deref())?;
            set(&mut cfg.paths.corpus, a.corpus.map(Some));
            a.probe.apply(&mut cfg);
            commands::probe(
                &cfg,
                &a.embeddings,
                a.split.as_deref(),
                a.split_out.as_deref(),
                a.out.as_deref(),
            )
        }
        Command::Report(a) => {
            let mut cfg = RunConfig::load(a.config.config.as_deref())?;
            set(&mut cfg.paths.corpus, a.corpus.map(Some));
            a.probe.apply(&mut cfg);
            commands::report(
                &cfg,
                &a.checkpoints,
                a.out.as_deref(),
                a.csv.as_deref(),
                a.pca_dim,
            )
        }
        Command::Gridsearch(a) => {
            let mut cfg = RunConfig::load(a.config.config.as_deref())?;
            set(&mut cfg.paths.corpus, a.corpus.map(Some));
            set(&mut cfg.paths.out, a.out.map(Some));
            set(&mut cfg.paths.run_id, a.run_id.map(Some));
            let g = &mut cfg.grid;
            set(&mut g.lr, a.grid_lr);
            set(&mut g.batch_size, a.grid_batch_size);
            set(&mut g.cutout_frac, a.grid_cutout_frac);
            set(&mut g.clip_frac, a.grid_clip_frac);
            set(&mut g.dropout_p, a.grid_dropout);
            set(&mut g.latent_dim, a.grid_latent_dim);
            set(&mut g.head, a.grid_head);
            set(&mut g.augment, a.grid_augment);
            set(&mut g.repeats, a.repeats);
            a.train.apply(&mut cfg);
            a.probe.apply(&mut cfg);
            grid::gridsearch(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
