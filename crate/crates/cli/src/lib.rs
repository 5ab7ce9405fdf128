//! Command-line harness: dataset generation, training, attack campaigns,
//! adversarial-training defense and loss-weight ablations.

pub mod campaign;
pub mod commands;
pub mod method;
pub mod setup;

use clap::{Args, Parser, Subcommand};
use sigattack_core::config::{parse_assignment, parse_kv, KeyValues};
use sigattack_core::data::SigImage;
use std::path::{Path, PathBuf};

pub use setup::SplitName;

/// Error for bad invocations detected after argument parsing (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "sigattack", version, about = "White-box attacks on a Siamese signature verifier")]
pub struct Cli {
    /// Worker threads for per-pair work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic signature dataset to PNGs plus a manifest.
    GenData(GenDataArgs),
    /// Train the verifier and fit its decision threshold.
    Train(TrainArgs),
    /// Attack correctly decided pairs and write a campaign report.
    Attack(AttackArgs),
    /// Retrain on a normal/adversarial mix and re-run a campaign's attack.
    Defend(DefendArgs),
    /// Sweep one loss weight of the proposed attack.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub writers: usize,
    #[arg(long, default_value_t = 12)]
    pub genuine: usize,
    #[arg(long, default_value_t = 12)]
    pub forged: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory receiving model.bin, threshold.json and the loss curve.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 14)]
    pub train_writers: usize,
    /// Similar and dissimilar pairs drawn per writer.
    #[arg(long, default_value_t = 24)]
    pub pairs_per_class: usize,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Seeds weight init, batch order and the writer split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Flat `key=value` method settings from a file and the command line.
#[derive(Debug, Args, Clone, Default)]
pub struct SettingsArgs {
    /// File of `key=value` lines; `--set` entries override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// A `key=value` setting, e.g. `--set method=pgd --set epsilon=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl SettingsArgs {
    pub fn resolve(&self) -> anyhow::Result<KeyValues> {
        let mut kv = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
                parse_kv(&text)?
            }
            None => KeyValues::new(),
        };
        for s in &self.set {
            let (k, v) = parse_assignment(s)?;
            kv.insert(k, v);
        }
        Ok(kv)
    }
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding model.bin and threshold.json.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Attack at most this many pairs per direction (seeded sample).
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip adversarial and triptych PNGs.
    #[arg(long)]
    pub no_images: bool,
    #[command(flatten)]
    pub settings: SettingsArgs,
}

#[derive(Debug, Args)]
pub struct DefendArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory of a prior `attack` run with images.
    #[arg(long)]
    pub campaign: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Job label to retrain against and re-run; defaults to the first FP job.
    #[arg(long)]
    pub job: Option<String>,
    /// Normal:adversarial pairs per batch.
    #[arg(long, default_value = "7:3")]
    pub ratio: String,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One of alpha, beta, gamma, delta.
    #[arg(long)]
    pub weight: String,
    /// Explicit values to sweep instead of {0, p/10, p, 10p} around the preset p.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub settings: SettingsArgs,
}

/// Runs a parsed command.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let jobs = cli.jobs.max(1);
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Attack(a) => commands::attack(&a, jobs),
        Command::Defend(a) => commands::defend(&a, jobs),
        Command::Ablate(a) => commands::ablate(&a, jobs),
    }
}

/// Process exit code for an error: 2 for usage and configuration problems,
/// 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(sigattack_core::Error::Config(_)) = cause.downcast_ref::<sigattack_core::Error>() {
            return 2;
        }
    }
    1
}

/// Side-by-side strip: genuine | start | adversarial | rescaled |adv - start|.
pub fn triptych(genuine: &SigImage, start: &SigImage, adversarial: &SigImage) -> SigImage {
    const GUTTER: usize = 2;
    let (h, w) = (start.height, start.width);
    let diff: Vec<f64> = adversarial.pixels.iter().zip(&start.pixels).map(|(a, b)| (a - b).abs()).collect();
    let peak = diff.iter().cloned().fold(0.0, f64::max);
    let heat: Vec<f64> = diff.iter().map(|d| if peak > 0.0 { d / peak } else { 0.0 }).collect();
    let panels: [&[f64]; 4] = [&genuine.pixels, &start.pixels, &adversarial.pixels, &heat];
    let total_w = 4 * w + 3 * GUTTER;
    let mut pixels = vec![0.5; h * total_w];
    for (p, panel) in panels.iter().enumerate() {
        let x0 = p * (w + GUTTER);
        for y in 0..h {
            pixels[y * total_w + x0..y * total_w + x0 + w].copy_from_slice(&panel[y * w..(y + 1) * w]);
        }
    }
    SigImage::new(h, total_w, pixels).expect("triptych geometry")
}

pub(crate) fn ensure_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| anyhow::anyhow!("creating {}: {e}", path.display()))
}
