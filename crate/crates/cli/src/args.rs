use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "inncrypt", version, about = "Password-keyed image encryption with an invertible network")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Print progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, the final model.fcw and a loss log.
    Train(TrainArgs),
    /// Encrypt an image into a .fcf container.
    Encrypt(EncryptArgs),
    /// Decrypt a .fcf container. A wrong password still yields an image.
    Decrypt(DecryptArgs),
    /// Measure recovery quality, cipher statistics and key sensitivity on a directory of images.
    Evaluate(EvaluateArgs),
    /// Show what a password derives for one image size.
    Keyinfo(KeyinfoArgs),
}

#[derive(Debug, Args)]
#[group(id = "password_source", required = true, multiple = false)]
pub struct PasswordArgs {
    #[arg(long, group = "password_source")]
    pub password: Option<String>,

    /// File holding the password; one trailing newline is ignored.
    #[arg(long, group = "password_source")]
    pub password_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key = value configuration file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Output directory for checkpoints, model.fcw and train_log.csv.
    #[arg(long)]
    pub out_dir: PathBuf,

    /// Directory of training images; synthetic images are used when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,

    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub image_size: Option<usize>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub learning_rate: Option<f64>,

    /// Training noise, e.g. "kind=gaussian_noise sigma=0.03 weight=1". Repeatable.
    #[arg(long)]
    pub noise: Vec<String>,

    #[arg(long)]
    pub blocks: Option<usize>,

    #[arg(long)]
    pub growth: Option<usize>,

    #[arg(long)]
    pub checkpoint_every: Option<usize>,

    /// Key-derivation iterations used for training passwords.
    #[arg(long)]
    pub kdf_iterations: Option<u32>,
}

#[derive(Debug, Args)]
pub struct EncryptArgs {
    #[arg(long)]
    pub image: PathBuf,

    #[arg(long)]
    pub model: PathBuf,

    #[command(flatten)]
    pub password: PasswordArgs,

    #[arg(long)]
    pub out: PathBuf,

    /// 8-bit PNG/PPM picture of the cipher.
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecryptArgs {
    #[arg(long)]
    pub cipher: PathBuf,

    #[arg(long)]
    pub model: PathBuf,

    #[command(flatten)]
    pub password: PasswordArgs,

    /// Recovered image, clamped to [0, 1] and stored as 8-bit PNG/PPM.
    #[arg(long)]
    pub out: PathBuf,

    /// Also write the unclamped float recovery as PFM.
    #[arg(long)]
    pub float_out: Option<PathBuf>,

    /// Print recovery quality against this original image.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,

    /// Directory of PNG/PPM images, evaluated in file-name order.
    #[arg(long)]
    pub images: PathBuf,

    /// Single-bit-perturbed passwords tried per image.
    #[arg(long, default_value_t = 1)]
    pub password_trials: usize,

    /// Distortion applied to each cipher before decryption.
    #[arg(long, default_value = "kind=identity")]
    pub noise: String,

    /// Password used for every image; random per image when absent.
    #[arg(long)]
    pub password: Option<String>,

    /// Output directory for per_image.csv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KeyinfoArgs {
    #[command(flatten)]
    pub password: PasswordArgs,

    #[arg(long)]
    pub width: usize,

    #[arg(long)]
    pub height: usize,

    /// Also report how far a password with this bit flipped moves the mask.
    #[arg(long)]
    pub flip_bit: Option<usize>,
}
