use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::fed::Architecture;
use crate::keygen::DEFAULT_ITERATIONS;
use crate::losses::{LossWeights, DEFAULT_CORR_PAIRS};
use crate::noise::{parse_weighted, NoiseSpec};

use super::AdamParams;

pub const DEFAULT_GRAD_CLIP: f64 = 1e4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Side of the square training crops.
    pub image_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamParams,
    pub weights: LossWeights,
    /// Per-step distortion, drawn by weight.
    pub noise: Vec<(NoiseSpec, f64)>,
    pub seed: u64,
    /// Directory of images; `None` trains on procedural images.
    pub dataset: Option<PathBuf>,
    pub arch: Architecture,
    pub kdf_iterations: u32,
    pub corr_pairs: usize,
    pub grad_clip: f64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: 32,
            batch_size: 1,
            steps: 2000,
            adam: AdamParams::default(),
            weights: LossWeights::default(),
            noise: vec![(NoiseSpec::identity(), 1.0)],
            seed: 0,
            dataset: None,
            arch: Architecture::default(),
            kdf_iterations: DEFAULT_ITERATIONS,
            corr_pairs: DEFAULT_CORR_PAIRS,
            grad_clip: DEFAULT_GRAD_CLIP,
            checkpoint_every: 0,
            output_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for `{key}`")))
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 2 != 0 {
            return invalid(format!("image_size must be even and positive, got {}", self.image_size));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return invalid(format!("invalid optimizer settings {a:?}"));
        }
        self.weights.check()?;
        self.arch.check()?;
        if self.noise.is_empty() {
            return invalid("noise configuration is empty");
        }
        if self.kdf_iterations == 0 {
            return invalid("kdf_iterations must be positive");
        }
        if self.corr_pairs < 2 {
            return invalid("corr_pairs must be at least 2");
        }
        if !(self.grad_clip > 0.0) {
            return invalid("grad_clip must be positive");
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. `noise` may repeat,
    /// and the first `noise` line replaces the default.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut noise = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return invalid(format!("line {}: expected key = value", n + 1));
            };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "image_size" => c.image_size = parse(k, v)?,
                "batch_size" => c.batch_size = parse(k, v)?,
                "steps" => c.steps = parse(k, v)?,
                "learning_rate" | "lr" => c.adam.lr = parse(k, v)?,
                "beta1" => c.adam.beta1 = parse(k, v)?,
                "beta2" => c.adam.beta2 = parse(k, v)?,
                "adam_eps" => c.adam.eps = parse(k, v)?,
                "lambda_cipher" => c.weights.cipher = parse(k, v)?,
                "lambda_recovery" => c.weights.recovery = parse(k, v)?,
                "noise" => noise.push(parse_weighted(v)?),
                "seed" => c.seed = parse(k, v)?,
                "dataset" => c.dataset = (!v.is_empty() && v != "synthetic").then(|| PathBuf::from(v)),
                "blocks" => c.arch.blocks = parse(k, v)?,
                "growth" => c.arch.growth = parse(k, v)?,
                "slope" => c.arch.slope = parse(k, v)?,
                "kdf_iterations" => c.kdf_iterations = parse(k, v)?,
                "corr_pairs" => c.corr_pairs = parse(k, v)?,
                "grad_clip" => c.grad_clip = parse(k, v)?,
                "checkpoint_every" => c.checkpoint_every = parse(k, v)?,
                "output_dir" => c.output_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
                other => return invalid(format!("line {}: unknown key `{other}`", n + 1)),
            }
        }
        if !noise.is_empty() {
            c.noise = noise;
        }
        c.check()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// The config as a file [`TrainConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "learning_rate = {:e}", self.adam.lr);
        let _ = writeln!(s, "beta1 = {}", self.adam.beta1);
        let _ = writeln!(s, "beta2 = {}", self.adam.beta2);
        let _ = writeln!(s, "adam_eps = {:e}", self.adam.eps);
        let _ = writeln!(s, "lambda_cipher = {}", self.weights.cipher);
        let _ = writeln!(s, "lambda_recovery = {}", self.weights.recovery);
        for (spec, w) in &self.noise {
            let _ = writeln!(s, "noise = {spec} weight={w}");
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        match &self.dataset {
            Some(p) => {
                let _ = writeln!(s, "dataset = {}", p.display());
            }
            None => s.push_str("dataset = synthetic\n"),
        }
        let _ = writeln!(s, "blocks = {}", self.arch.blocks);
        let _ = writeln!(s, "growth = {}", self.arch.growth);
        let _ = writeln!(s, "slope = {}", self.arch.slope);
        let _ = writeln!(s, "kdf_iterations = {}", self.kdf_iterations);
        let _ = writeln!(s, "corr_pairs = {}", self.corr_pairs);
        let _ = writeln!(s, "grad_clip = {:e}", self.grad_clip);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        if let Some(p) = &self.output_dir {
            let _ = writeln!(s, "output_dir = {}", p.display());
        }
        s
    }
}
