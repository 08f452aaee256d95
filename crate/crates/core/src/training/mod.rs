//! Desk-scale optimization of the invertible network under the weighted
//! cipher and triplet objective.

mod adam;
mod config;
mod dataset;

pub use adam::{adam_step, AdamParams, AdamState};
pub use config::{TrainConfig, DEFAULT_GRAD_CLIP};
pub use dataset::Dataset;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::fed::{save_weights, write_atomic, FedModel};
use crate::keygen::{perturb_key, KeySchedule};
use crate::losses::{total_loss, LossTerms, LossWeights};
use crate::noise::{apply_noise, sample_noise_for_training, NoiseSpec};
use crate::numerics::{Ops, Real, Tape, Tensor, Var};
use crate::pipeline::{decrypt_ops, encrypt_ops};
use crate::splitmerge::SplitLayout;

pub const PASSWORD_BYTES: usize = 16;
pub const LOG_HEADER: &str = "step,cipher_loss,triplet_loss,total,grad_norm,clip_flag";

/// Loss breakdown and gradient statistics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub cipher_loss: f64,
    pub triplet_loss: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

impl StepReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.cipher_loss,
            self.triplet_loss,
            self.total,
            self.grad_norm,
            u8::from(self.clipped)
        )
    }
}

/// Everything random about one image's pass, drawn up front.
#[derive(Clone, Debug)]
pub struct Episode {
    pub password: Vec<u8>,
    pub wrong_password: Vec<u8>,
    pub noise: NoiseSpec,
    pub pair_seed: u64,
}

impl Episode {
    pub fn sample(config: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut password = vec![0u8; PASSWORD_BYTES];
        rng.fill(password.as_mut_slice());
        let wrong_password = perturb_key(&password, rng.gen_range(0..PASSWORD_BYTES * 8))?;
        let noise = sample_noise_for_training(&config.noise, rng)?.with_seed(rng.gen());
        Ok(Episode {
            password,
            wrong_password,
            noise,
            pair_seed: rng.gen(),
        })
    }
}

/// Component losses of one image and the gradient of its total, indexed
/// like [`FedModel::params`].
pub struct ImageLoss {
    pub cipher: f64,
    pub triplet: f64,
    pub total: f64,
    pub grads: Option<Vec<Tensor<f32>>>,
}

/// Records the full training objective on `tape`: encrypt under `right`,
/// score the min-max rendering, distort, decrypt under `right` and `wrong`,
/// clamp both recoveries to `[0, 1]` and score the triplet against the
/// plain image.
#[allow(clippy::too_many_arguments)]
pub fn record_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &FedModel<T>,
    image: &Tensor<T>,
    right: &KeySchedule,
    wrong: &KeySchedule,
    noise: &NoiseSpec,
    weights: &LossWeights,
    corr_pairs: usize,
    pair_seed: u64,
) -> Result<LossTerms<Var>> {
    let (right_layout, wrong_layout) = (SplitLayout::new(&right.mask), SplitLayout::new(&wrong.mask));
    let (right_key, wrong_key) = (right.secret.tensor().cast::<T>(), wrong.secret.tensor().cast::<T>());
    let plain = tape.constant(image.clone());
    let (cipher, _, _) = encrypt_ops(tape, model, &right_layout, &right_key, &plain)?;
    let rendering = tape.minmax_normalize(&cipher)?;
    let degraded = apply_noise(tape, &cipher, noise)?;
    let positive = decrypt_ops(tape, model, &right_layout, &right_key, &degraded)?;
    let negative = decrypt_ops(tape, model, &wrong_layout, &wrong_key, &degraded)?;
    let positive = tape.clamp(&positive, T::lit(0.0), T::lit(1.0));
    let negative = tape.clamp(&negative, T::lit(0.0), T::lit(1.0));
    let mut pair_rng = ChaCha8Rng::seed_from_u64(pair_seed);
    total_loss(tape, &rendering, &plain, &positive, &negative, weights, corr_pairs, &mut pair_rng)
}

/// Loss of one image under one episode, with gradients if asked.
pub fn image_loss(
    model: &FedModel<f32>,
    image: &Tensor<f32>,
    episode: &Episode,
    config: &TrainConfig,
    want_grads: bool,
) -> Result<ImageLoss> {
    let (_, h, w) = image.dims3()?;
    let right = KeySchedule::derive_with(&episode.password, w, h, config.kdf_iterations)?;
    let wrong = KeySchedule::derive_with(&episode.wrong_password, w, h, config.kdf_iterations)?;
    let mut tape = Tape::<f32>::new();
    let terms = record_loss(
        &mut tape,
        model,
        image,
        &right,
        &wrong,
        &episode.noise,
        &config.weights,
        config.corr_pairs,
        episode.pair_seed,
    )?;
    let (cipher_l, triplet_l, total_l) = (
        f64::from(tape.value(&terms.cipher).item()),
        f64::from(tape.value(&terms.triplet).item()),
        f64::from(tape.value(&terms.total).item()),
    );
    let grads = if want_grads && total_l.is_finite() {
        let g = tape.backward(terms.total)?;
        Some(
            model
                .params()
                .iter()
                .enumerate()
                .map(|(id, p)| g.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect(),
        )
    } else {
        None
    };
    Ok(ImageLoss {
        cipher: cipher_l,
        triplet: triplet_l,
        total: total_l,
        grads,
    })
}

fn check_batch(batch: &[Tensor<f32>]) -> Result<()> {
    if batch.is_empty() {
        return invalid("empty training batch");
    }
    for img in batch {
        let (c, h, w) = img.dims3()?;
        if c != 3 || w % 2 != 0 || h == 0 || w == 0 {
            return invalid(format!("training images need 3 channels and even width, got {c}x{h}x{w}"));
        }
        if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("training images must lie in [0, 1]");
        }
    }
    Ok(())
}

/// One optimizer step on the batch mean of the total loss.
pub fn train_step(
    batch: &[Tensor<f32>],
    model: &mut FedModel<f32>,
    state: &mut AdamState,
    config: &TrainConfig,
    step: usize,
    rng: &mut impl Rng,
) -> Result<StepReport> {
    check_batch(batch)?;
    let n = batch.len() as f64;
    let mut acc: Vec<Tensor<f32>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let (mut cipher, mut triplet, mut total) = (0.0, 0.0, 0.0);
    for image in batch {
        let episode = Episode::sample(config, rng)?;
        let l = image_loss(model, image, &episode, config, true)?;
        if !(l.cipher.is_finite() && l.triplet.is_finite() && l.total.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                cipher_loss: l.cipher,
                triplet_loss: l.triplet,
            });
        }
        cipher += l.cipher / n;
        triplet += l.triplet / n;
        total += l.total / n;
        for (a, g) in acc.iter_mut().zip(l.grads.expect("gradients requested")) {
            let s = (1.0 / n) as f32;
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += s * y;
            }
        }
    }
    let grad_norm = acc
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            cipher_loss: cipher,
            triplet_loss: triplet,
        });
    }
    let clipped = grad_norm > config.grad_clip;
    if clipped {
        let s = (config.grad_clip / grad_norm) as f32;
        for t in &mut acc {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    adam_step(&mut model.params_mut(), &acc, state, &config.adam)?;
    Ok(StepReport {
        step,
        cipher_loss: cipher,
        triplet_loss: triplet,
        total,
        grad_norm,
        clipped,
    })
}

/// Mean component losses of `model` on fixed images and episodes, without
/// gradients. Use the same `seed` to compare models.
pub fn evaluate_loss(model: &FedModel<f32>, images: &[Tensor<f32>], config: &TrainConfig, seed: u64) -> Result<(f64, f64, f64)> {
    check_batch(images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = images.len() as f64;
    let (mut c, mut t, mut s) = (0.0, 0.0, 0.0);
    for img in images {
        let ep = Episode::sample(config, &mut rng)?;
        let l = image_loss(model, img, &ep, config, false)?;
        c += l.cipher / n;
        t += l.triplet / n;
        s += l.total / n;
    }
    Ok((c, t, s))
}

pub struct TrainOutcome {
    pub model: FedModel<f32>,
    pub log: Vec<StepReport>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.fcw"))
}

pub fn render_log(log: &[StepReport]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Trains from a fresh initialization derived from `config.seed`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(config, |_| {})
}

/// As [`train`], calling `on_step` after every step.
pub fn train_with(config: &TrainConfig, mut on_step: impl FnMut(&StepReport)) -> Result<TrainOutcome> {
    config.check()?;
    let dataset = match &config.dataset {
        Some(dir) => Dataset::from_dir(dir, config.image_size)?,
        None => Dataset::Synthetic,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = FedModel::init(config.arch, rng.gen())?;
    let mut state = AdamState::new(&model.params());
    if let Some(dir) = &config.output_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();
    for step in 0..config.steps {
        let batch = (0..config.batch_size)
            .map(|_| dataset.draw(config.image_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let report = train_step(&batch, &mut model, &mut state, config, step, &mut rng)?;
        on_step(&report);
        log.push(report);
        if let Some(dir) = &config.output_dir {
            let done = step + 1;
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                let p = checkpoint_path(dir, done);
                save_weights(&model, &p)?;
                checkpoints.push(p);
                write_atomic(&dir.join("train_log.csv"), render_log(&log).as_bytes())?;
            }
        }
    }
    if let Some(dir) = &config.output_dir {
        let p = dir.join("model.fcw");
        save_weights(&model, &p)?;
        checkpoints.push(p);
        write_atomic(&dir.join("train_log.csv"), render_log(&log).as_bytes())?;
        write_atomic(&dir.join("train_config.txt"), config.to_text().as_bytes())?;
    }
    Ok(TrainOutcome { model, log, checkpoints })
}
