//! Per-image and corpus evaluation: recovery quality, cipher statistics and
//! wrong-key divergence.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::fed::FedModel;
use crate::keygen::{perturb_key, DEFAULT_ITERATIONS};
use crate::metrics::{npcr_uaci, quality_metrics, render8, summarize, CorpusSummary, MetricsReport, DEFAULT_METRIC_PAIRS};
use crate::noise::NoiseSpec;
use crate::pipeline::{backward_with_context, forward_with_context, PipelineContext};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub noise: NoiseSpec,
    /// Number of 1-bit-perturbed passwords tried per image.
    pub key_trials: usize,
    pub corr_pairs: usize,
    pub kdf_iterations: u32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            noise: NoiseSpec::identity(),
            key_trials: 1,
            corr_pairs: DEFAULT_METRIC_PAIRS,
            kdf_iterations: DEFAULT_ITERATIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEvaluation {
    /// Quality of the correct-key recovery, cipher statistics, and NPCR/UACI
    /// of wrong-key against correct-key recoveries averaged over the trials.
    pub report: MetricsReport,
    /// Mean PSNR of the wrong-key recoveries against the plain image.
    pub wrong_key_psnr: Option<f64>,
}

fn to_unit(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Encrypts under `password`, distorts with `opts.noise`, decrypts with the
/// right password and with `opts.key_trials` single-bit perturbations of it.
pub fn evaluate_image(
    model: &FedModel<f32>,
    image: &Tensor<f32>,
    password: &[u8],
    opts: &EvalOptions,
    rng: &mut impl Rng,
) -> Result<ImageEvaluation> {
    let (_, h, w) = image.dims3()?;
    let ctx = PipelineContext::with_iterations(model, password, w, h, opts.kdf_iterations)?;
    let noise = opts.noise.clone().with_seed(rng.gen());
    let fwd = forward_with_context(&ctx, image, &noise)?;
    let recovered = to_unit(&backward_with_context(&ctx, &fwd.degraded)?);
    let mut report = MetricsReport::default()
        .with_quality(&quality_metrics(image, &recovered)?)
        .with_cipher_stats(&fwd.cipher_rendering, opts.corr_pairs, rng)?;
    if opts.key_trials == 0 {
        return Ok(ImageEvaluation {
            report,
            wrong_key_psnr: None,
        });
    }
    if password.is_empty() {
        return invalid("wrong-key trials need a non-empty password");
    }
    let right8 = render8(&recovered)?;
    let (mut npcr, mut uaci, mut psnr) = (0.0, 0.0, 0.0);
    for _ in 0..opts.key_trials {
        let wrong = perturb_key(password, rng.gen_range(0..password.len() * 8))?;
        let wctx = PipelineContext::with_iterations(model, &wrong, w, h, opts.kdf_iterations)?;
        let bad = to_unit(&backward_with_context(&wctx, &fwd.degraded)?);
        let d = npcr_uaci(&render8(&bad)?, &right8)?;
        npcr += d.npcr;
        uaci += d.uaci;
        psnr += quality_metrics(image, &bad)?.psnr;
    }
    let n = opts.key_trials as f64;
    report.npcr = Some(npcr / n);
    report.uaci = Some(uaci / n);
    Ok(ImageEvaluation {
        report,
        wrong_key_psnr: Some(psnr / n),
    })
}

/// Evaluates every image with its own password and summarizes the reports.
pub fn evaluate_corpus(
    model: &FedModel<f32>,
    images: &[(Tensor<f32>, Vec<u8>)],
    opts: &EvalOptions,
    rng: &mut impl Rng,
) -> Result<(Vec<ImageEvaluation>, CorpusSummary)> {
    let evals = images
        .iter()
        .map(|(img, pw)| evaluate_image(model, img, pw, opts, rng))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = evals.iter().map(|e| e.report).collect();
    let summary = summarize(&reports);
    Ok((evals, summary))
}
