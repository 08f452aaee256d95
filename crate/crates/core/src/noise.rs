//! Distortion channel applied to cipher canvases between encryption and
//! decryption.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::numerics::kernels::{gaussian_taps, zigzag_order, DCT_BLOCK};
use crate::numerics::{Ops, Real, Tensor};

pub const MIN_QUALITY: f64 = 10.0;
pub const MAX_QUALITY: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    Identity,
    /// Blockwise DCT keeping a zig-zag prefix whose length grows linearly with quality.
    JpegSs { quality: f64 },
    /// Additive `N(0, sigma^2)` relative to the canvas range.
    GaussianNoise { sigma: f64 },
    GaussianBlur { sigma: f64 },
    MedianBlur { window: usize },
    /// One random rectangle of area fraction `ratio` set to zero.
    Cropout { ratio: f64 },
    /// Exactly `floor(ratio * H * W)` random pixels set to zero.
    Dropout { ratio: f64 },
    /// Exactly `floor(ratio * H * W)` random pixels set to the canvas max or min.
    SaltPepper { ratio: f64 },
    /// Keeps one random rectangle of area fraction `1 - ratio`, zeroing the rest.
    RandomCrop { ratio: f64 },
}

/// A distortion and the seed of its randomness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Identity => "identity",
            NoiseKind::JpegSs { .. } => "jpeg_ss",
            NoiseKind::GaussianNoise { .. } => "gaussian_noise",
            NoiseKind::GaussianBlur { .. } => "gaussian_blur",
            NoiseKind::MedianBlur { .. } => "median_blur",
            NoiseKind::Cropout { .. } => "cropout",
            NoiseKind::Dropout { .. } => "dropout",
            NoiseKind::SaltPepper { .. } => "salt_pepper",
            NoiseKind::RandomCrop { .. } => "random_crop",
        }
    }

    pub fn check(&self) -> Result<()> {
        let ratio_ok = |r: f64| (0.0..1.0).contains(&r);
        let sigma_ok = |s: f64| s > 0.0 && s.is_finite();
        let ok = match *self {
            NoiseKind::Identity => true,
            NoiseKind::JpegSs { quality } => (MIN_QUALITY..=MAX_QUALITY).contains(&quality),
            NoiseKind::GaussianNoise { sigma } | NoiseKind::GaussianBlur { sigma } => sigma_ok(sigma),
            NoiseKind::MedianBlur { window } => window >= 3 && window % 2 == 1,
            NoiseKind::Cropout { ratio }
            | NoiseKind::Dropout { ratio }
            | NoiseKind::SaltPepper { ratio }
            | NoiseKind::RandomCrop { ratio } => ratio_ok(ratio),
        };
        if ok {
            Ok(())
        } else {
            invalid(format!("noise parameters out of range: {self}"))
        }
    }
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind) -> Result<Self> {
        kind.check()?;
        Ok(NoiseSpec { kind, seed: 0 })
    }

    pub fn identity() -> Self {
        NoiseSpec {
            kind: NoiseKind::Identity,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        NoiseSpec { seed, ..self }
    }

    pub fn is_identity(&self) -> bool {
        self.kind == NoiseKind::Identity
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kind={}", self.name())?;
        match *self {
            NoiseKind::Identity => Ok(()),
            NoiseKind::JpegSs { quality } => write!(f, " quality={quality}"),
            NoiseKind::GaussianNoise { sigma } | NoiseKind::GaussianBlur { sigma } => write!(f, " sigma={sigma}"),
            NoiseKind::MedianBlur { window } => write!(f, " window={window}"),
            NoiseKind::Cropout { ratio }
            | NoiseKind::Dropout { ratio }
            | NoiseKind::SaltPepper { ratio }
            | NoiseKind::RandomCrop { ratio } => write!(f, " ratio={ratio}"),
        }
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if self.seed != 0 {
            write!(f, " seed={}", self.seed)?;
        }
        Ok(())
    }
}

/// Parses `kind=<name> [param=<value>]... [seed=<n>] [weight=<w>]`, returning
/// the spec and its sampling weight (1 when absent).
pub fn parse_weighted(s: &str) -> Result<(NoiseSpec, f64)> {
    let mut kind = None;
    let mut seed = 0u64;
    let mut weight = 1.0f64;
    let mut params: Vec<(&str, &str)> = Vec::new();
    for tok in s.split_whitespace() {
        let Some((k, v)) = tok.split_once('=') else {
            return invalid(format!("expected key=value, got `{tok}`"));
        };
        match k {
            "kind" => kind = Some(v),
            "seed" => seed = v.parse().map_err(|_| Error::InvalidArgument(format!("bad seed `{v}`")))?,
            "weight" => {
                weight = v
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad weight `{v}`")))?
            }
            _ => params.push((k, v)),
        }
    }
    let Some(kind) = kind else {
        return invalid(format!("noise entry `{s}` has no kind"));
    };
    let mut take = |name: &str| -> Result<f64> {
        let pos = params
            .iter()
            .position(|(k, _)| *k == name)
            .ok_or_else(|| Error::InvalidArgument(format!("noise kind {kind} needs `{name}`")))?;
        let (_, v) = params.remove(pos);
        v.parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("bad {name} `{v}`")))
    };
    let kind = match kind {
        "identity" => NoiseKind::Identity,
        "jpeg_ss" => NoiseKind::JpegSs { quality: take("quality")? },
        "gaussian_noise" => NoiseKind::GaussianNoise { sigma: take("sigma")? },
        "gaussian_blur" => NoiseKind::GaussianBlur { sigma: take("sigma")? },
        "median_blur" => {
            let w = take("window")?;
            if w.fract() != 0.0 || w < 0.0 {
                return invalid(format!("median window must be an integer, got {w}"));
            }
            NoiseKind::MedianBlur { window: w as usize }
        }
        "cropout" => NoiseKind::Cropout { ratio: take("ratio")? },
        "dropout" => NoiseKind::Dropout { ratio: take("ratio")? },
        "salt_pepper" => NoiseKind::SaltPepper { ratio: take("ratio")? },
        "random_crop" => NoiseKind::RandomCrop { ratio: take("ratio")? },
        other => return invalid(format!("unknown noise kind `{other}`")),
    };
    if let Some((k, _)) = params.first() {
        return invalid(format!("unexpected parameter `{k}` for {}", kind.name()));
    }
    if !(weight >= 0.0 && weight.is_finite()) {
        return invalid(format!("weight must be finite and non-negative, got {weight}"));
    }
    Ok((NoiseSpec::new(kind)?.with_seed(seed), weight))
}

impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (spec, _) = parse_weighted(s)?;
        if s.split_whitespace().any(|t| t.starts_with("weight=")) {
            return invalid("a single noise spec takes no weight");
        }
        Ok(spec)
    }
}

/// Chooses one spec with probability proportional to its weight.
pub fn sample_noise_for_training(config: &[(NoiseSpec, f64)], rng: &mut impl Rng) -> Result<NoiseSpec> {
    if config.is_empty() {
        return invalid("noise configuration is empty");
    }
    let dist = WeightedIndex::new(config.iter().map(|(_, w)| *w))
        .map_err(|e| Error::InvalidArgument(format!("noise weights: {e}")))?;
    Ok(config[dist.sample(rng)].0)
}

/// Zig-zag prefix length kept at `quality`.
pub fn jpeg_keep_count(quality: f64) -> usize {
    ((64.0 * quality / 100.0).round() as usize).clamp(1, DCT_BLOCK * DCT_BLOCK)
}

pub fn jpeg_keep_mask(quality: f64) -> [bool; 64] {
    let mut keep = [false; 64];
    for &i in &zigzag_order()[..jpeg_keep_count(quality)] {
        keep[i] = true;
    }
    keep
}

/// Rectangle `(top, left, height, width)` of roughly `fraction * h * w` pixels.
fn random_rect(h: usize, w: usize, fraction: f64, rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    if fraction <= 0.0 {
        return (0, 0, 0, 0);
    }
    let rh = ((fraction.sqrt() * h as f64).round() as usize).clamp(1, h);
    let rw = ((fraction * (h * w) as f64 / rh as f64).round() as usize).clamp(1, w);
    let top = rng.gen_range(0..=h - rh);
    let left = rng.gen_range(0..=w - rw);
    (top, left, rh, rw)
}

fn spatial_mask<T: Real>(c: usize, h: usize, w: usize, zero: impl Fn(usize, usize) -> bool) -> Tensor<T> {
    Tensor::from_fn(&[c, h, w], |i| {
        let p = i % (h * w);
        if zero(p / w, p % w) {
            T::zero()
        } else {
            T::one()
        }
    })
}

fn pixel_count(ratio: f64, h: usize, w: usize) -> usize {
    ((ratio * (h * w) as f64).floor() as usize).min(h * w)
}

/// Applies `spec` to a `C x H x W` canvas. Bounded-domain kinds work relative
/// to the canvas's own min and max.
pub fn apply_noise<T: Real, O: Ops<T>>(ops: &mut O, x: &O::V, spec: &NoiseSpec) -> Result<O::V> {
    spec.kind.check()?;
    let (c, h, w) = ops.value(x).dims3()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        NoiseKind::Identity => Ok(x.clone()),
        // The DCT projection is linear and maps constants to themselves, so
        // normalizing to [0, 1] and back around it is the identity.
        NoiseKind::JpegSs { quality } => ops.dct_mask(x, &jpeg_keep_mask(quality)),
        NoiseKind::GaussianNoise { sigma } => {
            let z = Tensor::from_fn(&[c, h, w], |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
            ops.range_noise(x, z, sigma)
        }
        NoiseKind::GaussianBlur { sigma } => {
            let taps: Arc<[f64]> = gaussian_taps(sigma).into();
            ops.blur(x, &taps)
        }
        NoiseKind::MedianBlur { window } => ops.median_straight_through(x, window),
        NoiseKind::Cropout { ratio } | NoiseKind::RandomCrop { ratio } if ratio == 0.0 => Ok(x.clone()),
        NoiseKind::Dropout { ratio } | NoiseKind::SaltPepper { ratio } if pixel_count(ratio, h, w) == 0 => {
            Ok(x.clone())
        }
        NoiseKind::Cropout { ratio } => {
            let (t, l, rh, rw) = random_rect(h, w, ratio, &mut rng);
            let m = spatial_mask(c, h, w, |y, xx| (t..t + rh).contains(&y) && (l..l + rw).contains(&xx));
            let m = ops.constant(m);
            ops.mul(x, &m)
        }
        NoiseKind::RandomCrop { ratio } => {
            let (t, l, rh, rw) = random_rect(h, w, 1.0 - ratio, &mut rng);
            let m = spatial_mask(c, h, w, |y, xx| !((t..t + rh).contains(&y) && (l..l + rw).contains(&xx)));
            let m = ops.constant(m);
            ops.mul(x, &m)
        }
        NoiseKind::Dropout { ratio } => {
            let mut drop = vec![false; h * w];
            for p in sample(&mut rng, h * w, pixel_count(ratio, h, w)) {
                drop[p] = true;
            }
            let m = ops.constant(spatial_mask(c, h, w, |y, xx| drop[y * w + xx]));
            ops.mul(x, &m)
        }
        NoiseKind::SaltPepper { ratio } => {
            let mut hits: Vec<(u32, bool)> = sample(&mut rng, h * w, pixel_count(ratio, h, w))
                .into_iter()
                .map(|p| (p as u32, false))
                .collect();
            hits.sort_unstable();
            for hit in &mut hits {
                hit.1 = rng.gen_bool(0.5);
            }
            ops.salt_pepper(x, &hits.into())
        }
    }
}
