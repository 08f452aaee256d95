//! Recovery quality, cipher statistics and differential measures.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::kernels::pair_correlation;
use crate::numerics::{Real, Tensor};

pub const PSNR_CAP_DB: f64 = 200.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const DEFAULT_METRIC_PAIRS: usize = 5000;
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityMetrics {
    /// Capped at [`PSNR_CAP_DB`].
    pub psnr: f64,
    /// Set when the images are identical and the true PSNR is infinite.
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub mae: f64,
    pub rmse: f64,
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    a.expect_same_shape(b)?;
    let dims = a.dims3()?;
    if a.is_empty() {
        return invalid("metrics of an empty image");
    }
    Ok(dims)
}

pub fn psnr_from_mse(mse: f64) -> (f64, bool) {
    if mse <= 0.0 {
        (PSNR_CAP_DB, true)
    } else {
        ((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB), false)
    }
}

/// PSNR, SSIM, MAE and RMSE of `test` against `reference`, both on the `[0, 1]` scale.
pub fn quality_metrics<T: Real>(reference: &Tensor<T>, test: &Tensor<T>) -> Result<QualityMetrics> {
    same_shape(reference, test)?;
    let n = reference.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (&a, &b) in reference.data().iter().zip(test.data()) {
        let d = a.f64() - b.f64();
        abs += d.abs();
        sq += d * d;
    }
    let mse = sq / n;
    let (psnr, psnr_infinite) = psnr_from_mse(mse);
    Ok(QualityMetrics {
        psnr,
        psnr_infinite,
        ssim: ssim(reference, test)?,
        mae: abs / n,
        rmse: mse.sqrt(),
    })
}

/// Separable Gaussian filter; at the borders the truncated window is renormalized.
fn gaussian_filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, &t) in taps.iter().enumerate() {
                    let off = k as isize - r;
                    let (sy, sx) = if horizontal {
                        (y as isize, x as isize + off)
                    } else {
                        (y as isize + off, x as isize)
                    };
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    acc += t * src[sy as usize * w + sx as usize];
                    wsum += t;
                }
                out[y * w + x] = acc / wsum;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

fn ssim_taps() -> Vec<f64> {
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - (SSIM_WINDOW / 2) as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn ssim_map(x: &[f64], y: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = gaussian_filter(x, h, w, taps);
    let my = gaussian_filter(y, h, w, taps);
    let exx = gaussian_filter(&prod(x, x), h, w, taps);
    let eyy = gaussian_filter(&prod(y, y), h, w, taps);
    let exy = gaussian_filter(&prod(x, y), h, w, taps);
    (0..h * w)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect()
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// per channel and then averaged.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (c, h, w) = same_shape(a, b)?;
    let taps = ssim_taps();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.f64()).collect();
        let y: Vec<f64> = b.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.f64()).collect();
        total += ssim_map(&x, &y, h, w, &taps).iter().sum::<f64>() / plane as f64;
    }
    Ok(total / c as f64)
}

/// 8-bit picture of a float canvas, made by its own min-max affine map.
/// For analysis and display only; decryption never reads it.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering8 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    pub min: f32,
    pub max: f32,
}

impl Rendering8 {
    /// Reconstructed float value of every sample.
    pub fn to_canvas(&self) -> Tensor<f32> {
        let span = f64::from(self.max) - f64::from(self.min);
        Tensor::from_fn(&[self.channels, self.height, self.width], |i| {
            (f64::from(self.min) + span * f64::from(self.data[i]) / 255.0) as f32
        })
    }

    /// `[0, 1]` view of the stored bytes.
    pub fn to_unit(&self) -> Tensor<f64> {
        Tensor::from_fn(&[self.channels, self.height, self.width], |i| f64::from(self.data[i]) / 255.0)
    }
}

/// `round_half_up(255 * (v - min) / (max - min))` per sample.
pub fn render8<T: Real>(canvas: &Tensor<T>) -> Result<Rendering8> {
    let (channels, height, width) = canvas.dims3()?;
    if !canvas.is_finite() {
        return invalid("cannot render a canvas with non-finite values");
    }
    let (lo, hi) = canvas.min_max();
    let (lo, hi) = (lo.f64(), hi.f64());
    if !(hi > lo) {
        return Err(Error::DegenerateRange(format!("canvas is constant at {lo}")));
    }
    let span = hi - lo;
    let data = canvas
        .data()
        .iter()
        .map(|v| (255.0 * (v.f64() - lo) / span + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(Rendering8 {
        channels,
        height,
        width,
        data,
        min: lo as f32,
        max: hi as f32,
    })
}

pub fn histogram8(r: &Rendering8) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in &r.data {
        h[v as usize] += 1;
    }
    h
}

/// Shannon entropy in bits of the pooled 256-level histogram.
pub fn entropy8(r: &Rendering8) -> f64 {
    let n = r.data.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let e: f64 = histogram8(r)
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    e.max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Horizontal,
    Vertical,
    Diagonal,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Horizontal, Direction::Vertical, Direction::Diagonal];

    fn offset(self) -> (usize, usize) {
        match self {
            Direction::Horizontal => (0, 1),
            Direction::Vertical => (1, 0),
            Direction::Diagonal => (1, 1),
        }
    }
}

/// Pearson correlation of `n_pairs` random neighbour pairs in one direction.
pub fn adjacent_correlation(r: &Rendering8, direction: Direction, n_pairs: usize, rng: &mut impl Rng) -> Result<f64> {
    if n_pairs < 2 {
        return invalid("correlation needs at least two pairs");
    }
    let (c, h, w) = (r.channels, r.height, r.width);
    let (dy, dx) = direction.offset();
    if c == 0 || h <= dy || w <= dx {
        return invalid(format!("{c}x{h}x{w} has no {direction:?} neighbours"));
    }
    let pairs: Vec<(u32, u32)> = (0..n_pairs)
        .map(|_| {
            let ch = rng.gen_range(0..c);
            let y = rng.gen_range(0..h - dy);
            let x = rng.gen_range(0..w - dx);
            let at = |y: usize, x: usize| (ch * h * w + y * w + x) as u32;
            (at(y, x), at(y + dy, x + dx))
        })
        .collect();
    let values = Tensor::from_fn(&[r.data.len()], |i| f64::from(r.data[i]));
    pair_correlation(&values, &pairs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Differential {
    pub npcr: f64,
    pub uaci: f64,
}

/// Percentage of differing samples and mean normalized absolute difference.
pub fn npcr_uaci(a: &Rendering8, b: &Rendering8) -> Result<Differential> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return invalid("renderings differ in shape");
    }
    if a.data.is_empty() {
        return invalid("empty renderings");
    }
    let n = a.data.len() as f64;
    let (mut diff, mut abs) = (0u64, 0u64);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        diff += u64::from(p != q);
        abs += u64::from(p.abs_diff(q));
    }
    Ok(Differential {
        npcr: 100.0 * diff as f64 / n,
        uaci: 100.0 * abs as f64 / (255.0 * n),
    })
}

/// Statistics for one image; absent fields were not measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub entropy: Option<f64>,
    pub corr_h: Option<f64>,
    pub corr_v: Option<f64>,
    pub corr_d: Option<f64>,
    pub npcr: Option<f64>,
    pub uaci: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 10] = [
    "psnr", "ssim", "mae", "rmse", "entropy", "corr_h", "corr_v", "corr_d", "npcr", "uaci",
];

impl MetricsReport {
    pub fn values(&self) -> [Option<f64>; 10] {
        [
            self.psnr,
            self.ssim,
            self.mae,
            self.rmse,
            self.entropy,
            self.corr_h,
            self.corr_v,
            self.corr_d,
            self.npcr,
            self.uaci,
        ]
    }

    pub fn with_quality(mut self, q: &QualityMetrics) -> Self {
        self.psnr = Some(q.psnr);
        self.ssim = Some(q.ssim);
        self.mae = Some(q.mae);
        self.rmse = Some(q.rmse);
        self
    }

    /// Entropy and the three directional correlations of a cipher rendering.
    pub fn with_cipher_stats(mut self, r: &Rendering8, n_pairs: usize, rng: &mut impl Rng) -> Result<Self> {
        self.entropy = Some(entropy8(r));
        self.corr_h = Some(adjacent_correlation(r, Direction::Horizontal, n_pairs, rng)?);
        self.corr_v = Some(adjacent_correlation(r, Direction::Vertical, n_pairs, rng)?);
        self.corr_d = Some(adjacent_correlation(r, Direction::Diagonal, n_pairs, rng)?);
        Ok(self)
    }

    pub fn with_differential(mut self, d: &Differential) -> Self {
        self.npcr = Some(d.npcr);
        self.uaci = Some(d.uaci);
        self
    }

    /// Mean of the measured `|corr|` values over H, V and D.
    pub fn mean_abs_correlation(&self) -> Option<f64> {
        let v: Vec<f64> = [self.corr_h, self.corr_v, self.corr_d].into_iter().flatten().map(f64::abs).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// One CSV row in [`METRIC_COLUMNS`] order; unmeasured fields are empty.
    pub fn csv_fields(&self) -> Vec<String> {
        self.values()
            .iter()
            .map(|v| v.map(|x| format!("{x}")).unwrap_or_default())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub schema: u32,
    pub images: usize,
    pub metrics: BTreeMap<String, MeanStd>,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd {
        mean,
        std,
        count: values.len(),
    })
}

pub fn summarize(reports: &[MetricsReport]) -> CorpusSummary {
    let mut metrics = BTreeMap::new();
    for (i, name) in METRIC_COLUMNS.iter().enumerate() {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.values()[i]).collect();
        if let Some(ms) = mean_std(&vals) {
            metrics.insert(name.to_string(), ms);
        }
    }
    CorpusSummary {
        schema: REPORT_SCHEMA,
        images: reports.len(),
        metrics,
    }
}
