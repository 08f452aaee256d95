//! Forward and backward kernels shared by eager evaluation and the tape.

use crate::error::{invalid, Error, Result};

use super::{Real, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

fn unpack3<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    t.dims3()
}

/// Unfolds a zero-padded `c x h x w` image into a `(c*9) x (h*w)` patch matrix.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for dy in 0..KERNEL {
            for dx in 0..KERNEL {
                let row = &mut col[(ch * TAPS + dy * KERNEL + dx) * hw..][..hw];
                let (x_lo, x_hi) = (usize::from(dx == 0), if dx == 2 { w - 1 } else { w });
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(T::zero());
                    out[x_hi..].fill(T::zero());
                    let shift = dx as isize - 1;
                    for xx in x_lo..x_hi {
                        out[xx] = src[(xx as isize + shift) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds a patch-gradient matrix back onto the image.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for dy in 0..KERNEL {
            for dx in 0..KERNEL {
                let row = &col[(ch * TAPS + dy * KERNEL + dx) * hw..][..hw];
                let (x_lo, x_hi) = (usize::from(dx == 0), if dx == 2 { w - 1 } else { w });
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = dx as isize - 1;
                    for xx in x_lo..x_hi {
                        let t = (xx as isize + shift) as usize;
                        dst[t] = dst[t] + src[xx];
                    }
                }
            }
        }
    }
}

fn check_conv<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = unpack3(input)?;
    let (co, ci) = match weight.shape() {
        [co, ci, 3, 3] => (*co, *ci),
        s => return invalid(format!("conv weight must be out x in x 3 x 3, got {s:?}")),
    };
    if ci != c {
        return invalid(format!(
            "conv expects {ci} input channels, input has {c}"
        ));
    }
    if bias.shape() != [co] {
        return invalid(format!("conv bias must have {co} entries, got {:?}", bias.shape()));
    }
    Ok((c, h, w, co))
}

/// 3x3, stride 1, zero padding 1 convolution.
pub fn conv2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w, co) = check_conv(input, weight, bias)?;
    let hw = h * w;
    let k = c * TAPS;
    let mut col = vec![T::zero(); k * hw];
    im2col(input.data(), c, h, w, &mut col);
    let mut out = vec![T::zero(); co * hw];
    for (o, chunk) in out.chunks_mut(hw).enumerate() {
        chunk.fill(bias.data()[o]);
    }
    T::gemm(
        co,
        k,
        hw,
        weight.data(),
        k as isize,
        1,
        &col,
        hw as isize,
        1,
        T::one(),
        &mut out,
        hw as isize,
        1,
    );
    Tensor::new(vec![co, h, w], out)
}

pub struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (c, h, w, co) = check_conv(input, weight, bias)?;
    let hw = h * w;
    let k = c * TAPS;
    let mut col = vec![T::zero(); k * hw];
    im2col(input.data(), c, h, w, &mut col);
    let g = grad_out.data();

    let mut dw = vec![T::zero(); co * k];
    T::gemm(co, hw, k, g, hw as isize, 1, &col, 1, hw as isize, T::zero(), &mut dw, k as isize, 1);
    let db: Vec<T> = g.chunks(hw).map(|row| row.iter().copied().sum()).collect();

    let input_grad = if need_input {
        let mut dcol = col;
        T::gemm(
            k,
            co,
            hw,
            weight.data(),
            1,
            k as isize,
            g,
            hw as isize,
            1,
            T::zero(),
            &mut dcol,
            hw as isize,
            1,
        );
        let mut dx = vec![T::zero(); c * hw];
        col2im(&dcol, c, h, w, &mut dx);
        Some(Tensor::new(vec![c, h, w], dx)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: input_grad,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![co], db)?,
    })
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Concatenates rank-3 tensors along the channel axis.
pub fn concat<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return invalid("concat of zero tensors");
    };
    let (_, h, w) = unpack3(first)?;
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        let (c, ph, pw) = unpack3(p)?;
        if (ph, pw) != (h, w) {
            return invalid(format!("concat spatial mismatch: {h}x{w} vs {ph}x{pw}"));
        }
        channels += c;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![channels, h, w], data)
}

/// `out[k] = x[index[k]]`.
pub fn gather<T: Real>(x: &Tensor<T>, index: &[u32], shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != index.len() {
        return invalid(format!("gather index has {} entries for shape {:?}", index.len(), shape));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(n);
    for &i in index {
        match src.get(i as usize) {
            Some(&v) => out.push(v),
            None => return invalid(format!("gather index {i} out of range {}", src.len())),
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b)?;
    if a.is_empty() {
        return invalid("mse of empty tensors");
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// Index of the first minimum and first maximum.
pub fn arg_min_max<T: Real>(x: &Tensor<T>) -> (usize, usize) {
    let d = x.data();
    let (mut lo, mut hi) = (0, 0);
    for (i, &v) in d.iter().enumerate() {
        if v < d[lo] {
            lo = i;
        }
        if v > d[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Affine map of `x` onto `[0, 1]` using its own extrema.
pub fn minmax_normalize<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (lo, hi) = x.min_max();
    let range = hi - lo;
    if !(range > T::zero()) || !range.is_finite() {
        return Err(Error::DegenerateRange(format!(
            "min {lo} max {hi} cannot be normalized"
        )));
    }
    Ok(x.map(|v| (v - lo) / range))
}

pub fn minmax_normalize_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (lo_i, hi_i) = arg_min_max(x);
    let range = x.data()[hi_i] - x.data()[lo_i];
    let mut dx = g.map(|v| v / range);
    let (mut d_lo, mut d_hi) = (T::zero(), T::zero());
    for (&gi, &yi) in g.data().iter().zip(y.data()) {
        d_lo = d_lo + gi * (yi - T::one());
        d_hi = d_hi - gi * yi;
    }
    let dd = dx.data_mut();
    dd[lo_i] = dd[lo_i] + d_lo / range;
    dd[hi_i] = dd[hi_i] + d_hi / range;
    dx
}

pub const HIST_BINS: usize = 256;
pub const HIST_EPS: f64 = 1e-8;

/// Bin position of a `[0, 1]` value with a triangular kernel centred on `b / 255`.
#[inline]
fn bin_split(v: f64) -> Option<(usize, f64)> {
    let t = v * (HIST_BINS - 1) as f64;
    if !(0.0..=(HIST_BINS - 1) as f64).contains(&t) {
        return None;
    }
    let i = (t.floor() as usize).min(HIST_BINS - 2);
    Some((i, t - i as f64))
}

pub fn soft_histogram<T: Real>(x: &Tensor<T>) -> [f64; HIST_BINS] {
    let mut mass = [0.0; HIST_BINS];
    for &v in x.data() {
        let v = v.f64().clamp(0.0, 1.0);
        if let Some((i, f)) = bin_split(v) {
            mass[i] += 1.0 - f;
            mass[i + 1] += f;
        }
    }
    let n = x.len() as f64;
    for m in &mut mass {
        *m /= n;
    }
    mass
}

/// KL divergence between the soft histogram of `x` and the uniform law on 256 levels.
pub fn soft_hist_kl<T: Real>(x: &Tensor<T>) -> Result<f64> {
    if x.is_empty() {
        return invalid("histogram of an empty tensor");
    }
    let p = soft_histogram(x);
    Ok(p
        .iter()
        .map(|&pb| pb * (pb.max(HIST_EPS) * HIST_BINS as f64).ln())
        .sum())
}

pub fn soft_hist_kl_backward<T: Real>(x: &Tensor<T>, upstream: f64) -> Tensor<T> {
    let p = soft_histogram(x);
    let dp: Vec<f64> = p
        .iter()
        .map(|&pb| {
            let log = (pb.max(HIST_EPS) * HIST_BINS as f64).ln();
            if pb > HIST_EPS {
                log + 1.0
            } else {
                log
            }
        })
        .collect();
    let scale = upstream * (HIST_BINS - 1) as f64 / x.len() as f64;
    x.map(|v| {
        let v = v.f64();
        if !(0.0..=1.0).contains(&v) {
            return T::zero();
        }
        match bin_split(v) {
            Some((i, _)) => T::lit(scale * (dp[i + 1] - dp[i])),
            None => T::zero(),
        }
    })
}

pub const VARIANCE_FLOOR: f64 = 1e-12;

struct PairStats {
    mx: f64,
    my: f64,
    sxx: f64,
    syy: f64,
    rho: f64,
    degenerate: bool,
}

fn pair_stats<T: Real>(x: &Tensor<T>, pairs: &[(u32, u32)]) -> PairStats {
    let d = x.data();
    let n = pairs.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for &(a, b) in pairs {
        sx += d[a as usize].f64();
        sy += d[b as usize].f64();
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(a, b) in pairs {
        let dx = d[a as usize].f64() - mx;
        let dy = d[b as usize].f64() - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let degenerate = sxx / n < VARIANCE_FLOOR || syy / n < VARIANCE_FLOOR;
    let rho = if degenerate { 0.0 } else { sxy / (sxx * syy).sqrt() };
    PairStats { mx, my, sxx, syy, rho, degenerate }
}

/// Signed Pearson correlation over `(first, second)` flat index pairs.
pub fn pair_correlation<T: Real>(x: &Tensor<T>, pairs: &[(u32, u32)]) -> Result<f64> {
    if pairs.len() < 2 {
        return invalid("correlation needs at least two pairs");
    }
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a.max(b) as usize >= x.len()) {
        return invalid(format!("pair ({a}, {b}) out of range"));
    }
    Ok(pair_stats(x, pairs).rho)
}

/// Gradient of `|rho|` with respect to `x`.
pub fn abs_pair_correlation_backward<T: Real>(
    x: &Tensor<T>,
    pairs: &[(u32, u32)],
    upstream: f64,
) -> Tensor<T> {
    let st = pair_stats(x, pairs);
    let mut grad = vec![0.0f64; x.len()];
    if !st.degenerate {
        let d = x.data();
        let norm = (st.sxx * st.syy).sqrt();
        let s = upstream * st.rho.signum();
        for &(a, b) in pairs {
            let dx = d[a as usize].f64() - st.mx;
            let dy = d[b as usize].f64() - st.my;
            grad[a as usize] += s * (dy / norm - st.rho * dx / st.sxx);
            grad[b as usize] += s * (dx / norm - st.rho * dy / st.syy);
        }
    }
    Tensor::from_fn(x.shape(), |i| T::lit(grad[i]))
}

/// Normalized 1-D Gaussian taps of length `2 * ceil(3 sigma) + 1`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// One separable pass with clamp-to-edge borders, or its adjoint.
fn blur_pass<T: Real>(
    src: &[T],
    dst: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    taps: &[f64],
    horizontal: bool,
    adjoint: bool,
) {
    let r = (taps.len() / 2) as isize;
    let (len, stride, lines_per_plane, line_step) = if horizontal {
        (w, 1, h, w)
    } else {
        (h, w, w, 1)
    };
    dst.fill(T::zero());
    for ch in 0..c {
        let base = ch * h * w;
        for line in 0..lines_per_plane {
            let origin = base + line * line_step;
            for i in 0..len {
                for (k, &tap) in taps.iter().enumerate() {
                    let j = (i as isize + k as isize - r).clamp(0, len as isize - 1) as usize;
                    let tap = T::lit(tap);
                    if adjoint {
                        let t = origin + j * stride;
                        dst[t] = dst[t] + tap * src[origin + i * stride];
                    } else {
                        let t = origin + i * stride;
                        dst[t] = dst[t] + tap * src[origin + j * stride];
                    }
                }
            }
        }
    }
}

pub fn gaussian_blur<T: Real>(x: &Tensor<T>, taps: &[f64]) -> Result<Tensor<T>> {
    let (c, h, w) = unpack3(x)?;
    let mut tmp = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    blur_pass(x.data(), &mut tmp, c, h, w, taps, true, false);
    blur_pass(&tmp, &mut out, c, h, w, taps, false, false);
    Tensor::new(x.shape().to_vec(), out)
}

pub fn gaussian_blur_backward<T: Real>(g: &Tensor<T>, taps: &[f64]) -> Result<Tensor<T>> {
    let (c, h, w) = unpack3(g)?;
    let mut tmp = vec![T::zero(); g.len()];
    let mut out = vec![T::zero(); g.len()];
    blur_pass(g.data(), &mut tmp, c, h, w, taps, false, true);
    blur_pass(&tmp, &mut out, c, h, w, taps, true, true);
    Tensor::new(g.shape().to_vec(), out)
}

pub const DCT_BLOCK: usize = 8;

fn dct_matrix() -> [[f64; DCT_BLOCK]; DCT_BLOCK] {
    let mut m = [[0.0; DCT_BLOCK]; DCT_BLOCK];
    let n = DCT_BLOCK as f64;
    for (u, row) in m.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / (2.0 * n)).cos();
        }
    }
    m
}

/// Zig-zag scan of an 8x8 block as `row * 8 + col` indices.
pub fn zigzag_order() -> [usize; DCT_BLOCK * DCT_BLOCK] {
    let mut order = [0; DCT_BLOCK * DCT_BLOCK];
    let mut k = 0;
    for s in 0..(2 * DCT_BLOCK - 1) {
        let lo = s.saturating_sub(DCT_BLOCK - 1);
        let hi = s.min(DCT_BLOCK - 1);
        let rows: Vec<usize> = if s % 2 == 1 {
            (lo..=hi).collect()
        } else {
            (lo..=hi).rev().collect()
        };
        for r in rows {
            order[k] = r * DCT_BLOCK + (s - r);
            k += 1;
        }
    }
    order
}

/// Blockwise DCT, coefficient masking, inverse DCT. The operator is
/// symmetric, so the same call computes its adjoint. Partial edge blocks
/// pass through unchanged.
pub fn dct_mask<T: Real>(x: &Tensor<T>, keep: &[bool; DCT_BLOCK * DCT_BLOCK]) -> Result<Tensor<T>> {
    let (c, h, w) = unpack3(x)?;
    let d = dct_matrix();
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    let mut block = [[0.0f64; DCT_BLOCK]; DCT_BLOCK];
    let mut tmp = [[0.0f64; DCT_BLOCK]; DCT_BLOCK];
    for ch in 0..c {
        for by in 0..h / DCT_BLOCK {
            for bx in 0..w / DCT_BLOCK {
                let at = |r: usize, q: usize| ch * h * w + (by * DCT_BLOCK + r) * w + bx * DCT_BLOCK + q;
                for r in 0..DCT_BLOCK {
                    for q in 0..DCT_BLOCK {
                        block[r][q] = src[at(r, q)].f64();
                    }
                }
                // coefficients = D * B * D^T
                for u in 0..DCT_BLOCK {
                    for q in 0..DCT_BLOCK {
                        tmp[u][q] = (0..DCT_BLOCK).map(|r| d[u][r] * block[r][q]).sum();
                    }
                }
                for u in 0..DCT_BLOCK {
                    for v in 0..DCT_BLOCK {
                        block[u][v] = if keep[u * DCT_BLOCK + v] {
                            (0..DCT_BLOCK).map(|q| tmp[u][q] * d[v][q]).sum()
                        } else {
                            0.0
                        };
                    }
                }
                // pixels = D^T * C * D
                for r in 0..DCT_BLOCK {
                    for v in 0..DCT_BLOCK {
                        tmp[r][v] = (0..DCT_BLOCK).map(|u| d[u][r] * block[u][v]).sum();
                    }
                }
                for r in 0..DCT_BLOCK {
                    for q in 0..DCT_BLOCK {
                        let v: f64 = (0..DCT_BLOCK).map(|v| tmp[r][v] * d[v][q]).sum();
                        dst[at(r, q)] = T::lit(v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel `window x window` median with clamp-to-edge borders.
pub fn median_blur<T: Real>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (c, h, w) = unpack3(x)?;
    let r = (window / 2) as isize;
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    let mut buf = Vec::with_capacity(window * window);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                buf.clear();
                for dy in -r..=r {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let sx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                        buf.push(src[base + sy * w + sx]);
                    }
                }
                let mid = buf.len() / 2;
                buf.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                out[base + y * w + xx] = buf[mid];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Replaces selected spatial positions (all channels) with the canvas
/// maximum (`true`) or minimum (`false`).
pub fn salt_pepper<T: Real>(x: &Tensor<T>, hits: &[(u32, bool)]) -> Result<Tensor<T>> {
    let (c, h, w) = unpack3(x)?;
    let (lo, hi) = x.min_max();
    let mut out = x.clone();
    let d = out.data_mut();
    for &(pos, salt) in hits {
        if pos as usize >= h * w {
            return invalid(format!("salt/pepper position {pos} out of range"));
        }
        for ch in 0..c {
            d[ch * h * w + pos as usize] = if salt { hi } else { lo };
        }
    }
    Ok(out)
}

pub fn salt_pepper_backward<T: Real>(x: &Tensor<T>, hits: &[(u32, bool)], g: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = unpack3(x)?;
    let (lo_i, hi_i) = arg_min_max(x);
    let mut dx = g.clone();
    let (mut to_lo, mut to_hi) = (T::zero(), T::zero());
    {
        let d = dx.data_mut();
        for &(pos, salt) in hits {
            for ch in 0..c {
                let i = ch * h * w + pos as usize;
                if salt {
                    to_hi = to_hi + g.data()[i];
                } else {
                    to_lo = to_lo + g.data()[i];
                }
                d[i] = T::zero();
            }
        }
        d[lo_i] = d[lo_i] + to_lo;
        d[hi_i] = d[hi_i] + to_hi;
    }
    Ok(dx)
}

/// Scale used by range-relative noise: the canvas span, or 1 for a constant canvas.
pub fn noise_scale<T: Real>(x: &Tensor<T>) -> f64 {
    let (lo, hi) = x.min_max();
    let span = (hi - lo).f64();
    if span > 0.0 && span.is_finite() {
        span
    } else {
        1.0
    }
}

/// `x + sigma * span(x) * z`.
pub fn add_range_noise<T: Real>(x: &Tensor<T>, z: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let s = T::lit(sigma * noise_scale(x));
    x.zip_map(z, |a, b| a + s * b)
}

pub fn add_range_noise_backward<T: Real>(x: &Tensor<T>, z: &Tensor<T>, sigma: f64, g: &Tensor<T>) -> Tensor<T> {
    let mut dx = g.clone();
    let (lo, hi) = x.min_max();
    if hi > lo {
        let (lo_i, hi_i) = arg_min_max(x);
        let gz: f64 = g.data().iter().zip(z.data()).map(|(a, b)| a.f64() * b.f64()).sum();
        let d = dx.data_mut();
        d[hi_i] = d[hi_i] + T::lit(sigma * gz);
        d[lo_i] = d[lo_i] - T::lit(sigma * gz);
    }
    dx
}
