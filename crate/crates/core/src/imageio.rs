//! Image files to and from `3 x H x W` tensors in `[0, 1]`, plus a
//! procedural generator for test and training images.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::fed::write_atomic;
use crate::metrics::Rendering8;
use crate::numerics::Tensor;

fn image_err(e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f32::from(raw[p * 3 + c]) / 255.0
    })
}

/// Clamps to `[0, 1]` and rounds half up to 8 bits.
pub fn to_rgb8(t: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return invalid(format!("expected 3 channels, got {c}"));
    }
    let mut raw = vec![0u8; h * w * 3];
    for (i, &v) in t.data().iter().enumerate() {
        let (ch, p) = (i / (h * w), i % (h * w));
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        raw[p * 3 + ch] = (f64::from(v) * 255.0 + 0.5).floor() as u8;
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to dimensions"))
}

pub fn rendering_to_rgb8(r: &Rendering8) -> Result<RgbImage> {
    if r.channels != 3 {
        return invalid(format!("expected 3 channels, got {}", r.channels));
    }
    let plane = r.height * r.width;
    let mut raw = vec![0u8; plane * 3];
    for (i, &v) in r.data.iter().enumerate() {
        raw[(i % plane) * 3 + i / plane] = v;
    }
    Ok(RgbImage::from_raw(r.width as u32, r.height as u32, raw).expect("buffer sized to dimensions"))
}

const EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

/// PNG and PNM files directly inside `dir`, sorted by path.
pub fn image_paths(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = image::open(path.as_ref()).map_err(image_err)?;
    Ok(from_rgb8(&img.to_rgb8()))
}

/// Writes PNG or PPM, chosen by extension.
pub fn save_rgb8(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path).map_err(image_err)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return invalid(format!("unsupported output format for {}", path.display()));
    }
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, format).map_err(image_err)?;
    write_atomic(path, buf.get_ref())
}

pub fn save_image(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    save_rgb8(&to_rgb8(t)?, path)
}

/// Writes an unclamped float image as a little-endian colour PFM.
pub fn save_pfm(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return invalid(format!("expected 3 channels, got {c}"));
    }
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    let d = t.data();
    for row in (0..h).rev() {
        for col in 0..w {
            for ch in 0..3 {
                out.extend_from_slice(&d[(ch * h + row) * w + col].to_le_bytes());
            }
        }
    }
    write_atomic(path.as_ref(), &out)
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format(format!("pfm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    pos += 1;
    if fields[0] != "PF" {
        return Err(bad("not a colour PFM"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    if scale >= 0.0 {
        return Err(bad("big-endian PFM is not supported"));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if w.checked_mul(h).and_then(|n| n.checked_mul(12)) != Some(body.len()) {
        return Err(bad("payload size does not match dimensions"));
    }
    let mut data = vec![0f32; 3 * h * w];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let (p, ch) = (i / 3, i % 3);
        let (row, col) = (h - 1 - p / w, p % w);
        data[(ch * h + row) * w + col] = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
    }
    Tensor::new(vec![3, h, w], data)
}

/// A smooth, edge-bearing colour image: low-frequency waves, a few flat
/// shapes and mild texture, with strong neighbour correlation like a photo.
pub fn synthetic_image(width: usize, height: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let (w, h) = (width as f32, height as f32);
    let mut out = Tensor::zeros(&[3, height, width]);
    let plane = width * height;
    for c in 0..3 {
        let base: f32 = rng.gen_range(0.2..0.8);
        let waves: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.05..0.25),
                    rng.gen_range(0.5..3.0) / w,
                    rng.gen_range(0.5..3.0) / h,
                    rng.gen_range(0.0..std::f32::consts::TAU),
                )
            })
            .collect();
        let d = &mut out.data_mut()[c * plane..(c + 1) * plane];
        for y in 0..height {
            for x in 0..width {
                let mut v = base;
                for &(amp, fx, fy, ph) in &waves {
                    v += amp * (std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) + ph).sin();
                }
                d[y * width + x] = v;
            }
        }
    }
    for _ in 0..rng.gen_range(2..5) {
        let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
        let r = rng.gen_range(0.1..0.35) * w.min(h);
        let colour: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let disc = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let inside = if disc {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= 0.6 * r
                };
                if inside {
                    for (c, &col) in colour.iter().enumerate() {
                        let v = &mut out.data_mut()[c * plane + y * width + x];
                        *v = 0.3 * *v + 0.7 * col;
                    }
                }
            }
        }
    }
    for v in out.data_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::metrics::{adjacent_correlation, render8, Direction};

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = synthetic_image(12, 10, &mut rng);
        let q = from_rgb8(&to_rgb8(&img).unwrap());
        assert!(q.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), q);
        }
        assert!(save_image(&img, dir.path().join("a.gif")).is_err());
        assert!(matches!(load_image(dir.path().join("none.png")), Err(Error::Io(_))));
        std::fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
        assert!(matches!(load_image(dir.path().join("junk.png")), Err(Error::Format(_))));
    }

    #[test]
    fn pfm_round_trips_unclamped_floats() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(&[3, 3, 4], |i| i as f32 * 0.37 - 2.0);
        let p = dir.path().join("a.pfm");
        save_pfm(&t, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"PF\n4 3\n-1.0\n"));
        // first stored pixel is the bottom-left one
        assert_eq!(&bytes[12..16], &t.data()[2 * 4].to_le_bytes());
        assert_eq!(load_pfm(&p).unwrap(), t);
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_pfm(&p), Err(Error::Format(_))));
    }

    #[test]
    fn image_listing_is_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.PPM", "c.txt"] {
            std::fs::write(dir.path().join(name), b"").unwrap();
        }
        std::fs::create_dir(dir.path().join("d.png")).unwrap();
        let names: Vec<_> = image_paths(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a.PPM", "b.png"]);
    }

    #[test]
    fn channel_layout_is_planar() {
        let mut t = Tensor::<f32>::zeros(&[3, 1, 2]);
        t.data_mut()[1] = 1.0; // red, pixel 1
        t.data_mut()[4] = 1.0; // blue, pixel 0
        let img = to_rgb8(&t).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 255]);
        assert_eq!(img.get_pixel(1, 0).0, [255, 0, 0]);
    }

    #[test]
    fn rendering_export_matches_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::from_fn(&[3, 4, 6], |_| rng.gen_range(-3.0f32..3.0));
        let r = render8(&t).unwrap();
        let img = rendering_to_rgb8(&r).unwrap();
        assert_eq!(img.get_pixel(5, 3).0[2], r.data[2 * 24 + 3 * 6 + 5]);
    }

    #[test]
    fn synthetic_images_look_natural() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = synthetic_image(32, 32, &mut rng);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let r = render8(&img).unwrap();
        assert!(adjacent_correlation(&r, Direction::Horizontal, 2000, &mut rng).unwrap() > 0.8);
        let other = synthetic_image(32, 32, &mut rng);
        assert_ne!(img, other);
    }
}
