use std::path::Path;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::imageio::{image_paths, load_image, synthetic_image};
use crate::numerics::Tensor;

/// Source of square training crops.
#[derive(Clone, Debug)]
pub enum Dataset {
    /// Decoded images, sorted by file name.
    Images(Vec<Tensor<f32>>),
    /// A fresh procedural image per draw.
    Synthetic,
}

impl Dataset {
    /// Loads every PNG/PNM file in `dir` that is at least `min_side` on both sides.
    pub fn from_dir(dir: impl AsRef<Path>, min_side: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut images = Vec::new();
        for p in image_paths(dir)? {
            let img = load_image(&p)?;
            let (_, h, w) = img.dims3()?;
            if h >= min_side && w >= min_side {
                images.push(img);
            }
        }
        if images.is_empty() {
            return invalid(format!("no images of at least {min_side}px in {}", dir.display()));
        }
        Ok(Dataset::Images(images))
    }

    pub fn len(&self) -> Option<usize> {
        match self {
            Dataset::Images(v) => Some(v.len()),
            Dataset::Synthetic => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    /// A random `side x side` crop of a random image.
    pub fn draw(&self, side: usize, rng: &mut impl Rng) -> Result<Tensor<f32>> {
        match self {
            Dataset::Synthetic => Ok(synthetic_image(side, side, rng)),
            Dataset::Images(images) => {
                if images.is_empty() {
                    return invalid("dataset is empty");
                }
                let img = &images[rng.gen_range(0..images.len())];
                let (c, h, w) = img.dims3()?;
                if h < side || w < side {
                    return invalid(format!("image {w}x{h} is smaller than the {side}px crop"));
                }
                let top = rng.gen_range(0..=h - side);
                let left = rng.gen_range(0..=w - side);
                Ok(Tensor::from_fn(&[c, side, side], |i| {
                    let (ch, p) = (i / (side * side), i % (side * side));
                    img.data()[ch * h * w + (top + p / side) * w + left + p % side]
                }))
            }
        }
    }
}
