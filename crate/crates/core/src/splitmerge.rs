//! Mask-driven bijection between a `3 x H x W` canvas and two
//! `3 x H x W/2` streams.
//!
//! The X stream takes the mask's one-positions in row-major scan order and
//! fills row-major; the Y stream takes the zero-positions in column-major
//! scan order and fills column-major. All channels share the spatial mask.

use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::keygen::BalancedMask;
use crate::numerics::{Eager, Ops, Real, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug)]
pub struct SplitLayout {
    width: usize,
    height: usize,
    x_index: Arc<[u32]>,
    y_index: Arc<[u32]>,
    place_index: Arc<[u32]>,
}

impl SplitLayout {
    pub fn new(mask: &BalancedMask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let half = w / 2;
        let plane = w * h;
        let leg = half * h;

        let x_src: Vec<usize> = (0..plane).filter(|&p| mask.bits()[p]).collect();
        // Zero-positions in column-major scan; the k-th lands at column-major
        // slot k of the Y stream, i.e. row k % h, column k / h.
        let mut y_src = vec![0usize; leg];
        let mut k = 0;
        for col in 0..w {
            for row in 0..h {
                if !mask.get(row, col) {
                    y_src[(k % h) * half + k / h] = row * w + col;
                    k += 1;
                }
            }
        }

        let mut place = vec![0u32; IMAGE_CHANNELS * plane];
        let mut x_index = Vec::with_capacity(IMAGE_CHANNELS * leg);
        let mut y_index = Vec::with_capacity(IMAGE_CHANNELS * leg);
        for ch in 0..IMAGE_CHANNELS {
            for (slot, &p) in x_src.iter().enumerate() {
                x_index.push((ch * plane + p) as u32);
                place[ch * plane + p] = (ch * leg + slot) as u32;
            }
            for (slot, &p) in y_src.iter().enumerate() {
                y_index.push((ch * plane + p) as u32);
                place[ch * plane + p] = ((IMAGE_CHANNELS + ch) * leg + slot) as u32;
            }
        }
        SplitLayout {
            width: w,
            height: h,
            x_index: x_index.into(),
            y_index: y_index.into(),
            place_index: place.into(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn canvas_shape(&self) -> [usize; 3] {
        [IMAGE_CHANNELS, self.height, self.width]
    }

    pub fn leg_shape(&self) -> [usize; 3] {
        [IMAGE_CHANNELS, self.height, self.width / 2]
    }

    fn check_canvas(&self, shape: &[usize]) -> Result<()> {
        if shape != self.canvas_shape() {
            return invalid(format!(
                "canvas shape {:?} does not match layout {:?}",
                shape,
                self.canvas_shape()
            ));
        }
        Ok(())
    }

    fn check_leg(&self, shape: &[usize]) -> Result<()> {
        if shape != self.leg_shape() {
            return invalid(format!(
                "stream shape {:?} does not match layout {:?}",
                shape,
                self.leg_shape()
            ));
        }
        Ok(())
    }

    pub fn extract_with<T: Real, O: Ops<T>>(&self, ops: &mut O, canvas: &O::V) -> Result<(O::V, O::V)> {
        self.check_canvas(ops.value(canvas).shape())?;
        let leg = self.leg_shape();
        let x = ops.gather(canvas, &self.x_index, &leg)?;
        let y = ops.gather(canvas, &self.y_index, &leg)?;
        Ok((x, y))
    }

    pub fn place_with<T: Real, O: Ops<T>>(&self, ops: &mut O, x: &O::V, y: &O::V) -> Result<O::V> {
        self.check_leg(ops.value(x).shape())?;
        self.check_leg(ops.value(y).shape())?;
        let both = ops.concat(&[x, y])?;
        ops.gather(&both, &self.place_index, &self.canvas_shape())
    }
}

pub fn extract<T: Real>(canvas: &Tensor<T>, layout: &SplitLayout) -> Result<(Tensor<T>, Tensor<T>)> {
    layout.extract_with(&mut Eager, canvas)
}

pub fn place<T: Real>(x: &Tensor<T>, y: &Tensor<T>, layout: &SplitLayout) -> Result<Tensor<T>> {
    layout.place_with(&mut Eager, x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keygen::{balanced_mask, KeyMaterial};

    fn mask(bits: &[u8], w: usize, h: usize) -> BalancedMask {
        BalancedMask::from_bits(w, h, bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    fn channel_stack(plane: &[f32], h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| plane[i % (h * w)] + (i / (h * w)) as f32 * 100.0)
    }

    #[test]
    fn two_by_two_scan_order() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let layout = SplitLayout::new(&mask(&[1, 0, 0, 1], 2, 2));
        let canvas = channel_stack(&[a, b, c, d], 2, 2);
        let (x, y) = extract(&canvas, &layout).unwrap();
        assert_eq!(&x.data()[..2], &[a, d]);
        assert_eq!(&y.data()[..2], &[c, b]);
        assert_eq!(&x.data()[2..4], &[a + 100.0, d + 100.0]);
        assert_eq!(place(&x, &y, &layout).unwrap(), canvas);
    }

    #[test]
    fn column_major_fill_of_y() {
        // 4 wide, 2 tall: zeros at (0,1), (0,3), (1,0), (1,2).
        // Column scan visits (1,0), (0,1), (1,2), (0,3); column-major fill
        // into 2x2 puts them at (0,0), (1,0), (0,1), (1,1).
        let layout = SplitLayout::new(&mask(&[1, 0, 1, 0, 0, 1, 0, 1], 4, 2));
        let plane: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let (x, y) = extract(&channel_stack(&plane, 2, 4), &layout).unwrap();
        assert_eq!(&x.data()[..4], &[0.0, 2.0, 5.0, 7.0]);
        assert_eq!(&y.data()[..4], &[4.0, 6.0, 1.0, 3.0]);
    }

    #[test]
    fn constant_canvas_gives_constant_legs() {
        let mut m = KeyMaterial::from_master([9; 32]);
        let layout = SplitLayout::new(&balanced_mask(&mut m, 4, 4).unwrap());
        let (x, y) = extract(&Tensor::<f32>::full(&[3, 4, 4], 1.0), &layout).unwrap();
        assert_eq!(x.shape(), &[3, 4, 2]);
        assert!(x.data().iter().chain(y.data()).all(|&v| v == 1.0));
    }

    #[test]
    fn ones_and_zeros_reproduce_mask() {
        let mut m = KeyMaterial::from_master([3; 32]);
        let bm = balanced_mask(&mut m, 6, 4).unwrap();
        let layout = SplitLayout::new(&bm);
        let canvas = place(&Tensor::<f32>::full(&[3, 4, 3], 1.0), &Tensor::zeros(&[3, 4, 3]), &layout).unwrap();
        for ch in 0..3 {
            for (p, &bit) in bm.bits().iter().enumerate() {
                assert_eq!(canvas.data()[ch * 24 + p], f32::from(u8::from(bit)));
            }
        }
    }

    #[test]
    fn rejects_mismatched_dims() {
        let layout = SplitLayout::new(&mask(&[1, 0, 0, 1], 2, 2));
        assert!(extract(&Tensor::<f32>::zeros(&[3, 2, 4]), &layout).is_err());
        assert!(place(&Tensor::<f32>::zeros(&[3, 2, 2]), &Tensor::zeros(&[3, 2, 1]), &layout).is_err());
    }

    #[test]
    fn different_masks_differ_on_distinct_canvas() {
        let mut m = KeyMaterial::from_master([5; 32]);
        let a = balanced_mask(&mut m, 8, 8).unwrap();
        let b = balanced_mask(&mut m, 8, 8).unwrap();
        assert_ne!(a, b);
        let canvas = Tensor::from_fn(&[3, 8, 8], |i| i as f32);
        let ea = extract(&canvas, &SplitLayout::new(&a)).unwrap();
        let eb = extract(&canvas, &SplitLayout::new(&b)).unwrap();
        assert!(ea != eb);
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn split_is_a_bijection(half_w in 1usize..10, h in 1usize..10, seed in any::<[u8; 32]>(), fill in any::<u64>()) {
            let w = 2 * half_w;
            let mut m = KeyMaterial::from_master(seed);
            let layout = SplitLayout::new(&balanced_mask(&mut m, w, h).unwrap());
            let canvas = Tensor::from_fn(&[3, h, w], |i| ((i as u64).wrapping_mul(fill | 1) % 10007) as f32 * 0.5);
            let (x, y) = extract(&canvas, &layout).unwrap();
            let back = place(&x, &y, &layout).unwrap();
            prop_assert_eq!(&back, &canvas);
            let (x2, y2) = extract(&back, &layout).unwrap();
            prop_assert_eq!(x2, x.clone());
            prop_assert_eq!(y2, y.clone());

            let mut lhs: Vec<u32> = canvas.data().iter().map(|v| v.to_bits()).collect();
            let mut rhs: Vec<u32> = x.data().iter().chain(y.data()).map(|v| v.to_bits()).collect();
            lhs.sort_unstable();
            rhs.sort_unstable();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
