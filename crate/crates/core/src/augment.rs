//! Weak augmentation: reflect-padded random crop, horizontal flip and contrast jitter.

use rand::Rng;

use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub pad_crop: bool,
    pub pad: usize,
    pub horizontal_flip: bool,
    pub contrast_jitter: bool,
    /// Contrast factor is drawn from `[1 - delta, 1 + delta]`.
    pub contrast_delta: f64,
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            enabled: false,
            ..Self::digits()
        }
    }

    /// Crop and contrast, no flip: mirrored digits change meaning.
    pub fn digits() -> Self {
        AugmentPolicy {
            enabled: true,
            pad_crop: true,
            pad: 4,
            horizontal_flip: false,
            contrast_jitter: true,
            contrast_delta: 0.2,
        }
    }

    pub fn clothing() -> Self {
        AugmentPolicy {
            horizontal_flip: true,
            ..Self::digits()
        }
    }

    pub fn is_valid(&self) -> bool {
        self.contrast_delta.is_finite() && (0.0..1.0).contains(&self.contrast_delta)
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::digits()
    }
}

/// Mirrors each channel left to right.
pub fn hflip(image: &Tensor) -> Tensor {
    let (c, h, w) = dims(image);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for row in src.chunks(w).take(c * h) {
        out.extend(row.iter().rev());
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

fn dims(image: &Tensor) -> (usize, usize, usize) {
    match *image.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => panic!("augment expects a CxHxW image, got {:?}", image.shape()),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    // reflect without repeating the edge: -1 -> 1, n -> n-2
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn crop(image: &Tensor, pad: usize, dy: usize, dx: usize) -> Tensor {
    let (c, h, w) = dims(image);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..h {
            let sy = reflect(y as isize + dy as isize - pad as isize, h);
            let row = &src[(ch * h + sy) * w..][..w];
            for x in 0..w {
                out.push(row[reflect(x as isize + dx as isize - pad as isize, w)]);
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

fn contrast(image: &Tensor, factor: f64) -> Tensor {
    let mean = image.data().iter().sum::<f64>() / image.len() as f64;
    let out = image
        .data()
        .iter()
        .map(|&v| (mean + factor * (v - mean)).clamp(0.0, 1.0))
        .collect();
    Tensor::from_parts(image.shape().to_vec(), out)
}

/// Applies `policy` to one image. Shape and the `[0, 1]` range are preserved.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, policy: &AugmentPolicy, rng: &mut R) -> Tensor {
    if !policy.enabled {
        return image.clone();
    }
    let mut out = image.clone();
    if policy.pad_crop && policy.pad > 0 {
        let dy = rng.gen_range(0..=2 * policy.pad);
        let dx = rng.gen_range(0..=2 * policy.pad);
        out = crop(&out, policy.pad, dy, dx);
    }
    if policy.horizontal_flip && rng.gen_bool(0.5) {
        out = hflip(&out);
    }
    if policy.contrast_jitter && policy.contrast_delta > 0.0 {
        let factor = rng.gen_range(1.0 - policy.contrast_delta..=1.0 + policy.contrast_delta);
        out = contrast(&out, factor);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let img = image(1, 1, 28, 28);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &AugmentPolicy::disabled(), &mut rng), img);
    }

    #[test]
    fn crop_keeps_shape() {
        let img = image(2, 1, 28, 28);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let policy = AugmentPolicy {
            contrast_jitter: false,
            ..AugmentPolicy::digits()
        };
        let out = augment(&img, &policy, &mut rng);
        assert_eq!(out.shape(), &[1, 28, 28]);
    }

    #[test]
    fn same_rng_state_same_output() {
        let img = image(3, 1, 28, 28);
        let policy = AugmentPolicy::clothing();
        let a = augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_offset_crop_is_a_shift() {
        let img = image(4, 1, 5, 5);
        // offset (pad, pad) reproduces the input
        assert_eq!(crop(&img, 2, 2, 2), img);
        let shifted = crop(&img, 2, 2, 3);
        assert_eq!(shifted.data()[0], img.data()[1]);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(4, 5), 4);
    }

    proptest! {
        #[test]
        fn shape_and_range_preserved(seed in any::<u64>(), c in 1usize..3, h in 2usize..12, w in 2usize..12,
                                     flip in any::<bool>(), pad in 0usize..5, delta in 0.0f64..0.99) {
            let img = image(seed, c, h, w);
            let policy = AugmentPolicy {
                enabled: true,
                pad_crop: true,
                pad,
                horizontal_flip: flip,
                contrast_jitter: true,
                contrast_delta: delta,
            };
            let out = augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn double_flip_is_identity(seed in any::<u64>(), c in 1usize..3, h in 1usize..10, w in 1usize..10) {
            let img = image(seed, c, h, w);
            prop_assert_eq!(hflip(&hflip(&img)), img);
        }
    }
}
