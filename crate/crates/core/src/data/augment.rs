//! Random crop, horizontal flip and colour jitter.
//!
//! The geometric part is applied identically to image, mask and saliency;
//! jitter touches the image only. Labels are recounted from the cropped mask.

use rand::Rng;

use super::{LabelMap, Sample};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop: usize,
    pub flip_prob: f64,
    /// Multiplicative brightness range `1 ± brightness`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl AugmentConfig {
    /// Crop at 80% of `side`, flip with probability ½, ±0.2 jitter.
    pub fn for_side(side: usize) -> Self {
        AugmentConfig { crop: side * 4 / 5, flip_prob: 0.5, brightness: 0.2, contrast: 0.2, saturation: 0.2 }
    }

    pub fn with_crop(self, crop: usize) -> Self {
        AugmentConfig { crop, ..self }
    }

    /// No-op augmentation for `side`.
    pub fn identity(side: usize) -> Self {
        AugmentConfig { crop: side, flip_prob: 0.0, brightness: 0.0, contrast: 0.0, saturation: 0.0 }
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Source pixel for every output pixel of one geometric draw.
#[derive(Clone, Debug, PartialEq)]
pub struct CropPlan {
    pub top: isize,
    pub left: isize,
    pub size: usize,
    pub flip: bool,
}

impl CropPlan {
    pub fn source(&self, y: usize, x: usize, height: usize, width: usize) -> (usize, usize) {
        let x = if self.flip { self.size - 1 - x } else { x };
        (reflect(self.top + y as isize, height), reflect(self.left + x as isize, width))
    }
}

fn offset(rng: &mut impl Rng, extent: usize, crop: usize) -> isize {
    if extent > crop {
        rng.gen_range(0..=(extent - crop)) as isize
    } else {
        0
    }
}

/// Augments `s` with randomness drawn from `seed` alone.
pub fn augment(s: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    let mut rng = rng::stream(seed, 0xA06);
    let (h, w) = (s.height(), s.width());
    let plan = CropPlan {
        top: offset(&mut rng, h, cfg.crop),
        left: offset(&mut rng, w, cfg.crop),
        size: cfg.crop,
        flip: cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob.min(1.0)),
    };
    let mut jitter = |amp: f64| if amp > 0.0 { 1.0 + rng.gen_range(-amp..=amp) } else { 1.0 };
    let factors = [jitter(cfg.brightness), jitter(cfg.contrast), jitter(cfg.saturation)];
    apply(s, &plan, factors)
}

/// Applies a fixed crop/flip plan and `[brightness, contrast, saturation]`
/// factors.
pub fn apply(s: &Sample, plan: &CropPlan, factors: [f64; 3]) -> Sample {
    let (h, w) = (s.height(), s.width());
    let size = plan.size;
    let np = size * size;
    let src: Vec<(usize, usize)> = (0..np).map(|p| plan.source(p / size, p % size, h, w)).collect();

    let mut image = Tensor::from_fn([3, size, size], |i| {
        let (c, p) = (i / np, i % np);
        let (y, x) = src[p];
        s.image.data()[(c * h + y) * w + x]
    });
    let mask_data = src.iter().map(|&(y, x)| s.gt_mask.get(y, x)).collect();
    let saliency = Tensor::from_fn([size, size], |p| {
        let (y, x) = src[p];
        s.saliency.data()[y * w + x]
    });

    if factors != [1.0, 1.0, 1.0] {
        jitter_colors(&mut image, factors);
    }
    let gt_mask = LabelMap { height: size, width: size, data: mask_data };
    let labels = gt_mask.present_classes(s.classes());
    Sample { image, labels, gt_mask, saliency }
}

fn jitter_colors(image: &mut Tensor<f32>, [brightness, contrast, saturation]: [f64; 3]) {
    let np = image.shape()[1] * image.shape()[2];
    let d = image.data_mut();
    for v in d.iter_mut() {
        *v = (*v as f64 * brightness) as f32;
    }
    let gray = |d: &[f32], p: usize| 0.299 * d[p] as f64 + 0.587 * d[np + p] as f64 + 0.114 * d[2 * np + p] as f64;
    let mean = (0..np).map(|p| gray(d, p)).sum::<f64>() / np as f64;
    for v in d.iter_mut() {
        *v = ((*v as f64 - mean) * contrast + mean) as f32;
    }
    for p in 0..np {
        let g = gray(d, p);
        for c in 0..3 {
            let v = &mut d[c * np + p];
            *v = ((*v as f64 - g) * saturation + g) as f32;
        }
    }
    for v in d.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy::{gen_toy_dataset, ToyConfig};
    use proptest::prelude::*;

    fn sample() -> Sample {
        gen_toy_dataset(&ToyConfig::new(1, 4, 40, 7)).unwrap().remove(0)
    }

    /// Image whose channels encode the source row and column.
    fn coordinate_sample(h: usize, w: usize) -> Sample {
        let np = h * w;
        let image = Tensor::from_fn([3, h, w], |i| {
            let (c, p) = (i / np, i % np);
            match c {
                0 => (p / w) as f32 / 255.0,
                1 => (p % w) as f32 / 255.0,
                _ => 0.5,
            }
        });
        let mask = LabelMap { height: h, width: w, data: (0..np).map(|p| ((p / w) * w + p % w) as u8 % 5).collect() };
        let labels = mask.present_classes(4);
        Sample { image, labels, gt_mask: mask, saliency: Tensor::from_fn([h, w], |p| (p % 251) as f32 / 255.0) }
    }

    #[test]
    fn identity_config_is_identity() {
        let s = sample();
        assert_eq!(augment(&s, &AugmentConfig::identity(40), 3), s);
    }

    #[test]
    fn double_flip_restores() {
        let s = sample();
        let plan = CropPlan { top: 0, left: 0, size: 40, flip: true };
        let once = apply(&s, &plan, [1.0; 3]);
        assert_ne!(once.image, s.image);
        assert_eq!(apply(&once, &plan, [1.0; 3]), s);
    }

    #[test]
    fn crop_can_drop_a_label() {
        // Class 0 lives only in the right half; a left-half crop drops it.
        let (h, w) = (8, 8);
        let mut mask = LabelMap::filled(h, w, 0);
        mask.data[3 * w + 6] = 1;
        mask.data[2 * w + 1] = 2;
        let s = Sample {
            image: Tensor::full([3, h, w], 0.5),
            labels: mask.present_classes(2),
            gt_mask: mask,
            saliency: Tensor::zeros([h, w]),
        };
        assert_eq!(s.labels, vec![1, 1]);
        let out = apply(&s, &CropPlan { top: 0, left: 0, size: 4, flip: false }, [1.0; 3]);
        assert_eq!(out.labels, vec![0, 1]);
    }

    #[test]
    fn small_images_are_reflect_padded() {
        let s = coordinate_sample(4, 4);
        let out = apply(&s, &CropPlan { top: 0, left: 0, size: 6, flip: false }, [1.0; 3]);
        let cols: Vec<f32> = (0..6).map(|x| out.image.data()[36 + x] * 255.0).collect();
        assert_eq!(cols, vec![0.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(0, 1), 0);
    }

    #[test]
    fn jitter_keeps_unit_range_and_leaves_mask() {
        let s = sample();
        let cfg = AugmentConfig { crop: 32, flip_prob: 0.5, brightness: 0.5, contrast: 0.5, saturation: 0.5 };
        for seed in 0..10 {
            let a = augment(&s, &cfg, seed);
            a.validate().unwrap();
            assert_eq!(a.image.shape(), &[3, 32, 32]);
        }
    }

    proptest! {
        #[test]
        fn geometry_is_shared_by_all_fields(seed in any::<u64>(), crop in 2usize..14) {
            let s = coordinate_sample(10, 12);
            let cfg = AugmentConfig { crop, flip_prob: 0.5, brightness: 0.0, contrast: 0.0, saturation: 0.0 };
            let a = augment(&s, &cfg, seed);
            let np = crop * crop;
            for p in 0..np {
                let sy = (a.image.data()[p] * 255.0).round() as usize;
                let sx = (a.image.data()[np + p] * 255.0).round() as usize;
                prop_assert_eq!(a.gt_mask.data[p], s.gt_mask.get(sy, sx));
                prop_assert_eq!(a.saliency.data()[p], s.saliency.data()[sy * 12 + sx]);
            }
        }
    }
}
