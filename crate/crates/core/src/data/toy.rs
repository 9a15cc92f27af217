//! Synthetic weakly-labelled dataset.
//!
//! Every image shows one or two objects on a noisy grey background. An
//! object's class fixes both its silhouette and its hue. Each object carries
//! a small, saturated, checkered "head" patch, the easiest cue to classify
//! from, on a striped body that is almost grey. That split is what makes
//! plain class activation maps sparse. Faint coloured background blobs can
//! be switched on as distractors.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 8;
pub const MIN_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub count: usize,
    pub classes: usize,
    pub side: usize,
    pub seed: u64,
    /// Probability that an image holds a second object of another class.
    pub two_object_prob: f64,
    /// Object diameter range as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    pub body_saturation: f64,
    /// Upper bound on faint coloured background blobs per image.
    pub max_blobs: usize,
    /// Radius of the saturated head patch relative to the object radius.
    pub head_fraction: f64,
    /// Amplitude of the uniform noise added to the oracle saliency.
    pub saliency_noise: f64,
}

impl ToyConfig {
    pub fn new(count: usize, classes: usize, side: usize, seed: u64) -> Self {
        ToyConfig {
            count,
            classes,
            side,
            seed,
            two_object_prob: 0.3,
            min_size: 0.55,
            max_size: 0.75,
            body_saturation: 0.05,
            head_fraction: 0.25,
            max_blobs: 0,
            saliency_noise: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("dataset must hold at least one sample".into()));
        }
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return Err(Error::InvalidArgument(format!("class count {} outside 1..={MAX_CLASSES}", self.classes)));
        }
        if self.side < MIN_SIDE {
            return Err(Error::InvalidArgument(format!("image side {} below {MIN_SIDE}", self.side)));
        }
        if !(0.0..=1.0).contains(&self.two_object_prob) {
            return Err(Error::InvalidArgument("two_object_prob outside [0, 1]".into()));
        }
        if !(0.0 < self.head_fraction && self.head_fraction <= 0.5) {
            return Err(Error::InvalidArgument("head_fraction outside (0, 0.5]".into()));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size < 1.0) {
            return Err(Error::InvalidArgument("object size range must satisfy 0 < min ≤ max < 1".into()));
        }
        Ok(())
    }

    /// Probability that a given class is drawn into an image.
    pub fn class_probability(&self) -> f64 {
        if self.classes == 1 {
            1.0
        } else {
            (1.0 + self.two_object_prob) / self.classes as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Silhouette {
    Disc,
    Square,
    Triangle,
    Diamond,
}

impl Silhouette {
    fn of_class(class: usize) -> Self {
        [Silhouette::Disc, Silhouette::Square, Silhouette::Triangle, Silhouette::Diamond][class % 4]
    }

    /// Whether offset `(dy, dx)` from the centre lies inside radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Silhouette::Disc => dy * dy + dx * dx <= r * r,
            Silhouette::Square => dy.abs() <= 0.82 * r && dx.abs() <= 0.82 * r,
            Silhouette::Triangle => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.62 * (dy + r),
            Silhouette::Diamond => dy.abs() + dx.abs() <= 1.1 * r,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

struct Object {
    class: usize,
    cy: f64,
    cx: f64,
    r: f64,
    head_y: f64,
    head_x: f64,
    head_r: f64,
    stripe_phase: f64,
}

fn place_objects(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let side = cfg.side as f64;
    let want = if cfg.classes > 1 && rng.gen_bool(cfg.two_object_prob) { 2 } else { 1 };
    let mut classes: Vec<usize> = (0..cfg.classes).collect();
    classes.shuffle(rng);
    let mut objects: Vec<Object> = Vec::new();
    for &class in classes.iter().take(want) {
        for _ in 0..64 {
            // Pairs are shrunk so that both fit side by side.
            let shrink = if want == 2 { 0.7 } else { 1.0 };
            let r = 0.5 * side * shrink * rng.gen_range(cfg.min_size..=cfg.max_size);
            let cy = rng.gen_range(r + 1.0..side - r - 1.0);
            let cx = rng.gen_range(r + 1.0..side - r - 1.0);
            let clear = objects.iter().all(|o| (o.cy - cy).abs() > o.r + r + 1.0 || (o.cx - cx).abs() > o.r + r + 1.0);
            if !clear {
                continue;
            }
            // Keep the whole head inside the silhouette: its centre and the
            // four extreme points of its rim must fall inside.
            let shape = Silhouette::of_class(class);
            let head_r = cfg.head_fraction * r;
            let (mut hy, mut hx) = (0.0, 0.0);
            for _ in 0..32 {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let reach = rng.gen_range(0.2..0.6) * r;
                let (y, x) = (reach * angle.sin(), reach * angle.cos());
                let rim = [(0.0, 0.0), (head_r, 0.0), (-head_r, 0.0), (0.0, head_r), (0.0, -head_r)];
                if rim.iter().all(|(oy, ox)| shape.contains(y + oy, x + ox, r)) {
                    (hy, hx) = (y, x);
                    break;
                }
            }
            objects.push(Object {
                class,
                cy,
                cx,
                r,
                head_y: cy + hy,
                head_x: cx + hx,
                head_r,
                stripe_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            });
            break;
        }
    }
    objects
}

fn generate_one(cfg: &ToyConfig, index: usize) -> Sample {
    let mut rng = rng::stream(cfg.seed, index as u64);
    let side = cfg.side;
    let n = side * side;

    // Background: grey level field, optionally with faint coloured blobs.
    let base = rng.gen_range(0.35..0.6);
    let mut rgb = vec![[0.0f64; 3]; n];
    let blob_count = rng.gen_range(cfg.max_blobs.min(2)..=cfg.max_blobs);
    let blobs: Vec<(f64, f64, f64, f64, f64)> = (0..blob_count)
        .map(|_| {
            (
                rng.gen_range(0.0..side as f64),
                rng.gen_range(0.0..side as f64),
                rng.gen_range(0.1..0.22) * side as f64,
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.1..cfg.body_saturation.max(0.11)),
            )
        })
        .collect();
    for y in 0..side {
        for x in 0..side {
            let mut px = hsv_to_rgb(0.0, 0.0, base + rng.gen_range(-0.06..0.06));
            for &(by, bx, br, hue, sat) in &blobs {
                let d2 = ((y as f64 - by).powi(2) + (x as f64 - bx).powi(2)) / (br * br);
                if d2 < 1.0 {
                    let c = hsv_to_rgb(hue, sat, base + 0.05);
                    let a = 1.0 - d2;
                    for k in 0..3 {
                        px[k] = (1.0 - a) * px[k] + a * c[k];
                    }
                }
            }
            rgb[y * side + x] = px;
        }
    }

    let hue_of = |class: usize| class as f64 / cfg.classes as f64;
    let mut mask = vec![0u8; n];
    for obj in place_objects(cfg, &mut rng) {
        let shape = Silhouette::of_class(obj.class);
        let hue = hue_of(obj.class);
        for y in 0..side {
            for x in 0..side {
                let (dy, dx) = (y as f64 + 0.5 - obj.cy, x as f64 + 0.5 - obj.cx);
                if !shape.contains(dy, dx, obj.r) {
                    continue;
                }
                let i = y * side + x;
                mask[i] = obj.class as u8 + 1;
                let hy = y as f64 + 0.5 - obj.head_y;
                let hx = x as f64 + 0.5 - obj.head_x;
                rgb[i] = if hy * hy + hx * hx <= obj.head_r * obj.head_r {
                    let check = ((y / 2) + (x / 2)) % 2 == 0;
                    hsv_to_rgb(hue, 1.0, if check { 1.0 } else { 0.62 })
                } else {
                    let stripe = ((dy + dx) * 0.9 + obj.stripe_phase).sin();
                    let v = 0.55 + 0.1 * stripe + rng.gen_range(-0.04..0.04);
                    hsv_to_rgb(hue + rng.gen_range(-0.02..0.02), cfg.body_saturation, v)
                };
            }
        }
    }

    let image = Tensor::from_fn([3, side, side], |i| {
        let (c, p) = (i / n, i % n);
        quantize(rgb[p][c])
    });

    // Oracle saliency: box-blurred foreground plus uniform noise.
    let radius = 2isize;
    let saliency = Tensor::from_fn([side, side], |p| {
        let (y, x) = ((p / side) as isize, (p % side) as isize);
        let (mut fg, mut count) = (0.0, 0.0);
        for yy in (y - radius).max(0)..=(y + radius).min(side as isize - 1) {
            for xx in (x - radius).max(0)..=(x + radius).min(side as isize - 1) {
                count += 1.0;
                if mask[yy as usize * side + xx as usize] != 0 {
                    fg += 1.0;
                }
            }
        }
        quantize(fg / count + rng.gen_range(-cfg.saliency_noise..=cfg.saliency_noise))
    });

    let gt_mask = LabelMap { height: side, width: side, data: mask };
    let labels = gt_mask.present_classes(cfg.classes);
    Sample { image, labels, gt_mask, saliency }
}

/// Generates `cfg.count` samples; sample `i` depends only on `(seed, i)`.
pub fn gen_toy_dataset(cfg: &ToyConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..cfg.count).map(|i| generate_one(cfg, i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_contract() {
        let s = gen_toy_dataset(&ToyConfig::new(1, 2, 32, 0)).unwrap();
        assert_eq!(s.len(), 1);
        s[0].validate().unwrap();
        assert!(s[0].labels.iter().any(|&l| l == 1));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = gen_toy_dataset(&ToyConfig::new(5, 4, 48, 11)).unwrap();
        let b = gen_toy_dataset(&ToyConfig::new(5, 4, 48, 11)).unwrap();
        let c = gen_toy_dataset(&ToyConfig::new(5, 4, 48, 12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(gen_toy_dataset(&ToyConfig::new(0, 2, 64, 0)).is_err());
        assert!(gen_toy_dataset(&ToyConfig::new(1, 9, 64, 0)).is_err());
        assert!(gen_toy_dataset(&ToyConfig::new(1, 0, 64, 0)).is_err());
        assert!(gen_toy_dataset(&ToyConfig::new(1, 2, 31, 0)).is_err());
    }

    #[test]
    fn every_sample_is_valid() {
        for s in gen_toy_dataset(&ToyConfig::new(40, 8, 64, 3)).unwrap() {
            s.validate().unwrap();
        }
    }

    #[test]
    fn class_frequencies_match_configuration() {
        let cfg = ToyConfig::new(500, 4, 64, 21);
        let data = gen_toy_dataset(&cfg).unwrap();
        let p = cfg.class_probability();
        for c in 0..4 {
            let freq = data.iter().filter(|s| s.labels[c] == 1).count() as f64 / data.len() as f64;
            assert!((freq - p).abs() <= 0.1, "class {c}: {freq} vs {p}");
        }
    }

    #[test]
    fn saliency_tracks_foreground() {
        for s in gen_toy_dataset(&ToyConfig::new(10, 4, 64, 5)).unwrap() {
            let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
            for (i, &m) in s.gt_mask.data.iter().enumerate() {
                if m == 0 {
                    bg += s.saliency.data()[i];
                    nb += 1.0;
                } else {
                    fg += s.saliency.data()[i];
                    nf += 1.0;
                }
            }
            assert!(fg / nf > bg / nb);
        }
    }
}
