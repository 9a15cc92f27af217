//! Pseudo segmentation labels from localization maps and saliency, and the
//! metrics used to score them.

use std::fmt::Write as _;

use crate::data::{LabelMap, BACKGROUND, IGNORE};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cue thresholds: object evidence above `alpha`, background where
/// saliency is below `beta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CueConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for CueConfig {
    fn default() -> Self {
        CueConfig { alpha: 0.2, beta: 0.06 }
    }
}

impl CueConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("alpha", self.alpha);
        kv.set("beta", self.beta);
        kv
    }

    pub fn from_kv(kv: &KeyValues, base: &CueConfig) -> Result<Self> {
        kv.reject_unknown("cue", &["alpha", "beta"])?;
        let cfg = CueConfig {
            alpha: kv.get("alpha")?.unwrap_or(base.alpha),
            beta: kv.get("beta")?.unwrap_or(base.beta),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Bilinear upsampling of `C × h × w` maps to `C × H × W` with half-pixel
/// centres (`align_corners = false`).
pub fn upsample_bilinear<T: Scalar>(m: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match *m.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("upsample_bilinear", format!("expected C×h×w, got {:?}", m.shape()))),
    };
    if height < h || width < w {
        return Err(Error::InvalidArgument(format!("upsample_bilinear cannot shrink {h}x{w} to {height}x{width}")));
    }
    // Source index pair and weight of the upper neighbour per output line.
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                let f = if i1 == i0 { 0.0 } else { s - i0 as f64 };
                (i0, i1, T::lit(f))
            })
            .collect()
    };
    let (ty, tx) = (taps(height, h), taps(width, w));
    let src = m.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, height, width], out)
}

/// Per-pixel rules, first match wins:
/// 1. some present class has `m^c > α`: the largest such class (lowest
///    index on ties), written as `c + 1`;
/// 2. saliency `< β`: background;
/// 3. otherwise ignore.
pub fn generate_pseudo_label(
    maps: &Tensor<f32>,
    present: &[u8],
    saliency: &Tensor<f32>,
    cfg: &CueConfig,
) -> Result<LabelMap> {
    let (c, h, w) = match *maps.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("generate_pseudo_label", format!("maps {:?}", maps.shape()))),
    };
    if saliency.shape() != [h, w] {
        return Err(Error::shape("generate_pseudo_label", format!("maps {h}x{w} vs saliency {:?}", saliency.shape())));
    }
    if present.len() != c {
        return Err(Error::shape("generate_pseudo_label", format!("{} presence flags for {c} classes", present.len())));
    }
    let np = h * w;
    let (alpha, beta) = (cfg.alpha as f32, cfg.beta as f32);
    let m = maps.data();
    let data = (0..np)
        .map(|p| {
            let mut best: Option<(usize, f32)> = None;
            for k in (0..c).filter(|&k| present[k] == 1) {
                let v = m[k * np + p];
                if v > alpha && best.map_or(true, |(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            match best {
                Some((k, _)) => k as u8 + 1,
                None if saliency.data()[p] < beta => BACKGROUND,
                None => IGNORE,
            }
        })
        .collect();
    LabelMap::new(h, w, data)
}

/// Intersection and union pixel counts per label `0..=C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    /// `labels` counts background plus every class.
    pub fn new(labels: usize) -> Self {
        IouCounts { intersection: vec![0; labels], union: vec![0; labels] }
    }

    /// Adds one prediction/ground-truth pair. Pixels with `gt == 255` are
    /// skipped; predicted ignore counts against the ground-truth class.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape(
                "miou",
                format!("prediction {}x{} vs ground truth {}x{}", pred.height, pred.width, gt.height, gt.width),
            ));
        }
        let n = self.union.len();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= n || (p >= n && p != IGNORE as usize) {
                return Err(Error::InvalidArgument(format!("label {} outside 0..{n}", p.max(g))));
            }
            if p == g {
                self.intersection[g] += 1;
                self.union[g] += 1;
            } else {
                self.union[g] += 1;
                if p < n {
                    self.union[p] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
        MiouReport { per_class, miou }
    }
}

/// Per-label IoU (`None` where the union is empty) and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl MiouReport {
    /// Plain-text table followed by a `miou=<value>` line.
    pub fn render(&self) -> String {
        let mut s = String::from("class\tiou\n");
        for (k, iou) in self.per_class.iter().enumerate() {
            let name = if k == 0 { "background".to_string() } else { format!("class{}", k - 1) };
            match iou {
                Some(v) => writeln!(s, "{name}\t{v:.6}").unwrap(),
                None => writeln!(s, "{name}\t-").unwrap(),
            }
        }
        writeln!(s, "miou={}", self.miou).unwrap();
        s
    }

    /// Reads the `miou=` line of a rendered report.
    pub fn parse_miou(text: &str) -> Option<f64> {
        text.lines().find_map(|l| l.strip_prefix("miou=")).and_then(|v| v.trim().parse().ok())
    }
}

/// mIoU over `C + 1` labels (background and `classes`), accumulated over
/// the whole set before dividing.
pub fn miou(preds: &[LabelMap], gts: &[LabelMap], classes: usize) -> Result<MiouReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape("miou", format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut counts = IouCounts::new(classes + 1);
    for (p, g) in preds.iter().zip(gts) {
        counts.add(p, g)?;
    }
    Ok(counts.report())
}

/// Object pixels reached by their class map.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Coverage {
    /// Object pixels whose class map exceeds the threshold.
    pub covered: u64,
    pub total: u64,
    /// Sum of the class map over object pixels.
    pub activation: f64,
}

impl Coverage {
    pub fn merge(self, other: Coverage) -> Coverage {
        Coverage {
            covered: self.covered + other.covered,
            total: self.total + other.total,
            activation: self.activation + other.activation,
        }
    }

    /// Recall fraction; `None` without object pixels.
    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.covered as f64 / self.total as f64)
    }

    pub fn mean_activation(&self) -> Option<f64> {
        (self.total > 0).then(|| self.activation / self.total as f64)
    }
}

/// Coverage of the ground-truth object pixels by `C × H × W` maps: a pixel
/// of class `c` counts when `m^c > threshold`.
pub fn object_coverage(maps: &Tensor<f32>, gt: &LabelMap, threshold: f32) -> Result<Coverage> {
    let (c, h, w) = match *maps.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("object_coverage", format!("maps {:?}", maps.shape()))),
    };
    if (gt.height, gt.width) != (h, w) {
        return Err(Error::shape("object_coverage", format!("maps {h}x{w} vs mask {}x{}", gt.height, gt.width)));
    }
    let np = h * w;
    let mut cov = Coverage::default();
    for (p, &g) in gt.data.iter().enumerate() {
        if g == BACKGROUND || g == IGNORE || g as usize > c {
            continue;
        }
        let v = maps.data()[(g as usize - 1) * np + p];
        cov.total += 1;
        cov.activation += v as f64;
        if v > threshold {
            cov.covered += 1;
        }
    }
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn rule_examples() {
        let cfg = CueConfig::default();
        let l = generate_pseudo_label(&Tensor::full([1, 3, 3], 0.9), &[1], &Tensor::full([3, 3], 1.0), &cfg).unwrap();
        assert!(l.data.iter().all(|&v| v == 1));
        let l = generate_pseudo_label(&Tensor::zeros([1, 3, 3]), &[1], &Tensor::zeros([3, 3]), &cfg).unwrap();
        assert!(l.data.iter().all(|&v| v == 0));
        // Object cue outranks the background cue; the larger map wins.
        let l = generate_pseudo_label(&t(&[2, 1, 1], vec![0.3, 0.5]), &[1, 1], &t(&[1, 1], vec![0.01]), &cfg).unwrap();
        assert_eq!(l.data, vec![2]);
        // Neither cue fires.
        let l = generate_pseudo_label(&t(&[1, 1, 1], vec![0.1]), &[1], &t(&[1, 1], vec![0.5]), &cfg).unwrap();
        assert_eq!(l.data, vec![IGNORE]);
        // Exact tie keeps the lower class; absent classes never win.
        let l = generate_pseudo_label(&t(&[3, 1, 1], vec![0.9, 0.7, 0.7]), &[0, 1, 1], &t(&[1, 1], vec![0.5]), &cfg).unwrap();
        assert_eq!(l.data, vec![2]);
    }

    #[test]
    fn geometry_errors() {
        let cfg = CueConfig::default();
        assert!(generate_pseudo_label(&Tensor::zeros([1, 2, 2]), &[1], &Tensor::zeros([3, 3]), &cfg).is_err());
        assert!(generate_pseudo_label(&Tensor::zeros([2, 2, 2]), &[1], &Tensor::zeros([2, 2]), &cfg).is_err());
        assert!(upsample_bilinear(&Tensor::<f32>::zeros([1, 4, 4]), 2, 8).is_err());
        let a = LabelMap::filled(2, 2, 0);
        assert!(miou(&[a], &[LabelMap::filled(2, 3, 0)], 1).is_err());
        assert!(CueConfig { alpha: 0.0, beta: 0.1 }.validate().is_err());
    }

    #[test]
    fn upsample_examples() {
        let c = upsample_bilinear(&Tensor::full([2, 3, 3], 0.25f64), 7, 5).unwrap();
        assert_eq!(c.shape(), &[2, 7, 5]);
        assert!(c.data().iter().all(|&v| v == 0.25));
        let one = upsample_bilinear(&t(&[1, 1, 1], vec![0.7]), 4, 6).unwrap();
        assert!(one.data().iter().all(|&v| v == 0.7));
        // 2×2 → 4×4: output centres sit at source coordinates -0.25, 0.25,
        // 0.75, 1.25, clamped to [0, 1].
        let m = t(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let up = upsample_bilinear(&m, 4, 4).unwrap();
        let pos = [0.0f64, 0.25, 0.75, 1.0];
        for (y, &sy) in pos.iter().enumerate() {
            for (x, &sx) in pos.iter().enumerate() {
                let want = (1.0 - sy) * ((1.0 - sx) * 0.0 + sx * 1.0) + sy * ((1.0 - sx) * 2.0 + sx * 3.0);
                assert!((up.data()[y * 4 + x] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn miou_examples() {
        let a = LabelMap::new(2, 2, vec![0, 1, 1, 2]).unwrap();
        assert_eq!(miou(&[a.clone()], &[a.clone()], 2).unwrap().miou, 1.0);
        let p = LabelMap::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let g = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let r = miou(&[p], &[g], 1).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0)]);
        // Ignored ground truth drops the pixel entirely.
        let p = LabelMap::new(1, 3, vec![1, 0, 255]).unwrap();
        let g = LabelMap::new(1, 3, vec![255, 0, 1]).unwrap();
        let r = miou(&[p], &[g], 1).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(0.0)]);
        assert_eq!(r.miou, 0.5);
        assert_eq!(MiouReport::parse_miou(&r.render()), Some(0.5));
    }

    #[test]
    fn coverage_examples() {
        let gt = LabelMap::new(2, 2, vec![0, 1, 1, 2]).unwrap();
        let full = object_coverage(&Tensor::ones([2, 2, 2]), &gt, 0.2).unwrap();
        assert_eq!(full.fraction(), Some(1.0));
        assert_eq!(full.mean_activation(), Some(1.0));
        let none = object_coverage(&Tensor::zeros([2, 2, 2]), &gt, 0.2).unwrap();
        assert_eq!(none.fraction(), Some(0.0));
        let m = t(&[2, 2, 2], vec![0.0, 0.5, 0.1, 0.0, 0.0, 0.0, 0.0, 0.3]);
        let c = object_coverage(&m, &gt, 0.2).unwrap();
        assert_eq!((c.covered, c.total), (2, 3));
        assert_eq!(object_coverage(&m, &LabelMap::filled(2, 2, 0), 0.2).unwrap().fraction(), None);
    }

    fn label_inputs() -> impl Strategy<Value = (Tensor<f32>, Vec<u8>, Tensor<f32>)> {
        (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(c, h, w)| {
            (
                prop::collection::vec(0.0f32..1.0, c * h * w).prop_map(move |d| t(&[c, h, w], d)),
                prop::collection::vec(0u8..2, c),
                prop::collection::vec(0.0f32..0.2, h * w).prop_map(move |d| t(&[h, w], d)),
            )
        })
    }

    proptest! {
        #[test]
        fn upsample_stays_in_range(h in 1usize..5, w in 1usize..5, dh in 0usize..6, dw in 0usize..6,
                                   data in prop::collection::vec(-2.0f64..2.0, 16)) {
            let m = t(&[1, h, w], data[..h * w].iter().map(|&v| v as f32).collect());
            let up = upsample_bilinear(&m, h + dh, w + dw).unwrap();
            let (lo, hi) = (m.min_value(), m.max_value());
            prop_assert!(up.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        }

        #[test]
        fn labels_are_background_present_or_ignore((maps, present, sal) in label_inputs()) {
            let l = generate_pseudo_label(&maps, &present, &sal, &CueConfig::default()).unwrap();
            for &v in &l.data {
                prop_assert!(v == BACKGROUND || v == IGNORE || present[v as usize - 1] == 1);
            }
        }

        #[test]
        fn cue_monotonicity((maps, present, sal) in label_inputs(), a1 in 0.01f64..0.99, a2 in 0.01f64..0.99,
                            b1 in 0.01f64..0.99, b2 in 0.01f64..0.99) {
            let (alo, ahi) = (a1.min(a2), a1.max(a2));
            let (blo, bhi) = (b1.min(b2), b1.max(b2));
            let lab = |alpha, beta| generate_pseudo_label(&maps, &present, &sal, &CueConfig { alpha, beta }).unwrap();
            let is_obj = |v: u8| v != BACKGROUND && v != IGNORE;
            let (lo, hi) = (lab(alo, 0.5), lab(ahi, 0.5));
            for (&a, &b) in lo.data.iter().zip(&hi.data) {
                prop_assert!(!is_obj(b) || is_obj(a));
            }
            let (lo, hi) = (lab(0.5, blo), lab(0.5, bhi));
            for (&a, &b) in lo.data.iter().zip(&hi.data) {
                prop_assert!(a != BACKGROUND || b == BACKGROUND);
            }
        }

        #[test]
        fn miou_order_and_ignore_invariance(pairs in prop::collection::vec(
            (prop::collection::vec(0u8..3, 6), prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 255]), 6)), 1..6),
            rot in 0usize..6) {
            let maps = |v: &Vec<u8>| LabelMap::new(2, 3, v.clone()).unwrap();
            let preds: Vec<LabelMap> = pairs.iter().map(|(p, _)| maps(p)).collect();
            let gts: Vec<LabelMap> = pairs.iter().map(|(_, g)| maps(g)).collect();
            let base = miou(&preds, &gts, 2).unwrap();
            let k = rot % preds.len();
            let (mut p2, mut g2) = (preds.clone(), gts.clone());
            p2.rotate_left(k);
            g2.rotate_left(k);
            p2.push(LabelMap::filled(2, 3, 1));
            g2.push(LabelMap::filled(2, 3, IGNORE));
            prop_assert_eq!(miou(&p2, &g2, 2).unwrap(), base);
        }
    }
}
