//! Binary portable pixmap (P6) and graymap (P5) files.
//!
//! See <https://netpbm.sourceforge.net/doc/ppm.html>. Only 8-bit samples
//! (`maxval ≤ 255`) are supported.

use std::fs;
use std::path::Path;

use super::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    /// 1 (graymap) or 3 (pixmap).
    pub channels: usize,
    pub maxval: u8,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "netpbm file", detail: detail.into() }
}

impl Pixmap {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        Pixmap { width, height, channels: 1, maxval: 255, data }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        Pixmap { width, height, channels: 3, maxval: 255, data }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut token = || -> Result<String> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(bad(format!("unsupported magic {other:?}"))),
        };
        let mut number = |name: &str| -> Result<usize> {
            token()?.parse::<usize>().map_err(|_| bad(format!("invalid {name}")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if width == 0 || height == 0 {
            return Err(bad("zero dimension"));
        }
        if maxval == 0 || maxval > 255 {
            return Err(bad(format!("maxval {maxval} not in 1..=255")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = width * height * channels;
        let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
        if raster.len() != need {
            return Err(bad(format!("expected {need} raster bytes, found {}", raster.len())));
        }
        Ok(Pixmap { width, height, channels, maxval: maxval as u8, data: raster.to_vec() })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format { what, detail: format!("{}: {detail}", path.display()) },
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `3 × H × W` tensor in `[0, 1]` to an 8-bit pixmap.
pub fn image_to_pixmap(image: &Tensor<f32>) -> Result<Pixmap> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        _ => return Err(Error::shape("image_to_pixmap", format!("{:?}", image.shape()))),
    };
    let np = h * w;
    let d = image.data();
    let data = (0..np).flat_map(|p| (0..3).map(move |c| to_byte(d[c * np + p]))).collect();
    Ok(Pixmap::rgb(w, h, data))
}

pub fn pixmap_to_image(pm: &Pixmap) -> Result<Tensor<f32>> {
    if pm.channels != 3 {
        return Err(bad("expected a colour pixmap"));
    }
    let np = pm.width * pm.height;
    let scale = pm.maxval as f32;
    Tensor::new(
        [3, pm.height, pm.width],
        (0..3 * np).map(|i| pm.data[(i % np) * 3 + i / np] as f32 / scale).collect(),
    )
}

/// `H × W` tensor in `[0, 1]` to an 8-bit graymap.
pub fn map_to_graymap(map: &Tensor<f32>) -> Result<Pixmap> {
    match *map.shape() {
        [h, w] => Ok(Pixmap::gray(w, h, map.data().iter().map(|&v| to_byte(v)).collect())),
        _ => Err(Error::shape("map_to_graymap", format!("{:?}", map.shape()))),
    }
}

pub fn graymap_to_map(pm: &Pixmap) -> Result<Tensor<f32>> {
    if pm.channels != 1 {
        return Err(bad("expected a graymap"));
    }
    let scale = pm.maxval as f32;
    Tensor::new([pm.height, pm.width], pm.data.iter().map(|&v| v as f32 / scale).collect())
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    image_to_pixmap(image)?.write(path)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    pixmap_to_image(&Pixmap::read(path)?)
}

/// Reads a saliency graymap scaled to `[0, 1]`; `expected` is `(H, W)` of
/// the paired image when known.
pub fn load_saliency(path: impl AsRef<Path>, expected: Option<(usize, usize)>) -> Result<Tensor<f32>> {
    let map = graymap_to_map(&Pixmap::read(path.as_ref())?)?;
    if let Some((h, w)) = expected {
        if map.shape() != [h, w] {
            return Err(Error::shape("load_saliency", format!("saliency {:?} vs image {h}x{w}", map.shape())));
        }
    }
    Ok(map)
}

pub fn write_saliency(path: impl AsRef<Path>, saliency: &Tensor<f32>) -> Result<()> {
    map_to_graymap(saliency)?.write(path)
}

pub fn write_label_map(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    Pixmap::gray(labels.width, labels.height, labels.data.clone()).write(path)
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let pm = Pixmap::read(path)?;
    if pm.channels != 1 || pm.maxval != 255 {
        return Err(bad("label maps are 8-bit graymaps with maxval 255"));
    }
    LabelMap::new(pm.height, pm.width, pm.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn graymap_scaling() {
        let pm = Pixmap::decode(b"P5\n2 2\n255\n\x00\xff\x80\x40").unwrap();
        let m = graymap_to_map(&pm).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let pm = Pixmap::decode(b"P6 # rgb\n# size\n1   1\t255\n\x01\x02\x03").unwrap();
        assert_eq!((pm.width, pm.height, pm.channels), (1, 1, 3));
        assert_eq!(pm.data, vec![1, 2, 3]);
    }

    #[test]
    fn malformed_headers() {
        assert!(Pixmap::decode(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(Pixmap::decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(Pixmap::decode(b"P5\n2 x\n255\n").is_err());
        assert!(Pixmap::decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(Pixmap::decode(b"P5\n1").is_err());
    }

    #[test]
    fn saliency_geometry_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.pgm");
        write_saliency(&p, &Tensor::full([2, 3], 0.5)).unwrap();
        assert!(load_saliency(&p, Some((2, 3))).is_ok());
        assert!(load_saliency(&p, Some((3, 2))).is_err());
    }

    proptest! {
        #[test]
        fn eight_bit_images_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut s = seed;
            let bytes: Vec<u8> = (0..w * h * 3).map(|_| { s = crate::rng::splitmix64(s); s as u8 }).collect();
            let pm = Pixmap::rgb(w, h, bytes);
            let image = pixmap_to_image(&Pixmap::decode(&pm.encode()).unwrap()).unwrap();
            prop_assert_eq!(image_to_pixmap(&image).unwrap(), pm);
        }
    }
}
