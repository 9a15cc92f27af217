//! Fixed blue→red colormap and heatmap rendering.

use std::sync::OnceLock;

use drs_core::data::pnm::Pixmap;
use drs_core::{Error, Result, Tensor};

const TABLE_TEXT: &str = include_str!("../assets/colormap.txt");

/// The 256-entry table, entry 0 being the floor colour.
pub fn table() -> &'static [[u8; 3]; 256] {
    static TABLE: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0u8; 3]; 256];
        let rows: Vec<&str> = TABLE_TEXT.lines().filter(|l| !l.trim().is_empty()).collect();
        assert_eq!(rows.len(), 256, "colormap table needs 256 rows");
        for (entry, row) in t.iter_mut().zip(rows) {
            let rgb: Vec<u8> = row.split_whitespace().map(|v| v.parse().expect("colormap entry")).collect();
            *entry = [rgb[0], rgb[1], rgb[2]];
        }
        t
    })
}

/// Table index for a map value; values are clamped to `[0, 1]`.
pub fn index(v: f32) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

fn plane(map: &Tensor<f32>) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::Shape { op: "heatmap", detail: format!("expected H×W map, got {:?}", map.shape()) }),
    }
}

/// Colour-mapped rendering of an `H × W` map.
pub fn heatmap(map: &Tensor<f32>) -> Result<Pixmap> {
    let (h, w) = plane(map)?;
    let t = table();
    Ok(Pixmap::rgb(w, h, map.data().iter().flat_map(|&v| t[index(v)]).collect()))
}

/// Heatmap blended over an RGB image `3 × H × W` with opacity `alpha`.
pub fn overlay(image: &Tensor<f32>, map: &Tensor<f32>, alpha: f32) -> Result<Pixmap> {
    let (h, w) = plane(map)?;
    if image.shape() != [3, h, w] {
        return Err(Error::Shape { op: "overlay", detail: format!("image {:?} vs map {h}x{w}", image.shape()) });
    }
    let heat = heatmap(map)?;
    let np = h * w;
    let mut data = Vec::with_capacity(3 * np);
    for p in 0..np {
        for c in 0..3 {
            let base = image.data()[c * np + p].clamp(0.0, 1.0) * 255.0;
            let v = alpha * heat.data[3 * p + c] as f32 + (1.0 - alpha) * base;
            data.push(v.round() as u8);
        }
    }
    Ok(Pixmap::rgb(w, h, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_runs_blue_to_red() {
        let t = table();
        assert_eq!(t[0], [0, 0, 255]);
        assert_eq!(t[255], [255, 0, 0]);
        assert!(t.windows(2).all(|p| p[0] != p[1]));
    }

    #[test]
    fn zero_map_is_floor_colour() {
        let pm = heatmap(&Tensor::zeros([3, 5])).unwrap();
        assert!(pm.data.chunks(3).all(|px| px == table()[0]));
    }

    #[test]
    fn full_opacity_overlay_is_the_heatmap() {
        let map = Tensor::from_fn([2, 2], |i| i as f32 / 3.0);
        let img = Tensor::full([3, 2, 2], 0.3f32);
        assert_eq!(overlay(&img, &map, 1.0).unwrap(), heatmap(&map).unwrap());
        let bare = overlay(&img, &map, 0.0).unwrap();
        assert!(bare.data.iter().all(|&v| v == 77));
    }
}
