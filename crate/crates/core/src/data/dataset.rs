//! On-disk dataset directory.
//!
//! ```text
//! images/NNNN.ppm     RGB image
//! masks/NNNN.pgm      0 background, c+1 class c, 255 ignore
//! saliency/NNNN.pgm   saliency scaled to 0..255
//! labels.txt          "NNNN 0101" per sample
//! manifest.txt        key=value generation parameters
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::pnm;
use super::{Sample, ToyConfig};
use crate::error::{Error, Result};

fn id(i: usize) -> String {
    format!("{i:04}")
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "dataset", detail: detail.into() }
}

/// Writes `samples` under `dir`; `manifest` lines are written verbatim.
pub fn write_dataset(dir: &Path, samples: &[Sample], manifest: &[(String, String)]) -> Result<()> {
    for sub in ["images", "masks", "saliency"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut labels = String::new();
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let n = id(i);
        pnm::write_image(dir.join("images").join(format!("{n}.ppm")), &s.image)?;
        pnm::write_label_map(dir.join("masks").join(format!("{n}.pgm")), &s.gt_mask)?;
        pnm::write_saliency(dir.join("saliency").join(format!("{n}.pgm")), &s.saliency)?;
        let bits: String = s.labels.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
        writeln!(labels, "{n} {bits}").unwrap();
    }
    let p = dir.join("labels.txt");
    fs::write(&p, labels).map_err(|e| Error::io(&p, e))?;
    let mut text = format!("count={}\n", samples.len());
    for (k, v) in manifest {
        writeln!(text, "{k}={v}").unwrap();
    }
    let p = dir.join("manifest.txt");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Manifest entries describing a toy generation run.
pub fn toy_manifest(cfg: &ToyConfig) -> Vec<(String, String)> {
    vec![
        ("seed".into(), cfg.seed.to_string()),
        ("classes".into(), cfg.classes.to_string()),
        ("side".into(), cfg.side.to_string()),
    ]
}

/// Reads `labels.txt` as `(id, multi-hot)` pairs.
pub fn read_labels(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let p = dir.join("labels.txt");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut parts = line.split_whitespace();
            let (Some(n), Some(bits), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(format!("malformed labels line {line:?}")));
            };
            let hot = bits
                .chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    _ => Err(bad(format!("bad label bit in {line:?}"))),
                })
                .collect::<Result<Vec<u8>>>()?;
            Ok((n.to_string(), hot))
        })
        .collect()
}

/// Reads `manifest.txt` as ordered key/value pairs.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let p = dir.join("manifest.txt");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| bad(format!("malformed manifest line {l:?}")))
        })
        .collect()
}

/// Loads every sample listed in `labels.txt`, in file order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let entries = read_labels(dir)?;
    let classes = entries.first().map_or(0, |(_, l)| l.len());
    entries
        .into_iter()
        .map(|(n, labels)| {
            if labels.len() != classes {
                return Err(bad(format!("sample {n} has {} label bits, expected {classes}", labels.len())));
            }
            let image = pnm::read_image(dir.join("images").join(format!("{n}.ppm")))?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            let gt_mask = pnm::read_label_map(dir.join("masks").join(format!("{n}.pgm")))?;
            let saliency = pnm::load_saliency(dir.join("saliency").join(format!("{n}.pgm")), Some((h, w)))?;
            let s = Sample { image, labels, gt_mask, saliency };
            s.validate().map_err(|e| bad(format!("sample {n}: {e}")))?;
            Ok(s)
        })
        .collect()
}
