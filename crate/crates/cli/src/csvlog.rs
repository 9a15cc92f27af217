//! CSV tables: per-epoch loss logs and ablation rows.

use std::path::Path;

use drs_core::networks::EpochStats;
use drs_core::Error;

use crate::error::{CliError, CliResult};

fn bad(detail: String) -> CliError {
    CliError::Core(Error::Format { what: "csv", detail })
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> CliResult<T> {
    let raw = rec.get(i).ok_or_else(|| bad(format!("missing column {i} in {rec:?}")))?;
    raw.parse().map_err(|_| bad(format!("unparsable value {raw:?}")))
}

/// `epoch,lr,loss` rows. Floats use the shortest exact decimal form so the
/// file reads back to identical values.
pub fn write_loss_log(path: &Path, log: &[EpochStats]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "loss"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), e.lr.to_string(), e.loss.to_string()])?;
    }
    w.flush().map_err(|e| CliError::Core(Error::Io { path: path.into(), source: e }))
}

pub fn read_loss_log(path: &Path) -> CliResult<Vec<EpochStats>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(EpochStats { epoch: field(&rec, 0)?, lr: field(&rec, 1)?, loss: field(&rec, 2)? })
        })
        .collect()
}

/// One ablation setting's outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    /// Pseudo-label mIoU on the training split.
    pub miou: f64,
    /// Multi-label accuracy on the held-out split.
    pub accuracy: f64,
    /// Object coverage of the maps the labels were built from.
    pub coverage: f64,
    pub mean_activation: f64,
}

const ABLATION_HEADER: [&str; 5] = ["setting", "miou", "accuracy", "coverage", "mean_activation"];

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ABLATION_HEADER)?;
    for r in rows {
        w.write_record([
            r.setting.clone(),
            r.miou.to_string(),
            r.accuracy.to_string(),
            r.coverage.to_string(),
            r.mean_activation.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::Core(Error::Io { path: path.into(), source: e }))
}

pub fn read_ablation(path: &Path) -> CliResult<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(ABLATION_HEADER) {
        return Err(bad(format!("unexpected ablation header in {}", path.display())));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(AblationRow {
                setting: field(&rec, 0)?,
                miou: field(&rec, 1)?,
                accuracy: field(&rec, 2)?,
                coverage: field(&rec, 3)?,
                mean_activation: field(&rec, 4)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let log: Vec<EpochStats> = (1..=4)
            .map(|e| EpochStats { epoch: e, lr: 1e-3 * 0.1f64.powi(e as i32 / 2), loss: 1.0 / (e as f64 * 3.0) + 1e-17 })
            .collect();
        write_loss_log(&p, &log).unwrap();
        assert_eq!(read_loss_log(&p).unwrap(), log);
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 5);
    }

    #[test]
    fn ablation_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let rows = vec![
            AblationRow { setting: "delta=0.55".into(), miou: 0.1 + 0.2, accuracy: 0.975, coverage: 2.0 / 3.0, mean_activation: 0.0 },
            AblationRow { setting: "layers=4,5,6".into(), miou: f64::MIN_POSITIVE, accuracy: 1.0, coverage: 0.5, mean_activation: 1e300 },
        ];
        write_ablation(&p, &rows).unwrap();
        assert_eq!(read_ablation(&p).unwrap(), rows);
    }
}
