//! Ablation grid specs: `delta:none,0.9,0.55`, `layers:456,123`,
//! `controller:constant,learnable`, `refine:off,on`.

use drs_core::drs::{ControllerMode, DrsConfig};
use drs_core::networks::STAGES;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
enum Change {
    /// Constant controller with this δ, or no suppression for `None`.
    Delta(Option<f64>),
    Layers([bool; STAGES]),
    Controller(Option<ControllerMode>),
    Refine,
    Keep,
}

/// One grid point applied on top of the experiment config.
#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub name: String,
    pub refine: bool,
    change: Change,
}

impl Setting {
    pub fn apply(&self, cfg: &ExperimentConfig) -> CliResult<ExperimentConfig> {
        let mut out = cfg.clone();
        let net = &mut out.net;
        match &self.change {
            Change::Delta(None) | Change::Controller(None) => *net = net.without_drs(),
            Change::Delta(Some(d)) => net.drs = DrsConfig::constant(*d)?,
            Change::Layers(flags) => net.drs_sites = *flags,
            Change::Controller(Some(mode)) => net.drs.mode = *mode,
            Change::Refine | Change::Keep => {}
        }
        out.validate()?;
        Ok(out)
    }

    /// Directory-safe form of the name.
    pub fn dir_name(&self) -> String {
        self.name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
    }
}

fn usage(msg: String) -> CliError {
    CliError::Usage(msg)
}

fn layers(entry: &str) -> CliResult<[bool; STAGES]> {
    match entry {
        "none" => return Ok([false; STAGES]),
        "all" => return Ok([true; STAGES]),
        _ => {}
    }
    let mut flags = [false; STAGES];
    for ch in entry.chars() {
        let d = ch.to_digit(10).map(|d| d as usize).filter(|d| (1..=STAGES).contains(d));
        let Some(d) = d else {
            return Err(usage(format!("layer entry {entry:?}: expected digits 1-{STAGES}, `all` or `none`")));
        };
        if flags[d - 1] {
            return Err(usage(format!("layer entry {entry:?} repeats {d}")));
        }
        flags[d - 1] = true;
    }
    if entry.is_empty() {
        return Err(usage("empty layer entry".into()));
    }
    Ok(flags)
}

/// Parses one `kind:entry,entry,…` spec.
pub fn parse_grid(spec: &str) -> CliResult<Vec<Setting>> {
    let (kind, list) = spec.split_once(':').ok_or_else(|| usage(format!("grid {spec:?} needs the form kind:entries")))?;
    let entries: Vec<&str> = list.split(',').map(str::trim).collect();
    if entries.iter().any(|e| e.is_empty()) {
        return Err(usage(format!("grid {spec:?} has an empty entry")));
    }
    entries
        .into_iter()
        .map(|e| {
            let (change, refine, name) = match kind {
                "delta" if e == "none" => (Change::Delta(None), false, "none".to_string()),
                "delta" => {
                    let d: f64 = e.parse().map_err(|_| usage(format!("delta entry {e:?} is not a number")))?;
                    if !(d > 0.0 && d <= 1.0) {
                        return Err(usage(format!("delta {d} outside (0, 1]")));
                    }
                    (Change::Delta(Some(d)), false, format!("delta={e}"))
                }
                "layers" => (Change::Layers(layers(e)?), false, format!("layers={e}")),
                "controller" => {
                    let mode = match e {
                        "none" => None,
                        "constant" => Some(ControllerMode::Constant),
                        "learnable" => Some(ControllerMode::Learnable),
                        _ => return Err(usage(format!("controller entry {e:?} (constant, learnable, none)"))),
                    };
                    (Change::Controller(mode), false, format!("controller={e}"))
                }
                "refine" => match e {
                    "on" => (Change::Refine, true, "refine=on".to_string()),
                    "off" => (Change::Keep, false, "refine=off".to_string()),
                    _ => return Err(usage(format!("refine entry {e:?} (on, off)"))),
                },
                _ => return Err(usage(format!("unknown grid kind {kind:?} (delta, layers, controller, refine)"))),
            };
            Ok(Setting { name, refine, change })
        })
        .collect()
}

/// Concatenates several specs, dropping repeated setting names.
pub fn parse_grids<S: AsRef<str>>(specs: &[S]) -> CliResult<Vec<Setting>> {
    let mut out: Vec<Setting> = Vec::new();
    for spec in specs {
        for s in parse_grid(spec.as_ref())? {
            if !out.iter().any(|o| o.name == s.name) {
                out.push(s);
            }
        }
    }
    Ok(out)
}
