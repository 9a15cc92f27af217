//! Pipeline stages. Each stage reads the previous stage's files and fails
//! with [`CliError::Missing`] when they are absent.
//!
//! Layout under the output root:
//!
//! ```text
//! data/ pretrain_data/        toy datasets
//! pretrained/                 backbone shared by every classifier run
//! classifier/ refiner/        checkpoints plus loss.csv
//! maps/<mode>/                NNNN_cK.drst maps, NNNN_cK.ppm heatmaps
//! labels/<mode>/              NNNN.pgm pseudo labels
//! reports/<mode>.txt          mIoU table
//! ```
//!
//! An ablation keeps datasets and the backbone at the root and gives each
//! setting its own run directory under `ablate/`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use drs_core::data::dataset::{read_dataset, toy_manifest, write_dataset};
use drs_core::data::pnm;
use drs_core::data::{batch_images, gen_toy_dataset, LabelMap, Sample};
use drs_core::kv::KeyValues;
use drs_core::labeling::{generate_pseudo_label, miou, object_coverage, upsample_bilinear, Coverage, MiouReport};
use drs_core::networks::{localization_for, multilabel_accuracy, train_classifier, train_refiner, EpochStats, MapSource, NetworkConfig, ParamStore};
use drs_core::tensor::io::{read_tensor, write_tensor};
use drs_core::{Error, Tensor};

use crate::colormap;
use crate::config::ExperimentConfig;
use crate::csvlog::{self, AblationRow};
use crate::error::{CliError, CliResult};
use crate::grid::Setting;

/// Output root plus the directory of the current run.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
    pub run: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Workspace { run: root.clone(), root }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn pretrain_data(&self) -> PathBuf {
        self.root.join("pretrain_data")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrained")
    }
    pub fn classifier(&self) -> PathBuf {
        self.run.join("classifier")
    }
    pub fn refiner(&self) -> PathBuf {
        self.run.join("refiner")
    }
    pub fn maps(&self, mode: MapSource) -> PathBuf {
        self.run.join("maps").join(mode_name(mode))
    }
    pub fn labels(&self, mode: MapSource) -> PathBuf {
        self.run.join("labels").join(mode_name(mode))
    }
    pub fn report(&self, mode: MapSource) -> PathBuf {
        self.run.join("reports").join(format!("{}.txt", mode_name(mode)))
    }
}

pub fn mode_name(mode: MapSource) -> &'static str {
    match mode {
        MapSource::Raw => "raw",
        MapSource::Drs => "drs",
        MapSource::Refined => "refined",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Held,
    All,
}

impl FromStr for Split {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "train" => Ok(Split::Train),
            "held" => Ok(Split::Held),
            "all" => Ok(Split::All),
            other => Err(CliError::Usage(format!("unknown split {other:?} (train, held, all)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Held => "held",
            Split::All => "all",
        })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io { path: path.to_path_buf(), source: e })
}

/// Empties `dir`, creating it if needed.
fn fresh_dir(dir: &Path) -> CliResult<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn copy_dir(from: &Path, to: &Path) -> CliResult<()> {
    fresh_dir(to)?;
    let mut entries: Vec<_> = fs::read_dir(from).map_err(|e| io_err(from, e))?.collect::<Result<_, _>>().map_err(|e| io_err(from, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let dst = to.join(e.file_name());
        fs::copy(e.path(), &dst).map_err(|err| io_err(&dst, err))?;
    }
    Ok(())
}

fn sample_id(i: usize) -> String {
    format!("{i:04}")
}

/// Writes the toy dataset and, when pretraining is on, the independent
/// pretraining set.
pub fn gen_data(cfg: &ExperimentConfig, ws: &Workspace) -> CliResult<()> {
    cfg.validate()?;
    let mut sets = vec![(cfg.data.clone(), ws.data())];
    if cfg.pretrain.enabled {
        sets.push((cfg.pretrain_data(), ws.pretrain_data()));
    }
    for (toy, dir) in sets {
        let samples = gen_toy_dataset(&toy)?;
        fresh_dir(&dir)?;
        let mut manifest = toy_manifest(&toy);
        manifest.push(("master_seed".into(), cfg.seed.to_string()));
        write_dataset(&dir, &samples, &manifest)?;
    }
    Ok(())
}

fn load_samples(dir: &Path, what: &str) -> CliResult<Vec<Sample>> {
    if !dir.join("labels.txt").exists() {
        return Err(CliError::Missing(format!("{what} missing at {}; run gen-data first", dir.display())));
    }
    Ok(read_dataset(dir)?)
}

/// The dataset split as `(global index, sample)` pairs.
pub fn load_split(cfg: &ExperimentConfig, ws: &Workspace, split: Split) -> CliResult<Vec<(usize, Sample)>> {
    let all = load_samples(&ws.data(), "dataset")?;
    if all.len() < cfg.train_count {
        return Err(CliError::Usage(format!("dataset has {} samples, data.train is {}", all.len(), cfg.train_count)));
    }
    let range = match split {
        Split::Train => 0..cfg.train_count,
        Split::Held => cfg.train_count..all.len(),
        Split::All => 0..all.len(),
    };
    Ok(all.into_iter().enumerate().filter(|(i, _)| range.contains(i)).collect())
}

fn load_checkpoint(dir: &Path, what: &str) -> CliResult<(ParamStore<f32>, NetworkConfig)> {
    if !dir.join("manifest.txt").exists() {
        return Err(CliError::Missing(format!("{what} checkpoint missing")));
    }
    Ok(ParamStore::load(dir)?)
}

fn pretrain_record(cfg: &ExperimentConfig) -> KeyValues {
    let mut kv = cfg.pretrain.schedule.to_kv();
    kv.set("count", cfg.pretrain.count);
    kv.set("data_seed", cfg.pretrain_data().seed);
    kv.set("init_seed", cfg.pretrain_init_seed());
    kv
}

/// Trains the suppression-free backbone on the pretraining set, or reuses
/// a cached one trained with identical settings.
pub fn ensure_pretrained(cfg: &ExperimentConfig, ws: &Workspace) -> CliResult<ParamStore<f32>> {
    let net = cfg.net.without_drs();
    let dir = ws.pretrained();
    let record = pretrain_record(cfg);
    if dir.join("manifest.txt").exists() && dir.join("pretrain.cfg").exists() {
        let (params, stored) = ParamStore::<f32>::load(&dir)?;
        if stored == net && KeyValues::read(dir.join("pretrain.cfg"))? == record {
            return Ok(params);
        }
    }
    let samples = load_samples(&ws.pretrain_data(), "pretraining dataset")?;
    let mut params = ParamStore::init_classifier(&net, cfg.pretrain_init_seed())?;
    let log = train_classifier(&samples, &net, &cfg.pretrain.schedule, &cfg.aug, &mut params)?;
    fresh_dir(&dir)?;
    params.save(&dir, &net)?;
    csvlog::write_loss_log(&dir.join("loss.csv"), &log)?;
    record.write(dir.join("pretrain.cfg"))?;
    Ok(params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutcome {
    pub log: Vec<EpochStats>,
    /// Multi-label accuracy with suppression on, over the held-out split
    /// (the training split when nothing is held out).
    pub accuracy: f64,
}

pub fn train_cls(cfg: &ExperimentConfig, ws: &Workspace) -> CliResult<ClassifierOutcome> {
    cfg.validate()?;
    let train: Vec<Sample> = load_split(cfg, ws, Split::Train)?.into_iter().map(|(_, s)| s).collect();
    let mut params = if cfg.pretrain.enabled {
        let backbone = ensure_pretrained(cfg, ws)?;
        ParamStore::init_from_backbone(&cfg.net, &backbone, cfg.init_seed())?
    } else {
        ParamStore::init_classifier(&cfg.net, cfg.init_seed())?
    };
    let log = train_classifier(&train, &cfg.net, &cfg.cls, &cfg.aug, &mut params)?;
    let held: Vec<Sample> = load_split(cfg, ws, Split::Held)?.into_iter().map(|(_, s)| s).collect();
    let scored = if held.is_empty() { &train } else { &held };
    let accuracy = multilabel_accuracy(&cfg.net, &params, scored, 10)?;

    let dir = ws.classifier();
    fresh_dir(&dir)?;
    params.save(&dir, &cfg.net)?;
    csvlog::write_loss_log(&dir.join("loss.csv"), &log)?;
    let mut kv = KeyValues::new();
    kv.set("accuracy", accuracy);
    kv.write(dir.join("accuracy.txt"))?;
    Ok(ClassifierOutcome { log, accuracy })
}

pub fn read_accuracy(ws: &Workspace) -> CliResult<f64> {
    let p = ws.classifier().join("accuracy.txt");
    if !p.exists() {
        return Err(CliError::Missing("classifier checkpoint missing".into()));
    }
    KeyValues::read(&p)?
        .get("accuracy")?
        .ok_or_else(|| CliError::Core(Error::Format { what: "accuracy file", detail: "no accuracy key".into() }))
}

pub fn train_refine(cfg: &ExperimentConfig, ws: &Workspace) -> CliResult<Vec<EpochStats>> {
    cfg.validate()?;
    let (classifier, net) = load_checkpoint(&ws.classifier(), "classifier")?;
    let train: Vec<Sample> = load_split(cfg, ws, Split::Train)?.into_iter().map(|(_, s)| s).collect();
    let mut refiner = ParamStore::refiner_from(&classifier)?;
    let aug = cfg.aug.clone().with_crop(net.input_side);
    let log = train_refiner(&train, &net, &classifier, &cfg.refine, &aug, &mut refiner)?;
    let dir = ws.refiner();
    fresh_dir(&dir)?;
    refiner.save(&dir, &net)?;
    csvlog::write_loss_log(&dir.join("loss.csv"), &log)?;
    Ok(log)
}

fn coverage_kv(c: &Coverage) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("covered", c.covered);
    kv.set("total", c.total);
    kv.set("activation", c.activation);
    kv.set("fraction", c.fraction().unwrap_or(0.0));
    kv.set("mean_activation", c.mean_activation().unwrap_or(0.0));
    kv
}

pub fn read_coverage(ws: &Workspace, mode: MapSource) -> CliResult<Coverage> {
    let p = ws.maps(mode).join("coverage.txt");
    if !p.exists() {
        return Err(CliError::Missing("localization maps missing; run dump-cams first".into()));
    }
    let kv = KeyValues::read(&p)?;
    let get = |k: &str| kv.raw(k).ok_or_else(|| CliError::Core(Error::Format { what: "coverage file", detail: format!("no {k}") }));
    let parse_err = |k: &str| CliError::Core(Error::Format { what: "coverage file", detail: format!("bad {k}") });
    Ok(Coverage {
        covered: get("covered")?.parse().map_err(|_| parse_err("covered"))?,
        total: get("total")?.parse().map_err(|_| parse_err("total"))?,
        activation: get("activation")?.parse().map_err(|_| parse_err("activation"))?,
    })
}

/// Writes maps and heatmaps for every present class of every sample in
/// `split`, and returns their object coverage.
pub fn dump_cams(cfg: &ExperimentConfig, ws: &Workspace, mode: MapSource, split: Split) -> CliResult<Coverage> {
    cfg.validate()?;
    let (classifier, net) = load_checkpoint(&ws.classifier(), "classifier")?;
    let refiner = match mode {
        MapSource::Refined => Some(load_checkpoint(&ws.refiner(), "refiner")?.0),
        _ => None,
    };
    let samples = load_split(cfg, ws, split)?;
    let dir = ws.maps(mode);
    fresh_dir(&dir)?;
    let mut coverage = Coverage::default();
    let mut index = String::new();
    let mut shape = None;
    for (i, s) in &samples {
        let id = sample_id(*i);
        let maps = localization_for(mode, &net, &classifier, refiner.as_ref(), &batch_images(&[s])?, Some(&s.labels))?;
        let (_, c, h, w) = maps.dims4()?;
        shape = Some((h, w));
        let maps = maps.reshape([c, h, w])?;
        let (hh, ww) = (s.height(), s.width());
        let up = upsample_bilinear(&maps, hh, ww)?;
        coverage = coverage.merge(object_coverage(&up, &s.gt_mask, cfg.coverage_threshold)?);
        for k in (0..c).filter(|&k| s.labels[k] == 1) {
            let plane = Tensor::new([h, w], maps.data()[k * h * w..(k + 1) * h * w].to_vec())?;
            write_tensor(dir.join(format!("{id}_c{k}.drst")), &plane)?;
            let big = Tensor::new([hh, ww], up.data()[k * hh * ww..(k + 1) * hh * ww].to_vec())?;
            colormap::overlay(&s.image, &big, cfg.overlay_alpha)?.write(dir.join(format!("{id}_c{k}.ppm")))?;
        }
        index.push_str(&id);
        index.push('\n');
    }
    let (h, w) = shape.unwrap_or((0, 0));
    let mut meta = KeyValues::new();
    meta.set("mode", mode_name(mode));
    meta.set("split", split);
    meta.set("classes", net.classes);
    meta.set("height", h);
    meta.set("width", w);
    meta.write(dir.join("maps.cfg"))?;
    write_text(&dir.join("index.txt"), &index)?;
    coverage_kv(&coverage).write(dir.join("coverage.txt"))?;
    Ok(coverage)
}

fn read_index(dir: &Path, missing: &str) -> CliResult<Vec<usize>> {
    let p = dir.join("index.txt");
    if !p.exists() {
        return Err(CliError::Missing(missing.into()));
    }
    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim().parse().map_err(|_| CliError::Core(Error::Format { what: "index", detail: format!("bad id {l:?}") }))
        })
        .collect()
}

/// Pseudo labels from the dumped maps of `mode`.
pub fn gen_labels(cfg: &ExperimentConfig, ws: &Workspace, mode: MapSource) -> CliResult<usize> {
    cfg.validate()?;
    let maps_dir = ws.maps(mode);
    let ids = read_index(&maps_dir, "localization maps missing; run dump-cams first")?;
    let meta = KeyValues::read(maps_dir.join("maps.cfg"))?;
    let need = |k: &str| -> CliResult<usize> {
        meta.get(k)?.ok_or_else(|| CliError::Core(Error::Format { what: "maps.cfg", detail: format!("no {k}") }))
    };
    let (classes, h, w) = (need("classes")?, need("height")?, need("width")?);
    let samples = load_split(cfg, ws, Split::All)?;
    let out = ws.labels(mode);
    fresh_dir(&out)?;
    let mut index = String::new();
    for &i in &ids {
        let (_, s) = samples.get(i).ok_or_else(|| CliError::Usage(format!("map id {i} outside the dataset")))?;
        if s.labels.len() != classes {
            return Err(CliError::Usage("maps and dataset disagree on the class count".into()));
        }
        let id = sample_id(i);
        let mut data = vec![0.0f32; classes * h * w];
        for k in (0..classes).filter(|&k| s.labels[k] == 1) {
            let plane: Tensor<f32> = read_tensor(maps_dir.join(format!("{id}_c{k}.drst")))?;
            if plane.shape() != [h, w] {
                return Err(CliError::Core(Error::Format { what: "map", detail: format!("{id}_c{k} has shape {:?}", plane.shape()) }));
            }
            data[k * h * w..(k + 1) * h * w].copy_from_slice(plane.data());
        }
        let maps = upsample_bilinear(&Tensor::new([classes, h, w], data)?, s.height(), s.width())?;
        let label = generate_pseudo_label(&maps, &s.labels, &s.saliency, &cfg.cue)?;
        pnm::write_label_map(out.join(format!("{id}.pgm")), &label)?;
        index.push_str(&id);
        index.push('\n');
    }
    write_text(&out.join("index.txt"), &index)?;
    Ok(ids.len())
}

/// Scores the pseudo labels of `mode` against the ground-truth masks.
pub fn eval(cfg: &ExperimentConfig, ws: &Workspace, mode: MapSource) -> CliResult<MiouReport> {
    cfg.validate()?;
    let dir = ws.labels(mode);
    let ids = read_index(&dir, "pseudo labels missing; run gen-labels first")?;
    let samples = load_split(cfg, ws, Split::All)?;
    let mut preds: Vec<LabelMap> = Vec::with_capacity(ids.len());
    let mut gts = Vec::with_capacity(ids.len());
    for &i in &ids {
        let (_, s) = samples.get(i).ok_or_else(|| CliError::Usage(format!("label id {i} outside the dataset")))?;
        preds.push(pnm::read_label_map(dir.join(format!("{}.pgm", sample_id(i))))?);
        gts.push(s.gt_mask.clone());
    }
    let report = miou(&preds, &gts, cfg.data.classes)?;
    write_text(&ws.report(mode), &report.render())?;
    Ok(report)
}

/// Runs every setting end to end under one seed and writes
/// `ablation.csv` at the root. Settings whose classifier configuration
/// coincides share one trained classifier.
pub fn ablate(cfg: &ExperimentConfig, root: &Path, settings: &[Setting]) -> CliResult<Vec<AblationRow>> {
    cfg.validate()?;
    if settings.is_empty() {
        return Err(CliError::Usage("empty ablation grid".into()));
    }
    let base = Workspace::new(root);
    if !base.data().join("labels.txt").exists() || (cfg.pretrain.enabled && !base.pretrain_data().join("labels.txt").exists()) {
        gen_data(cfg, &base)?;
    }
    let mut trained: HashMap<String, PathBuf> = HashMap::new();
    let mut rows = Vec::new();
    for setting in settings {
        let scfg = setting.apply(cfg)?;
        let ws = Workspace { root: root.to_path_buf(), run: root.join("ablate").join(setting.dir_name()) };
        fs::create_dir_all(&ws.run).map_err(|e| io_err(&ws.run, e))?;
        let key = scfg.net.to_kv().to_string();
        match trained.get(&key) {
            Some(src) => copy_dir(src, &ws.classifier())?,
            None => {
                train_cls(&scfg, &ws)?;
                trained.insert(key, ws.classifier());
            }
        }
        let mode = if setting.refine {
            train_refine(&scfg, &ws)?;
            MapSource::Refined
        } else {
            MapSource::Drs
        };
        let cov = dump_cams(&scfg, &ws, mode, Split::Train)?;
        gen_labels(&scfg, &ws, mode)?;
        let report = eval(&scfg, &ws, mode)?;
        rows.push(AblationRow {
            setting: setting.name.clone(),
            miou: report.miou,
            accuracy: read_accuracy(&ws)?,
            coverage: cov.fraction().unwrap_or(0.0),
            mean_activation: cov.mean_activation().unwrap_or(0.0),
        });
    }
    csvlog::write_ablation(&root.join("ablation.csv"), &rows)?;
    Ok(rows)
}
