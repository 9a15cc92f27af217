// Public-API run on a tiny toy set: train, localize, label, score, reload.

use drs_core::data::{batch_images, gen_toy_dataset, AugmentConfig, Sample, ToyConfig, IGNORE};
use drs_core::drs::DrsConfig;
use drs_core::labeling::{generate_pseudo_label, miou, upsample_bilinear, CueConfig};
use drs_core::networks::{localization_for, predict, train_classifier, train_refiner, MapSource, NetworkConfig, ParamStore, TrainSchedule};
use drs_core::tensor::optim::LrSchedule;
use drs_core::Tensor;

const SIDE: usize = 32;
const CLASSES: usize = 3;

fn tiny_net() -> NetworkConfig {
    NetworkConfig { widths: [8, 8, 16, 16, 16, 16], drs: DrsConfig::constant(0.7).unwrap(), ..NetworkConfig::toy(CLASSES, SIDE) }
}

fn schedule(epochs: usize) -> TrainSchedule {
    TrainSchedule { lr: LrSchedule { base: 1e-2, decay_epochs: vec![], factor: 0.1 }, epochs, batch_size: 4, ..TrainSchedule::classifier() }
}

fn data() -> Vec<Sample> {
    gen_toy_dataset(&ToyConfig::new(16, CLASSES, SIDE, 9)).unwrap()
}

fn maps_of(cfg: &NetworkConfig, p: &ParamStore<f32>, s: &Sample) -> Tensor<f32> {
    let m = localization_for(MapSource::Drs, cfg, p, None, &batch_images(&[s]).unwrap(), Some(&s.labels)).unwrap();
    let (_, c, h, w) = m.dims4().unwrap();
    m.reshape([c, h, w]).unwrap()
}

#[test]
fn train_localize_label_and_score() {
    let samples = data();
    let cfg = tiny_net();
    let aug = AugmentConfig::identity(SIDE);
    let mut params = ParamStore::init_classifier(&cfg, 4).unwrap();
    let log = train_classifier(&samples, &cfg, &schedule(3), &aug, &mut params).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|e| e.loss.is_finite()));

    let cue = CueConfig::default();
    let mut preds = Vec::new();
    for s in &samples {
        let m = maps_of(&cfg, &params, s);
        assert_eq!(m.shape(), [CLASSES, SIDE / 4, SIDE / 4]);
        assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let plane = m.numel() / CLASSES;
        for (c, chunk) in m.data().chunks(plane).enumerate() {
            if s.labels[c] == 0 {
                assert!(chunk.iter().all(|&v| v == 0.0), "absent class {c} must be masked");
            }
        }
        let up = upsample_bilinear(&m, SIDE, SIDE).unwrap();
        let label = generate_pseudo_label(&up, &s.labels, &s.saliency, &cue).unwrap();
        for &v in &label.data {
            let ok = v == 0 || v == IGNORE || (v >= 1 && s.labels[v as usize - 1] == 1);
            assert!(ok, "label {v} for present {:?}", s.labels);
        }
        preds.push(label);
    }
    let gts: Vec<_> = samples.iter().map(|s| s.gt_mask.clone()).collect();
    let report = miou(&preds, &gts, CLASSES).unwrap();
    assert!((0.0..=1.0).contains(&report.miou));
    assert_eq!(report.per_class.len(), CLASSES + 1);

    // The oracle masks themselves score perfectly.
    assert_eq!(miou(&gts, &gts, CLASSES).unwrap().miou, 1.0);
}

#[test]
fn checkpoint_reload_reproduces_predictions() {
    let samples = data();
    let cfg = tiny_net();
    let mut params = ParamStore::init_classifier(&cfg, 1).unwrap();
    train_classifier(&samples[..8], &cfg, &schedule(1), &AugmentConfig::identity(SIDE), &mut params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    params.save(dir.path(), &cfg).unwrap();
    let (back, back_cfg) = ParamStore::<f32>::load(dir.path()).unwrap();
    assert_eq!(back_cfg, cfg);
    let x = batch_images(&samples.iter().take(4).collect::<Vec<_>>()).unwrap();
    let (fa, pa) = predict(&cfg, &params, &x, true).unwrap();
    let (fb, pb) = predict(&back_cfg, &back, &x, true).unwrap();
    assert_eq!(fa, fb);
    assert_eq!(pa, pb);
}

#[test]
fn refiner_regresses_towards_classifier_maps() {
    let samples = data();
    let cfg = tiny_net();
    let aug = AugmentConfig::identity(SIDE);
    let mut cls = ParamStore::init_classifier(&cfg, 2).unwrap();
    train_classifier(&samples, &cfg, &schedule(2), &aug, &mut cls).unwrap();
    let mut refiner = ParamStore::refiner_from(&cls).unwrap();
    let sched = TrainSchedule { lr: LrSchedule { base: 1e-3, decay_epochs: vec![], factor: 0.1 }, ..TrainSchedule::refiner() };
    let log = train_refiner(&samples, &cfg, &cls, &TrainSchedule { epochs: 4, batch_size: 4, ..sched }, &aug, &mut refiner).unwrap();
    assert!(log.last().unwrap().loss < log[0].loss, "refiner loss {:?}", log.iter().map(|e| e.loss).collect::<Vec<_>>());
    let x = batch_images(&[&samples[0]]).unwrap();
    let m = localization_for(MapSource::Refined, &cfg, &cls, Some(&refiner), &x, Some(&samples[0].labels)).unwrap();
    assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(localization_for(MapSource::Refined, &cfg, &cls, None, &x, None).is_err());
}

#[test]
fn backbone_transfer_keeps_convolutions_and_replaces_head() {
    let cfg = tiny_net();
    let pre = ParamStore::<f32>::init_classifier(&cfg.without_drs(), 7).unwrap();
    let tuned = ParamStore::init_from_backbone(&cfg, &pre, 8).unwrap();
    // Biases start at zero either way, so only weights tell the two apart.
    for p in pre.iter().filter(|p| p.name.ends_with("weight")) {
        let same = tuned.get(&p.name).unwrap() == &p.value;
        assert_eq!(same, p.name.starts_with("conv"), "{}", p.name);
    }
    let wrong = NetworkConfig { widths: [4, 8, 16, 16, 16, 16], ..cfg.clone() };
    assert!(ParamStore::init_from_backbone(&wrong, &pre, 8).is_err());
}
