use proptest::prelude::*;

use super::*;
use crate::data::{gen_toy_dataset, AugmentConfig, ToyConfig};
use crate::tensor::optim::LrSchedule;

fn small(classes: usize, side: usize) -> NetworkConfig {
    NetworkConfig { widths: [4, 6, 8, 8, 8, 8], ..NetworkConfig::toy(classes, side) }
}

fn image(n: usize, side: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform([n, 3, side, side], 0.0, 1.0, &mut crate::rng::stream(seed, 1))
}

fn forward(cfg: &NetworkConfig, params: &ParamStore<f32>, x: &Tensor<f32>, suppress: bool) -> (Tensor<f32>, Tensor<f32>) {
    predict(cfg, params, x, suppress).unwrap()
}

#[test]
fn zero_head_gives_half_scores() {
    let cfg = small(3, 32);
    let mut params = ParamStore::init_classifier(&cfg, 1).unwrap();
    params.get_mut("head.weight").unwrap().data_mut().fill(0.0);
    let (f, p) = forward(&cfg, &params, &image(2, 32, 0), true);
    assert_eq!(f.shape(), &[2, 3, 8, 8]);
    assert!(f.data().iter().all(|&v| v == 0.0));
    assert!(p.data().iter().all(|&v| v == 0.5));
}

#[test]
fn unit_delta_equals_no_suppression() {
    let x = image(2, 32, 3);
    let off = small(4, 32).without_drs();
    let params = ParamStore::init_classifier(&off, 9).unwrap();
    let plain = forward(&off, &params, &x, true);
    assert_eq!(forward(&small(4, 32), &params, &x, false), plain);
    let unit = NetworkConfig { drs: DrsConfig::constant(1.0).unwrap(), ..small(4, 32) };
    assert_eq!(forward(&unit, &params, &x, true), plain);
    let half = NetworkConfig { drs: DrsConfig::constant(0.5).unwrap(), ..small(4, 32) };
    assert_ne!(forward(&half, &params, &x, true), plain);
}

#[test]
fn output_geometry() {
    assert_eq!(NetworkConfig::toy(4, 64).output_side(64), 16);
    let cfg = NetworkConfig { pool_after: [true, true, true, true, false, false], ..NetworkConfig::toy(4, 64) };
    assert_eq!(cfg.output_side(64), 4);
    let params = ParamStore::refiner_from(&ParamStore::init_classifier(&cfg, 0).unwrap()).unwrap();
    assert_eq!(predict_refined(&cfg, &params, &image(1, 64, 0)).unwrap().shape(), &[1, 4, 4, 4]);
}

#[test]
fn rejects_bad_inputs() {
    let cfg = small(2, 32);
    let params = ParamStore::init_classifier(&cfg, 0).unwrap();
    assert!(predict(&cfg, &params, &image(1, 2, 0), true).is_err());
    assert!(predict(&cfg, &params, &Tensor::zeros([1, 1, 32, 32]), true).is_err());
    let other = small(3, 32);
    assert!(params.check_matches(&other, false).is_err());
}

#[test]
fn localization_forced_values() {
    let f = Tensor::new([1, 2, 2, 2], vec![2.0f32, -1.0, 0.0, 4.0, -1.0, -2.0, 0.0, -3.0]).unwrap();
    let m = localization_maps(&f, None).unwrap();
    assert_eq!(m.data(), &[0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let absent = localization_maps(&f, Some(&[0, 1])).unwrap();
    assert!(absent.data().iter().all(|&v| v == 0.0));
}

#[test]
fn refined_export_clamp() {
    let t = Tensor::new([3], vec![-0.2f32, 0.4, 1.3]).unwrap();
    assert_eq!(export_clamp(&t).data(), &[0.0, 0.4, 1.0]);
}

#[test]
fn refiner_starts_at_zero() {
    let cfg = small(2, 32);
    let params = ParamStore::refiner_from(&ParamStore::init_classifier(&cfg, 0).unwrap()).unwrap();
    assert!(predict_refined(&cfg, &params, &image(1, 32, 1)).unwrap().data().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn localization_range_and_scale_invariance(
        data in prop::collection::vec(-3.0f32..3.0, 2 * 9),
        scale in 0.1f32..10.0,
    ) {
        let f = Tensor::new([1, 2, 3, 3], data).unwrap();
        let m = localization_maps(&f, None).unwrap();
        prop_assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (plane, src) in m.data().chunks(9).zip(f.data().chunks(9)) {
            let peak = plane.iter().copied().fold(0.0f32, f32::max);
            let positive = src.iter().any(|&v| v > 0.0);
            prop_assert_eq!(peak, if positive { 1.0 } else { 0.0 });
        }
        let scaled = localization_maps(&f.map(|v| v * scale), None).unwrap();
        for (a, b) in m.data().iter().zip(scaled.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn config_round_trips() {
    let cfg = NetworkConfig { drs_sites: [false, false, false, true, true, true], ..NetworkConfig::toy(5, 48) };
    assert_eq!(NetworkConfig::from_kv(&cfg.to_kv(), &NetworkConfig::toy(1, 64)).unwrap(), cfg);
    for s in [TrainSchedule::classifier(), TrainSchedule::refiner()] {
        assert_eq!(TrainSchedule::from_kv(&s.to_kv(), &TrainSchedule::classifier()).unwrap(), s);
    }
    let mut kv = KeyValues::new();
    kv.set("drs_layers", "1,1");
    assert!(NetworkConfig::from_kv(&kv, &cfg).is_err());
    let mut kv = KeyValues::new();
    kv.set("decay_epochs", "20");
    assert!(TrainSchedule::from_kv(&kv, &TrainSchedule::classifier()).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = NetworkConfig { drs: DrsConfig::learnable(), drs_sites: [false, true, false, false, false, true], ..small(3, 32) };
    let params = ParamStore::init_classifier(&cfg, 4).unwrap();
    assert!(params.get("drs2.weight").is_ok() && params.get("drs1.weight").is_err());
    let dir = tempfile::tempdir().unwrap();
    params.save(dir.path(), &cfg).unwrap();
    let (loaded, loaded_cfg) = ParamStore::<f32>::load(dir.path()).unwrap();
    assert_eq!(loaded, params);
    assert_eq!(loaded_cfg, cfg);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "drs6.weight 8x8 layer6"));
}

#[test]
fn backbone_transfer_keeps_convolutions_only() {
    let plain = small(3, 32).without_drs();
    let pre = ParamStore::init_classifier(&plain, 1).unwrap();
    let cfg = NetworkConfig { drs: DrsConfig::learnable(), ..small(3, 32) };
    let p = ParamStore::init_from_backbone(&cfg, &pre, 2).unwrap();
    let fresh = ParamStore::<f32>::init_classifier(&cfg, 2).unwrap();
    for q in p.iter() {
        let expect = if q.name.starts_with("conv") { pre.get(&q.name).unwrap() } else { fresh.get(&q.name).unwrap() };
        assert_eq!(&q.value, expect, "{}", q.name);
    }
    let wider = NetworkConfig { widths: [5, 6, 8, 8, 8, 8], ..small(3, 32) };
    assert!(ParamStore::init_from_backbone(&wider, &pre, 0).is_err());
}

fn toy(n: usize, classes: usize, seed: u64) -> Vec<Sample> {
    gen_toy_dataset(&ToyConfig::new(n, classes, 32, seed)).unwrap()
}

use crate::data::Sample;

fn fast(lr: f64, epochs: usize, batch_size: usize) -> TrainSchedule {
    TrainSchedule { lr: LrSchedule::constant(lr), epochs, batch_size, ..TrainSchedule::classifier() }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let cfg = small(2, 32);
    let mut params = ParamStore::init_classifier(&cfg, 0).unwrap();
    let before = params.clone();
    train_classifier(&toy(6, 2, 0), &cfg, &fast(0.0, 1, 3), &AugmentConfig::for_side(32).with_crop(32), &mut params).unwrap();
    assert_eq!(params, before);
}

#[test]
fn single_sample_classifier_overfits() {
    let cfg = small(3, 32);
    let data = toy(1, 3, 5);
    let mut params = ParamStore::init_classifier(&cfg, 2).unwrap();
    let log = train_classifier(&data, &cfg, &fast(0.02, 200, 1), &AugmentConfig::identity(32), &mut params).unwrap();
    assert_eq!(log.len(), 200);
    assert!(log[199].loss < 0.05, "final BCE {}", log[199].loss);
}

#[test]
fn learnable_controllers_receive_updates() {
    let cfg = NetworkConfig { drs: DrsConfig::learnable(), ..small(2, 32) };
    let mut params = ParamStore::init_classifier(&cfg, 2).unwrap();
    let before = params.get("drs3.weight").unwrap().clone();
    train_classifier(&toy(4, 2, 1), &cfg, &fast(0.01, 2, 2), &AugmentConfig::identity(32), &mut params).unwrap();
    assert_ne!(params.get("drs3.weight").unwrap(), &before);
}

#[test]
fn refiner_overfits_and_stays_at_floor() {
    let cfg = small(2, 32);
    let data = toy(1, 2, 8);
    let mut cls = ParamStore::init_classifier(&cfg, 3).unwrap();
    train_classifier(&data, &cfg, &fast(0.02, 30, 1), &AugmentConfig::identity(32), &mut cls).unwrap();
    let mut refiner = ParamStore::refiner_from(&cls).unwrap();
    let sched = TrainSchedule { lr: LrSchedule::constant(1e-3), ..fast(1e-3, 500, 1) };
    let sched = TrainSchedule { optimizer: crate::tensor::optim::OptimizerKind::adam(), ..sched };
    let log = train_refiner(&data, &cfg, &cls, &sched, &AugmentConfig::identity(32), &mut refiner).unwrap();
    let at = log.iter().position(|e| e.loss < 1e-3).expect("MSE never fell below 1e-3");
    assert!(at < 500);
    let tail = &log[log.len() - 20..];
    assert!(tail.iter().all(|e| e.loss < 1e-3), "tail {:?}", tail.iter().map(|e| e.loss).collect::<Vec<_>>());
}

#[test]
fn training_is_deterministic() {
    let cfg = small(2, 32);
    let data = toy(6, 2, 4);
    let aug = AugmentConfig::for_side(32);
    let cfg = NetworkConfig { input_side: aug.crop, ..cfg };
    let run = || {
        let mut p = ParamStore::init_classifier(&cfg, 7).unwrap();
        let log = train_classifier(&data, &cfg, &fast(0.01, 2, 4), &aug, &mut p).unwrap();
        (p, log)
    };
    assert_eq!(run(), run());
}

#[test]
fn divergence_is_reported() {
    let cfg = small(2, 32);
    let mut params = ParamStore::init_classifier(&cfg, 0).unwrap();
    params.get_mut("head.bias").unwrap().data_mut()[0] = f32::NAN;
    let err = train_classifier(&toy(2, 2, 0), &cfg, &fast(0.01, 1, 2), &AugmentConfig::identity(32), &mut params).unwrap_err();
    assert!(matches!(err, Error::Numerical(_) | Error::NonFinite { .. }), "{err}");
}

#[test]
fn training_preconditions() {
    let cfg = small(2, 32);
    let mut params = ParamStore::init_classifier(&cfg, 0).unwrap();
    let aug = AugmentConfig::identity(32);
    assert!(train_classifier(&[], &cfg, &fast(0.01, 1, 2), &aug, &mut params).is_err());
    assert!(train_classifier(&toy(2, 3, 0), &cfg, &fast(0.01, 1, 2), &aug, &mut params).is_err());
    assert!(train_classifier(&toy(2, 2, 0), &cfg, &fast(0.01, 1, 2), &AugmentConfig::for_side(32), &mut params).is_err());
}
