mod common;

use advnas_core::attack::AttackConfig;
use advnas_core::checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
use advnas_core::config::ExperimentConfig;
use advnas_core::data::{augment, parse_cifar10, synth_blobs, DataSpec, Dataset, SynthSpec, CIFAR_RECORD};
use advnas_core::nn::Model;
use advnas_core::optim::Sgd;
use advnas_core::space::{DiscreteNetwork, Genotype};
use advnas_core::train::{adversarial_train, evaluate, train_epoch, TrainConfig, TrainCurve, TrainState};
use advnas_core::ErrorCategory;
use common::{rng, tiny_config, LinearModel};

fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..CIFAR_RECORD - 1).map(fill));
    r
}

#[test]
fn cifar_records_parse_channel_planar() {
    let mut bytes = record(5, |i| if i < 1024 { 255 } else { 0 });
    bytes.extend(record(0, |i| (i % 256) as u8));
    let d = parse_cifar10(&bytes).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.labels(), [5, 0]);
    assert_eq!(d.image_shape(), [3, 32, 32]);
    let img = d.images().data();
    assert!(img[..1024].iter().all(|v| *v == 1.0));
    assert!(img[1024..3072].iter().all(|v| *v == 0.0));
    assert_eq!(img[3072 + 33], 33.0 / 255.0);
    assert_eq!(d.classes(), 10);
}

#[test]
fn cifar_truncation_and_bad_labels() {
    let mut bytes = record(1, |_| 0);
    bytes.extend([0u8; 10]);
    let e = parse_cifar10(&bytes).unwrap_err();
    assert!(e.to_string().contains("offset 3073"), "{e}");
    assert_eq!(e.category(), ErrorCategory::Data);
    let e = parse_cifar10(&record(10, |_| 0)).unwrap_err();
    assert!(e.to_string().contains("label"), "{e}");
}

#[test]
fn synthetic_data_is_seeded() {
    let spec = SynthSpec {
        samples: 20,
        classes: 4,
        ..SynthSpec::default()
    };
    let a = synth_blobs(&spec).unwrap();
    assert_eq!(a, synth_blobs(&spec).unwrap());
    assert_ne!(a, synth_blobs(&SynthSpec { seed: 1, ..spec.clone() }).unwrap());
    assert_eq!(a.images().shape(), [20, 3, 16, 16]);
    assert_eq!(a.labels()[..5], [0, 1, 2, 3, 0]);
    assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(synth_blobs(&SynthSpec { classes: 1, ..spec }).is_err());
}

fn centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let dim: usize = train.image_shape().iter().product();
    let k = train.classes();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0.0; k];
    for (img, &l) in train.images().data().chunks(dim).zip(train.labels()) {
        for (s, v) in sums[l].iter_mut().zip(img) {
            *s += v;
        }
        counts[l] += 1.0;
    }
    let mut correct = 0;
    for (img, &l) in test.images().data().chunks(dim).zip(test.labels()) {
        let dist = |c: usize| -> f64 { img.iter().zip(&sums[c]).map(|(v, s)| (v - s / counts[c]).powi(2)).sum() };
        let best = (0..k).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        correct += (best == l) as usize;
    }
    correct as f64 / test.len() as f64
}

#[test]
fn well_separated_blobs_are_linearly_separable() {
    let spec = DataSpec::Synthetic {
        train: 200,
        test: 200,
        classes: 2,
        extent: 16,
        separation: 1.0,
        noise: 0.05,
        jitter: 1.0,
        seed: 3,
    };
    let s = spec.load().unwrap();
    assert_eq!((s.train.len(), s.test.len()), (200, 200));
    assert!(centroid_accuracy(&s.train, &s.test) >= 0.99);
}

#[test]
fn augment_keeps_shape_and_is_seeded() {
    let d = synth_blobs(&SynthSpec { samples: 4, ..SynthSpec::default() }).unwrap();
    let a = augment(d.images(), 2, &mut rng(1));
    assert_eq!(a.shape(), d.images().shape());
    assert_eq!(a, augment(d.images(), 2, &mut rng(1)));
}

#[test]
fn step_decay_at_milestones() {
    let c = TrainConfig::default();
    assert_eq!(c.lr_at(99), 0.1);
    assert!((c.lr_at(100) - 0.01).abs() < 1e-15);
    assert!((c.lr_at(150) - 0.001).abs() < 1e-15);
    assert!(TrainConfig { milestones: vec![150, 100], ..c.clone() }.validate().is_err());
    assert!(TrainConfig { milestones: vec![0, 10], ..c.clone() }.validate().is_err());
    assert!(TrainConfig { milestones: vec![300], ..c }.validate().is_ok());
}

fn tiny_data(samples: usize, seed: u64) -> Dataset {
    synth_blobs(&SynthSpec {
        samples,
        classes: 3,
        height: 8,
        width: 8,
        separation: 0.8,
        noise: 0.1,
        jitter: 1.0,
        seed,
    })
    .unwrap()
}

fn tiny_net(seed: u64) -> DiscreteNetwork {
    let cfg = tiny_config();
    let g = Genotype::random(&cfg, &mut rng(seed));
    DiscreteNetwork::new(&g, cfg, &mut rng(seed + 1)).unwrap()
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 0.05,
        milestones: vec![],
        batch_size: 4,
        attack: AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 2),
        eval_batch_size: 8,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_budget_training_sees_natural_batches() {
    let cfg = TrainConfig {
        attack: AttackConfig::pgd(0.0, 0.0, 1),
        ..tiny_train(1)
    };
    let st = adversarial_train(tiny_net(0), &cfg, &tiny_data(9, 1), None).unwrap();
    let c = &st.curves[0];
    assert_eq!(c.train_nat_loss, c.train_adv_loss);
    assert!(c.test_natural.is_none());
}

#[test]
fn training_records_curves_and_evaluates() {
    let test = tiny_data(6, 3);
    let st = adversarial_train(tiny_net(1), &tiny_train(2), &tiny_data(8, 2), Some(&test)).unwrap();
    assert_eq!(st.curves.len(), 2);
    assert_eq!(st.epoch, 2);
    assert_eq!(st.curves[1].test_natural.unwrap().total, 6);
    let row = st.curves[1].csv_row();
    assert_eq!(TrainCurve::from_csv_row(&row).unwrap(), st.curves[1]);
}

#[test]
fn evaluate_constant_model() {
    let data = synth_blobs(&SynthSpec { samples: 10, ..SynthSpec::default() }).unwrap();
    let m = LinearModel::constant([3, 16, 16], vec![1.0, 0.0]);
    let r = evaluate(&m, &data, &[], 4).unwrap();
    assert!(r.attacks.is_empty());
    assert_eq!((r.natural.correct, r.natural.total), (5, 10));
    let r = evaluate(&m, &data, &[AttackConfig::fgsm(0.1), AttackConfig::pgd(0.1, 0.05, 3)], 4).unwrap();
    assert!(r.attacks.iter().all(|a| a.counts.correct == 5));
    let table = r.to_table();
    assert!(table.contains("natural") && table.contains("PGD^3") && table.contains("50.00%"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(json["natural"]["correct"], 5);
}

fn checkpoint_after(epochs: usize) -> (TrainState<DiscreteNetwork>, Checkpoint) {
    let st = adversarial_train(tiny_net(4), &tiny_train(epochs), &tiny_data(8, 5), None).unwrap();
    let ck = Checkpoint::capture(&st.net, &st.sgd, &st.rng, st.epoch as u64, "h".into(), "arch".into(), "{}".into());
    (st, ck)
}

#[test]
fn checkpoint_bytes_roundtrip_exactly() {
    let (_, ck) = checkpoint_after(1);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ckpt");
    ck.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&p).unwrap(), ck);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (_, ck) = checkpoint_after(1);
    let bytes = ck.to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 1;
    let e = Checkpoint::from_bytes(&bad).unwrap_err();
    assert_eq!(e.category(), ErrorCategory::Data);
    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let e = Checkpoint::from_bytes(&bad).unwrap_err();
    assert!(e.to_string().contains("version 2"), "{e}");
    assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
}

#[test]
fn restore_refuses_other_networks() {
    let (_, ck) = checkpoint_after(1);
    let cfg = advnas_core::space::SupernetConfig {
        init_channels: 6,
        ..tiny_config()
    };
    let mut other = DiscreteNetwork::new(tiny_net(4).genotype(), cfg, &mut rng(0)).unwrap();
    let before = other.params().checksum();
    let mut sgd = Sgd::new(0.9, 0.0);
    assert!(ck.restore_into(&mut other, &mut sgd).is_err());
    assert_eq!(other.params().checksum(), before);
    assert_eq!(sgd.velocities().count(), 0);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (full, _) = checkpoint_after(2);
    let (_, ck) = checkpoint_after(1);
    let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let cfg = tiny_train(2);
    let mut st = TrainState::new(tiny_net(4), &cfg);
    let fresh = tiny_net(4);
    let mut net = DiscreteNetwork::new(fresh.genotype(), fresh.config().clone(), &mut rng(1234)).unwrap();
    st.rng = ck.restore_into(&mut net, &mut st.sgd).unwrap();
    st.net = net;
    st.epoch = ck.epoch as usize;
    train_epoch(&mut st, &cfg, &tiny_data(8, 5), None).unwrap();
    assert_eq!(st.net.params().checksum(), full.net.params().checksum());
    assert_eq!(st.curves.last(), full.curves.last());
}

#[test]
fn config_toml_roundtrip_and_overrides() {
    let c = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), c);
    let mut o = c.clone();
    o.apply_override("search.epochs=2").unwrap();
    o.apply_override("search.first_stage_epochs = 1").unwrap();
    o.apply_override("train.attack.steps=3").unwrap();
    o.apply_override("supernet.placement=A-A-A").unwrap();
    o.validate().unwrap();
    assert_eq!((o.search.epochs, o.search.first_stage_epochs, o.train.attack.steps), (2, 1, 3));
    assert_eq!(o.supernet.placement.to_string(), "A-A-A");
    assert!(o.clone().apply_override("search.nope=1").is_err());
    assert!(o.clone().apply_override("search.epochs=abc").is_err());
    assert!(o.clone().apply_override("noequals").is_err());
    let mut bad = c.clone();
    bad.apply_override("search.first_stage_epochs=99").unwrap();
    assert!(bad.validate().is_err());
    assert!(ExperimentConfig::from_toml("[search]\nunknown = 1\n").is_err());
    let mut s = c;
    s.set_seed(5);
    assert_eq!((s.search.seed, s.train.seed), (5, 5));
}
