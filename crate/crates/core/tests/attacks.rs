mod common;

use advnas_core::attack::{
    adversarial_accuracy, fgsm, input_gradient, natural_accuracy, pgd, pgd_with_rng, transfer_attack, AttackConfig,
    AttackKind,
};
use advnas_core::nn::Model;
use advnas_core::space::{Genotype, DiscreteNetwork};
use advnas_tensor::Tensor;
use common::{rng, tiny_config, uniform, LinearModel};
use proptest::prelude::*;

fn toy_net(seed: u64) -> DiscreteNetwork {
    let cfg = tiny_config();
    let g = Genotype::random(&cfg, &mut rng(seed));
    DiscreteNetwork::new(&g, cfg, &mut rng(seed + 100)).unwrap()
}

/// Logit of class 0 is the mean of channel 0; class 1 is constant.
fn one_feature(side: usize) -> LinearModel {
    let w = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    LinearModel::new([1, side, side], w, Tensor::from_vec(vec![0.0, 0.0]))
}

#[test]
fn fgsm_with_zero_budget_is_identity() {
    let net = toy_net(1);
    let x = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng(2));
    assert_eq!(fgsm(&net, &x, &[0, 1], 0.0).unwrap(), x);
    let cfg = AttackConfig::pgd(0.0, 0.01, 5);
    assert_eq!(pgd(&net, &x, &[0, 1], &cfg).unwrap(), x);
}

#[test]
fn constant_model_has_zero_input_gradient() {
    let m = LinearModel::constant([3, 4, 4], vec![0.5, -0.5]);
    let x = uniform(&[3, 3, 4, 4], 0.0, 1.0, &mut rng(3));
    let (loss, g) = input_gradient(&m, &x, &[0, 1, 0]).unwrap();
    assert!(g.data().iter().all(|v| *v == 0.0));
    assert!(loss.is_finite());
    let adv = fgsm(&m, &x, &[0, 1, 0], 0.1).unwrap();
    assert_eq!(adv, x);
}

#[test]
fn fgsm_moves_each_pixel_by_epsilon_against_the_label() {
    let m = one_feature(3);
    let x = Tensor::full(&[2, 1, 3, 3], 0.5);
    let adv = fgsm(&m, &x, &[0, 1], 0.1).unwrap();
    for (i, v) in adv.data().iter().enumerate() {
        let expect = if i < 9 { 0.4 } else { 0.6 };
        assert!((v - expect).abs() < 1e-15, "{i}: {v}");
    }
    let edge = Tensor::full(&[1, 1, 3, 3], 0.95);
    let adv = fgsm(&m, &edge, &[1], 0.1).unwrap();
    assert!(adv.data().iter().all(|v| *v == 1.0));
}

#[test]
fn single_step_pgd_without_random_start_equals_fgsm() {
    let net = toy_net(4);
    let x = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng(5));
    let eps = 8.0 / 255.0;
    let cfg = AttackConfig::pgd(eps, eps, 1).with_random_init(false);
    assert_eq!(pgd(&net, &x, &[2, 0], &cfg).unwrap(), fgsm(&net, &x, &[2, 0], eps).unwrap());
}

#[test]
fn pgd_is_deterministic_and_leaves_params_alone() {
    let net = toy_net(6);
    let before = net.params().checksum();
    let x = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng(7));
    let cfg = AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 3).with_seed(11);
    let a = pgd(&net, &x, &[1, 1], &cfg).unwrap();
    let b = pgd(&net, &x, &[1, 1], &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, pgd(&net, &x, &[1, 1], &cfg.with_seed(12)).unwrap());
    assert_eq!(net.params().checksum(), before);
}

#[test]
fn pgd_raises_the_loss() {
    let net = toy_net(8);
    let x = uniform(&[4, 3, 8, 8], 0.0, 1.0, &mut rng(9));
    let y = [0, 1, 2, 0];
    let cfg = AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 7);
    let adv = pgd(&net, &x, &y, &cfg).unwrap();
    let (clean, _) = input_gradient(&net, &x, &y).unwrap();
    let (attacked, _) = input_gradient(&net, &adv, &y).unwrap();
    assert!(attacked > clean, "{attacked} <= {clean}");
}

#[test]
fn config_validation() {
    assert!(AttackConfig::pgd(1.5, 0.1, 3).validate().is_err());
    assert!(AttackConfig::pgd(0.1, -0.1, 3).validate().is_err());
    assert!(AttackConfig::pgd(0.1, 0.1, 0).validate().is_err());
    let mut f = AttackConfig::fgsm(0.1);
    f.steps = 2;
    assert!(f.validate().is_err());
    assert_eq!(AttackConfig::train_default().label(), "PGD^7");
    assert_eq!(AttackConfig::fgsm(0.1).kind, AttackKind::Fgsm);
    let s = AttackConfig::search_default();
    assert_eq!((s.epsilon, s.step_size, s.steps), (2.0 / 255.0, 1.0 / 510.0, 7));
}

#[test]
fn mismatched_labels_are_rejected() {
    let net = toy_net(1);
    let x = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng(2));
    assert!(fgsm(&net, &x, &[0], 0.1).is_err());
    assert!(fgsm(&net, &x, &[0, 7], 0.1).is_err());
}

#[test]
fn self_transfer_equals_white_box() {
    let net = toy_net(10);
    let x = uniform(&[10, 3, 8, 8], 0.0, 1.0, &mut rng(11));
    let y: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let cfg = AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 5).with_seed(3);
    let t = transfer_attack(&net, &net, &x, &y, &cfg, 4).unwrap();
    let wb = adversarial_accuracy(&net, &x, &y, &cfg, 4).unwrap();
    assert_eq!(t.transfer, wb);
    assert_eq!(t.natural, natural_accuracy(&net, &x, &y, 4).unwrap());
}

#[test]
fn constant_target_is_unaffected_by_transfer() {
    let src = toy_net(12);
    let tgt = LinearModel::constant([3, 8, 8], vec![0.0, 1.0, 0.0]);
    let x = uniform(&[6, 3, 8, 8], 0.0, 1.0, &mut rng(13));
    let y = [1, 1, 0, 2, 1, 0];
    let cfg = AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 3);
    let t = transfer_attack(&src, &tgt, &x, &y, &cfg, 4).unwrap();
    assert_eq!(t.natural.correct, 3);
    assert_eq!(t.transfer, t.natural);
}

#[test]
fn transfer_needs_matching_shapes() {
    let src = toy_net(1);
    let tgt = LinearModel::constant([3, 4, 4], vec![0.0, 1.0, 0.0]);
    let x = uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(0));
    assert!(transfer_attack(&src, &tgt, &x, &[0], &AttackConfig::fgsm(0.1), 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pgd_stays_in_the_ball_and_the_box(
        seed in any::<u64>(),
        eps in 0.0f64..0.3,
        step in 0.0f64..0.2,
        steps in 1usize..5,
        random_init in any::<bool>(),
    ) {
        let m = one_feature(4);
        let mut r = rng(seed);
        let x = uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut r);
        let cfg = AttackConfig::pgd(eps, step, steps).with_random_init(random_init);
        let adv = pgd_with_rng(&m, &x, &[0, 1], &cfg, &mut r).unwrap();
        for (a, o) in adv.data().iter().zip(x.data()) {
            prop_assert!((a - o).abs() <= eps + 1e-12);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }
}
