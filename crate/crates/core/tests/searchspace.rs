mod common;

use advnas_core::nn::{apply_op, Builder, Fwd, Model, Mode, OpBlock, OpKind, ParamStore, Session};
use advnas_core::space::{
    discretize, edge_count, edge_index, mixed_op, mixture_weights, ArchParams, CellGenotype, CellKind, DiscreteNetwork,
    EdgeRetention, GeneEdge, Genotype, Placement, Supernet, SupernetConfig,
};
use advnas_tensor::{finite_difference_check, Tape, Tensor};
use common::{rng, tiny_config, uniform};
use proptest::prelude::*;
use rand::Rng;

fn seven_blocks(c: usize, seed: u64) -> (Vec<OpBlock>, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let mut b = Builder { store: &mut store, rng: &mut r };
    let blocks = OpKind::ALL
        .iter()
        .map(|&k| OpBlock::new(&mut b, &format!("e.{k}"), k, c, 1, false).unwrap())
        .collect();
    (blocks, store)
}

fn mixed(blocks: &[OpBlock], store: &ParamStore, x: &Tensor, alpha: &[f64]) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let mut sess = Session::eval();
    let xv = tape.constant(x.clone());
    let a = tape.constant(Tensor::from_vec(alpha.to_vec()));
    let w = tape.softmax(a).unwrap();
    let mut f = Fwd { tape: &mut tape, store, sess: &mut sess };
    let y = mixed_op(&mut f, blocks, xv, w, 0).unwrap();
    let parts: Vec<Tensor> = blocks
        .iter()
        .map(|b| {
            let v = apply_op(b, &mut f, xv).unwrap();
            f.tape.value(v).clone()
        })
        .collect();
    (tape.value(y).clone(), parts)
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn equal_alpha_averages_the_seven_ops() {
    let (blocks, store) = seven_blocks(3, 1);
    let x = uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut rng(2));
    let (y, parts) = mixed(&blocks, &store, &x, &[0.25; 7]);
    let mut mean = Tensor::zeros(x.shape());
    for p in &parts {
        mean = mean.zip_map(p, |a, b| a + b / 7.0).unwrap();
    }
    assert!(max_diff(&y, &mean) < 1e-12);
    assert!(mixture_weights(&[3.0; 7]).iter().all(|w| (w - 1.0 / 7.0).abs() < 1e-15));
}

#[test]
fn dominant_alpha_selects_one_op() {
    let (blocks, store) = seven_blocks(3, 3);
    let x = uniform(&[1, 3, 5, 5], -1.0, 1.0, &mut rng(4));
    for k in 0..7 {
        let mut a = [0.0; 7];
        a[k] = 40.0;
        let (y, parts) = mixed(&blocks, &store, &x, &a);
        let scale = parts.iter().map(|p| p.max_abs()).fold(1.0, f64::max);
        assert!(max_diff(&y, &parts[k]) < 1e-12 * scale, "op {k}");
    }
}

#[test]
fn mixed_op_recomposes_from_weights() {
    let (blocks, store) = seven_blocks(2, 5);
    let x = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng(6));
    let a = [0.3, -1.2, 0.8, 2.0, -0.4, 0.1, 0.9];
    let (y, parts) = mixed(&blocks, &store, &x, &a);
    let w = mixture_weights(&a);
    let mut expect = Tensor::zeros(x.shape());
    for (p, wk) in parts.iter().zip(&w) {
        expect = expect.zip_map(p, |s, v| s + wk * v).unwrap();
    }
    assert!(max_diff(&y, &expect) < 1e-12);
}

#[test]
fn softmax_is_shift_invariant() {
    let mut r = rng(7);
    for _ in 0..100 {
        let row: Vec<f64> = (0..7).map(|_| r.random_range(-5.0..5.0)).collect();
        let c = r.random_range(-100.0..100.0);
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        let (a, b) = (mixture_weights(&row), mixture_weights(&shifted));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn edge_indexing_is_dense() {
    assert_eq!(edge_count(4), 14);
    let mut seen = Vec::new();
    for node in 0..4 {
        for pred in 0..node + 2 {
            seen.push(edge_index(node, pred));
        }
    }
    assert_eq!(seen, (0..14).collect::<Vec<_>>());
}

fn positions(cfg: &SupernetConfig) -> Vec<usize> {
    cfg.plan().iter().enumerate().filter(|(_, p)| p.reduction).map(|(i, _)| i).collect()
}

fn stretch_channels(cfg: &SupernetConfig) -> Vec<usize> {
    let plan = cfg.plan();
    let red = positions(cfg);
    vec![plan[0].channels, plan[red[0]].channels, plan[red[1]].channels]
}

#[test]
fn reduction_positions_and_channels() {
    let s = SupernetConfig::search_scale();
    assert_eq!(positions(&s), [2, 5]);
    assert_eq!(stretch_channels(&s), [24, 48, 48]);
    let e = SupernetConfig::evaluation_scale();
    assert_eq!(positions(&e), [6, 13]);
    assert_eq!(stretch_channels(&e), [64, 128, 128]);
    assert_eq!(s.placement, Placement::ACCURATE_ROBUST);
    assert_eq!(s.channel_multipliers, [1, 2, 2]);
    let kinds: String = s.plan().iter().map(|p| p.kind.letter()).collect();
    assert_eq!(kinds, "AADAADRR");
}

#[test]
fn all_accurate_with_doubling_filters() {
    let cfg = SupernetConfig {
        placement: "A-A-A".parse().unwrap(),
        channel_multipliers: [1, 2, 4],
        ..SupernetConfig::search_scale()
    };
    assert_eq!(stretch_channels(&cfg), [24, 48, 96]);
    assert!(cfg.plan().iter().all(|p| p.reduction || p.kind == CellKind::Accurate));
    assert_eq!(cfg.output_channels(), 4 * 96);
}

#[test]
fn bad_configs_are_rejected() {
    let ok = SupernetConfig::desk_scale();
    for bad in [
        SupernetConfig { cells: 0, ..ok.clone() },
        SupernetConfig { classes: 1, ..ok.clone() },
        SupernetConfig { input_shape: [3, 10, 10], ..ok.clone() },
        SupernetConfig { reduction_positions: Some(vec![0]), ..ok.clone() },
        SupernetConfig { reduction_positions: Some(vec![2, 1]), ..ok.clone() },
        SupernetConfig { init_channels: 3, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert!("A-B-R".parse::<Placement>().is_err());
}

#[test]
fn supernet_shapes_and_strides() {
    let cfg = SupernetConfig::desk_scale();
    let net = Supernet::new(cfg.clone(), &mut rng(0)).unwrap();
    assert_eq!(net.alpha().tensor().shape(), [3, 14, 7]);
    assert_eq!(net.layout(), [CellKind::Accurate, CellKind::Reduction, CellKind::Reduction, CellKind::Robust]);
    let mut tape = Tape::new();
    let x = tape.constant(uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng(1)));
    let y = net.forward(&mut tape, x, &mut Session::train()).unwrap();
    assert_eq!(tape.shape(y), [2, 2]);
    assert!(tape.value(y).is_finite());
}

#[test]
fn reduction_cell_halves_extent() {
    let cfg = tiny_config();
    let net = Supernet::new(cfg.clone(), &mut rng(0)).unwrap();
    let plans = net.plans();
    assert!(!plans[0].reduction && plans[1].reduction);
    assert_eq!(plans[1].channels, 8);
    let mut tape = Tape::new();
    let x = tape.constant(uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(1)));
    let y = net.forward(&mut tape, x, &mut Session::eval()).unwrap();
    assert_eq!(tape.shape(y), [1, 3]);
}

#[test]
fn alpha_gradients_stay_with_their_cell_kind() {
    let cfg = SupernetConfig {
        placement: Placement::ALL_ACCURATE,
        ..tiny_config()
    };
    let net = Supernet::new(cfg, &mut rng(2)).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng(3)));
    let mut sess = Session::new(Mode::Train).with_arch_grads(true);
    let y = net.forward(&mut tape, x, &mut sess).unwrap();
    let loss = tape.cross_entropy(y, &[0, 2]).unwrap();
    let g = sess.arch_gradient(&tape.backward(loss).unwrap()).unwrap();
    let a = ArchParams::from_tensor(2, g).unwrap();
    let nonzero = |k| (0..5).any(|e| a.row(k, e).iter().any(|v| *v != 0.0));
    assert!(nonzero(CellKind::Accurate));
    assert!(nonzero(CellKind::Reduction));
    assert!(!nonzero(CellKind::Robust));
}

#[test]
fn supernet_alpha_gradient_matches_finite_differences() {
    let net = Supernet::new(tiny_config(), &mut rng(4)).unwrap();
    let x = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng(5));
    let alpha = uniform(&[3, 5, 7], -0.5, 0.5, &mut rng(6));
    let f = |tape: &mut Tape, a| -> advnas_core::Result<_> {
        let mut sess = Session::new(Mode::Train);
        sess.bind_arch(a);
        let xv = tape.constant(x.clone());
        let y = net.forward(tape, xv, &mut sess)?;
        Ok(tape.cross_entropy(y, &[1, 2])?)
    };
    let coords: Vec<usize> = (0..105).step_by(4).collect();
    let r = finite_difference_check(f, &alpha, 1e-5, Some(&coords)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
}

fn brute_force(alpha: &ArchParams, kind: CellKind, node: usize) -> Vec<GeneEdge> {
    let mut best: Vec<(usize, usize, f64)> = Vec::new();
    for pred in 0..node + 2 {
        let w = mixture_weights(alpha.row(kind, edge_index(node, pred)));
        let (mut op, mut wmax) = (0, w[0]);
        for (i, &v) in w.iter().enumerate() {
            if v > wmax {
                op = i;
                wmax = v;
            }
        }
        best.push((pred, op, wmax));
    }
    let mut pick: Vec<(usize, usize, f64)> = Vec::new();
    for _ in 0..2 {
        let mut top: Option<(usize, usize, f64)> = None;
        for &c in &best {
            if pick.iter().any(|p| p.0 == c.0) {
                continue;
            }
            if top.is_none_or(|t| c.2 > t.2) {
                top = Some(c);
            }
        }
        pick.push(top.unwrap());
    }
    pick.sort_by_key(|p| p.0);
    pick.into_iter()
        .map(|(p, o, _)| GeneEdge { predecessor: p, op: OpKind::ALL[o] })
        .collect()
}

#[test]
fn discretize_matches_enumeration() {
    let cfg = SupernetConfig::desk_scale();
    let mut r = rng(8);
    for _ in 0..100 {
        let alpha = ArchParams::from_tensor(4, uniform(&[3, 14, 7], -2.0, 2.0, &mut r)).unwrap();
        let g = discretize(&alpha, &cfg, EdgeRetention::TopTwo).unwrap();
        for kind in CellKind::ALL {
            for node in 0..4 {
                assert_eq!(g.cell(kind).nodes[node], brute_force(&alpha, kind, node));
            }
        }
        let all = discretize(&alpha, &cfg, EdgeRetention::All).unwrap();
        assert_eq!(all.cell(CellKind::Robust).nodes[3].len(), 5);
    }
}

#[test]
fn discretize_ties_go_low() {
    let cfg = SupernetConfig::desk_scale();
    let alpha = ArchParams::zeros(4);
    let g = discretize(&alpha, &cfg, EdgeRetention::TopTwo).unwrap();
    for kind in CellKind::ALL {
        for node in &g.cell(kind).nodes {
            assert_eq!(node, &[
                GeneEdge { predecessor: 0, op: OpKind::SepConv3x3 },
                GeneEdge { predecessor: 1, op: OpKind::SepConv3x3 }
            ]);
        }
    }
    let mut a = ArchParams::zeros(4);
    let r = a.row_mut(CellKind::Accurate, edge_index(3, 2));
    r[4] = 1.0;
    r[6] = 1.0;
    a.row_mut(CellKind::Accurate, edge_index(3, 4))[5] = 1.0;
    let g = discretize(&a, &cfg, EdgeRetention::TopTwo).unwrap();
    assert_eq!(g.cell(CellKind::Accurate).nodes[3], [
        GeneEdge { predecessor: 2, op: OpKind::MaxPool3x3 },
        GeneEdge { predecessor: 4, op: OpKind::AvgPool3x3 }
    ]);
    assert_eq!(g, discretize(&a, &cfg, EdgeRetention::TopTwo).unwrap());
}

#[test]
fn discretize_rejects_nan_and_mismatch() {
    let cfg = SupernetConfig::desk_scale();
    let mut a = ArchParams::zeros(4);
    a.row_mut(CellKind::Robust, 0)[0] = f64::NAN;
    assert!(discretize(&a, &cfg, EdgeRetention::TopTwo).is_err());
    assert!(discretize(&ArchParams::zeros(3), &cfg, EdgeRetention::TopTwo).is_err());
}

#[test]
fn discrete_network_runs_and_counts() {
    let cfg = SupernetConfig::desk_scale();
    let g = Genotype::random(&cfg, &mut rng(9));
    let net = DiscreteNetwork::new(&g, cfg, &mut rng(10)).unwrap();
    assert_eq!(net.param_count(), net.params().weight_count());
    let mut tape = Tape::new();
    let x = tape.constant(uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng(11)));
    let y = net.forward(&mut tape, x, &mut Session::eval()).unwrap();
    assert_eq!(tape.shape(y), [2, 2]);
}

fn edges(list: &[(usize, OpKind)]) -> Vec<GeneEdge> {
    list.iter().map(|&(p, op)| GeneEdge { predecessor: p, op }).collect()
}

#[test]
fn evaluation_network_has_about_four_and_a_half_million_params() {
    use OpKind::*;
    let normal = CellGenotype {
        nodes: vec![
            edges(&[(0, SepConv3x3), (1, SepConv3x3)]),
            edges(&[(0, SepConv3x3), (1, SepConv3x3)]),
            edges(&[(0, Identity), (1, SepConv3x3)]),
            edges(&[(0, Identity), (2, DilConv3x3)]),
        ],
    };
    let reduction = CellGenotype {
        nodes: vec![
            edges(&[(0, MaxPool3x3), (1, MaxPool3x3)]),
            edges(&[(1, MaxPool3x3), (2, Identity)]),
            edges(&[(0, MaxPool3x3), (2, Identity)]),
            edges(&[(1, MaxPool3x3), (2, Identity)]),
        ],
    };
    let g = Genotype {
        config: SupernetConfig::evaluation_scale(),
        cells: [normal.clone(), normal, reduction],
    };
    g.validate().unwrap();
    let net = DiscreteNetwork::new(&g, SupernetConfig::evaluation_scale(), &mut rng(0)).unwrap();
    let n = net.param_count() as f64;
    assert!((n - 4.5e6).abs() / 4.5e6 < 0.1, "{n}");
}

#[test]
fn genotype_text_rejects_garbage() {
    assert!(Genotype::from_text("").is_err());
    assert!(Genotype::from_text("advnas-genotype v9\n").is_err());
    let g = Genotype::random(&SupernetConfig::desk_scale(), &mut rng(0));
    let text = g.to_text().replace("sep_conv_3x3", "conv_7x7").replace("dil_conv", "conv_7x7");
    let text = text + "accurate,2,0,conv_7x7\n";
    assert!(Genotype::from_text(&text).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn genotype_text_roundtrips(seed in any::<u64>(), nodes in 1usize..6, placement in 0usize..2) {
        let cfg = SupernetConfig {
            intermediate_nodes: nodes,
            placement: [Placement::ACCURATE_ROBUST, Placement::ALL_ACCURATE][placement],
            ..SupernetConfig::desk_scale()
        };
        let g = Genotype::random(&cfg, &mut rng(seed));
        let back = Genotype::from_text(&g.to_text()).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.to_text(), g.to_text());
    }

    #[test]
    fn mixture_weights_form_a_distribution(row in prop::collection::vec(-50.0f64..50.0, 7)) {
        let w = mixture_weights(&row);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
    }
}
