mod common;

use bprune::data_io::{load_checkpoint, save_checkpoint, Checkpoint, Dataset};
use bprune::gating::GateKind;
use bprune::network::{build_bn_testnet, build_lenet5_caffe, Layer, Network};
use bprune::prune::{self, compact, merge_gates, select_channels, threshold_sweep, write_sweep_csv, PruneError, SWEEP_HEADER};
use common::{max_logit_gap, random_inputs, randomize_gates, rng, T};
use proptest::prelude::*;
use rand::Rng;

fn masked_lenet(seed: u64) -> Network {
    let mut net = build_lenet5_caffe(true, seed);
    randomize_gates(&mut net, 0.3, 2.0, 0.3, seed + 100);
    net
}

#[test]
fn masking_matches_compact_and_merge() {
    for seed in 0..3 {
        let net = masked_lenet(seed);
        let (pruned, report) = prune::prune(&net, 0.0).unwrap();
        assert!(pruned.layers.iter().all(|l| !matches!(l, Layer::Gate { .. })));
        assert!(report.params_after < report.params_before);
        let x = random_inputs(100, [1, 28, 28], seed);
        let gap = max_logit_gap(&net, &pruned, &x);
        assert!(gap <= 1e-4, "seed {seed}: gap {gap}");

        // the same comparison against an f64 forward of the masked network
        let reference = common::net_forward(&net, &T::from_tensor(&x), false);
        let out = pruned.predict(&x).unwrap();
        let gap64 = out.data().iter().zip(&reference.d).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(gap64 <= 1e-4, "seed {seed}: f64 gap {gap64}");
    }
}

#[test]
fn removed_channels_are_exactly_the_closed_gates() {
    let net = masked_lenet(7);
    let sel = select_channels(&net, 0.0).unwrap();
    for g in [0, 1, 3] {
        let closed: Vec<usize> = (0..net.group_channels(g)).filter(|&k| net.gate_params(g)[k] == 0.0).collect();
        assert_eq!(sel.groups[g].removed, closed);
    }
    let conv2_removed = &sel.groups[1].removed;
    for (u, &g) in net.gate_params(2).iter().enumerate() {
        let expect_removed = g == 0.0 || conv2_removed.contains(&(u / 16));
        assert_eq!(sel.groups[2].removed.contains(&u), expect_removed, "flatten unit {u}");
    }
}

#[test]
fn merge_alone_preserves_lenet_outputs() {
    let mut net = build_lenet5_caffe(true, 3);
    randomize_gates(&mut net, 0.3, 2.0, 0.0, 4);
    let merged = merge_gates(&net).unwrap();
    assert_eq!(merged.layers.len(), net.layers.len() - 4);
    assert!(merged.groups.is_empty());
    let gap = max_logit_gap(&net, &merged, &random_inputs(20, [1, 28, 28], 5));
    assert!(gap <= 1e-5, "gap {gap}");
}

fn randomize_bn(net: &mut Network, seed: u64) {
    let mut r = rng(seed);
    for layer in &mut net.layers {
        if let Layer::BatchNorm { gamma, beta, running_mean, running_var, .. } = layer {
            gamma.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..1.5));
            beta.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
            running_mean.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
            running_var.iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
        }
    }
}

/// A channel switched off before a BN layer still emits the constant
/// `β − γ·μ/√(v+ε)`; clearing `β` and `μ` makes it silent.
fn silence_closed_channels(net: &mut Network) {
    for g in 0..net.groups.len() {
        let gate = net.gate_layer(g);
        let closed: Vec<usize> = (0..gate.channel_count()).filter(|&k| gate.value(k) <= 0.0).collect();
        for &f in &net.groups[g].followers.clone() {
            if let Layer::BatchNorm { beta, running_mean, .. } = &mut net.layers[f] {
                for &k in &closed {
                    beta.data_mut()[k] = 0.0;
                    running_mean[k] = 0.0;
                }
            }
        }
    }
}

#[test]
fn gate_folds_into_batch_norm() {
    let mut net = build_bn_testnet(GateKind::Exponential, 12, 5, 1);
    randomize_bn(&mut net, 2);
    randomize_gates(&mut net, 0.2, 2.0, 0.0, 3);
    let merged = merge_gates(&net).unwrap();
    assert!(merged.layers.iter().all(|l| !matches!(l, Layer::Gate { .. })));
    let x = random_inputs(30, [1, 12, 12], 4);
    let gap = max_logit_gap(&net, &merged, &x);
    assert!(gap <= 1e-4, "gap {gap}");

    randomize_gates(&mut net, 0.2, 2.0, 0.4, 5);
    silence_closed_channels(&mut net);
    let (pruned, _) = prune::prune(&net, 0.0).unwrap();
    let gap = max_logit_gap(&net, &pruned, &x);
    assert!(gap <= 1e-4, "gap {gap}");
}

#[test]
fn linear_gates_prune_on_bn_scale() {
    let mut net = build_bn_testnet(GateKind::Linear, 12, 5, 1);
    randomize_bn(&mut net, 6);
    let mut r = rng(7);
    for g in 0..net.groups.len() {
        let n = net.group_channels(g);
        for k in 1..n {
            if r.random::<f64>() < 0.4 {
                net.gate_params_mut(g)[k] = if r.random::<bool>() { 5e-5 } else { -5e-5 };
            }
        }
    }
    let sel = select_channels(&net, 1e-4).unwrap();
    for (g, gs) in sel.groups.iter().enumerate() {
        let small: Vec<usize> = (0..net.group_channels(g)).filter(|&k| net.gate_params(g)[k].abs() <= 1e-4).collect();
        assert_eq!(gs.removed, small);
    }
    // with γ exactly zero and the offsets cleared, removal is exact
    for g in 0..net.groups.len() {
        for v in net.gate_params_mut(g) {
            if v.abs() <= 1e-4 {
                *v = 0.0;
            }
        }
    }
    silence_closed_channels(&mut net);
    let (pruned, report) = prune::prune(&net, 1e-4).unwrap();
    assert_eq!(report.signature, sel.signature());
    let gap = max_logit_gap(&net, &pruned, &random_inputs(30, [1, 12, 12], 8));
    assert!(gap <= 1e-4, "gap {gap}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (pruned, report) = prune::prune(&masked_lenet(9), 0.0).unwrap();
    let mut bn = build_bn_testnet(GateKind::Exponential, 28, 10, 3);
    randomize_bn(&mut bn, 4);
    for (name, net) in [("pruned", pruned), ("bn", bn)] {
        let path = dir.path().join(format!("{name}.ckpt"));
        let mut ckpt = Checkpoint::new(net.clone());
        ckpt.report = Some(report.clone());
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.network, net);
        assert_eq!(back.report.as_ref(), Some(&report));
        let x = random_inputs(10, net.input_shape, 10);
        let (a, b) = (net.predict(&x).unwrap(), back.network.predict(&x).unwrap());
        let bits = |t: &bprune::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn untrained_network_keeps_every_channel() {
    let net = build_lenet5_caffe(true, 0);
    let (pruned, report) = prune::prune(&net, 0.0).unwrap();
    assert_eq!(report.signature, "20-50-800-500");
    assert_eq!(report.pruning_rate(), 0.0);
    assert_eq!(report.params_before, 430_500);
    assert_eq!(prune::count_params(&pruned), 430_500);
}

#[test]
fn dead_group_is_an_error() {
    let mut net = build_lenet5_caffe(true, 0);
    net.gate_params_mut(1).iter_mut().for_each(|v| *v = 0.0);
    match prune::prune(&net, 0.0) {
        Err(PruneError::DeadLayer { group, channels, .. }) => assert_eq!((group.as_str(), channels), ("conv2", 50)),
        other => panic!("{other:?}"),
    }
}

fn random_dataset(n: usize, shape: [usize; 3], classes: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    Dataset::new(random_inputs(n, shape, seed + 1), labels).unwrap()
}

#[test]
fn sweep_rates_grow_with_threshold() {
    let mut net = build_lenet5_caffe(true, 2);
    randomize_gates(&mut net, 0.01, 2.5, 0.1, 3);
    let test = random_dataset(50, [1, 28, 28], 10, 4);
    let thresholds = [0.0, 1e-3, 1e-2, 0.1, 0.3, 0.6, 0.9999];
    let rows = threshold_sweep(&net, &thresholds, &test, None).unwrap();
    assert_eq!(rows.len(), thresholds.len());
    let mut last_rate = -1.0;
    let mut dead = false;
    for row in &rows {
        match &row.outcome {
            Ok(p) => {
                assert!(!dead, "a live row after a dead one");
                assert!(p.pruning_rate >= last_rate);
                assert!(p.accuracy_after_ft.is_none());
                last_rate = p.pruning_rate;
            }
            Err(_) => dead = true,
        }
    }
    assert!(dead, "0.9999 closes every gate");

    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), rows.len() + 1);
    assert!(text.lines().last().unwrap().contains("removes all channels"));
}

#[test]
fn empty_sweep_writes_only_the_header() {
    let net = build_lenet5_caffe(true, 0);
    let rows = threshold_sweep(&net, &[], &random_dataset(4, [1, 28, 28], 10, 0), None).unwrap();
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", SWEEP_HEADER.join(",")));
}

#[test]
fn compact_then_merge_equals_prune() {
    let net = masked_lenet(12);
    let sel = select_channels(&net, 0.0).unwrap();
    let manual = merge_gates(&compact(&net, &sel).unwrap()).unwrap();
    let (pruned, report) = prune::prune(&net, 0.0).unwrap();
    assert_eq!(manual, pruned);
    assert_eq!(report.signature, sel.signature());
    assert_eq!(report.flops_after, prune::count_flops(&pruned, [1, 28, 28]).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn higher_threshold_keeps_a_subset(seed in 0u64..1000, t1 in 0.0f32..0.5, dt in 0.0f32..0.5) {
        let mut net = build_bn_testnet(GateKind::Exponential, 8, 3, seed);
        randomize_gates(&mut net, 0.01, 2.0, 0.1, seed);
        let t2 = t1 + dt;
        match (select_channels(&net, t1), select_channels(&net, t2)) {
            (Ok(a), Ok(b)) => {
                for (ga, gb) in a.groups.iter().zip(&b.groups) {
                    prop_assert!(gb.kept.iter().all(|k| ga.kept.contains(k)));
                }
                prop_assert!(b.channels_removed() >= a.channels_removed());
            }
            (Err(_), b) => prop_assert!(b.is_err()),
            (Ok(_), Err(_)) => {}
        }
    }

    #[test]
    fn pruning_preserves_masked_outputs(seed in 0u64..1000, p_zero in 0.0f64..0.8) {
        let mut net = build_bn_testnet(GateKind::Exponential, 8, 3, seed);
        randomize_bn(&mut net, seed + 1);
        randomize_gates(&mut net, 0.2, 2.0, p_zero, seed + 2);
        silence_closed_channels(&mut net);
        let (pruned, report) = prune::prune(&net, 0.0).unwrap();
        prop_assert!(report.params_after <= report.params_before);
        let gap = max_logit_gap(&net, &pruned, &random_inputs(8, [1, 8, 8], seed));
        prop_assert!(gap <= 1e-4, "gap {}", gap);
    }
}
