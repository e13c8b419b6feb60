mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stgcn::gcn::{stgcn_layer, LayerInput, NormalizedPair, StgcnWeights};
use stgcn::graph::{AdjacencyPair, LabelMode};
use stgcn::hourglass::subsample_adjacency;
use stgcn::io::{preset, read_stgs, write_stgs};
use stgcn::metrics::{f1_score, mean_ap};
use stgcn::synth::{synth_generate, SynthConfig};
use stgcn::train::{step_lr, TrainConfig};
use stgcn::{Tape, Tensor};

use common::*;

/// Applies a node relabelling to every timestep of a pair.
fn permute_pair(adj: &AdjacencyPair, perm: &[usize]) -> AdjacencyPair {
    let n = adj.nodes;
    let spatial = adj
        .spatial
        .iter()
        .map(|b| {
            let mut out = vec![0.0f32; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[perm[i] * n + perm[j]] = b.at(i, j);
                }
            }
            Tensor::new(&[n, n], out).unwrap()
        })
        .collect();
    let nt = adj.steps * n;
    let flat = |k: usize| (k / n) * n + perm[k % n];
    let mut temporal = vec![0.0f32; nt * nt];
    for i in 0..nt {
        for j in 0..nt {
            temporal[flat(i) * nt + flat(j)] = adj.temporal.at(i, j);
        }
    }
    AdjacencyPair {
        steps: adj.steps,
        nodes: n,
        spatial,
        temporal: Tensor::new(&[nt, nt], temporal).unwrap(),
    }
}

fn permute_rows(t: &Tensor, nodes: usize, perm: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut out = vec![0.0f32; t.len()];
    for k in 0..t.rows() {
        let dst = (k / nodes) * nodes + perm[k % nodes];
        out[dst * cols..(dst + 1) * cols].copy_from_slice(t.row(k));
    }
    Tensor::new(t.shape(), out).unwrap()
}

fn layer(adj: &AdjacencyPair, h: &Tensor, ws: &Tensor, wt: &Tensor) -> Tensor {
    let adj = NormalizedPair::from_raw(adj).unwrap();
    let mut tape = Tape::new();
    let input = LayerInput::Dense(tape.constant(h.clone()));
    let w = StgcnWeights {
        spatial: vec![tape.constant(ws.clone())],
        temporal: tape.constant(wt.clone()),
        bias: None,
    };
    let out = stgcn_layer(&mut tape, &input, &adj, &w).unwrap();
    tape.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layer_is_equivariant_to_node_relabelling(seed in any::<u64>(), steps in 1usize..5, nodes in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adj = random_pair(&mut rng, steps, nodes, true);
        let h = uniform(&mut rng, &[steps * nodes, 3], -1.0, 1.0);
        let ws = uniform(&mut rng, &[3, 2], -1.0, 1.0);
        let wt = uniform(&mut rng, &[2, 4], -1.0, 1.0);
        let mut perm: Vec<usize> = (0..nodes).collect();
        perm.shuffle(&mut rng);

        let expected = permute_rows(&layer(&adj, &h, &ws, &wt), nodes, &perm);
        let got = layer(&permute_pair(&adj, &perm), &permute_rows(&h, nodes, &perm), &ws, &wt);
        for (a, b) in got.data().iter().zip(expected.data()) {
            prop_assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_input_gives_zero_output(seed in any::<u64>(), steps in 1usize..5, nodes in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adj = random_pair(&mut rng, steps, nodes, true);
        let ws = uniform(&mut rng, &[3, 2], -1.0, 1.0);
        let wt = uniform(&mut rng, &[2, 4], -1.0, 1.0);
        let out = layer(&adj, &Tensor::zeros(&[steps * nodes, 3]), &ws, &wt);
        prop_assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn subsampling_keeps_symmetry_and_sign(seed in any::<u64>(), steps in 1usize..9, nodes in 1usize..4, stride in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adj = random_pair(&mut rng, steps, nodes, true);
        let sub = subsample_adjacency(&adj, stride).unwrap();
        prop_assert_eq!(sub.steps, steps.div_ceil(stride));
        let mats = sub.spatial.iter().chain(std::iter::once(&sub.temporal));
        for m in mats {
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    prop_assert!(m.at(i, j) >= 0.0);
                    prop_assert_eq!(m.at(i, j), m.at(j, i));
                }
            }
        }
    }

    #[test]
    fn masked_rows_do_not_affect_loss(seed in any::<u64>(), rows in 2usize..12, classes in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.6)).collect();
        mask[0] = true;
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let targets = Tensor::new(&[rows, classes], (0..rows * classes).map(|_| rng.random_range(0..2) as f32).collect()).unwrap();
        let scores = uniform(&mut rng, &[rows, classes], -3.0, 3.0);
        let mut noisy = scores.data().to_vec();
        for (t, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
            for c in 0..classes {
                noisy[t * classes + c] += rng.random_range(-50.0f32..50.0);
            }
        }
        let noisy = Tensor::new(&[rows, classes], noisy).unwrap();

        let losses = |s: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(s.clone());
            let ce = tape.masked_ce_loss(v, &labels, &mask).unwrap();
            let bce = tape.masked_bce_loss(v, &targets, &mask).unwrap();
            (tape.value(ce).item(), tape.value(bce).item())
        };
        prop_assert_eq!(losses(&scores), losses(&noisy));
    }

    #[test]
    fn learning_rate_follows_step_schedule(lr0 in 1e-5f32..1.0, step in 1usize..20, drop in 0.5f32..1.0, epoch in 0usize..200) {
        let cfg = TrainConfig { lr0, sched_step: step, sched_drop: drop, ..TrainConfig::cad120(0) };
        let expected = lr0 as f64 * (drop as f64).powi((epoch / step) as i32);
        prop_assert_eq!(step_lr(epoch, &cfg), expected as f32);
        if epoch % step != step - 1 {
            prop_assert_eq!(step_lr(epoch, &cfg), step_lr(epoch + 1, &cfg));
        }
    }

    #[test]
    fn macro_f1_ignores_class_names(seed in any::<u64>(), n in 1usize..60, classes in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let mut rename: Vec<usize> = (0..classes).collect();
        rename.shuffle(&mut rng);
        let map = |v: &[usize]| v.iter().map(|&c| rename[c]).collect::<Vec<_>>();
        let a = f1_score(&pred, &truth, classes).unwrap().macro_f1;
        let b = f1_score(&map(&pred), &map(&truth), classes).unwrap().macro_f1;
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn map_depends_only_on_ranking(seed in any::<u64>(), n in 1usize..60, classes in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<Vec<f32>> = (0..n).map(|_| (0..classes).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let truth: Vec<Vec<bool>> = (0..n).map(|_| (0..classes).map(|_| rng.random_bool(0.3)).collect()).collect();
        prop_assume!(truth.iter().flatten().any(|&b| b));
        // exact in f32, so ties and order are preserved
        let scaled: Vec<Vec<f32>> = scores.iter().map(|r| r.iter().map(|v| v * 4.0).collect()).collect();
        prop_assert_eq!(mean_ap(&scores, &truth).unwrap().map, mean_ap(&scaled, &truth).unwrap().map);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stgs_round_trip(seed in any::<u64>(), multi in any::<bool>(), absence in 0.0f32..0.5) {
        let mut cfg = SynthConfig::benchmark(2);
        cfg.min_steps = 5;
        cfg.max_steps = 30;
        cfg.absence_prob = absence;
        cfg.mode = if multi { LabelMode::Multi } else { LabelMode::Single };
        let (seqs, _) = synth_generate(&cfg, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let path = write_stgs(dir.path(), &format!("s{i}"), s).unwrap();
            prop_assert_eq!(&read_stgs(&path).unwrap(), s);
        }
    }
}

#[test]
fn presets_carry_published_settings() {
    let cad = preset("cad120").unwrap();
    assert_eq!((cad.train.lr0, cad.train.sched_drop, cad.train.sched_step), (0.0004, 0.9, 1));
    assert_eq!(cad.model.clusters, vec![630, 180]);
    assert_eq!(cad.model.d_model, 512);

    let vgg = preset("charades-vgg").unwrap();
    assert_eq!((vgg.train.lr0, vgg.train.sched_step, vgg.train.sched_drop), (0.001, 10, 0.999));
    assert_eq!((vgg.model.stack_depth, vgg.model.temporal_span), (3, 3));
    assert!(vgg.model.subtract_mean);
    assert_eq!(vgg.model.mode, LabelMode::Multi);

    let i3d = preset("charades-i3d").unwrap();
    assert_eq!((i3d.train.lr0, i3d.train.sched_drop, i3d.train.sched_step), (0.0005, 0.995, 10));
    assert_eq!(i3d.model.stack_depth, 1);
    assert_eq!(i3d.model.clusters[0], 1024);
}
