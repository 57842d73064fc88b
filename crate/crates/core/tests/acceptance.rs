//! Acceptance suite. One test per criterion, each printing a pass line;
//! criteria 7 and 8 share a full training benchmark and dominate the
//! runtime (hours at desk scale — everything else finishes in seconds).

use std::f64::consts::LN_2;
use std::sync::OnceLock;
use std::time::Instant;

use autodiff::{check_gradients, Graph, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sfa_core::alignment::{domain_bce, dqfa_losses, hierarchical_loss, tda_losses, Discriminator};
use sfa_core::config::{
    Arm, ExperimentConfig, ModelConfig, ShiftConfig,
};
use sfa_core::consistency::{consistency_loss, consistency_pair_loss, ensemble_reference, jsd};
use sfa_core::data::{generate_scene, write_benchmark, Scene};
use sfa_core::error::CoreError;
use sfa_core::eval::{covering_bound, proxy_a_distance, BoundInputs, collect_features, FeatureStage};
use sfa_core::matching::{
    detection_loss_with_assignments, hungarian, match_layers, Assignment,
    GroundTruth, LossWeights,
};
use sfa_core::model::{PredictionNodes, SequenceState};
use sfa_core::optim::Adam;
use sfa_core::params::ParamStore;
use sfa_core::trainer::{fit, one_sided_gradient_audit, read_entries, train_step, ModelBundle};

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn random_gt(rng: &mut ChaCha8Rng, count: usize, classes: usize) -> GroundTruth {
    GroundTruth {
        classes: (0..count).map(|_| rng.gen_range(0..classes)).collect(),
        boxes: (0..count)
            .map(|_| {
                let w = rng.gen_range(0.05..0.3);
                let h = rng.gen_range(0.05..0.3);
                [
                    rng.gen_range(w / 2.0..1.0 - w / 2.0),
                    rng.gen_range(h / 2.0..1.0 - h / 2.0),
                    w,
                    h,
                ]
            })
            .collect(),
    }
}

// ---------------------------------------------------------------- 1 --

#[test]
fn criterion_1_gradient_integrity() {
    let started = Instant::now();
    let tol = 1e-4;
    let eps = 1e-4;

    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // Composite tour across the op set.
        let x = randn(&mut rng, vec![3, 8]);
        let w = randn(&mut rng, vec![8, 4]);
        let img = randn(&mut rng, vec![2, 5, 5]);
        let kernel = randn(&mut rng, vec![2, 2, 3, 3]);
        let kb = randn(&mut rng, vec![2]);
        let report = check_gradients(
            |g, ids| {
                let h = g.matmul(ids[0], ids[1])?;
                let p = g.softmax(h)?;
                let lp = g.log(p);
                let c = g.conv2d(ids[2], ids[3], ids[4], 2, 1)?;
                let cs = g.sigmoid(c);
                let cm = g.mean(cs);
                let flat = g.reshape(lp, vec![12])?;
                let head = g.slice(flat, 0, 0, 6)?;
                let tail = g.slice(flat, 0, 6, 6)?;
                let lo = g.min_elem(head, tail)?;
                let hi = g.max_elem(head, tail)?;
                let spread = g.sub(hi, lo)?;
                let a = g.abs(spread);
                let s = g.sum(a);
                let both = g.add(s, cm)?;
                Ok(g.scale(both, 0.5))
            },
            &[x, w, img, kernel, kb],
            eps,
            tol,
        )
        .unwrap();
        assert!(
            report.passed(),
            "op tour seed {seed}: max rel {}",
            report.max_rel_error
        );

        // Supervised set loss with the assignment held fixed.
        let (m, k) = (5usize, 3usize);
        let logits = randn(&mut rng, vec![m, k + 1]);
        let raw_boxes = randn(&mut rng, vec![m, 4]);
        let gt = random_gt(&mut rng, 3, k);
        let weights = LossWeights::default();
        let assignments: Vec<Assignment> = {
            let mut g = Graph::new();
            let l = g.leaf(&logits);
            let probs = g.softmax(l).unwrap();
            let rb = g.leaf(&raw_boxes);
            let boxes = g.sigmoid(rb);
            let pred = PredictionNodes { class_probs: probs, boxes };
            match_layers(&g, &[pred], &gt, &weights).unwrap()
        };
        let report = check_gradients(
            |g, ids| {
                let probs = g.softmax(ids[0])?;
                let boxes = g.sigmoid(ids[1]);
                let pred = PredictionNodes { class_probs: probs, boxes };
                detection_loss_with_assignments(g, &[pred], &gt, &weights, &assignments)
                    .map_err(|e| match e {
                        CoreError::Autodiff(a) => a,
                        other => panic!("unexpected: {other}"),
                    })
            },
            &[logits.clone(), raw_boxes.clone()],
            eps,
            tol,
        )
        .unwrap();
        assert!(
            report.passed(),
            "detection loss seed {seed}: max rel {}",
            report.max_rel_error
        );

        // Consistency loss against a frozen reference.
        let ref_set = {
            let mut g = Graph::new();
            let l = g.leaf(&randn(&mut rng, vec![m, k + 1]));
            let probs = g.softmax(l).unwrap();
            let rb = g.leaf(&randn(&mut rng, vec![m, 4]));
            let boxes = g.sigmoid(rb);
            PredictionNodes { class_probs: probs, boxes }.detach(&g)
        };
        let report = check_gradients(
            |g, ids| {
                let probs = g.softmax(ids[0])?;
                let boxes = g.sigmoid(ids[1]);
                let pred = PredictionNodes { class_probs: probs, boxes };
                consistency_pair_loss(g, &ref_set, &pred, 1.0).map_err(|e| match e {
                    CoreError::Autodiff(a) => a,
                    other => panic!("unexpected: {other}"),
                })
            },
            &[logits, raw_boxes],
            eps,
            tol,
        )
        .unwrap();
        assert!(
            report.passed(),
            "consistency loss seed {seed}: max rel {}",
            report.max_rel_error
        );

        // Alignment losses: finite differences check the un-reversed
        // function; the reversed path is verified against it exactly in
        // criterion 2 and below.
        alignment_fd_check(seed, eps, tol);
    }
    println!(
        "criterion 1 PASS: op tour, detection, consistency, alignment gradients on 20 seeds in {:.1} s",
        started.elapsed().as_secs_f64()
    );
    assert!(started.elapsed().as_secs_f64() < 120.0, "gradient suite exceeded 2 minutes");
}

/// Finite differences for the alignment losses, with analytic gradients
/// of the reversed path tied to the un-reversed one.
///
/// Draws are rejected while any rectifier pre-activation sits within the
/// finite-difference step of its kink, where central differences are
/// meaningless.
fn alignment_fd_check(seed: u64, eps: f64, tol: f64) {
    let dim = 6usize;
    let tokens_n = 4usize;

    let mut attempt = 0u64;
    let (mut store, disc, feat_id) = loop {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed + 7919 * attempt);
        let mut store = ParamStore::new();
        let disc = Discriminator::new(&mut store, &mut rng, "disc", dim);
        let features = randn(&mut rng, vec![tokens_n + 1, dim]);
        let feat_id = store.add("features", features);

        // Probe the two hidden layers for kink proximity.
        let weights = |name: &str| store.value(store.lookup(name).unwrap()).data().to_vec();
        let (w1, b1) = (weights("disc.fc1.weight"), weights("disc.fc1.bias"));
        let (w2, b2) = (weights("disc.fc2.weight"), weights("disc.fc2.bias"));
        let x = store.value(feat_id).data();
        let rows = tokens_n + 1;
        let mut h1 = vec![0.0; rows * dim];
        autodiff::matmul(x, &w1, &mut h1, rows, dim, dim);
        let mut min_abs = f64::INFINITY;
        for r in 0..rows {
            for c in 0..dim {
                h1[r * dim + c] += b1[c];
                min_abs = min_abs.min(h1[r * dim + c].abs());
            }
        }
        let r1: Vec<f64> = h1.iter().map(|v| v.max(0.0)).collect();
        let mut h2 = vec![0.0; rows * dim];
        autodiff::matmul(&r1, &w2, &mut h2, rows, dim, dim);
        for r in 0..rows {
            for c in 0..dim {
                h2[r * dim + c] += b2[c];
                min_abs = min_abs.min(h2[r * dim + c].abs());
            }
        }
        if min_abs > 50.0 * eps {
            break (store, disc, feat_id);
        }
        attempt += 1;
        assert!(attempt < 50, "could not find a kink-free draw");
    };
    let domain = (seed % 2) as u8;

    // Un-reversed loss value as a function of the store.
    let loss_value = |store: &ParamStore, reversed: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let tokens = bind.node(feat_id);
        let state = SequenceState { tokens, has_domain_query: true, layer_index: 1 };
        let (dq, tw) = if reversed {
            (
                dqfa_losses(&mut g, &bind, &[state], &disc, domain).unwrap(),
                tda_losses(&mut g, &bind, &[state], &disc, domain).unwrap(),
            )
        } else {
            // Same math without the gradient reversal.
            let slot = g.slice(tokens, 0, 0, 1).unwrap();
            let probs = disc.forward(&mut g, &bind, slot).unwrap();
            let dq = domain_bce(&mut g, probs, domain).unwrap();
            let rest = g.slice(tokens, 0, 1, tokens_n).unwrap();
            let probs = disc.forward(&mut g, &bind, rest).unwrap();
            let tw = domain_bce(&mut g, probs, domain).unwrap();
            (vec![dq], vec![tw])
        };
        let total = hierarchical_loss(&mut g, &dq, &tw, 0.1).unwrap();
        g.backward(total).unwrap();
        let grads = store
            .iter()
            .map(|(id, _, _)| {
                let node = bind.node(id);
                g.grad(node).map(|s| s.to_vec()).unwrap_or_default()
            })
            .collect();
        (g.scalar_value(total), grads)
    };

    // FD on the un-reversed function over every element.
    let (_, analytic_plain) = loss_value(&store, false);
    let (_, analytic_reversed) = loss_value(&store, true);
    let ids: Vec<_> = store.iter().map(|(id, name, t)| (id, name.to_string(), t.numel())).collect();
    for (i, (id, name, numel)) in ids.iter().enumerate() {
        for e in 0..*numel {
            let orig = store.value(*id).data()[e];
            store.value_mut(*id).data_mut()[e] = orig + eps;
            let up = loss_value(&store, false).0;
            store.value_mut(*id).data_mut()[e] = orig - eps;
            let down = loss_value(&store, false).0;
            store.value_mut(*id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic_plain[i][e];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-3);
            assert!(rel < tol, "alignment {name}[{e}] rel {rel}");
        }
        // Reversed vs plain: discriminator gradients identical, feature
        // gradients exactly negated.
        let plain = &analytic_plain[i];
        let reversed = &analytic_reversed[i];
        if name == "features" {
            for (p, r) in plain.iter().zip(reversed) {
                assert_eq!(p.to_bits(), (-r).to_bits(), "feature grad not negated");
            }
        } else {
            for (p, r) in plain.iter().zip(reversed) {
                assert_eq!(p.to_bits(), r.to_bits(), "{name} grad changed by reversal");
            }
        }
    }
}

// ---------------------------------------------------------------- 2 --

#[test]
fn criterion_2_gradient_reversal_contract() {
    // Forward bit-identity and exact negation.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, vec![4, 5]);
    let probe = randn(&mut rng, vec![4, 5]);
    let mut g = Graph::new();
    let tracked = Tensor::new(x.shape().to_vec(), x.data().to_vec()).unwrap().with_grad();
    let xid = g.leaf(&tracked);
    let rev = g.grad_reverse(xid);
    for (a, b) in g.data(xid).iter().zip(g.data(rev)) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let grads = |through_reverse: bool| -> Vec<f64> {
        let mut g = Graph::new();
        let xid = g.leaf(&tracked);
        let h = if through_reverse { g.grad_reverse(xid) } else { xid };
        let pc = g.constant(probe.clone());
        let prod = g.mul(h, pc).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        g.grad(xid).unwrap().to_vec()
    };
    let plain = grads(false);
    let reversed = grads(true);
    for (p, r) in plain.iter().zip(&reversed) {
        assert_eq!(p.to_bits(), (-r).to_bits());
    }

    // One-sided audit: D descends, G ascends, strictly, over 20 steps.
    let audit = one_sided_gradient_audit(20, 0).unwrap();
    assert_eq!(audit.discriminator_side.len(), 21);
    for w in audit.discriminator_side.windows(2) {
        assert!(w[1] < w[0], "discriminator BCE did not strictly decrease: {w:?}");
    }
    for w in audit.generator_side.windows(2) {
        assert!(w[1] > w[0], "generator side did not strictly increase BCE: {w:?}");
    }
    println!(
        "criterion 2 PASS: bit-identity, exact negation, audit D {:.4}->{:.4} down, G {:.4}->{:.4} up",
        audit.discriminator_side[0],
        audit.discriminator_side[20],
        audit.generator_side[0],
        audit.generator_side[20]
    );
}

// ---------------------------------------------------------------- 3 --

#[test]
fn criterion_3_hungarian_oracle() {
    /// Exhaustive minimum over injective column -> row assignments.
    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], col: usize, cols: usize, used: &mut [bool], acc: f64, best: &mut f64) {
            if col == cols {
                *best = best.min(acc);
                return;
            }
            for row in 0..cost.len() {
                if !used[row] {
                    used[row] = true;
                    go(cost, col + 1, cols, used, acc + cost[row][col], best);
                    used[row] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        let mut used = vec![false; cost.len()];
        go(cost, 0, cost[0].len(), &mut used, 0.0, &mut best);
        best
    }

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..1000 {
        let cols = rng.gen_range(1..=7usize);
        let rows = rng.gen_range(cols..=7usize);
        // Integer-valued costs keep both routes exactly summable.
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen_range(-50..50) as f64).collect())
            .collect();
        let assignment = hungarian(&cost).unwrap();
        assert_eq!(assignment.pairs.len(), cols, "case {case}");
        let got = assignment.total_cost(&cost);
        let expect = brute_force_min(&cost);
        assert_eq!(got, expect, "case {case}: {got} vs brute force {expect}");
    }
    println!("criterion 3 PASS: 1000 random matrices up to 7x7 match brute force exactly");
}

// ---------------------------------------------------------------- 4 --

/// Discriminator frozen at the uniform output: final-layer weights and
/// bias zeroed, so the logits are exactly (0, 0).
fn uniform_discriminator(store: &mut ParamStore, dim: usize) -> Discriminator {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let disc = Discriminator::new(store, &mut rng, "disc", dim);
    let last_w = store.lookup("disc.fc3.weight").unwrap();
    store.value_mut(last_w).data_mut().fill(0.0);
    disc
}

#[test]
fn criterion_4_closed_form_values() {
    // Uniform-discriminator alignment losses equal ln 2 exactly.
    let dim = 8;
    let mut store = ParamStore::new();
    let disc = uniform_discriminator(&mut store, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let states_tensor = randn(&mut rng, vec![5, dim]);
    let feat = store.add("feat", states_tensor);

    let mut g = Graph::new();
    let bind = store.bind(&mut g);
    let states: Vec<SequenceState> = (1..=3)
        .map(|layer_index| SequenceState {
            tokens: bind.node(feat),
            has_domain_query: true,
            layer_index,
        })
        .collect();
    for domain in [0, 1] {
        let dq = dqfa_losses(&mut g, &bind, &states, &disc, domain).unwrap();
        let tw = tda_losses(&mut g, &bind, &states, &disc, domain).unwrap();
        for &loss in dq.iter().chain(&tw) {
            assert!(
                (g.scalar_value(loss) - LN_2).abs() <= 1e-12,
                "uniform-discriminator loss deviates from ln 2: {}",
                g.scalar_value(loss)
            );
        }
        // Hierarchical sum over 3 layers with lambda_q = 0.1:
        // 3 * (ln 2 + 0.1 ln 2) = 3.3 ln 2 = 2.2873857958...
        let total = hierarchical_loss(&mut g, &dq, &tw, 0.1).unwrap();
        assert!((g.scalar_value(total) - 3.3 * LN_2).abs() <= 1e-9);
        assert!((g.scalar_value(total) - 2.287385).abs() <= 1e-6);
    }

    // Jensen-Shannon divergence closed form.
    let v = jsd(&[0.5, 0.5], &[1.0, 0.0]);
    assert!((v - 0.215761).abs() <= 1e-6, "jsd value {v}");

    // Covering bound direct evaluation: ln(2 * 256^2) * 3 = 51 ln 2.
    let bound = covering_bound(&BoundInputs {
        spectral_norms: vec![1.0; 3],
        reference_distances: vec![1.0; 3],
        lipschitz: vec![1.0; 3],
        max_width: 256.0,
        input_norm: 1.0,
        resolution: 1.0,
    })
    .unwrap();
    assert!((bound - 51.0 * LN_2).abs() <= 1e-9, "bound {bound}");
    assert!((bound - 35.35050620855721).abs() <= 1e-3);
    println!(
        "criterion 4 PASS: ln2 losses, hierarchical 3.3*ln2 = {:.9}, jsd 0.215761, bound {:.4}",
        3.3 * LN_2,
        bound
    );
}

// ---------------------------------------------------------------- 5 --

#[test]
fn criterion_5_consistency_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = 4;
    let k = 3;

    let mk_pred = |g: &mut Graph, rng: &mut ChaCha8Rng| -> PredictionNodes {
        let l = g.leaf(&randn(rng, vec![m, k + 1]));
        let probs = g.softmax(l).unwrap();
        let rb = g.leaf(&randn(rng, vec![m, 4]));
        let boxes = g.sigmoid(rb);
        PredictionNodes { class_probs: probs, boxes }
    };

    // Zero iff all layers coincide; single layer degenerates to zero.
    let mut g = Graph::new();
    let a = mk_pred(&mut g, &mut rng);
    let single = consistency_loss(&mut g, &[a], 1.0).unwrap();
    assert_eq!(g.scalar_value(single), 0.0);
    let same = consistency_loss(&mut g, &[a, a, a], 1.0).unwrap();
    assert!(g.scalar_value(same).abs() < 1e-12);
    let b = mk_pred(&mut g, &mut rng);
    let diff = consistency_loss(&mut g, &[a, b], 1.0).unwrap();
    assert!(g.scalar_value(diff) > 1e-4);

    // Reference detachment: analytic gradients equal finite differences
    // with the reference frozen, and differ from finite differences that
    // recompute the reference from the perturbed predictions.
    let logits = randn(&mut rng, vec![m, k + 1]);
    let raw_boxes = randn(&mut rng, vec![m, 4]);
    let other_logits = randn(&mut rng, vec![m, k + 1]);
    let other_boxes = randn(&mut rng, vec![m, 4]);

    let build = |g: &mut Graph, lg: &Tensor, bx: &Tensor| -> PredictionNodes {
        let l = g.leaf(lg);
        let probs = g.softmax(l).unwrap();
        let rb = g.leaf(bx);
        let boxes = g.sigmoid(rb);
        PredictionNodes { class_probs: probs, boxes }
    };

    // Loss with the reference recomputed from current inputs.
    let loss_recomputed = |lg: &Tensor, bx: &Tensor| -> f64 {
        let mut g = Graph::new();
        let p1 = build(&mut g, lg, bx);
        let p2 = build(&mut g, &other_logits, &other_boxes);
        let loss = consistency_loss(&mut g, &[p1, p2], 1.0).unwrap();
        g.scalar_value(loss)
    };
    // Loss with the reference frozen at the unperturbed ensemble.
    let frozen_ref = {
        let mut g = Graph::new();
        let p1 = build(&mut g, &logits, &raw_boxes);
        let p2 = build(&mut g, &other_logits, &other_boxes);
        ensemble_reference(&[p1.detach(&g), p2.detach(&g)]).unwrap()
    };
    let loss_frozen = |lg: &Tensor, bx: &Tensor| -> f64 {
        let mut g = Graph::new();
        let p1 = build(&mut g, lg, bx);
        let p2 = build(&mut g, &other_logits, &other_boxes);
        let pair1 = consistency_pair_loss(&mut g, &frozen_ref, &p1, 1.0).unwrap();
        let pair2 = consistency_pair_loss(&mut g, &frozen_ref, &p2, 1.0).unwrap();
        let total = g.add(pair1, pair2).unwrap();
        let loss = g.scale(total, 0.5);
        g.scalar_value(loss)
    };

    // Analytic gradient of the real (detached-reference) loss.
    let analytic = {
        let mut g = Graph::new();
        let tracked = Tensor::new(logits.shape().to_vec(), logits.data().to_vec())
            .unwrap()
            .with_grad();
        let lid = g.leaf(&tracked);
        let probs = g.softmax(lid).unwrap();
        let rb = g.leaf(&raw_boxes);
        let boxes = g.sigmoid(rb);
        let p1 = PredictionNodes { class_probs: probs, boxes };
        let p2 = build(&mut g, &other_logits, &other_boxes);
        let loss = consistency_loss(&mut g, &[p1, p2], 1.0).unwrap();
        g.backward(loss).unwrap();
        g.grad(lid).unwrap().to_vec()
    };

    let eps = 1e-5;
    let mut max_frozen = 0.0f64;
    let mut max_recomputed = 0.0f64;
    let mut lg = Tensor::new(logits.shape().to_vec(), logits.data().to_vec()).unwrap();
    for e in 0..lg.numel() {
        let orig = lg.data()[e];
        lg.data_mut()[e] = orig + eps;
        let f_up = loss_frozen(&lg, &raw_boxes);
        let r_up = loss_recomputed(&lg, &raw_boxes);
        lg.data_mut()[e] = orig - eps;
        let f_down = loss_frozen(&lg, &raw_boxes);
        let r_down = loss_recomputed(&lg, &raw_boxes);
        lg.data_mut()[e] = orig;
        let fd_frozen = (f_up - f_down) / (2.0 * eps);
        let fd_recomputed = (r_up - r_down) / (2.0 * eps);
        let a = analytic[e];
        max_frozen = max_frozen.max((a - fd_frozen).abs() / (a.abs() + fd_frozen.abs() + 1e-3));
        max_recomputed = max_recomputed.max((a - fd_recomputed).abs());
    }
    assert!(max_frozen < 1e-4, "frozen-reference FD mismatch {max_frozen}");
    assert!(
        max_recomputed > 1e-6,
        "recomputing the reference changed nothing; detachment untestable"
    );
    println!(
        "criterion 5 PASS: zero-iff-agreement, frozen-FD rel {max_frozen:.2e}, recomputed FD differs by {max_recomputed:.2e}"
    );
}

// ---------------------------------------------------------------- 6 --

#[test]
fn criterion_6_ablation_structure() {
    let model_cfg = ModelConfig {
        num_levels: 1,
        hidden_dim: 16,
        num_encoder_layers: 2,
        num_decoder_layers: 2,
        num_object_queries: 4,
        num_heads: 2,
        num_classes: 3,
        image_size: (32, 32),
    };
    let shift = ShiftConfig::fog();
    let src: Vec<Scene> = (0..2).map(|i| generate_scene(i, 0, &shift, (32, 32))).collect();
    let tgt: Vec<Scene> = (0..2).map(|i| generate_scene(i, 1, &shift, (32, 32))).collect();
    let sb: Vec<&Scene> = src.iter().collect();
    let tb: Vec<&Scene> = tgt.iter().collect();

    let run_step = |cfg: &ExperimentConfig| {
        let mut bundle = ModelBundle::new(&cfg.model, cfg.train.arm, 3).unwrap();
        let mut adam = Adam::new(&bundle.store, 0.9, 0.999, 1e-8);
        train_step(&mut bundle, &mut adam, &sb, &tb, cfg, 1e-4, 0).unwrap()
    };
    let base_cfg = || {
        let mut cfg = ExperimentConfig::default();
        cfg.model = model_cfg.clone();
        cfg.train.batch_size = 2;
        cfg
    };

    // Component accounting at assorted weights and flags.
    let mut weights_cfg = base_cfg();
    weights_cfg.alignment.lambda_enc = 0.7;
    weights_cfg.alignment.lambda_dec = 0.25;
    weights_cfg.consistency.lambda_cons = 1.5;
    for disable in ["", "dqfa_enc", "tda_dec", "hr", "bmc", "dq,tw"] {
        let mut cfg = weights_cfg.clone();
        cfg.train.ablation = cfg.train.ablation.with_disabled(disable).unwrap();
        let report = run_step(&cfg);
        let expect = report.l_det
            + cfg.alignment.lambda_enc * report.l_enc
            + cfg.alignment.lambda_dec * report.l_dec
            + cfg.consistency.lambda_cons * report.l_cons;
        assert!(
            (report.total - expect).abs() < 1e-10,
            "accounting off for flags {disable:?}"
        );
        if disable == "bmc" {
            assert_eq!(report.l_cons, 0.0);
        }
        if disable == "dq,tw" {
            assert_eq!(report.l_enc, 0.0);
            assert_eq!(report.l_dec, 0.0);
        }
    }

    // Each alignment flag removes exactly its own additive term:
    // reproduce the reported component from the public loss functions.
    {
        let cfg = base_cfg();
        let full = run_step(&cfg);
        let mut no_dq = base_cfg();
        no_dq.train.ablation = no_dq.train.ablation.with_disabled("dqfa_enc").unwrap();
        let without = run_step(&no_dq);
        // Recompute the expected delta on the same initial parameters.
        let bundle = ModelBundle::new(&model_cfg, Arm::Sfa, 3).unwrap();
        let mut expected_delta = 0.0;
        for (scenes, domain) in [(&sb, 0u8), (&tb, 1u8)] {
            for scene in scenes.iter() {
                let mut g = Graph::new();
                let bind = bundle.store.bind(&mut g);
                let pass = bundle.model.forward(&mut g, &bind, &scene.image, true).unwrap();
                let dq = dqfa_losses(
                    &mut g,
                    &bind,
                    &pass.encoder_states,
                    bundle.enc_disc.as_ref().unwrap(),
                    domain,
                )
                .unwrap();
                for &l in &dq {
                    expected_delta += 0.1 * g.scalar_value(l) / scenes.len() as f64;
                }
            }
        }
        let got_delta = full.l_enc - without.l_enc;
        assert!(
            (got_delta - expected_delta).abs() < 1e-9,
            "dqfa_enc flag delta {got_delta} vs recomputed {expected_delta}"
        );
    }

    // Hierarchical off: only the last layer contributes.
    {
        let mut cfg = base_cfg();
        cfg.train.ablation = cfg.train.ablation.with_disabled("hr").unwrap();
        let report = run_step(&cfg);
        let bundle = ModelBundle::new(&model_cfg, Arm::Sfa, 3).unwrap();
        let mut expect = 0.0;
        for (scenes, domain) in [(&sb, 0u8), (&tb, 1u8)] {
            for scene in scenes.iter() {
                let mut g = Graph::new();
                let bind = bundle.store.bind(&mut g);
                let pass = bundle.model.forward(&mut g, &bind, &scene.image, true).unwrap();
                let last = &pass.encoder_states[pass.encoder_states.len() - 1..];
                let dq = dqfa_losses(&mut g, &bind, last, bundle.enc_disc.as_ref().unwrap(), domain).unwrap();
                let tw = tda_losses(&mut g, &bind, last, bundle.enc_disc.as_ref().unwrap(), domain).unwrap();
                let total = hierarchical_loss(&mut g, &dq, &tw, 0.1).unwrap();
                expect += g.scalar_value(total) / scenes.len() as f64;
            }
        }
        assert!(
            (report.l_enc - expect).abs() < 1e-9,
            "last-layer-only encoder loss {} vs {}",
            report.l_enc,
            expect
        );
    }

    // All-zero lambdas match the source-only arm bit for bit.
    let fingerprint = |arm: Arm| -> Vec<(String, Vec<u64>)> {
        let mut cfg = base_cfg();
        cfg.train.arm = arm;
        if arm == Arm::Sfa {
            cfg.alignment.lambda_enc = 0.0;
            cfg.alignment.lambda_dec = 0.0;
            cfg.consistency.lambda_cons = 0.0;
        }
        let mut bundle = ModelBundle::new(&cfg.model, arm, 11).unwrap();
        let mut adam = Adam::new(&bundle.store, 0.9, 0.999, 1e-8);
        for step in 0..4 {
            train_step(&mut bundle, &mut adam, &sb, &tb, &cfg, 2e-4, step).unwrap();
        }
        bundle
            .store
            .iter()
            .filter(|(_, name, _)| !name.starts_with("disc."))
            .map(|(_, name, t)| (name.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    assert_eq!(fingerprint(Arm::SourceOnly), fingerprint(Arm::Sfa));
    println!("criterion 6 PASS: accounting within 1e-10, per-flag deltas exact, zero-lambda run equals source-only bitwise");
}

// ------------------------------------------------------------- 7 & 8 --

struct SeedOutcome {
    seed: u64,
    map_source_only: f64,
    map_da_cnn: f64,
    map_sfa: f64,
    pad_source_only: f64,
    pad_sfa: f64,
}

struct Benchmark {
    _dir: tempfile::TempDir,
    outcomes: Vec<SeedOutcome>,
}

/// Full adaptation benchmark: 500/500 train scenes at 64x64, default
/// model and training configuration, three arms, three seeds. Runs are
/// distributed over the available cores.
fn benchmark() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let dir = tempfile::tempdir().expect("tempdir");
        let data_dir = dir.path().join("data");
        write_benchmark(&data_dir, 500, 200, &ShiftConfig::fog(), 0, (64, 64)).expect("dataset");

        let seeds = [0u64, 1, 2];
        let arms = [Arm::SourceOnly, Arm::DaCnn, Arm::Sfa];
        let jobs: Vec<(u64, Arm)> = seeds
            .iter()
            .flat_map(|&s| arms.iter().map(move |&a| (s, a)))
            .collect();

        let results = std::sync::Mutex::new(vec![None; jobs.len()]);
        let next = std::sync::atomic::AtomicUsize::new(0);
        let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        std::thread::scope(|scope| {
            for _ in 0..workers.min(jobs.len()) {
                scope.spawn(|| loop {
                    let j = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if j >= jobs.len() {
                        break;
                    }
                    let (seed, arm) = jobs[j];
                    let mut cfg = ExperimentConfig::default();
                    cfg.train.arm = arm;
                    cfg.train.seed = seed;
                    cfg.data_dir = data_dir.clone();
                    cfg.out_dir = dir.path().join(format!("run-{}-{seed}", arm.as_str()));
                    let summary = fit(&cfg, false).expect("fit");
                    eprintln!(
                        "[benchmark] arm {} seed {seed}: target mAP50 {:.4} ({:.0} s elapsed)",
                        arm.as_str(),
                        summary.final_target_map,
                        started.elapsed().as_secs_f64()
                    );
                    results.lock().unwrap()[j] = Some(summary.final_target_map);
                });
            }
        });
        let maps: Vec<f64> = results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("job finished"))
            .collect();

        // Proxy A-distance on final-encoder-layer features for the
        // source-only and sfa checkpoints of each seed.
        let val_src = sfa_core::data::read_split(&data_dir, 0, sfa_core::data::Split::Val).unwrap();
        let val_tgt = sfa_core::data::read_split(&data_dir, 1, sfa_core::data::Split::Val).unwrap();
        let scenes: Vec<Scene> = val_src
            .into_iter()
            .take(50)
            .chain(val_tgt.into_iter().take(50))
            .collect();
        let pad_for = |arm: Arm, seed: u64| -> f64 {
            let ckpt = dir.path().join(format!("run-{}-{seed}", arm.as_str())).join("last.ckpt");
            let (bundle, _, _) = ModelBundle::load(&ckpt).expect("checkpoint");
            let rows =
                collect_features(&bundle.model, &bundle.store, &scenes, FeatureStage::Encoder, 8)
                    .expect("features");
            let last = rows.iter().map(|r| r.layer).max().unwrap();
            let s: Vec<Vec<f64>> = rows
                .iter()
                .filter(|r| r.layer == last && r.domain == 0)
                .map(|r| r.values.clone())
                .collect();
            let t: Vec<Vec<f64>> = rows
                .iter()
                .filter(|r| r.layer == last && r.domain == 1)
                .map(|r| r.values.clone())
                .collect();
            proxy_a_distance(&s, &t, 0).expect("proxy a-distance")
        };

        let outcomes = seeds
            .iter()
            .enumerate()
            .map(|(si, &seed)| SeedOutcome {
                seed,
                map_source_only: maps[si * 3],
                map_da_cnn: maps[si * 3 + 1],
                map_sfa: maps[si * 3 + 2],
                pad_source_only: pad_for(Arm::SourceOnly, seed),
                pad_sfa: pad_for(Arm::Sfa, seed),
            })
            .collect();
        eprintln!(
            "[benchmark] all runs finished in {:.0} s",
            started.elapsed().as_secs_f64()
        );
        Benchmark { _dir: dir, outcomes }
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

#[test]
fn criterion_7_adaptation_trend() {
    let bench = benchmark();
    let mut source: Vec<f64> = bench.outcomes.iter().map(|o| o.map_source_only).collect();
    let mut cnn: Vec<f64> = bench.outcomes.iter().map(|o| o.map_da_cnn).collect();
    let mut sfa: Vec<f64> = bench.outcomes.iter().map(|o| o.map_sfa).collect();
    for o in &bench.outcomes {
        println!(
            "seed {}: source_only {:.4}, da_cnn {:.4}, sfa {:.4}",
            o.seed, o.map_source_only, o.map_da_cnn, o.map_sfa
        );
    }
    let (ms, mc, mf) = (median(&mut source), median(&mut cnn), median(&mut sfa));
    println!("medians: source_only {ms:.4} < da_cnn {mc:.4} < sfa {mf:.4}");
    assert!(ms < mc, "source_only median {ms:.4} not below da_cnn {mc:.4}");
    assert!(mc < mf, "da_cnn median {mc:.4} not below sfa {mf:.4}");
    assert!(
        mf - ms >= 0.05,
        "sfa gain over source_only is {:.4}, below 5 mAP points",
        mf - ms
    );
    println!("criterion 7 PASS: median target mAP50 ordering holds with gain {:.4}", mf - ms);
}

#[test]
fn criterion_8_alignment_diagnostic() {
    let bench = benchmark();
    let mut drops: Vec<f64> = bench
        .outcomes
        .iter()
        .map(|o| {
            println!(
                "seed {}: proxy A-distance source_only {:.4} -> sfa {:.4}",
                o.seed, o.pad_source_only, o.pad_sfa
            );
            (o.pad_source_only - o.pad_sfa) / o.pad_source_only
        })
        .collect();
    let med = median(&mut drops);
    assert!(
        med >= 0.30,
        "median relative A-distance drop {med:.3} below 30%"
    );
    println!("criterion 8 PASS: median relative A-distance drop {:.1}%", med * 100.0);
}

// ---------------------------------------------------------------- 9 --

#[test]
fn criterion_9_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    write_benchmark(&data_dir, 8, 4, &ShiftConfig::fog(), 5, (32, 32)).unwrap();

    let cfg_for = |out: &str| {
        let mut cfg = ExperimentConfig::default();
        cfg.model = ModelConfig {
            num_levels: 1,
            hidden_dim: 16,
            num_encoder_layers: 1,
            num_decoder_layers: 2,
            num_object_queries: 4,
            num_heads: 2,
            num_classes: 3,
            image_size: (32, 32),
        };
        cfg.train.batch_size = 2;
        cfg.train.epochs = 3;
        cfg.train.seed = 123;
        cfg.data_dir = data_dir.clone();
        cfg.out_dir = dir.path().join(out);
        cfg
    };

    // Identical seeds give byte-identical metrics.
    fit(&cfg_for("a"), false).unwrap();
    fit(&cfg_for("b"), false).unwrap();
    let csv_a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let csv_b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "fixed-seed metrics differ");

    // Interrupted-and-resumed training is bit-exact.
    let mut short = cfg_for("c");
    short.train.epochs = 2;
    fit(&short, false).unwrap();
    let mut resumed = cfg_for("c");
    resumed.train.epochs = 3;
    fit(&resumed, true).unwrap();
    let csv_c = std::fs::read(dir.path().join("c/metrics.csv")).unwrap();
    assert_eq!(csv_a, csv_c, "resumed metrics differ from straight run");

    let params = |name: &str| -> Vec<(String, Vec<u64>)> {
        read_entries(&dir.path().join(name).join("last.ckpt"))
            .unwrap()
            .into_iter()
            .map(|e| (e.name, e.data.iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    assert_eq!(params("a"), params("c"), "resumed checkpoint differs bitwise");

    // Zero-epoch runs leave an initial checkpoint only.
    let mut zero = cfg_for("z");
    zero.train.epochs = 0;
    let summary = fit(&zero, false).unwrap();
    assert!(summary.last_checkpoint.exists());
    let csv_z = std::fs::read_to_string(dir.path().join("z/metrics.csv")).unwrap();
    assert_eq!(csv_z.lines().count(), 1, "zero-epoch run should only have a header");
    println!("criterion 9 PASS: byte-identical CSVs, bit-exact resume, zero-epoch checkpoint");
}
