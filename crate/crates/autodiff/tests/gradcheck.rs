//! Finite-difference coverage for every differentiable operation.

use autodiff::{check_gradients, AutodiffError, Graph, NodeId, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    // Box-Muller keeps this independent of distribution crates.
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

fn assert_passes<F>(name: &str, f: F, inputs: &[Tensor])
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let report = check_gradients(&f, inputs, EPS, TOL).unwrap();
    assert!(
        report.passed(),
        "{name}: max rel err {} with {} failures, first: {:?}",
        report.max_rel_error,
        report.failures.len(),
        report.failures.first()
    );
}

#[test]
fn elementwise_binary_ops() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&mut rng, vec![3, 4]);
        let b = uniform(&mut rng, vec![3, 4], 0.5, 2.0);
        assert_passes(
            "add",
            |g, ids| {
                let y = g.add(ids[0], ids[1])?;
                Ok(g.sum(y))
            },
            &[a.clone(), b.clone()],
        );
        assert_passes(
            "sub",
            |g, ids| {
                let y = g.sub(ids[0], ids[1])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &[a.clone(), b.clone()],
        );
        assert_passes(
            "mul",
            |g, ids| {
                let y = g.mul(ids[0], ids[1])?;
                Ok(g.sum(y))
            },
            &[a.clone(), b.clone()],
        );
        assert_passes(
            "div",
            |g, ids| {
                let y = g.div(ids[0], ids[1])?;
                Ok(g.sum(y))
            },
            &[a.clone(), b.clone()],
        );
        assert_passes(
            "min/max",
            |g, ids| {
                let lo = g.min_elem(ids[0], ids[1])?;
                let hi = g.max_elem(ids[0], ids[1])?;
                let d = g.sub(hi, lo)?;
                Ok(g.sum(d))
            },
            &[a.clone(), b.clone()],
        );
    }
}

#[test]
fn broadcast_bias_add() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = randn(&mut rng, vec![4, 3]);
        let bias = randn(&mut rng, vec![3]);
        assert_passes(
            "add(bias)",
            |g, ids| {
                let y = g.add(ids[0], ids[1])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &[a, bias],
        );
    }
}

#[test]
fn unary_ops() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = randn(&mut rng, vec![2, 5]);
        let positive = uniform(&mut rng, vec![6], 0.05, 3.0);
        assert_passes(
            "scale/add_scalar",
            |g, ids| {
                let y = g.scale(ids[0], -1.7);
                let z = g.add_scalar(y, 0.3);
                let sq = g.mul(z, z)?;
                Ok(g.sum(sq))
            },
            &[x.clone()],
        );
        assert_passes(
            "sigmoid",
            |g, ids| {
                let y = g.sigmoid(ids[0]);
                Ok(g.sum(y))
            },
            &[x.clone()],
        );
        assert_passes(
            "log",
            |g, ids| {
                let y = g.log(ids[0]);
                Ok(g.sum(y))
            },
            &[positive],
        );
        // relu and abs are kinked at zero; keep inputs away from it.
        let off_zero = {
            let mut t = randn(&mut rng, vec![7]);
            for v in t.data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1;
                }
            }
            t
        };
        assert_passes(
            "relu",
            |g, ids| {
                let y = g.relu(ids[0]);
                Ok(g.sum(y))
            },
            &[off_zero.clone()],
        );
        assert_passes(
            "abs",
            |g, ids| {
                let y = g.abs(ids[0]);
                Ok(g.sum(y))
            },
            &[off_zero],
        );
    }
}

#[test]
fn matmul_and_transpose() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let a = randn(&mut rng, vec![3, 4]);
        let b = randn(&mut rng, vec![4, 2]);
        assert_passes(
            "matmul",
            |g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &[a.clone(), b.clone()],
        );
        assert_passes(
            "transpose",
            |g, ids| {
                let at = g.transpose(ids[0])?;
                let y = g.matmul(at, ids[0])?;
                Ok(g.sum(y))
            },
            &[a],
        );
    }
}

#[test]
fn softmax_log_chain() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = randn(&mut rng, vec![3, 4]);
        let weights = randn(&mut rng, vec![3, 4]);
        assert_passes(
            "softmax+log",
            |g, ids| {
                let p = g.softmax(ids[0])?;
                let lp = g.log(p);
                let w = g.mul(lp, ids[1])?;
                Ok(g.sum(w))
            },
            &[x, weights],
        );
    }
}

#[test]
fn layer_norm_full_gradient() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = randn(&mut rng, vec![3, 6]);
        let gain = uniform(&mut rng, vec![6], 0.5, 1.5);
        let bias = randn(&mut rng, vec![6]);
        let probe = randn(&mut rng, vec![3, 6]);
        assert_passes(
            "layer_norm",
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2])?;
                let pc = g.constant(probe.clone());
                let w = g.mul(y, pc)?;
                Ok(g.sum(w))
            },
            &[x, gain, bias],
        );
    }
}

#[test]
fn conv2d_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let x = randn(&mut rng, vec![2, 5, 5]);
        let w = randn(&mut rng, vec![3, 2, 3, 3]);
        let b = randn(&mut rng, vec![3]);
        for stride in [1, 2] {
            assert_passes(
                "conv2d",
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], stride, 1)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                },
                &[x.clone(), w.clone(), b.clone()],
            );
        }
    }
}

#[test]
fn shape_ops() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let a = randn(&mut rng, vec![2, 3]);
        let b = randn(&mut rng, vec![4, 3]);
        assert_passes(
            "concat+slice+reshape+mean",
            |g, ids| {
                let cat = g.concat(&[ids[0], ids[1]], 0)?;
                let mid = g.slice(cat, 0, 1, 4)?;
                let flat = g.reshape(mid, vec![12])?;
                let sq = g.mul(flat, flat)?;
                let m = g.mean(sq);
                let s = g.sum(sq);
                let t = g.add(m, s)?;
                Ok(g.sum(t))
            },
            &[a, b],
        );
    }
}

#[test]
fn composite_network_gradient() {
    // A small end-to-end chain touching most ops at once.
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let x = randn(&mut rng, vec![4, 5]);
        let w1 = randn(&mut rng, vec![5, 6]);
        let b1 = randn(&mut rng, vec![6]);
        let gain = uniform(&mut rng, vec![6], 0.5, 1.5);
        let bias = randn(&mut rng, vec![6]);
        let w2 = randn(&mut rng, vec![6, 2]);
        assert_passes(
            "mlp",
            |g, ids| {
                let h = g.matmul(ids[0], ids[1])?;
                let h = g.add(h, ids[2])?;
                let h = g.layer_norm(h, ids[3], ids[4])?;
                let h = g.relu(h);
                let o = g.matmul(h, ids[5])?;
                let p = g.softmax(o)?;
                let lp = g.log(p);
                let first = g.slice(lp, 1, 0, 1)?;
                let s = g.sum(first);
                Ok(g.scale(s, -0.25))
            },
            &[x, w1, b1, gain, bias, w2],
        );
    }
}

#[test]
fn gradient_reverse_exact_negation_of_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let x = randn(&mut rng, vec![3, 3]);
    let w = randn(&mut rng, vec![3, 3]);

    let run = |reverse: bool| -> Vec<f64> {
        let mut g = Graph::new();
        let xt = Tensor::new(x.shape().to_vec(), x.data().to_vec())
            .unwrap()
            .with_grad();
        let xid = g.leaf(&xt);
        let h = if reverse { g.grad_reverse(xid) } else { xid };
        let wc = g.constant(w.clone());
        let y = g.matmul(h, wc).unwrap();
        let sq = g.mul(y, y).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        g.grad(xid).unwrap().to_vec()
    };

    let plain = run(false);
    let reversed = run(true);
    assert_eq!(plain.len(), reversed.len());
    for (p, r) in plain.iter().zip(&reversed) {
        // Bitwise negation, not just approximate.
        assert_eq!(p.to_bits(), (-r).to_bits());
    }
}

#[test]
fn grad_reverse_forward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    let x = randn(&mut rng, vec![17]);
    let mut g = Graph::new();
    let xid = g.leaf(&x);
    let y = g.grad_reverse(xid);
    for (a, b) in g.data(xid).iter().zip(g.data(y)) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
