//! Finite-difference checks of every differentiable graph operation and of
//! the whole network on a tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdemand_core::cell::{recall, recall_with_weights};
use stdemand_core::net::{DecodeInput, FmE3dclNet, NetworkConfig};
use stdemand_core::tensor::gradcheck::{check_inputs, check_params};
use stdemand_core::tensor::{Conv3dSpec, Graph, Tensor, Var};

const OP_TOLERANCE: f64 = 1e-4;
const NETWORK_TOLERANCE: f64 = 1e-3;
const INSTANCES: u64 = 10;

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU's kink is never within a step.
fn away_from_zero(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    random(dims, rng).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

type Build = fn(&mut Graph<'_>, &[Var]) -> stdemand_core::Result<Var>;

fn check_op(name: &str, make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Build)) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let (inputs, build) = make(&mut rng);
        let report = check_inputs(&inputs, seed, build).unwrap();
        assert!(
            report.max_relative_error <= OP_TOLERANCE,
            "{name} seed {seed}: {report:?}"
        );
    }
}

#[test]
fn elementwise_binary() {
    check_op("add", |r| {
        let d = dims(r, 3);
        (vec![random(&d, r), random(&d, r)], |g, v| g.add(v[0], v[1]))
    });
    check_op("sub", |r| {
        let d = dims(r, 2);
        (vec![random(&d, r), random(&d, r)], |g, v| g.sub(v[0], v[1]))
    });
    check_op("mul", |r| {
        let d = dims(r, 4);
        (vec![random(&d, r), random(&d, r)], |g, v| g.mul(v[0], v[1]))
    });
    check_op("mul_self", |r| {
        let d = dims(r, 2);
        (vec![random(&d, r)], |g, v| g.mul(v[0], v[0]))
    });
    check_op("add_broadcast", |r| {
        let d = dims(r, 3);
        let b = d[1..].to_vec();
        (vec![random(&d, r), random(&b, r)], |g, v| g.add_broadcast(v[0], v[1]))
    });
}

#[test]
fn elementwise_unary() {
    check_op("scale", |r| (vec![random(&dims(r, 3), r)], |g, v| Ok(g.scale(v[0], -1.7))));
    check_op("sigmoid", |r| (vec![random(&dims(r, 3), r).map(|x| 3.0 * x)], |g, v| Ok(g.sigmoid(v[0]))));
    check_op("tanh", |r| (vec![random(&dims(r, 3), r).map(|x| 2.0 * x)], |g, v| Ok(g.tanh(v[0]))));
    check_op("relu", |r| (vec![away_from_zero(&dims(r, 3), r)], |g, v| Ok(g.relu(v[0]))));
}

#[test]
fn reductions_and_losses() {
    check_op("sum", |r| (vec![random(&dims(r, 3), r)], |g, v| Ok(g.sum(v[0]))));
    check_op("mean", |r| (vec![random(&dims(r, 3), r)], |g, v| Ok(g.mean(v[0]))));
    check_op("mse", |r| {
        let d = dims(r, 3);
        (vec![random(&d, r), random(&d, r)], |g, v| g.mse(v[0], v[1]))
    });
}

#[test]
fn matrix_products() {
    check_op("matmul_batched", |r| {
        let (b, m, k, n) = (r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
        (vec![random(&[b, m, k], r), random(&[b, k, n], r)], |g, v| g.matmul(v[0], v[1]))
    });
    check_op("matmul_shared", |r| {
        let (b, m, k, n) = (r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
        (vec![random(&[b, m, k], r), random(&[k, n], r)], |g, v| g.matmul(v[0], v[1]))
    });
    check_op("transpose", |r| (vec![random(&dims(r, 3), r)], |g, v| g.transpose(v[0])));
}

#[test]
fn shape_operations() {
    check_op("reshape", |r| {
        let d = dims(r, 3);
        (vec![random(&d, r)], |g, v| {
            let n = g.shape(v[0]).numel();
            g.reshape(v[0], vec![n])
        })
    });
    check_op("concat", |r| {
        let (a, b) = (dims(r, 3), dims(r, 3));
        let left = vec![a[0], a[1], a[2]];
        let right = vec![a[0], b[1], a[2]];
        (vec![random(&left, r), random(&right, r)], |g, v| g.concat(&[v[0], v[1], v[0]], 1))
    });
    check_op("slice", |r| {
        let d = vec![r.random_range(1..=3), 5, r.random_range(1..=3)];
        (vec![random(&d, r)], |g, v| g.slice(v[0], 1, 1, 3))
    });
}

#[test]
fn softmax_and_attention() {
    check_op("softmax_last", |r| (vec![random(&dims(r, 3), r).map(|x| 3.0 * x)], |g, v| g.softmax(v[0], 2)));
    check_op("softmax_middle", |r| (vec![random(&dims(r, 3), r).map(|x| 3.0 * x)], |g, v| g.softmax(v[0], 1)));
    check_op("attention", |r| {
        let (b, p, k, c) = (r.random_range(1..=2), r.random_range(1..=40), r.random_range(1..=6), r.random_range(1..=3));
        (vec![random(&[b, p, c], r), random(&[b, k, c], r)], |g, v| g.attention(v[0], v[1]))
    });
    check_op("recall", |r| {
        let d = [1, 2, 2, 2, 2];
        (vec![random(&d, r), random(&d, r), random(&d, r)], |g, v| recall(g, v[0], &v[1..]))
    });
    check_op("recall_unfused", |r| {
        let d = [1, 2, 2, 2, 2];
        (vec![random(&d, r), random(&d, r), random(&d, r)], |g, v| {
            recall_with_weights(g, v[0], &v[1..]).map(|(out, _)| out)
        })
    });
}

#[test]
fn fused_attention_matches_composition_exactly_enough() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..INSTANCES {
        let (b, p, k, c) = (2, rng.random_range(1..=70), rng.random_range(1..=9), 3);
        let (q, m) = (random(&[b, p, c], &mut rng), random(&[b, k, c], &mut rng));
        let mut g = Graph::new();
        let (qv, mv) = (g.constant(q), g.constant(m));
        let fused = g.attention(qv, mv).unwrap();
        let mt = g.transpose(mv).unwrap();
        let s = g.matmul(qv, mt).unwrap();
        let w = g.softmax(s, 2).unwrap();
        let plain = g.matmul(w, mv).unwrap();
        let diff = g
            .value(fused)
            .data()
            .iter()
            .zip(g.value(plain).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{diff}");
    }
}

#[test]
fn layer_norm() {
    check_op("layer_norm", |r| {
        let d = vec![r.random_range(1..=3), r.random_range(2..=4), r.random_range(2..=4)];
        let gamma = random(&d[2..], r);
        let beta = random(&d[2..], r);
        (vec![random(&d, r), gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
    });
}

#[test]
fn conv3d() {
    check_op("conv3d_same", |r| {
        let x = [1, r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=2)];
        let k = [3, 3, 3, x[4], r.random_range(1..=3)];
        let b = [k[4]];
        (vec![random(&x, r), random(&k, r), random(&b, r)], |g, v| {
            g.conv3d(v[0], v[1], Some(v[2]), Conv3dSpec::same([3, 3, 3]))
        })
    });
    check_op("conv3d_strided", |r| {
        let x = [r.random_range(1..=2), 4, 5, 3, 2];
        let k = [3, 1, 3, 2, 2];
        (vec![random(&x, r), random(&k, r)], |g, v| {
            g.conv3d(
                v[0],
                v[1],
                None,
                Conv3dSpec {
                    padding: [1, 0, 0],
                    stride: [2, 2, 1],
                },
            )
        })
    });
}

fn tiny(decode: DecodeInput, layers: usize) -> NetworkConfig {
    NetworkConfig {
        lookback: 2,
        segments: 2,
        rows: 4,
        cols: 4,
        channels: 2,
        encoder_layers: 1,
        e3d_layers: layers,
        decoder_layers: 1,
        fc_layers: 1,
        fusion_layers: 2,
        filters: 2,
        kernel: [3, 3, 3],
        fc_width: 3,
        fusion_width: 4,
        decode_input: decode,
        ..NetworkConfig::default()
    }
}

#[test]
fn whole_network_parameter_gradients() {
    for seed in 0..INSTANCES {
        let (decode, layers) = if seed % 2 == 0 { (DecodeInput::LastStep, 2) } else { (DecodeInput::AllSteps, 1) };
        let config = tiny(decode, layers);
        let net = FmE3dclNet::new(config.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (dd, de) = net.input_dims(1);
        let demand = random(&dd, &mut rng).map(|v| v.abs());
        let mut ext = Tensor::zeros(de).unwrap();
        for k in [rng.random_range(0..3), 3 + rng.random_range(0..2), 5 + rng.random_range(0..4)] {
            ext.data_mut()[k] = 1.0;
        }
        let report = check_params(net.params(), seed, |g| {
            let d = g.constant(demand.clone());
            let e = g.constant(ext.clone());
            Ok(net.forward(g, d, e)?.prediction)
        })
        .unwrap();
        assert!(report.max_relative_error <= NETWORK_TOLERANCE, "seed {seed}: {report:?}");
    }
}
