//! Seeded random cases for the gradient suite.  Each case returns the
//! relative error between tape and central-difference gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seg_forge_core::tensor::{BatchNormMode, RunningMoments, Tape, Tensor};
use seg_forge_core::unet::{attention_gate as gate, build, forward, GateVars, ModelConfig, ModelWeights, Mode};

use super::{check_gradients, random_coeffs, random_tensor, rel_error, rng, FD_STEP};

pub const CASES: u64 = 20;
pub const TOL: f64 = 1e-3;
pub const END_TO_END_TOL: f64 = 1e-2;

/// Values kept away from the relu kink so the central difference is smooth.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.random_range(0.05..1.0);
        if r.random_bool(0.5) { m } else { -m }
    })
}

pub fn conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let k = [1, 3][r.random_range(0..2)];
    let (h, w) = (r.random_range(k..7), r.random_range(k..7));
    let stride = r.random_range(1..3);
    let padding = r.random_range(0..=k / 2 + 1);
    let x = random_tensor(&mut r, &[n, cin, h, w], 1.0);
    let kern = random_tensor(&mut r, &[cout, cin, k, k], 1.0);
    let b = random_tensor(&mut r, &[cout], 1.0);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let coeffs = random_coeffs(&mut r, n * cout * oh * ow);
    check_gradients(&[x, kern, b], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], stride, padding).unwrap();
        t.weighted_sum(y, &coeffs).unwrap()
    })
}

pub fn maxpool2(seed: u64) -> f64 {
    let mut r = rng(100 + seed);
    let shape = [r.random_range(1..3), r.random_range(1..3), 2 * r.random_range(1..4), 2 * r.random_range(1..4)];
    let x = random_tensor(&mut r, &shape, 1.0);
    let coeffs = random_coeffs(&mut r, x.len() / 4);
    check_gradients(&[x], |t, v| {
        let y = t.maxpool2(v[0]).unwrap();
        t.weighted_sum(y, &coeffs).unwrap()
    })
}

pub fn upsample2(seed: u64) -> f64 {
    let mut r = rng(200 + seed);
    let shape = [r.random_range(1..3), r.random_range(1..3), r.random_range(1..4), r.random_range(1..4)];
    let x = random_tensor(&mut r, &shape, 1.0);
    let coeffs = random_coeffs(&mut r, x.len() * 4);
    check_gradients(&[x], |t, v| {
        let y = t.upsample2(v[0]).unwrap();
        t.weighted_sum(y, &coeffs).unwrap()
    })
}

pub fn relu(seed: u64) -> f64 {
    let mut r = rng(300 + seed);
    let x = away_from_zero(&mut r, &[1, 2, 3, 4]);
    let coeffs = random_coeffs(&mut r, 24);
    check_gradients(&[x], |t, v| {
        let y = t.relu(v[0]);
        t.weighted_sum(y, &coeffs).unwrap()
    })
}

pub fn sigmoid(seed: u64) -> f64 {
    let mut r = rng(400 + seed);
    let x = random_tensor(&mut r, &[2, 2, 3, 3], 4.0);
    let coeffs = random_coeffs(&mut r, 36);
    check_gradients(&[x], |t, v| {
        let y = t.sigmoid(v[0]);
        t.weighted_sum(y, &coeffs).unwrap()
    })
}

pub fn softmax_channels(seed: u64) -> f64 {
    let mut r = rng(500 + seed);
    let c = r.random_range(2..5);
    let x = random_tensor(&mut r, &[2, c, 2, 3], 3.0);
    let coeffs = random_coeffs(&mut r, x.len());
    check_gradients(&[x], |t, v| {
        let y = t.softmax_channels(v[0]).unwrap();
        t.weighted_sum(y, &coeffs).unwrap()
    })
}

pub fn batchnorm_train(seed: u64) -> f64 {
    let mut r = rng(600 + seed);
    let c = r.random_range(1..4);
    let shape = [r.random_range(1..3), c, r.random_range(2..4), r.random_range(2..4)];
    let x = random_tensor(&mut r, &shape, 2.0);
    let gamma = random_tensor(&mut r, &[c], 1.5);
    let beta = random_tensor(&mut r, &[c], 1.0);
    let coeffs = random_coeffs(&mut r, x.len());
    check_gradients(&[x, gamma, beta], |t, v| {
        let mut m = RunningMoments::new(c);
        let y = t.batchnorm2d(v[0], v[1], v[2], &mut m, BatchNormMode::Train).unwrap();
        t.weighted_sum(y, &coeffs).unwrap()
    })
}

pub fn batchnorm_eval(seed: u64) -> f64 {
    let mut r = rng(700 + seed);
    let c = r.random_range(1..4);
    let x = random_tensor(&mut r, &[2, c, 3, 3], 2.0);
    let gamma = random_tensor(&mut r, &[c], 1.5);
    let beta = random_tensor(&mut r, &[c], 1.0);
    let mut moments = RunningMoments::new(c);
    moments.mean = random_coeffs(&mut r, c);
    moments.var = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
    let coeffs = random_coeffs(&mut r, x.len());
    check_gradients(&[x, gamma, beta], |t, v| {
        let mut m = moments.clone();
        let y = t.batchnorm2d(v[0], v[1], v[2], &mut m, BatchNormMode::Eval).unwrap();
        t.weighted_sum(y, &coeffs).unwrap()
    })
}

pub fn add(seed: u64) -> f64 {
    let mut r = rng(800 + seed);
    let a = random_tensor(&mut r, &[1, 2, 3, 3], 1.0);
    let b = random_tensor(&mut r, &[1, 2, 3, 3], 1.0);
    let coeffs = random_coeffs(&mut r, 18);
    check_gradients(&[a, b], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        t.weighted_sum(y, &coeffs).unwrap()
    })
}

pub fn mul(seed: u64) -> f64 {
    let mut r = rng(900 + seed);
    let c = r.random_range(1..4);
    // Odd cases broadcast a single-channel mask over the channels.
    let bc = if seed % 2 == 1 { 1 } else { c };
    let a = random_tensor(&mut r, &[2, c, 3, 2], 1.0);
    let b = random_tensor(&mut r, &[2, bc, 3, 2], 1.0);
    let coeffs = random_coeffs(&mut r, a.len());
    check_gradients(&[a, b], |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        t.weighted_sum(y, &coeffs).unwrap()
    })
}

pub fn concat(seed: u64) -> f64 {
    let mut r = rng(1000 + seed);
    let (ca, cb) = (r.random_range(1..4), r.random_range(1..4));
    let a = random_tensor(&mut r, &[2, ca, 2, 3], 1.0);
    let b = random_tensor(&mut r, &[2, cb, 2, 3], 1.0);
    let coeffs = random_coeffs(&mut r, a.len() + b.len());
    check_gradients(&[a, b], |t, v| {
        let y = t.concat_channels(v[0], v[1]).unwrap();
        t.weighted_sum(y, &coeffs).unwrap()
    })
}

pub fn cross_entropy(seed: u64) -> f64 {
    let mut r = rng(1100 + seed);
    let c = r.random_range(2..5);
    let (n, h, w) = (r.random_range(1..3), 3, 3);
    let x = random_tensor(&mut r, &[n, c, h, w], 3.0);
    let target: Vec<usize> = (0..n * h * w).map(|_| r.random_range(0..c)).collect();
    check_gradients(&[x], |t, v| t.cross_entropy_loss(v[0], &target).unwrap())
}

pub fn mean_channel(seed: u64) -> f64 {
    let mut r = rng(1200 + seed);
    let x = random_tensor(&mut r, &[1, 3, 4, 4], 1.0);
    let class = r.random_range(0..3);
    let mask: Vec<bool> = (0..16).map(|_| r.random_bool(0.5)).collect();
    let use_mask = seed.is_multiple_of(2) && mask.iter().any(|&m| m);
    check_gradients(&[x], |t, v| {
        let y = t.sigmoid(v[0]);
        t.mean_channel(y, class, use_mask.then_some(&mask[..])).unwrap()
    })
}

pub fn attention_gate(seed: u64) -> f64 {
    let mut r = rng(1300 + seed);
    let (c, f) = (4, ModelConfig::gate_channels(4));
    let inputs = vec![
        random_tensor(&mut r, &[1, c, 8, 8], 1.0),
        random_tensor(&mut r, &[1, c, 8, 8], 1.0),
        random_tensor(&mut r, &[f, c, 1, 1], 1.0),
        random_tensor(&mut r, &[f], 0.5),
        random_tensor(&mut r, &[f, c, 1, 1], 1.0),
        random_tensor(&mut r, &[f], 0.5),
        random_tensor(&mut r, &[1, f, 1, 1], 1.0),
        random_tensor(&mut r, &[1], 0.5),
    ];
    let coeffs = random_coeffs(&mut r, c * 64);
    check_gradients(&inputs, |t, v| {
        let p = GateVars {
            wg: v[2],
            bg: v[3],
            wx: v[4],
            bx: v[5],
            psi: v[6],
            bpsi: v[7],
        };
        let (gated, _) = gate(t, v[0], v[1], &p).unwrap();
        t.weighted_sum(gated, &coeffs).unwrap()
    })
}

/// Loss gradient of a depth-1 model with respect to every parameter, in
/// training mode.
pub fn end_to_end(seed: u64) -> f64 {
    let cfg = ModelConfig {
        depth: 1,
        base_channels: 2,
        num_classes: 3,
        input_size: 8,
    };
    let mut r = rng(1400 + seed);
    let weights = build::<f64>(&cfg, seed).unwrap();
    let input = Tensor::from_fn([1, 1, 8, 8], |_| r.random_range(0.0..1.0));
    let target: Vec<usize> = (0..64).map(|_| r.random_range(0..3)).collect();
    let loss_of = |w: &ModelWeights<f64>, trainable: bool| {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let pass = forward(w, &mut tape, x, Mode::Train, trainable).unwrap();
        let loss = tape.cross_entropy_loss(pass.logits, &target).unwrap();
        (tape, pass, loss)
    };
    let (mut tape, pass, loss) = loss_of(&weights, true);
    tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, t) in weights.params() {
        analytic.extend_from_slice(tape.grad(pass.params[name]).unwrap());
        for j in 0..t.len() {
            let mut w = weights.clone();
            let orig = t.data()[j];
            w.param_mut(name).unwrap().data_mut()[j] = orig + FD_STEP;
            let (tu, _, lu) = loss_of(&w, false);
            w.param_mut(name).unwrap().data_mut()[j] = orig - FD_STEP;
            let (td, _, ld) = loss_of(&w, false);
            numeric.push((tu.value(lu).data()[0] - td.value(ld).data()[0]) / (2.0 * FD_STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

/// Every op-level case generator with its display name.
pub const OPS: &[(&str, fn(u64) -> f64)] = &[
    ("conv2d", conv2d),
    ("maxpool2", maxpool2),
    ("upsample2", upsample2),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("softmax_channels", softmax_channels),
    ("batchnorm2d/train", batchnorm_train),
    ("batchnorm2d/eval", batchnorm_eval),
    ("add", add),
    ("mul", mul),
    ("concat_channels", concat),
    ("cross_entropy_loss", cross_entropy),
    ("mean_channel", mean_channel),
    ("attention_gate", attention_gate),
];
