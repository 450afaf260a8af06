use super::*;
use crate::error::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> Architecture {
    Architecture {
        hidden: 16,
        depth: 3,
        omega0: 30.0,
    }
}

/// Small network with non-trivial weights everywhere (including the output
/// layer and biases), so gradients are not dominated by the init scaling.
fn busy_params(seed: u64) -> MlpParams {
    let mut p = MlpParams::init(&small_arch(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
    let n = p.layers.len();
    for layer in &mut p.layers[n - 1..] {
        layer.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.3..0.3));
    }
    for layer in &mut p.layers {
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.05..0.05));
    }
    p
}

fn random_coords(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `loss` w.r.t. one stored `f32` parameter, using the
/// actually representable perturbation.
fn central_diff(params: &MlpParams, layer: usize, bias: bool, idx: usize, h: f32, loss: &dyn Fn(&MlpParams) -> f64) -> f64 {
    let get = |p: &mut MlpParams| -> *mut f32 {
        if bias {
            &mut p.layers[layer].bias[idx]
        } else {
            &mut p.layers[layer].weights[idx]
        }
    };
    let mut plus = params.clone();
    let mut minus = params.clone();
    let (vp, vm);
    unsafe {
        let p = get(&mut plus);
        *p += h;
        vp = *p;
        let m = get(&mut minus);
        *m -= h;
        vm = *m;
    }
    (loss(&plus) - loss(&minus)) / (vp as f64 - vm as f64)
}

/// Richardson-extrapolated central difference: the ω₀ scaling makes the plain
/// O(h²) error visible at h = 1e-4.
fn fd_param(params: &MlpParams, layer: usize, bias: bool, idx: usize, h: f32, loss: &dyn Fn(&MlpParams) -> f64) -> f64 {
    let coarse = central_diff(params, layer, bias, idx, h, loss);
    let fine = central_diff(params, layer, bias, idx, h / 2.0, loss);
    (4.0 * fine - coarse) / 3.0
}

fn grad_of(g: &ParamGrads, layer: usize, bias: bool, idx: usize) -> f64 {
    if bias {
        g.bias[layer][idx]
    } else {
        g.weights[layer][idx]
    }
}

fn random_probes(p: &MlpParams, n: usize, seed: u64) -> Vec<(usize, bool, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let l = rng.random_range(0..p.layers.len());
            let bias = rng.random_bool(0.3);
            let len = if bias { p.layers[l].bias.len() } else { p.layers[l].weights.len() };
            (l, bias, rng.random_range(0..len))
        })
        .collect()
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let a = init_siren(7, 30.0);
    let b = init_siren(7, 30.0);
    assert_eq!(encode_params(&a), encode_params(&b));
    assert_eq!(a.sizes(), vec![3, 256, 256, 256, 3]);
    let c = init_siren(8, 30.0);
    assert_ne!(a, c);
}

#[test]
fn init_ranges() {
    let p = init_siren(1, 30.0);
    assert!(p.layers[0].weights.iter().all(|w| w.abs() <= 1.0 / 3.0));
    let hidden = (6.0f64 / 256.0).sqrt() / 30.0;
    assert!(p.layers[1].weights.iter().all(|w| (w.abs() as f64) <= hidden));
    assert!(p.layers[3].weights.iter().all(|w| (w.abs() as f64) <= hidden * 1e-2));
    assert!(p.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
}

#[test]
fn initial_displacement_is_small() {
    let xs = random_coords(1000, 3);
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let p = init_siren(seed, 30.0);
        for u in forward_batch(&p, &xs) {
            worst = worst.max(Vec3::from(u).norm());
        }
    }
    assert!(worst < 0.1, "max |u| = {worst}");
}

#[test]
fn zero_networks() {
    let mut p = MlpParams::zeros(&[3, 8, 8, 3], 30.0, Activation::Sine);
    p.layers[2].bias = vec![0.5, -1.0, 2.0];
    for x in random_coords(5, 1) {
        assert_eq!(forward(&p, &Vec3::from(x)), Vec3::new(0.5, -1.0, 2.0));
    }
    let mut p = busy_params(4);
    p.zero_output();
    for x in random_coords(5, 2) {
        let x = Vec3::from(x);
        assert_eq!(forward(&p, &x), Vec3::zeros());
        assert_eq!(spatial_jacobian(&p, &x), Mat3::zeros());
    }
}

#[test]
fn batched_forward_matches_single_bitwise() {
    let p = init_siren(5, 30.0);
    let xs = random_coords(CHUNK + 37, 9);
    let net = p.compile();
    let batch = net.forward(&xs);
    let (bu, bj) = net.forward_jacobian(&xs);
    for (i, x) in xs.iter().enumerate().step_by(23) {
        let single = net.forward(&[*x]);
        assert_eq!(single[0], batch[i]);
        assert_eq!(bu[i], batch[i]);
        let (_, sj) = net.forward_jacobian(&[*x]);
        assert_eq!(sj[0], bj[i]);
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let p = busy_params(11);
    let net = p.compile();
    let h = 1e-4;
    for x in random_coords(100, 12) {
        let (_, j) = net.forward_jacobian(&[x]);
        let mut fd = Mat3::zeros();
        for c in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let up = net.forward(&[xp])[0];
            let um = net.forward(&[xm])[0];
            for r in 0..3 {
                fd[(r, c)] = (up[r] - um[r]) / (2.0 * h);
            }
        }
        let err = (fd - j[0]).norm() / j[0].norm();
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn affine_network_has_constant_jacobian() {
    let m = Mat3::new(0.1, 0.2, 0.0, -0.1, 0.05, 0.3, 0.0, 0.0, -0.2);
    let c = Vec3::new(0.01, 0.0, -0.02);
    let p = MlpParams::affine(&m, &c);
    for x in random_coords(10, 3) {
        let x = Vec3::from(x);
        let j = spatial_jacobian(&p, &x);
        assert!((j - m.map(|v| v as f32 as f64)).norm() < 1e-12);
        let u = forward(&p, &x);
        let expect = m.map(|v| v as f32 as f64) * x + c.map(|v| v as f32 as f64);
        assert!((u - expect).norm() < 1e-12);
    }
    // Sine network whose hidden layers are zeroed: constant output, zero Jacobian.
    let mut p = busy_params(2);
    for l in 1..p.layers.len() - 1 {
        p.layers[l].weights.iter_mut().for_each(|w| *w = 0.0);
        p.layers[l].bias.iter_mut().for_each(|b| *b = 0.0);
    }
    let j0 = spatial_jacobian(&p, &Vec3::new(0.1, 0.2, 0.3));
    let j1 = spatial_jacobian(&p, &Vec3::new(-0.5, 0.7, 0.0));
    assert_eq!(j0, j1);
}

#[test]
fn backward_zero_upstream_is_zero() {
    let p = busy_params(1);
    let xs = random_coords(10, 1);
    let g = backward_params(&p, &xs, &vec![[0.0; 3]; 10]);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn backward_matches_finite_differences() {
    let p = busy_params(3);
    let xs = random_coords(12, 4);
    let upstream = vec![[1.0, 0.0, 0.0]; xs.len()];
    let g = backward_params(&p, &xs, &upstream);
    let loss = |q: &MlpParams| forward_batch(q, &xs).iter().map(|u| u[0]).sum::<f64>();
    let mut worst: f64 = 0.0;
    for (l, bias, idx) in random_probes(&p, 100, 5) {
        let fd = fd_param(&p, l, bias, idx, 1e-4, &loss);
        worst = worst.max(rel_err(fd, grad_of(&g, l, bias, idx), 1e-6));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn backward_through_jacobian_matches_finite_differences() {
    let p = busy_params(6);
    let xs = random_coords(9, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gu: Vec<[f64; 3]> = xs.iter().map(|_| [rng.random_range(-1.0..1.0), 0.3, -0.2]).collect();
    let gj: Vec<Mat3> = xs.iter().map(|_| Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
    let net = p.compile();
    let tape = net.forward_tape(&xs, true);
    let g = net.backward(&tape, &gu, Some(&gj));
    let loss = |q: &MlpParams| {
        let (u, j) = q.compile().forward_jacobian(&xs);
        let mut acc = 0.0;
        for i in 0..xs.len() {
            acc += (0..3).map(|r| gu[i][r] * u[i][r]).sum::<f64>();
            acc += gj[i].component_mul(&j[i]).sum();
        }
        acc
    };
    let mut worst: f64 = 0.0;
    for (l, bias, idx) in random_probes(&p, 100, 9) {
        let fd = fd_param(&p, l, bias, idx, 1e-4, &loss);
        worst = worst.max(rel_err(fd, grad_of(&g, l, bias, idx), 1e-6));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn backward_is_linear_in_the_batch() {
    let p = busy_params(2);
    let xs = random_coords(CHUNK + 5, 3);
    let up: Vec<[f64; 3]> = xs.iter().map(|x| [x[1], -x[0], 0.5]).collect();
    let total = backward_params(&p, &xs, &up);
    let mut sum = ParamGrads::zeros_like(&p);
    for (x, u) in xs.iter().zip(&up) {
        sum.add_assign(&backward_params(&p, &[*x], &[*u]));
    }
    for (a, b) in total.iter().zip(sum.iter()) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }
}

#[test]
fn adam_steps_are_deterministic() {
    let run = || {
        let mut p = busy_params(1);
        let mut state = adam_state_for(&p);
        let xs = random_coords(64, 2);
        for _ in 0..5 {
            let g = backward_params(&p, &xs, &vec![[1.0, -1.0, 0.5]; xs.len()]);
            adam_step(&mut p, &g, &mut state, 1e-3).unwrap();
        }
        encode_params(&p)
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut p = busy_params(1);
    let before = p.clone();
    let mut state = adam_state_for(&p);
    adam_step(&mut p, &ParamGrads::zeros_like(&before), &mut state, 1e-4).unwrap();
    assert_eq!(p, before);
    assert_eq!(state.t, 1);
    let mut g = ParamGrads::zeros_like(&before);
    g.weights[2][0] = f64::INFINITY;
    let err = adam_step(&mut p, &g, &mut state, 1e-4).unwrap_err();
    assert!(err.to_string().contains("layer 2 weights"), "{err}");
}

#[test]
fn params_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.params");
    let p = busy_params(3);
    save_params(&p, &path).unwrap();
    let q = load_params(&path).unwrap();
    assert_eq!(p, q);
    assert_eq!(encode_params(&p), encode_params(&q));
    let xs = random_coords(20, 1);
    assert_eq!(forward_batch(&p, &xs), forward_batch(&q, &xs));
}

#[test]
fn params_file_errors() {
    let p = busy_params(3);
    let mut bytes = encode_params(&p);
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(decode_params(&bytes), Err(Error::Params(_))));
    let text = String::from_utf8_lossy(&encode_params(&p)).replacen("\"version\":1", "\"version\":2", 1);
    let mut bytes = encode_params(&p);
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header_end = text.find('\n').unwrap();
    bytes.splice(..nl, text.as_bytes()[..header_end].iter().cloned());
    assert!(decode_params(&bytes).unwrap_err().to_string().contains("version"));
}
