//! Backprop and forward-mode derivatives against finite differences and
//! against each other.

mod common;

use common::rel_err;
use latentood::linalg::{dot, Matrix};
use latentood::mlp::{Activation, MlpConfig, MlpParams};
use latentood::rng::{gaussian, gaussian_vec, seeded};
use rand::Rng;

const H: f64 = 1e-5;

fn params(activation: Activation, seed: u64) -> MlpParams {
    let cfg = MlpConfig {
        dim: 5,
        width: 16,
        depth: 3,
        time_dim: 6,
        activation,
    };
    let mut rng = seeded(seed);
    let mut p = MlpParams::init(cfg, &mut rng).unwrap();
    let flat: Vec<f64> = (0..p.param_count()).map(|_| 0.4 * gaussian(&mut rng)).collect();
    p.load_flat(&flat).unwrap();
    p
}

fn batch(seed: u64, rows: usize) -> (Matrix, Vec<f64>) {
    let mut rng = seeded(seed);
    let x = Matrix::from_vec(rows, 5, gaussian_vec(&mut rng, rows * 5)).unwrap();
    let c = (0..rows).map(|_| rng.random_range(-2.0..1.0)).collect();
    (x, c)
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    for act in [Activation::Silu, Activation::Identity] {
        let p = params(act, 1);
        let (x, c) = batch(2, 4);
        let g = Matrix::from_vec(4, 5, gaussian_vec(&mut seeded(3), 20)).unwrap();
        let loss = |q: &MlpParams| dot(q.forward_batch(&x, &c).unwrap().0.as_slice(), g.as_slice());
        let (_, cache) = p.forward_batch(&x, &c).unwrap();
        let grads = p.backward(&cache, &g).unwrap().0.flatten();
        let base = p.flatten();
        let mut rng = seeded(4);
        for _ in 0..50 {
            let i = rng.random_range(0..base.len());
            let mut q = p.clone();
            let mut flat = base.clone();
            flat[i] += H;
            q.load_flat(&flat).unwrap();
            let up = loss(&q);
            flat[i] -= 2.0 * H;
            q.load_flat(&flat).unwrap();
            let fd = (up - loss(&q)) / (2.0 * H);
            assert!(rel_err(grads[i], fd, 1e-6) < 1e-4, "{act:?} coord {i}: {} vs {fd}", grads[i]);
        }
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let p = params(Activation::Silu, 5);
    let (x, c) = batch(6, 3);
    let g = Matrix::from_vec(3, 5, gaussian_vec(&mut seeded(7), 15)).unwrap();
    let (_, cache) = p.forward_batch(&x, &c).unwrap();
    let dx = p.backward(&cache, &g).unwrap().1;
    for i in 0..x.as_slice().len() {
        let mut shifted = x.clone();
        shifted.as_mut_slice()[i] += H;
        let up = dot(p.forward_batch(&shifted, &c).unwrap().0.as_slice(), g.as_slice());
        shifted.as_mut_slice()[i] -= 2.0 * H;
        let down = dot(p.forward_batch(&shifted, &c).unwrap().0.as_slice(), g.as_slice());
        let fd = (up - down) / (2.0 * H);
        assert!(rel_err(dx.as_slice()[i], fd, 1e-6) < 1e-4);
    }
}

#[test]
fn jvp_and_vjp_are_dual() {
    // u^T (J v) == (J^T u)^T v, forward mode against reverse mode.
    let p = params(Activation::Silu, 8);
    let mut rng = seeded(9);
    for _ in 0..20 {
        let x = gaussian_vec(&mut rng, 5);
        let v = gaussian_vec(&mut rng, 5);
        let u = gaussian_vec(&mut rng, 5);
        let c = rng.random_range(-2.0..1.0);
        let jv = p.jvp(&x, c, &v).unwrap();
        let (_, cache) = p
            .forward_batch(&Matrix::from_vec(1, 5, x.clone()).unwrap(), &[c])
            .unwrap();
        let jtu = p.backward(&cache, &Matrix::from_vec(1, 5, u.clone()).unwrap()).unwrap().1;
        let lhs = dot(&u, &jv);
        let rhs = dot(jtu.as_slice(), &v);
        assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn stacked_tangents_match_single_jvps() {
    let p = params(Activation::Silu, 10);
    let mut rng = seeded(11);
    let x = gaussian_vec(&mut rng, 5);
    let dirs: Vec<Vec<f64>> = (0..7).map(|_| gaussian_vec(&mut rng, 5)).collect();
    let refs: Vec<&[f64]> = dirs.iter().map(|d| d.as_slice()).collect();
    let (out, tangents) = p.forward_with_tangents(&x, 0.3, &refs).unwrap();
    for (a, b) in out.iter().zip(p.forward(&x, 0.3).unwrap()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
    for (d, t) in dirs.iter().zip(&tangents) {
        let single = p.jvp(&x, 0.3, d).unwrap();
        for (a, b) in t.iter().zip(&single) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn jvp_is_linear_in_direction() {
    let p = params(Activation::Silu, 12);
    let mut rng = seeded(13);
    let x = gaussian_vec(&mut rng, 5);
    let v = gaussian_vec(&mut rng, 5);
    let w = gaussian_vec(&mut rng, 5);
    let comb: Vec<f64> = v.iter().zip(&w).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
    let jv = p.jvp(&x, -0.4, &v).unwrap();
    let jw = p.jvp(&x, -0.4, &w).unwrap();
    let jc = p.jvp(&x, -0.4, &comb).unwrap();
    for i in 0..5 {
        assert!((jc[i] - (2.0 * jv[i] - 0.5 * jw[i])).abs() < 1e-12);
    }
}
