#![allow(dead_code)]

pub mod oracles;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsdet::geometry::ImageId;
use vsdet::mssvm::{Constraint, Sign};

/// Random separable constraint set: `n` vectors in `dim` dimensions whose
/// signs agree with a hidden unit direction, each at least `gap` from its
/// hyperplane.
pub fn separable_set(seed: u64, n: usize, dim: usize, gap: f64) -> Vec<Constraint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    let mut out = Vec::new();
    while out.len() < n {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m: f64 = v.iter().zip(&dir).map(|(a, b)| a * b).sum();
        if m.abs() < gap {
            continue;
        }
        out.push(Constraint {
            image_id: ImageId(out.len() as u32 / 4),
            y_index: out.len() + 1,
            sign: if m > 0.0 { Sign::Plus } else { Sign::Minus },
            vector: v,
        });
    }
    out
}

/// Exact minimizer of `lambda/2 |w|^2 + mean hinge` by enumerating KKT
/// patterns of the dual: every multiplier is at zero, at its upper bound
/// `1/(lambda n)`, or free with its constraint holding at margin exactly 1.
/// Only patterns with at most `dim` free multipliers are tried, which covers
/// constraint sets in general position.
pub fn brute_force_qp(constraints: &[Constraint], lambda: f64) -> (Vec<f64>, f64) {
    let n = constraints.len();
    let dim = constraints[0].vector.len();
    let upper = 1.0 / (lambda * n as f64);
    let z: Vec<DVector<f64>> = constraints
        .iter()
        .map(|c| DVector::from_vec(c.vector.clone()) * c.sign.value())
        .collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        // 0 = at zero, 1 = at upper bound, 2 = free
        let mut pattern = Vec::with_capacity(n);
        let mut c = code;
        for _ in 0..n {
            pattern.push(c % 3);
            c /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&k| pattern[k] == 2).collect();
        if free.len() > dim {
            continue;
        }
        let mut base = DVector::zeros(dim);
        for k in (0..n).filter(|&k| pattern[k] == 1) {
            base += &z[k] * upper;
        }
        let mut w = base.clone();
        if !free.is_empty() {
            let f = free.len();
            let g = DMatrix::from_fn(f, f, |i, j| z[free[i]].dot(&z[free[j]]));
            let rhs = DVector::from_fn(f, |i, _| 1.0 - z[free[i]].dot(&base));
            let Some(beta) = g.lu().solve(&rhs) else { continue };
            if beta.iter().any(|&b| !(-1e-12..=upper + 1e-12).contains(&b)) {
                continue;
            }
            for (i, &k) in free.iter().enumerate() {
                w += &z[k] * beta[i];
            }
        }
        let feasible = (0..n).all(|k| {
            let m = z[k].dot(&w);
            match pattern[k] {
                0 => m >= 1.0 - 1e-9,
                1 => m <= 1.0 + 1e-9,
                _ => true,
            }
        });
        if !feasible {
            continue;
        }
        let hinge: f64 = z.iter().map(|zk| (1.0 - zk.dot(&w)).max(0.0)).sum::<f64>() / n as f64;
        let obj = 0.5 * lambda * w.dot(&w) + hinge;
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((w.iter().copied().collect(), obj));
        }
    }
    best.expect("some KKT pattern must hold")
}

pub fn min_signed_margin(constraints: &[Constraint], w: &[f64]) -> f64 {
    constraints
        .iter()
        .map(|c| c.signed_margin(w))
        .fold(f64::INFINITY, f64::min)
}
