#![allow(dead_code)]

use ptvseg::metrics::BinaryVolume;
use ptvseg::tensor::{ConvKernel, Tensor};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

pub fn rng(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut Pcg64, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn rand_kernel(rng: &mut Pcg64, c_out: usize, c_in: usize, kh: usize, kw: usize) -> ConvKernel {
    ConvKernel::new(rand_tensor(rng, &[c_out, c_in, kh, kw]), rand_tensor(rng, &[c_out])).unwrap()
}

/// Central-difference derivative of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// `Σ r_i · t_i`, a scalar probe whose gradient with respect to `t` is `r`.
pub fn dot(t: &Tensor, r: &Tensor) -> f64 {
    t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub fn random_volume(r: &mut rand_pcg::Pcg64, shape: [usize; 3], spacing: [f64; 3]) -> BinaryVolume {
    let density = r.random_range(0.05..0.7);
    let n = shape.iter().product();
    let voxels = (0..n).map(|_| r.random_bool(density)).collect();
    BinaryVolume::new(shape, voxels, spacing).unwrap()
}

pub fn oracle_dsc(a: &BinaryVolume, b: &BinaryVolume) -> f64 {
    let inter = a.voxels().iter().zip(b.voxels()).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub fn oracle_surface(v: &BinaryVolume) -> Vec<[f64; 3]> {
    let [d, h, w] = v.shape();
    let s = v.spacing_mm();
    let fg = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && v.get(z as usize, y as usize, x as usize)
    };
    let mut pts = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !fg(z, y, x) {
                    continue;
                }
                let neighbours = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
                if neighbours.iter().any(|&(a, b, c)| !fg(z + a, y + b, x + c)) {
                    pts.push([z as f64 * s[0], y as f64 * s[1], x as f64 * s[2]]);
                }
            }
        }
    }
    pts
}

pub fn oracle_directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let (dz, dy, dx) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
                    (dz * dz + dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn oracle_hd_hd95(a: &BinaryVolume, b: &BinaryVolume) -> Option<(f64, f64)> {
    let (sa, sb) = (oracle_surface(a), oracle_surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let mut all = oracle_directed(&sa, &sb);
    all.extend(oracle_directed(&sb, &sa));
    let hd = all.iter().copied().fold(0.0, f64::max);
    all.sort_by(f64::total_cmp);
    // Nearest rank: the ceil(0.95 n)-th smallest value, in integer arithmetic.
    let rank = (95 * all.len()).div_ceil(100);
    Some((hd, all[rank - 1]))
}
