//! Separable near-Gaussian smoothing: three passes of an extended box filter
//! per axis. The extended box carries fractional end weights so the total
//! variance equals σ² exactly, not only for the discrete set of box widths.

use rayon::prelude::*;

use crate::grid::{GridGeometry, ScalarVolume, VectorField};

/// Normalised weights of one extended-box pass with the given variance,
/// centred at index `radius`.
fn extended_box(variance: f64) -> Vec<f64> {
    // plain box of radius r has variance r(r+1)/3
    let r = (((1.0 + 12.0 * variance).sqrt() - 1.0) / 2.0).floor().max(0.0) as usize;
    let rf = r as f64;
    let plain = rf * (rf + 1.0) / 3.0;
    let alpha = ((2.0 * rf + 1.0) * (variance - plain)) / (2.0 * ((rf + 1.0) * (rf + 1.0) - variance));
    let mut w = vec![1.0; 2 * r + 3];
    w[0] = alpha;
    w[2 * r + 2] = alpha;
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Three-pass kernel as a single composite kernel.
#[cfg(test)]
fn kernel(sigma: f64) -> Vec<f64> {
    let single = extended_box(sigma * sigma / 3.0);
    let mut k = vec![1.0];
    for _ in 0..3 {
        let mut next = vec![0.0; k.len() + single.len() - 1];
        for (a, ka) in k.iter().enumerate() {
            for (b, sb) in single.iter().enumerate() {
                next[a + b] += ka * sb;
            }
        }
        k = next;
    }
    k
}

/// One extended-box pass over `line` with replicated ends, via prefix sums.
fn box_pass(line: &mut [f64], weights: &[f64], prefix: &mut Vec<f64>) {
    let n = line.len() as isize;
    let r = (weights.len() / 2 - 1) as isize;
    let (inner, end) = (weights[1], weights[0]);
    let at = |i: isize| line[i.clamp(0, n - 1) as usize];
    // prefix[t] = sum of the replicated line over [-(r+1), t - (r+1))
    prefix.clear();
    prefix.push(0.0);
    let mut acc = 0.0;
    for t in -(r + 1)..n + r + 1 {
        acc += at(t);
        prefix.push(acc);
    }
    let sum = |lo: isize, hi: isize| prefix[(hi + r + 2) as usize] - prefix[(lo + r + 1) as usize];
    let out: Vec<f64> = (0..n).map(|i| inner * sum(i - r, i + r) + end * (at(i - r - 1) + at(i + r + 1))).collect();
    line.copy_from_slice(&out);
}

/// Smooth every line along `axis` with three extended-box passes.
fn smooth_axis(data: &[f32], geometry: &GridGeometry, axis: usize, weights: &[f64]) -> Vec<f32> {
    let dims = geometry.dims;
    let n = dims[axis];
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let (other_a, other_b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let lines = dims[other_a] * dims[other_b];
    let starts: Vec<usize> = (0..lines)
        .map(|l| {
            let mut c = [0usize; 3];
            c[other_a] = l % dims[other_a];
            c[other_b] = l / dims[other_a];
            geometry.index(c[0], c[1], c[2])
        })
        .collect();
    let smoothed: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&base| {
            let mut line: Vec<f64> = (0..n).map(|t| data[base + t * stride] as f64).collect();
            let mut prefix = Vec::with_capacity(n + weights.len() + 2);
            for _ in 0..3 {
                box_pass(&mut line, weights, &mut prefix);
            }
            line
        })
        .collect();
    let mut out = vec![0.0f32; data.len()];
    for (base, line) in starts.iter().zip(&smoothed) {
        for (t, v) in line.iter().enumerate() {
            out[base + t * stride] = *v as f32;
        }
    }
    out
}

pub fn smooth_scalars(data: &[f32], geometry: &GridGeometry, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let weights = extended_box(sigma * sigma / 3.0);
    let mut out = data.to_vec();
    for axis in 0..3 {
        if geometry.dims[axis] > 1 {
            out = smooth_axis(&out, geometry, axis, &weights);
        }
    }
    out
}

pub fn smooth_volume(volume: &ScalarVolume, sigma: f64) -> ScalarVolume {
    ScalarVolume {
        geometry: volume.geometry,
        values: smooth_scalars(&volume.values, &volume.geometry, sigma),
        kind: volume.kind,
    }
}

pub fn smooth_field(field: &VectorField, sigma: f64) -> VectorField {
    if sigma <= 0.0 {
        return field.clone();
    }
    let components: Vec<Vec<f32>> = (0..3)
        .into_par_iter()
        .map(|c| {
            let data: Vec<f32> = field.vectors.iter().map(|v| v[c]).collect();
            smooth_scalars(&data, &field.geometry, sigma)
        })
        .collect();
    let vectors = (0..field.vectors.len()).map(|i| [components[0][i], components[1][i], components[2][i]]).collect();
    VectorField { geometry: field.geometry, vectors }
}
