//! Brute-force reference implementations. Plain `Vec<f64>` arithmetic, no
//! code shared with the library.

#![allow(dead_code)]

use serde::{Deserialize, Serialize};

/// One stored oracle evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleCase {
    pub op_name: String,
    pub inputs: serde_json::Value,
    pub expected: serde_json::Value,
    pub tolerance: f64,
}

/// Feature map stored channel-major: `values[ch][y][x]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Map {
    pub values: Vec<Vec<Vec<f64>>>,
    pub stride: usize,
}

impl Map {
    pub fn channels(&self) -> usize {
        self.values.len()
    }
    pub fn height(&self) -> usize {
        self.values[0].len()
    }
    pub fn width(&self) -> usize {
        self.values[0][0].len()
    }
}

/// `sum_x exp(-|x - u|^2 / (2 xi^2)) f[x]`, one term at a time. Cell `(i, j)`
/// is centered at pixel `((j + 0.5) s, (i + 0.5) s)`; `u` maps to pixels by
/// `(u + 1) / 2 * extent`.
pub fn oracle_gaussian_pool(f: &Map, u: [f64; 2], xi: f64) -> Vec<f64> {
    let s = f.stride as f64;
    let px = (u[0] + 1.0) / 2.0 * (f.width() as f64 * s);
    let py = (u[1] + 1.0) / 2.0 * (f.height() as f64 * s);
    let mut out = vec![0.0; f.channels()];
    for (ch, plane) in f.values.iter().enumerate() {
        for (i, row) in plane.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let cx = (j as f64 + 0.5) * s;
                let cy = (i as f64 + 0.5) * s;
                let d2 = (cx - px).powi(2) + (cy - py).powi(2);
                out[ch] += (-d2 / (2.0 * xi * xi)).exp() * v;
            }
        }
    }
    out
}

/// `A[x] = f[x] * mu` element-wise per channel.
pub fn oracle_correlate(f: &Map, mu: &[f64]) -> Vec<Vec<Vec<f64>>> {
    f.values
        .iter()
        .zip(mu)
        .map(|(plane, m)| plane.iter().map(|row| row.iter().map(|v| v * m).collect()).collect())
        .collect()
}

/// Grid label and in-cell offset of `u` on an `l x l` grid, plus the decoded
/// point. Label is `row * l + col`.
pub fn oracle_grid_roundtrip(u: [f64; 2], l: usize) -> (usize, [f64; 2], [f64; 2]) {
    let lf = l as f64;
    let mut cell = [0usize; 2];
    let mut offset = [0.0; 2];
    for a in 0..2 {
        let t = (u[a] + 1.0) * lf / 2.0;
        let mut z = t.floor();
        if z >= lf {
            z = lf - 1.0;
        }
        if z < 0.0 {
            z = 0.0;
        }
        cell[a] = z as usize;
        offset[a] = 2.0 * (t - z) - 1.0;
    }
    let label = cell[1] * l + cell[0];
    let mut back = [0.0; 2];
    let col = (label % l) as f64;
    let row = (label / l) as f64;
    back[0] = (col + (offset[0] + 1.0) / 2.0) * 2.0 / lf - 1.0;
    back[1] = (row + (offset[1] + 1.0) / 2.0) * 2.0 / lf - 1.0;
    (label, offset, back)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `sum_n sum_q exp(-|mu_hat_n - mu_n|^2) |mu_n - phi_q| exp(-|mu_n - phi_q|^2)`
/// with `mu_hat_n` the mean of keypoint `n`'s query embeddings. Keypoints
/// with no visible prototype or no query embedding contribute nothing.
pub fn oracle_transport(mu: &[Vec<f64>], visible: &[bool], queries: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    for n in 0..mu.len() {
        if !visible[n] || queries[n].is_empty() {
            continue;
        }
        let c = mu[n].len();
        let mut mean = vec![0.0; c];
        for q in &queries[n] {
            for i in 0..c {
                mean[i] += q[i] / queries[n].len() as f64;
            }
        }
        let p = (-dist2(&mean, &mu[n])).exp();
        for q in &queries[n] {
            let r2 = dist2(&mu[n], q);
            total += p * r2.sqrt() * (-r2).exp();
        }
    }
    total
}

/// `sum_n |S - S1| + |S - S2| + |S1 - S2|` over visible keypoints.
pub fn oracle_style(s: &[Vec<f64>], s1: &[Vec<f64>], s2: &[Vec<f64>], visible: &[bool]) -> f64 {
    let mut total = 0.0;
    for n in 0..s.len() {
        if visible[n] {
            total += dist2(&s[n], &s1[n]).sqrt() + dist2(&s[n], &s2[n]).sqrt() + dist2(&s1[n], &s2[n]).sqrt();
        }
    }
    total
}
