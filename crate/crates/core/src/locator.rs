//! Grid-based locator: multi-scale cell classification plus in-cell offset
//! regression.
//!
//! A normalized coordinate `u` in `[-1, 1]` is mapped, per scale `L`, to
//! `t = (u / 2 + 0.5) * L`, a cell index `z = floor(clamp(t, 0, L - eps))`,
//! a flat label `z_y * L + z_x` and an offset `2 (t - z - 0.5)` in `[-1, 1]`.
//! Prediction decodes the arg-max cell with the regressed offset at every
//! scale and averages the results.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};

/// Upper clamp margin keeping `u = 1` inside the last cell.
pub const CELL_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridScales(Vec<usize>);

impl GridScales {
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Config("at least one grid scale is required".into()));
        }
        if scales[0] == 0 || scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "grid scales must be positive and strictly increasing, got {scales:?}"
            )));
        }
        Ok(Self(scales))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for GridScales {
    fn default() -> Self {
        Self(vec![8, 12, 16])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridTarget {
    pub scale: usize,
    pub label: usize,
    pub offset: [f64; 2],
}

fn check_coord(u: [f64; 2]) -> Result<()> {
    if u.iter().any(|c| !(-1.0..=1.0).contains(c)) {
        return Err(Error::Validation(format!(
            "normalized coordinate ({}, {}) is outside [-1, 1]",
            u[0], u[1]
        )));
    }
    Ok(())
}

pub fn encode_grid_target(u: [f64; 2], scale: usize) -> Result<GridTarget> {
    check_coord(u)?;
    if scale == 0 {
        return Err(Error::Config("grid scale must be positive".into()));
    }
    let l = scale as f64;
    let mut z = [0usize; 2];
    let mut offset = [0.0; 2];
    for i in 0..2 {
        let t = (u[i] / 2.0 + 0.5) * l;
        let zi = t.clamp(0.0, l - CELL_EPS).floor();
        z[i] = zi as usize;
        offset[i] = (2.0 * (t - zi - 0.5)).clamp(-1.0, 1.0);
    }
    Ok(GridTarget {
        scale,
        label: z[1] * scale + z[0],
        offset,
    })
}

/// Offsets are clamped to `[-1, 1]` so the point stays inside the cell.
pub fn decode_grid(label: usize, offset: [f64; 2], scale: usize) -> Result<[f64; 2]> {
    if scale == 0 || label >= scale * scale {
        return Err(Error::Validation(format!(
            "grid label {label} out of range for a {scale}x{scale} grid"
        )));
    }
    let l = scale as f64;
    let z = [(label % scale) as f64, (label / scale) as f64];
    let mut u = [0.0; 2];
    for i in 0..2 {
        let t = z[i] + 0.5 + offset[i].clamp(-1.0, 1.0) / 2.0;
        u[i] = 2.0 * t / l - 1.0;
    }
    Ok(u)
}

/// `-log(probs[gt])`.
pub fn classification_loss(probs: &[f64], gt_label: usize) -> Result<f64> {
    let p = probs.get(gt_label).ok_or_else(|| {
        Error::Validation(format!(
            "label {gt_label} out of range for {} classes",
            probs.len()
        ))
    })?;
    Ok(-p.ln())
}

/// L1 distance between two offsets.
pub fn offset_loss(pred: [f64; 2], gt: [f64; 2]) -> f64 {
    (pred[0] - gt[0]).abs() + (pred[1] - gt[1]).abs()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Summed cross-entropy of `logits` (rows, classes) against integer labels.
pub fn classification_loss_tensor(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, classes) = logits.dims2()?;
    if rows != labels.len() {
        return Err(Error::Shape(format!("{rows} logit rows for {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= classes) {
        return Err(Error::Validation(format!("label {bad} out of range for {classes} classes")));
    }
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = Tensor::from_vec(
        labels.iter().map(|l| *l as u32).collect::<Vec<_>>(),
        (rows, 1),
        logits.device(),
    )?;
    Ok(logp.gather(&idx, 1)?.sum_all()?.neg()?)
}

/// Summed L1 distance between predicted and target offsets, both (rows, 2).
pub fn offset_loss_tensor(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("offset shapes {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    Ok((pred - gt)?.abs()?.sum_all()?)
}

/// Per-scale classifier and regressor heads over a descriptor.
pub struct GridLocator {
    scales: GridScales,
    classifiers: Vec<Linear>,
    regressors: Vec<Linear>,
}

/// Per-scale outputs for a batch of descriptors.
pub struct LocatorOutput {
    /// (rows, L_i^2) per scale.
    pub logits: Vec<Tensor>,
    /// (rows, 2) per scale.
    pub offsets: Vec<Tensor>,
}

impl GridLocator {
    pub fn new(store: &mut ParamStore, prefix: &str, descriptor_dim: usize, scales: GridScales) -> Result<Self> {
        let mut classifiers = Vec::new();
        let mut regressors = Vec::new();
        for &l in scales.as_slice() {
            classifiers.push(Linear::new_head(
                store,
                &format!("{prefix}.cls{l}"),
                descriptor_dim,
                l * l,
                1.0,
            )?);
            regressors.push(Linear::new_head(
                store,
                &format!("{prefix}.reg{l}"),
                descriptor_dim,
                2,
                0.1,
            )?);
        }
        Ok(Self {
            scales,
            classifiers,
            regressors,
        })
    }

    pub fn from_heads(scales: GridScales, classifiers: Vec<Linear>, regressors: Vec<Linear>) -> Result<Self> {
        if classifiers.len() != scales.len() || regressors.len() != scales.len() {
            return Err(Error::Config("one classifier and one regressor per scale required".into()));
        }
        Ok(Self {
            scales,
            classifiers,
            regressors,
        })
    }

    pub fn scales(&self) -> &GridScales {
        &self.scales
    }

    fn head(&self, scale_index: usize) -> Result<(&Linear, &Linear)> {
        match (self.classifiers.get(scale_index), self.regressors.get(scale_index)) {
            (Some(c), Some(r)) => Ok((c, r)),
            _ => Err(Error::Config(format!(
                "no locator head for scale index {scale_index} ({} scales configured)",
                self.scales.len()
            ))),
        }
    }

    fn check_dim(&self, psi: &Tensor) -> Result<()> {
        let d = self.classifiers[0].in_dim();
        if psi.dims().last() != Some(&d) {
            return Err(Error::Shape(format!("descriptor has shape {:?}, expected length {d}", psi.dims())));
        }
        Ok(())
    }

    /// Batched forward pass, `psi` is (rows, d).
    pub fn forward(&self, psi: &Tensor) -> Result<LocatorOutput> {
        self.check_dim(psi)?;
        let mut logits = Vec::with_capacity(self.scales.len());
        let mut offsets = Vec::with_capacity(self.scales.len());
        for (c, r) in self.classifiers.iter().zip(&self.regressors) {
            logits.push(c.forward(psi)?);
            offsets.push(r.forward(psi)?);
        }
        Ok(LocatorOutput { logits, offsets })
    }

    /// Class probabilities for one descriptor at one scale.
    pub fn classify_grid(&self, psi: &Tensor, scale_index: usize) -> Result<Vec<f64>> {
        let (cls, _) = self.head(scale_index)?;
        self.check_dim(psi)?;
        let logits = cls.forward(&psi.reshape((1, ()))?)?;
        Ok(softmax(&row_f64(&logits)?))
    }

    pub fn regress_offset(&self, psi: &Tensor, scale_index: usize) -> Result<[f64; 2]> {
        let (_, reg) = self.head(scale_index)?;
        self.check_dim(psi)?;
        let out = row_f64(&reg.forward(&psi.reshape((1, ()))?)?)?;
        Ok([out[0], out[1]])
    }

    /// Mean over scales of the decoded arg-max cell plus clamped offset.
    pub fn predict_keypoint(&self, psi: &Tensor) -> Result<[f64; 2]> {
        let per_scale = self.predict_per_scale(psi)?;
        Ok(mean_point(&per_scale))
    }

    pub fn predict_per_scale(&self, psi: &Tensor) -> Result<Vec<[f64; 2]>> {
        let out = self.forward(&psi.reshape((1, ()))?)?;
        decode_outputs(&out, self.scales.as_slice(), 0)
    }

    /// Batched prediction; returns per-row per-scale decoded points.
    pub fn predict_batch(&self, psi: &Tensor) -> Result<Vec<Vec<[f64; 2]>>> {
        let rows = psi.dims2()?.0;
        let out = self.forward(psi)?;
        (0..rows)
            .map(|r| decode_outputs(&out, self.scales.as_slice(), r))
            .collect()
    }
}

fn row_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn decode_outputs(out: &LocatorOutput, scales: &[usize], row: usize) -> Result<Vec<[f64; 2]>> {
    let mut points = Vec::with_capacity(scales.len());
    for (i, &l) in scales.iter().enumerate() {
        let logits = row_f64(&out.logits[i].get(row)?)?;
        let label = argmax(&logits);
        let off = row_f64(&out.offsets[i].get(row)?)?;
        points.push(decode_grid(label, [off[0], off[1]], l)?);
    }
    Ok(points)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn mean_point(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len().max(1) as f64;
    let sx: f64 = points.iter().map(|p| p[0]).sum();
    let sy: f64 = points.iter().map(|p| p[1]).sum();
    [sx / n, sy / n]
}
