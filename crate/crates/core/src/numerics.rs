//! Vector and grid arithmetic shared by the scoring, masking and loss code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a vector is unit length.
pub const UNIT_TOLERANCE: f64 = 1e-9;

const RANGE_EPS: f64 = 1e-12;

/// A finite, fixed-dimension embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("embedding must have dimension >= 1"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("embedding entry {i} is not finite")));
        }
        Ok(Self(values))
    }

    /// Builds a vector and scales it to unit length.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        normalize_unit(&Self::new(values)?)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A row-major grid of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract("scalar field needs width and height >= 1"));
        }
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} field needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("scalar field contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Bilinear resampling with half-pixel centres: destination cell `i` samples
    /// source coordinate `(i + 0.5) * src / dst - 0.5`, clamped to the source grid.
    pub fn resample_bilinear(&self, width: usize, height: usize) -> Result<Self> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        if width == 0 || height == 0 {
            return Err(Error::contract("resample target must be at least 1x1"));
        }
        let xs: Vec<(usize, usize, f64)> = (0..width)
            .map(|i| source_coord(i, self.width, width))
            .collect();
        let ys: Vec<(usize, usize, f64)> = (0..height)
            .map(|j| source_coord(j, self.height, height))
            .collect();
        let mut out = Vec::with_capacity(width * height);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
                let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Self::new(width, height, out)
    }
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity on raw slices, clamped to [-1, 1].
pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    // sqrt(aa·bb) rather than ‖a‖·‖b‖ makes cos(a, a) exactly 1.
    let denom = (aa * bb).sqrt();
    let denom = if denom.is_finite() && denom > 0.0 { denom } else { aa.sqrt() * bb.sqrt() };
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_slices(a.as_slice(), b.as_slice())
}

/// Log-sum-exp pooling `(1/beta) * ln(sum_j exp(beta * s_j))`, shifted by the
/// maximum before exponentiation.
pub fn lse_pool(sims: &[f64], beta: f64) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::contract("lse_pool needs at least one value"));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::contract(format!("lse_pool needs beta > 0, got {beta}")));
    }
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric("lse_pool input is not finite".into()));
    }
    let sum: f64 = sims.iter().map(|s| (beta * (s - max)).exp()).sum();
    Ok(max + sum.ln() / beta)
}

/// Softmax weights `d lse_pool / d s_j`.
pub fn lse_weights(sims: &[f64], beta: f64) -> Vec<f64> {
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (beta * (s - max)).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn normalize_unit(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(EmbeddingVector(v.0.iter().map(|x| x / n).collect()))
}

/// Maps a field onto [0, 1]. A constant field maps to all zeros.
pub fn normalize_range01(field: &ScalarField) -> ScalarField {
    let lo = field.min();
    let hi = field.max();
    // Spans at rounding level count as constant.
    let values = if hi - lo > RANGE_EPS * hi.abs().max(lo.abs()) {
        let span = hi - lo;
        field.values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; field.len()]
    };
    ScalarField {
        width: field.width,
        height: field.height,
        values,
    }
}

/// Linear-interpolation quantile (the "type 7" estimator) of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("quantile of empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::contract(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}
