//! Centered kernel alignment between feature matrices.
//!
//! Both the biased estimator (double-centered Gram ratio) and the unbiased
//! estimator (U-statistic HSIC applied to numerator and denominator with
//! zeroed-diagonal Gram matrices) are provided, along with the spatial
//! pooling that turns N×C×H×W activations into N×C feature rows and the
//! pairwise similarity matrix over a task set.

mod grouping;

pub use grouping::{
    best_grouping, enumerate_partitions, fusion_decision, Group, Grouping, SimilarityMatrix,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{BufRead, Write};

/// N×C feature rows collected at one layer for one task.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    values: Tensor,
    /// Task identifier and layer index the features were collected from.
    pub source: Option<(String, usize)>,
}

impl FeatureMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::shape(format!(
                "FeatureMatrix expects N×C values, got {:?}",
                values.shape()
            )));
        }
        Ok(FeatureMatrix {
            values,
            source: None,
        })
    }

    pub fn with_source(mut self, task: impl Into<String>, layer: usize) -> Self {
        self.source = Some((task.into(), layer));
        self
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// CSV export: header row of channel indices, one row per sample,
    /// shortest-round-trip decimal encoding.
    pub fn to_csv(&self, w: &mut impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.cols()).map(|c| c.to_string()).collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.rows() {
            let row: Vec<String> = (0..self.cols())
                .map(|j| self.values.at2(i, j).to_string())
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn from_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse("line 1", "empty feature CSV"))?;
        let header = header?;
        let cols = header.split(',').count();
        let mut data = Vec::new();
        let mut rows = 0;
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(Error::parse(
                    format!("line {}", idx + 1),
                    format!("expected {cols} fields, got {}", fields.len()),
                ));
            }
            for f in fields {
                let v: f64 = f.trim().parse().map_err(|e| {
                    Error::parse(
                        format!("line {}", idx + 1),
                        format!("bad number {f:?}: {e}"),
                    )
                })?;
                data.push(v);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::parse("line 2", "feature CSV has no data rows"));
        }
        FeatureMatrix::new(Tensor::new(vec![rows, cols], data)?)
    }
}

/// Means an N×C×H×W activation tensor over its spatial extent into N×C rows.
pub fn spatial_pool(features: &Tensor) -> Result<FeatureMatrix> {
    let s = features.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!(
            "spatial_pool expects N×C×H×W, got {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            let base = (i * c + j) * plane;
            let sum: f64 = features.data()[base..base + plane].iter().sum();
            out[i * c + j] = sum / plane as f64;
        }
    }
    FeatureMatrix::new(Tensor::new(vec![n, c], out)?)
}

fn gram(x: &FeatureMatrix) -> Vec<f64> {
    let (n, c) = (x.rows(), x.cols());
    let d = x.values.data();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut dot = 0.0;
            for k in 0..c {
                dot += d[i * c + k] * d[j * c + k];
            }
            g[i * n + j] = dot;
            g[j * n + i] = dot;
        }
    }
    g
}

fn double_center(g: &mut [f64], n: usize) {
    let mut row_mean = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let s: f64 = g[i * n..(i + 1) * n].iter().sum();
        row_mean[i] = s / n as f64;
        total += s;
    }
    let grand = total / (n * n) as f64;
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] -= row_mean[i] + row_mean[j] - grand;
        }
    }
}

/// Biased CKA: Frobenius alignment of double-centered linear Gram matrices.
///
/// Returns 0 when either centered Gram norm is below 1e-12 (constant
/// features carry no alignment information).
pub fn cka_biased(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape(format!(
            "cka_biased: row counts differ ({} vs {})",
            x.rows(),
            y.rows()
        )));
    }
    let n = x.rows();
    let mut gx = gram(x);
    let mut gy = gram(y);
    double_center(&mut gx, n);
    double_center(&mut gy, n);
    let dot: f64 = gx.iter().zip(&gy).map(|(a, b)| a * b).sum();
    let nx = gx.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = gy.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx < 1e-12 || ny < 1e-12 {
        return Ok(0.0);
    }
    Ok(dot / (nx * ny))
}

/// U-statistic HSIC on a pair of zeroed-diagonal Gram matrices.
fn hsic_unbiased(k: &[f64], l: &[f64], n: usize) -> f64 {
    let nf = n as f64;
    let mut trace = 0.0;
    let mut sum_k = 0.0;
    let mut sum_l = 0.0;
    let mut row_k = vec![0.0; n];
    let mut row_l = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let kv = k[i * n + j];
            let lv = l[i * n + j];
            trace += kv * lv;
            sum_k += kv;
            sum_l += lv;
            row_k[i] += kv;
            row_l[i] += lv;
        }
    }
    let cross: f64 = row_k.iter().zip(&row_l).map(|(a, b)| a * b).sum();
    (trace + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - 2.0 * cross / (nf - 2.0))
        / (nf * (nf - 3.0))
}

/// Unbiased CKA: HSIC U-statistics over zeroed-diagonal linear Gram
/// matrices, ratio clamped to [−1, 1]. Requires at least 4 samples.
///
/// Returns 0 when the denominator degenerates (constant features).
pub fn cka_unbiased(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape(format!(
            "cka_unbiased: row counts differ ({} vs {})",
            x.rows(),
            y.rows()
        )));
    }
    let n = x.rows();
    if n < 4 {
        return Err(Error::precondition(format!(
            "cka_unbiased requires N ≥ 4 samples, got {n}"
        )));
    }
    let mut k = gram(x);
    let mut l = gram(y);
    for i in 0..n {
        k[i * n + i] = 0.0;
        l[i * n + i] = 0.0;
    }
    let num = hsic_unbiased(&k, &l, n);
    let dx = hsic_unbiased(&k, &k, n);
    let dy = hsic_unbiased(&l, &l, n);
    let denom_sq = dx * dy;
    if denom_sq <= 1e-24 {
        return Ok(0.0);
    }
    Ok((num / denom_sq.sqrt()).clamp(-1.0, 1.0))
}

/// Pairwise unbiased CKA over an ordered task set; the diagonal is forced
/// to exactly 1.
pub fn pairwise_cka(entries: &[(String, FeatureMatrix)]) -> Result<SimilarityMatrix> {
    if entries.is_empty() {
        return Err(Error::precondition("pairwise_cka over an empty task set"));
    }
    let n = entries[0].1.rows();
    if entries.iter().any(|(_, f)| f.rows() != n) {
        return Err(Error::shape(
            "pairwise_cka: all feature matrices must share the sample count",
        ));
    }
    let t = entries.len();
    let mut s = vec![0.0; t * t];
    for i in 0..t {
        s[i * t + i] = 1.0;
        for j in (i + 1)..t {
            let v = cka_unbiased(&entries[i].1, &entries[j].1)?;
            s[i * t + j] = v;
            s[j * t + i] = v;
        }
    }
    SimilarityMatrix::new(entries.iter().map(|(n, _)| n.clone()).collect(), s)
}
