//! Association z-statistics from paired abundance tables.
//!
//! All moments use the `1/m` convention: standardised columns have mean 0
//! and `m⁻¹ Σ y² = 1`. At small `m` this differs visibly from the `1/(m-1)`
//! sample variance.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::model::ZScoreMatrix;

/// Variance terms below this make the statistic degenerate; such entries are
/// set to 0 and reported.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Two tables measured on the same `m` samples (rows).
#[derive(Debug, Clone)]
pub struct PairedData {
    y1: Array2<f64>,
    y2: Array2<f64>,
}

impl PairedData {
    pub fn new(y1: Array2<f64>, y2: Array2<f64>) -> Result<Self> {
        if y1.nrows() != y2.nrows() {
            return Err(Error::Dimension(format!(
                "paired tables have {} and {} samples",
                y1.nrows(),
                y2.nrows()
            )));
        }
        if y1.nrows() < 3 {
            return Err(Error::Dimension(format!("need at least 3 samples, got {}", y1.nrows())));
        }
        if y1.ncols() == 0 || y2.ncols() == 0 {
            return Err(Error::Dimension("paired tables need at least one feature each".into()));
        }
        if y1.iter().chain(y2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("paired tables must be finite".into()));
        }
        Ok(PairedData { y1, y2 })
    }

    pub fn m(&self) -> usize {
        self.y1.nrows()
    }

    pub fn y1(&self) -> &Array2<f64> {
        &self.y1
    }

    pub fn y2(&self) -> &Array2<f64> {
        &self.y2
    }
}

/// Per-pair Pearson estimates and their variance terms.
#[derive(Debug, Clone)]
pub struct CorrelationStats {
    pub rho_hat: Array2<f64>,
    pub s: Array2<f64>,
    /// Pairs whose variance term fell below [`DEGENERATE_VARIANCE`].
    pub degenerate: Vec<(usize, usize)>,
}

/// Centres each column and scales it to unit `1/m` variance.
pub fn standardize_columns(y: &Array2<f64>) -> Result<Array2<f64>> {
    let m = y.nrows() as f64;
    let mut out = y.to_owned();
    for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let mean = col.sum() / m;
        col.mapv_inplace(|v| v - mean);
        let var = col.iter().map(|v| v * v).sum::<f64>() / m;
        if !(var > 0.0) {
            return Err(Error::ZeroVariance { column: c });
        }
        let sd = var.sqrt();
        col.mapv_inplace(|v| v / sd);
    }
    Ok(out)
}

/// `ρ̂_ij = m⁻¹ Σ_k a_ki b_kj` and
/// `s_ij = m⁻¹ Σ_k (2 a_ki b_kj - ρ̂_ij a_ki - ρ̂_ij b_kj)²` on already
/// standardised tables.
pub fn correlation_stats(a: ArrayView2<f64>, b: ArrayView2<f64>) -> CorrelationStats {
    let m = a.nrows() as f64;
    let rho_hat = a.t().dot(&b) / m;
    let (n1, n2) = rho_hat.dim();
    let mut s = Array2::zeros((n1, n2));
    let mut degenerate = Vec::new();
    for i in 0..n1 {
        let ai = a.column(i);
        for j in 0..n2 {
            let bj = b.column(j);
            let r = rho_hat[[i, j]];
            let acc: f64 = ai
                .iter()
                .zip(bj.iter())
                .map(|(&u, &v)| {
                    let t = 2.0 * u * v - r * u - r * v;
                    t * t
                })
                .sum();
            s[[i, j]] = acc / m;
            if s[[i, j]] < DEGENERATE_VARIANCE {
                degenerate.push((i, j));
            }
        }
    }
    CorrelationStats { rho_hat, s, degenerate }
}

fn one_sample_from_stats(stats: &CorrelationStats, m: usize) -> Result<ZScoreMatrix> {
    let x = Array2::from_shape_fn(stats.rho_hat.dim(), |(i, j)| {
        let s = stats.s[[i, j]];
        if s < DEGENERATE_VARIANCE {
            0.0
        } else {
            2.0 * stats.rho_hat[[i, j]] / (s / m as f64).sqrt()
        }
    });
    ZScoreMatrix::new(x)
}

/// One-sample correlation statistics `x_ij = 2ρ̂_ij / sqrt(s_ij / m)`.
pub fn pearson_z(data: &PairedData) -> Result<(ZScoreMatrix, CorrelationStats)> {
    let a = standardize_columns(&data.y1)?;
    let b = standardize_columns(&data.y2)?;
    let stats = correlation_stats(a.view(), b.view());
    let x = one_sample_from_stats(&stats, data.m())?;
    Ok((x, stats))
}

/// Difference-of-correlations statistics
/// `2(ρ̂¹ - ρ̂²) / sqrt(s¹/m1 + s²/m2)`, each group standardised on its own.
/// Returns the degenerate pairs alongside.
pub fn two_sample_z(group1: &PairedData, group2: &PairedData) -> Result<(ZScoreMatrix, Vec<(usize, usize)>)> {
    if group1.y1.ncols() != group2.y1.ncols() || group1.y2.ncols() != group2.y2.ncols() {
        return Err(Error::Dimension("groups must share the same features".into()));
    }
    let stats = |g: &PairedData| -> Result<CorrelationStats> {
        let a = standardize_columns(&g.y1)?;
        let b = standardize_columns(&g.y2)?;
        Ok(correlation_stats(a.view(), b.view()))
    };
    let (s1, s2) = (stats(group1)?, stats(group2)?);
    let (m1, m2) = (group1.m() as f64, group2.m() as f64);
    let mut degenerate = Vec::new();
    let x = Array2::from_shape_fn(s1.rho_hat.dim(), |(i, j)| {
        let v = s1.s[[i, j]] / m1 + s2.s[[i, j]] / m2;
        if v < DEGENERATE_VARIANCE {
            degenerate.push((i, j));
            0.0
        } else {
            2.0 * (s1.rho_hat[[i, j]] - s2.rho_hat[[i, j]]) / v.sqrt()
        }
    });
    Ok((ZScoreMatrix::new(x)?, degenerate))
}

/// Modified centred log-ratio per row (sample): positive entries become
/// `log v - mean(log of the row's positive entries)`, zeros stay 0.
pub fn mclr(counts: &Array2<f64>) -> Result<Array2<f64>> {
    if let Some(((i, j), v)) = counts.indexed_iter().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation {
            row: i,
            col: j,
            message: format!("abundance {v} must be finite and >= 0"),
        });
    }
    let mut out = Array2::zeros(counts.dim());
    for (k, (row, mut dst)) in counts.rows().into_iter().zip(out.rows_mut()).enumerate() {
        let logs: Vec<f64> = row.iter().filter(|&&v| v > 0.0).map(|v| v.ln()).collect();
        if logs.is_empty() {
            log::warn!("sample {k} has no positive entries; left at zero");
            continue;
        }
        let centre = logs.iter().sum::<f64>() / logs.len() as f64;
        for (d, &v) in dst.iter_mut().zip(row.iter()) {
            if v > 0.0 {
                *d = v.ln() - centre;
            }
        }
    }
    Ok(out)
}
