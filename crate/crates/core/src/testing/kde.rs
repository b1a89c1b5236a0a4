//! Gaussian kernel density estimate on a fine grid.
//!
//! Observations are linearly binned onto an equispaced grid, the bin counts
//! are convolved with the kernel (truncated at 6 bandwidths) and the density
//! at each query point is linearly interpolated from the grid.

use std::f64::consts::PI;

const GRID: usize = 2048;
const KERNEL_RADIUS: f64 = 6.0;

/// Silverman's rule of thumb: `0.9 min(sd, IQR/1.34) m^(-1/5)`.
pub fn silverman_bandwidth(data: &[f64]) -> f64 {
    let m = data.len() as f64;
    let mean = data.iter().sum::<f64>() / m;
    let sd = (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0).max(1.0)).sqrt();
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * m.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1e-3
    }
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Evaluates the density estimate of `data` with bandwidth `h` at each point
/// of `at`.
pub fn kde(data: &[f64], h: f64, at: &[f64]) -> Vec<f64> {
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min) - KERNEL_RADIUS * h;
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + KERNEL_RADIUS * h;
    let step = (hi - lo) / (GRID - 1) as f64;
    let mut counts = vec![0.0; GRID];
    for &v in data {
        let pos = (v - lo) / step;
        let k = (pos.floor() as usize).min(GRID - 2);
        let frac = pos - k as f64;
        counts[k] += 1.0 - frac;
        counts[k + 1] += frac;
    }
    let radius = ((KERNEL_RADIUS * h / step).ceil() as usize).min(GRID - 1);
    let norm = 1.0 / (data.len() as f64 * h * (2.0 * PI).sqrt());
    let kernel: Vec<f64> = (0..=radius)
        .map(|d| {
            let u = d as f64 * step / h;
            (-0.5 * u * u).exp() * norm
        })
        .collect();
    let mut density = vec![0.0; GRID];
    for (src, &c) in counts.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let a = src.saturating_sub(radius);
        let b = (src + radius).min(GRID - 1);
        for (dst, slot) in density.iter_mut().enumerate().take(b + 1).skip(a) {
            *slot += c * kernel[dst.abs_diff(src)];
        }
    }
    at.iter()
        .map(|&v| {
            let pos = ((v - lo) / step).clamp(0.0, (GRID - 1) as f64);
            let k = (pos.floor() as usize).min(GRID - 2);
            let frac = pos - k as f64;
            density[k] * (1.0 - frac) + density[k + 1] * frac
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn binned_matches_exact_sum() {
        let mut r = rng::from_seed(5);
        let data: Vec<f64> = (0..800).map(|_| StandardNormal.sample(&mut r)).collect();
        let h = silverman_bandwidth(&data);
        let at: Vec<f64> = (-30..=30).map(|k| k as f64 * 0.1).collect();
        let approx = kde(&data, h, &at);
        for (x, a) in at.iter().zip(approx) {
            let exact: f64 = data
                .iter()
                .map(|d| (-0.5 * ((x - d) / h).powi(2)).exp())
                .sum::<f64>()
                / (data.len() as f64 * h * (2.0 * PI).sqrt());
            assert!((a - exact).abs() <= 1e-3 * exact.max(1e-3), "x={x}: {a} vs {exact}");
        }
    }

    #[test]
    fn silverman_on_standard_normal() {
        let mut r = rng::from_seed(6);
        let data: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut r)).collect();
        let h = silverman_bandwidth(&data);
        let want = 0.9 * 10_000f64.powf(-0.2);
        assert!((h / want - 1.0).abs() < 0.05);
    }
}
