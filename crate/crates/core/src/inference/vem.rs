//! E-step, M-step, ELBO and initialisation.
//!
//! Edge tensors are stored flat with layout `((i * n2 + j) * b1 + q) * b2 + l`.
//! Sums over `(i, j)` are accumulated per fixed-size chunk of rows and the
//! chunk partials combined left to right, so results do not depend on the
//! number of worker threads.

use ndarray::Array2;
use rayon::prelude::*;
use std::f64::consts::PI;

use super::kmeans::kmeans;
use super::{EdgeTensor, VariationalState};
use crate::error::Result;
use crate::model::{gaussian_log_pdf, AltParams, Dimensions, ModelParams, NullParams, ZScoreMatrix, PI_CLAMP};
use crate::rng;

/// Lower bound applied to every fitted variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Blocks whose alternative weight falls below this keep their previous
/// parameters.
pub const EMPTY_BLOCK_WEIGHT: f64 = 1e-12;
/// Membership probabilities are kept above this before normalisation.
pub const BETA_FLOOR: f64 = 1e-300;
/// Upper 25% point of N(0,1): `|x|` above it has two-sided p-value below 0.5.
pub const Z_P_HALF: f64 = 0.674_489_750_196_081_7;
/// Weight of the k-means label in the softened initial memberships.
const INIT_LABEL_WEIGHT: f64 = 0.95;
const INIT_VARIANCE_FLOOR: f64 = 1e-2;
const ROW_CHUNK: usize = 8;

fn chunked_sum<T, M, C>(n_rows: usize, map: M, combine: C) -> T
where
    T: Send,
    M: Fn(std::ops::Range<usize>) -> T + Sync,
    C: Fn(T, T) -> T,
{
    let n_chunks = n_rows.div_ceil(ROW_CHUNK);
    let partials: Vec<T> = (0..n_chunks)
        .into_par_iter()
        .map(|c| map(c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(n_rows)))
        .collect();
    partials.into_iter().reduce(combine).expect("at least one row")
}

fn add_into(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    a
}

/// Per-block constants of the log-densities.
#[derive(Debug, Clone)]
struct BlockTerms {
    log_pi: Vec<f64>,
    log_1m_pi: Vec<f64>,
    mu: Vec<f64>,
    log_norm: Vec<f64>,
    inv_two_var: Vec<f64>,
}

impl BlockTerms {
    fn new(params: &ModelParams) -> Self {
        let (b1, b2) = (params.b1(), params.b2());
        let mut t = BlockTerms {
            log_pi: Vec::with_capacity(b1 * b2),
            log_1m_pi: Vec::with_capacity(b1 * b2),
            mu: Vec::with_capacity(b1 * b2),
            log_norm: Vec::with_capacity(b1 * b2),
            inv_two_var: Vec::with_capacity(b1 * b2),
        };
        for q in 0..b1 {
            for l in 0..b2 {
                let pi = params.pi_clamped(q, l);
                let var = params.alt_params.sigma_sq[[q, l]];
                t.log_pi.push(pi.ln());
                t.log_1m_pi.push((-pi).ln_1p());
                t.mu.push(params.alt_params.mu[[q, l]]);
                t.log_norm.push(-0.5 * (2.0 * PI * var).ln());
                t.inv_two_var.push(0.5 / var);
            }
        }
        t
    }

    #[inline]
    fn log_alt(&self, k: usize, x: f64) -> f64 {
        let d = x - self.mu[k];
        self.log_norm[k] - d * d * self.inv_two_var[k]
    }
}

/// Scratch storage for the E-step: the edge-evidence terms `d_ij^{ql}`.
#[derive(Debug, Clone, Default)]
pub struct EStepWorkspace {
    d: Vec<f64>,
}

impl EStepWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Edge-evidence tensor of the last E-step (same layout as `ρ`).
    pub fn d(&self) -> &[f64] {
        &self.d
    }
}

/// Refreshes `ρ` (and its Bernoulli entropies) at `params`, and writes the
/// evidence terms `d_ij^{ql}` into `d`. With `ρ` at its Bayes value,
/// `d = log(π g(x) + (1-π) g0(x))`.
fn refresh_edges(x: &ZScoreMatrix, params: &ModelParams, rho: &mut EdgeTensor, entropy: &mut [f64], d: &mut Vec<f64>) {
    let (n2, k) = (x.n2(), params.b1() * params.b2());
    let terms = BlockTerms::new(params);
    let sigma0_sq = params.null_params.sigma0_sq;
    let xs = x.as_slice();
    d.resize(rho.data.len(), 0.0);
    let stride = n2 * k;
    rho.data
        .par_chunks_mut(stride)
        .zip(entropy.par_chunks_mut(stride))
        .zip(d.par_chunks_mut(stride))
        .enumerate()
        .for_each(|(i, ((rho_row, h_row), d_row))| {
            for j in 0..n2 {
                let xv = xs[i * n2 + j];
                let lg0 = gaussian_log_pdf(xv, 0.0, sigma0_sq);
                for kk in 0..k {
                    let a = terms.log_pi[kk] + terms.log_alt(kk, xv);
                    let b = terms.log_1m_pi[kk] + lg0;
                    let t = a - b;
                    let e = (-t.abs()).exp();
                    let sp = (1.0 + e).ln();
                    let r = if t >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                    let idx = j * k + kk;
                    rho_row[idx] = r;
                    h_row[idx] = sp + r * (-t).max(0.0) + (1.0 - r) * t.max(0.0);
                    d_row[idx] = a.max(b) + sp;
                }
            }
        });
}

/// Softmax of `logits` in place with max-subtraction and a floor.
fn normalise_log(logits: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for v in logits.iter_mut() {
        *v = (*v - m).exp().max(BETA_FLOOR);
    }
    let s: f64 = logits.iter().sum();
    logits.iter_mut().for_each(|v| *v /= s);
}

fn update_beta1(d: &[f64], alpha1: &[f64], beta1: &mut Array2<f64>, beta2: &Array2<f64>, n2: usize) {
    let (b1, b2) = (alpha1.len(), beta2.ncols());
    let k = b1 * b2;
    let log_alpha: Vec<f64> = alpha1.iter().map(|a| a.ln()).collect();
    let beta2 = beta2.as_slice().expect("standard layout");
    beta1
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(b1)
        .enumerate()
        .for_each(|(i, row)| {
            row.copy_from_slice(&log_alpha);
            let base = i * n2 * k;
            for j in 0..n2 {
                let b2row = &beta2[j * b2..(j + 1) * b2];
                let dij = &d[base + j * k..base + (j + 1) * k];
                for q in 0..b1 {
                    let dq = &dij[q * b2..(q + 1) * b2];
                    row[q] += dq.iter().zip(b2row).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            normalise_log(row);
        });
}

fn update_beta2(d: &[f64], alpha2: &[f64], beta1: &Array2<f64>, beta2: &mut Array2<f64>, n1: usize) {
    let (b1, b2, n2) = (beta1.ncols(), alpha2.len(), beta2.nrows());
    let k = b1 * b2;
    let beta1 = beta1.as_slice().expect("standard layout");
    let acc = chunked_sum(
        n1,
        |rows| {
            let mut acc = vec![0.0; n2 * b2];
            for i in rows {
                let b1row = &beta1[i * b1..(i + 1) * b1];
                let base = i * n2 * k;
                for j in 0..n2 {
                    let dij = &d[base + j * k..base + (j + 1) * k];
                    let out = &mut acc[j * b2..(j + 1) * b2];
                    for (q, &w) in b1row.iter().enumerate() {
                        for (o, dv) in out.iter_mut().zip(&dij[q * b2..(q + 1) * b2]) {
                            *o += w * dv;
                        }
                    }
                }
            }
            acc
        },
        add_into,
    );
    let log_alpha: Vec<f64> = alpha2.iter().map(|a| a.ln()).collect();
    for (j, mut row) in beta2.rows_mut().into_iter().enumerate() {
        let mut logits: Vec<f64> = (0..b2).map(|l| log_alpha[l] + acc[j * b2 + l]).collect();
        normalise_log(&mut logits);
        row.iter_mut().zip(logits).for_each(|(r, v)| *r = v);
    }
}

/// Variational E-step: refresh `ρ` at `params`, then `inner_iters` sweeps of
/// the fixed-point updates, rows given columns and columns given rows.
pub fn e_step_with(
    x: &ZScoreMatrix,
    params: &ModelParams,
    state: &mut VariationalState,
    inner_iters: usize,
    ws: &mut EStepWorkspace,
) {
    refresh_edges(x, params, &mut state.rho, &mut state.rho_entropy, &mut ws.d);
    for _ in 0..inner_iters {
        if params.b1() > 1 {
            update_beta1(&ws.d, &params.alpha1, &mut state.beta1, &state.beta2, x.n2());
        }
        if params.b2() > 1 {
            update_beta2(&ws.d, &params.alpha2, &state.beta1, &mut state.beta2, x.n1());
        }
    }
}

/// E-step returning the updated state.
pub fn e_step(x: &ZScoreMatrix, params: &ModelParams, mut state: VariationalState, inner_iters: usize) -> VariationalState {
    let mut ws = EStepWorkspace::new();
    e_step_with(x, params, &mut state, inner_iters, &mut ws);
    state
}

/// Recomputes `ρ` at `params` without touching the memberships.
pub fn refresh_responsibilities(x: &ZScoreMatrix, params: &ModelParams, state: &mut VariationalState) {
    let mut d = Vec::new();
    refresh_edges(x, params, &mut state.rho, &mut state.rho_entropy, &mut d);
}

/// Output of the M-step.
#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub params: ModelParams,
    /// Block pairs whose alternative weight was below [`EMPTY_BLOCK_WEIGHT`]
    /// and kept their previous `(μ, σ²)`.
    pub empty_blocks: Vec<(usize, usize)>,
}

/// Closed-form Gaussian M-step. `previous` supplies the values kept for empty
/// blocks.
pub fn m_step(x: &ZScoreMatrix, state: &VariationalState, previous: &ModelParams) -> MStepOutcome {
    let (n1, n2) = (x.n1(), x.n2());
    let (b1, b2) = (state.beta1.ncols(), state.beta2.ncols());
    let k = b1 * b2;
    let xs = x.as_slice();
    let beta1 = state.beta1.as_slice().expect("standard layout");
    let beta2 = state.beta2.as_slice().expect("standard layout");
    let rho = &state.rho.data;

    // per block: [W, R, RX] then null [N0, N0X2]
    let first = chunked_sum(
        n1,
        |rows| {
            let mut acc = vec![0.0; 3 * k + 2];
            for i in rows {
                let b1row = &beta1[i * b1..(i + 1) * b1];
                for j in 0..n2 {
                    let xv = xs[i * n2 + j];
                    let b2row = &beta2[j * b2..(j + 1) * b2];
                    let r = &rho[(i * n2 + j) * k..(i * n2 + j + 1) * k];
                    let mut null_w = 0.0;
                    for q in 0..b1 {
                        for l in 0..b2 {
                            let kk = q * b2 + l;
                            let w = b1row[q] * b2row[l];
                            let wr = w * r[kk];
                            acc[kk] += w;
                            acc[k + kk] += wr;
                            acc[2 * k + kk] += wr * xv;
                            null_w += w * (1.0 - r[kk]);
                        }
                    }
                    acc[3 * k] += null_w;
                    acc[3 * k + 1] += null_w * xv * xv;
                }
            }
            acc
        },
        add_into,
    );

    let mut empty_blocks = Vec::new();
    let mut mu = previous.alt_params.mu.clone();
    let mut pi = previous.pi.clone();
    for q in 0..b1 {
        for l in 0..b2 {
            let kk = q * b2 + l;
            let (w, r, rx) = (first[kk], first[k + kk], first[2 * k + kk]);
            if w > 0.0 {
                pi[[q, l]] = (r / w).clamp(PI_CLAMP, 1.0 - PI_CLAMP);
            }
            if r >= EMPTY_BLOCK_WEIGHT {
                mu[[q, l]] = rx / r;
            } else {
                empty_blocks.push((q, l));
            }
        }
    }

    let mu_flat: Vec<f64> = mu.iter().cloned().collect();
    let second = chunked_sum(
        n1,
        |rows| {
            let mut acc = vec![0.0; k];
            for i in rows {
                let b1row = &beta1[i * b1..(i + 1) * b1];
                for j in 0..n2 {
                    let xv = xs[i * n2 + j];
                    let b2row = &beta2[j * b2..(j + 1) * b2];
                    let r = &rho[(i * n2 + j) * k..(i * n2 + j + 1) * k];
                    for q in 0..b1 {
                        for l in 0..b2 {
                            let kk = q * b2 + l;
                            let dev = xv - mu_flat[kk];
                            acc[kk] += b1row[q] * b2row[l] * r[kk] * dev * dev;
                        }
                    }
                }
            }
            acc
        },
        add_into,
    );

    let mut sigma_sq = previous.alt_params.sigma_sq.clone();
    for q in 0..b1 {
        for l in 0..b2 {
            let kk = q * b2 + l;
            if first[k + kk] >= EMPTY_BLOCK_WEIGHT {
                sigma_sq[[q, l]] = (second[kk] / first[k + kk]).max(VARIANCE_FLOOR);
            }
        }
    }

    let (n0, n0x2) = (first[3 * k], first[3 * k + 1]);
    let sigma0_sq = if n0 >= EMPTY_BLOCK_WEIGHT {
        (n0x2 / n0).max(VARIANCE_FLOOR)
    } else {
        previous.null_params.sigma0_sq
    };

    let alpha1: Vec<f64> = state.beta1.columns().into_iter().map(|c| c.sum() / n1 as f64).collect();
    let alpha2: Vec<f64> = state.beta2.columns().into_iter().map(|c| c.sum() / n2 as f64).collect();

    MStepOutcome {
        params: ModelParams {
            alpha1,
            alpha2,
            pi,
            null_params: NullParams { sigma0_sq },
            alt_params: AltParams { mu, sigma_sq },
        },
        empty_blocks,
    }
}

fn membership_term(beta: &Array2<f64>, alpha: &[f64]) -> f64 {
    let log_alpha: Vec<f64> = alpha.iter().map(|a| a.ln()).collect();
    beta.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(&log_alpha)
                .filter(|(b, _)| **b > 0.0)
                .map(|(b, la)| b * (la - b.ln()))
                .sum::<f64>()
        })
        .sum()
}

/// Evidence lower bound
/// `Σ β1 log(α1/β1) + Σ β2 log(α2/β2) + Σ β1 β2 d_ij^{ql}`, where `d` is
/// evaluated with the state's `ρ` and the given parameters (`0 log 0 = 0`).
pub fn elbo(x: &ZScoreMatrix, params: &ModelParams, state: &VariationalState) -> f64 {
    let (n1, n2) = (x.n1(), x.n2());
    let (b1, b2) = (params.b1(), params.b2());
    let k = b1 * b2;
    let terms = BlockTerms::new(params);
    let sigma0_sq = params.null_params.sigma0_sq;
    let xs = x.as_slice();
    let beta1 = state.beta1.as_slice().expect("standard layout");
    let beta2 = state.beta2.as_slice().expect("standard layout");
    let rho = &state.rho.data;
    let ent = &state.rho_entropy;
    let edges = chunked_sum(
        n1,
        |rows| {
            let mut acc = 0.0;
            let mut dq = vec![0.0; b2];
            for i in rows {
                let b1row = &beta1[i * b1..(i + 1) * b1];
                for j in 0..n2 {
                    let xv = xs[i * n2 + j];
                    let lg0 = gaussian_log_pdf(xv, 0.0, sigma0_sq);
                    let b2row = &beta2[j * b2..(j + 1) * b2];
                    let base = (i * n2 + j) * k;
                    let mut cell = 0.0;
                    for q in 0..b1 {
                        for (l, slot) in dq.iter_mut().enumerate() {
                            let kk = q * b2 + l;
                            let r = rho[base + kk];
                            let on = terms.log_pi[kk] + terms.log_alt(kk, xv);
                            let off = terms.log_1m_pi[kk] + lg0;
                            // skip zero-weight branches so an infinite log term
                            // never multiplies an exact zero
                            let mut v = ent[base + kk];
                            if r > 0.0 {
                                v += r * on;
                            }
                            if r < 1.0 {
                                v += (1.0 - r) * off;
                            }
                            *slot = v;
                        }
                        cell += b1row[q] * dq.iter().zip(b2row).map(|(a, b)| a * b).sum::<f64>();
                    }
                    acc += cell;
                }
            }
            acc
        },
        |a, b| a + b,
    );
    membership_term(&state.beta1, &params.alpha1) + membership_term(&state.beta2, &params.alpha2) + edges
}

/// Entropy of the variational distribution: membership entropies plus the
/// expected Bernoulli entropy of the edges given memberships.
pub fn variational_entropy(state: &VariationalState) -> f64 {
    let (n2, b1, b2) = (state.beta2.nrows(), state.beta1.ncols(), state.beta2.ncols());
    let k = b1 * b2;
    let h_beta = |beta: &Array2<f64>| -> f64 {
        beta.iter().filter(|&&b| b > 0.0).map(|&b| -b * b.ln()).sum()
    };
    let beta1 = state.beta1.as_slice().expect("standard layout");
    let beta2 = state.beta2.as_slice().expect("standard layout");
    let ent = &state.rho_entropy;
    let edges = chunked_sum(
        state.beta1.nrows(),
        |rows| {
            let mut acc = 0.0;
            for i in rows {
                for j in 0..n2 {
                    let base = (i * n2 + j) * k;
                    for q in 0..b1 {
                        for l in 0..b2 {
                            acc += beta1[i * b1 + q] * beta2[j * b2 + l] * ent[base + q * b2 + l];
                        }
                    }
                }
            }
            acc
        },
        |a, b| a + b,
    );
    h_beta(&state.beta1) + h_beta(&state.beta2) + edges
}

/// Starting point of one VEM run.
#[derive(Debug, Clone)]
pub struct Initialization {
    pub state: VariationalState,
    pub params: ModelParams,
    /// k-means fell back to random balanced labels on the rows / columns.
    pub fallback_rows: bool,
    pub fallback_cols: bool,
}

fn softened(labels: &[usize], b: usize) -> Array2<f64> {
    if b == 1 {
        return Array2::ones((labels.len(), 1));
    }
    let off = (1.0 - INIT_LABEL_WEIGHT) / (b - 1) as f64;
    Array2::from_shape_fn((labels.len(), b), |(i, q)| if labels[i] == q { INIT_LABEL_WEIGHT } else { off })
}

/// Null variance from the median absolute z-score, which is `z_{0.75} σ0`
/// for centred Gaussian data.
fn median_null_variance(xs: &[f64]) -> f64 {
    let mut abs: Vec<f64> = xs.iter().map(|v| v.abs()).collect();
    let mid = abs.len() / 2;
    let (_, med, _) = abs.select_nth_unstable_by(mid, f64::total_cmp);
    (*med / Z_P_HALF).powi(2).max(VARIANCE_FLOOR)
}

/// Rows of `U_r S_r` and `V_r S_r` from a rank-`r` truncated SVD of `x`,
/// flattened row-major. Clustering these instead of the raw rows removes
/// most of the per-entry noise when `n2` is comparable to `n1`.
fn spectral_embedding(x: &ZScoreMatrix, r: usize) -> (Vec<f64>, Vec<f64>) {
    let (n1, n2) = (x.n1(), x.n2());
    let m = nalgebra::DMatrix::from_row_slice(n1, n2, x.as_slice());
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    // nalgebra does not promise sorted singular values
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    order.truncate(r);
    let mut rows = Vec::with_capacity(n1 * r);
    for i in 0..n1 {
        rows.extend(order.iter().map(|&k| u[(i, k)] * svd.singular_values[k]));
    }
    let mut cols = Vec::with_capacity(n2 * r);
    for j in 0..n2 {
        cols.extend(order.iter().map(|&k| vt[(k, j)] * svd.singular_values[k]));
    }
    (rows, cols)
}

/// Builds the starting state: k-means memberships (softened) on a
/// truncated spectral embedding of the rows and columns, thresholded
/// edge indicators at two-sided p = 0.5, block moment estimates for
/// `(Π, ν0, ν)`, then `ρ` recomputed at those parameters. A given
/// `null_variance` replaces the estimated one.
pub fn initialize(x: &ZScoreMatrix, dims: Dimensions, seed: u64, null_variance: Option<f64>) -> Result<Initialization> {
    dims.validate()?;
    super::check_dims(x, dims)?;
    let (n1, n2, b1, b2) = (dims.n1, dims.n2, dims.b1, dims.b2);
    let k = b1 * b2;
    let xs = x.as_slice();
    let r = b1.max(b2).min(n1.min(n2));
    let (row_feats, col_feats) = spectral_embedding(x, r);
    let rows = kmeans(&row_feats, r, b1, rng::derive_seed(seed, 0));
    let cols = kmeans(&col_feats, r, b2, rng::derive_seed(seed, 1));

    let beta1 = softened(&rows.labels, b1);
    let beta2 = softened(&cols.labels, b2);
    let mut rho = EdgeTensor::zeros(n1, n2, b1, b2);
    for (cell, &xv) in rho.data.chunks_exact_mut(k).zip(xs) {
        let v = if xv.abs() > Z_P_HALF { 1.0 } else { 0.0 };
        cell.iter_mut().for_each(|r| *r = v);
    }
    let mut state = VariationalState::new(beta1, beta2, rho)?;

    // moment estimates conditional on the initial memberships
    let placeholder = ModelParams {
        alpha1: vec![1.0 / b1 as f64; b1],
        alpha2: vec![1.0 / b2 as f64; b2],
        pi: Array2::from_elem((b1, b2), 0.5),
        null_params: NullParams::standard(),
        alt_params: AltParams {
            mu: Array2::zeros((b1, b2)),
            sigma_sq: Array2::ones((b1, b2)),
        },
    };
    let moments = m_step(x, &state, &placeholder);
    let mut params = moments.params;
    params.null_params.sigma0_sq = null_variance.unwrap_or_else(|| median_null_variance(xs));
    let candidates: Vec<f64> = xs.iter().cloned().filter(|v| v.abs() > Z_P_HALF).collect();
    let (cand_mean, cand_var) = if candidates.is_empty() {
        (0.0, 1.0)
    } else {
        let m = candidates.iter().sum::<f64>() / candidates.len() as f64;
        let v = candidates.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / candidates.len() as f64;
        (m, v.max(INIT_VARIANCE_FLOOR))
    };
    for &(q, l) in &moments.empty_blocks {
        params.alt_params.mu[[q, l]] = cand_mean;
        params.alt_params.sigma_sq[[q, l]] = cand_var;
    }
    params.alt_params.sigma_sq.mapv_inplace(|v| v.max(INIT_VARIANCE_FLOOR));

    refresh_responsibilities(x, &params, &mut state);
    state.elbo = elbo(x, &params, &state);
    Ok(Initialization {
        state,
        params,
        fallback_rows: rows.fallback,
        fallback_cols: cols.fallback,
    })
}
