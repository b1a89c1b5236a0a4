//! Variational EM for the bipartite noisy block model.
//!
//! The variational family keeps the exact conditional law of the edges given
//! the memberships (`ρ`) and factorises the memberships into independent
//! categorical rows `β1` and columns `β2`. One outer iteration is an E-step
//! (refresh `ρ`, then a few fixed-point sweeps over `β1`, `β2`) followed by
//! the closed-form Gaussian M-step. The ELBO recorded after each iteration is
//! nondecreasing.

mod kmeans;
mod vem;

pub use kmeans::{kmeans, KMeansLabels};
pub use vem::{
    e_step, e_step_with, elbo, initialize, m_step, refresh_responsibilities, variational_entropy, EStepWorkspace,
    Initialization, MStepOutcome, BETA_FLOOR, EMPTY_BLOCK_WEIGHT, VARIANCE_FLOOR, Z_P_HALF,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dimensions, MembershipVector, ModelParams, NullParams, Side, ZScoreMatrix};
use crate::rng;

/// Dense `n1 x n2 x b1 x b2` tensor indexed `(i, j, q, l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTensor {
    n1: usize,
    n2: usize,
    b1: usize,
    b2: usize,
    data: Vec<f64>,
}

impl EdgeTensor {
    pub fn zeros(n1: usize, n2: usize, b1: usize, b2: usize) -> Self {
        EdgeTensor {
            n1,
            n2,
            b1,
            b2,
            data: vec![0.0; n1 * n2 * b1 * b2],
        }
    }

    pub fn from_fn(n1: usize, n2: usize, b1: usize, b2: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(n1, n2, b1, b2);
        for i in 0..n1 {
            for j in 0..n2 {
                for q in 0..b1 {
                    for l in 0..b2 {
                        let k = t.offset(i, j, q, l);
                        t.data[k] = f(i, j, q, l);
                    }
                }
            }
        }
        t
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n1, self.n2, self.b1, self.b2)
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, q: usize, l: usize) -> usize {
        ((i * self.n2 + j) * self.b1 + q) * self.b2 + l
    }

    pub fn get(&self, i: usize, j: usize, q: usize, l: usize) -> f64 {
        self.data[self.offset(i, j, q, l)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Variational parameters: membership probabilities and edge
/// responsibilities, with the ELBO last evaluated on them.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub beta1: Array2<f64>,
    pub beta2: Array2<f64>,
    rho: EdgeTensor,
    /// Bernoulli entropy of every `ρ` entry, kept in step with `rho`.
    rho_entropy: Vec<f64>,
    pub elbo: f64,
}

fn bernoulli_entropy(r: f64) -> f64 {
    let mut h = 0.0;
    if r > 0.0 {
        h -= r * r.ln();
    }
    if r < 1.0 {
        h -= (1.0 - r) * (-r).ln_1p();
    }
    h
}

impl VariationalState {
    pub fn new(beta1: Array2<f64>, beta2: Array2<f64>, rho: EdgeTensor) -> Result<Self> {
        let (n1, n2, b1, b2) = rho.dims();
        if beta1.dim() != (n1, b1) || beta2.dim() != (n2, b2) {
            return Err(Error::Dimension(format!(
                "beta shapes {:?}, {:?} do not match rho {:?}",
                beta1.dim(),
                beta2.dim(),
                rho.dims()
            )));
        }
        for (name, beta) in [("beta1", &beta1), ("beta2", &beta2)] {
            for (i, r) in beta.rows().into_iter().enumerate() {
                if r.iter().any(|v| !(*v >= 0.0)) || (r.sum() - 1.0).abs() > 1e-10 {
                    return Err(Error::Input(format!("{name} row {i} is not a probability vector")));
                }
            }
        }
        if rho.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("rho entries must lie in [0, 1]".into()));
        }
        let rho_entropy = rho.data.iter().map(|&r| bernoulli_entropy(r)).collect();
        Ok(VariationalState {
            beta1: beta1.as_standard_layout().into_owned(),
            beta2: beta2.as_standard_layout().into_owned(),
            rho,
            rho_entropy,
            elbo: f64::NEG_INFINITY,
        })
    }

    pub fn rho(&self) -> &EdgeTensor {
        &self.rho
    }

    pub fn n_blocks(&self) -> (usize, usize) {
        (self.beta1.ncols(), self.beta2.ncols())
    }

    /// Reorders blocks: new row block `q` is old block `row_perm[q]`.
    fn permute(&mut self, row_perm: &[usize], col_perm: &[usize]) {
        let (n1, n2, b1, b2) = self.rho.dims();
        self.beta1 = Array2::from_shape_fn((n1, b1), |(i, q)| self.beta1[[i, row_perm[q]]]);
        self.beta2 = Array2::from_shape_fn((n2, b2), |(j, l)| self.beta2[[j, col_perm[l]]]);
        let old_rho = self.rho.clone();
        let old_h = self.rho_entropy.clone();
        for i in 0..n1 {
            for j in 0..n2 {
                for q in 0..b1 {
                    for l in 0..b2 {
                        let dst = old_rho.offset(i, j, q, l);
                        let src = old_rho.offset(i, j, row_perm[q], col_perm[l]);
                        self.rho.data[dst] = old_rho.data[src];
                        self.rho_entropy[dst] = old_h[src];
                    }
                }
            }
        }
    }
}

/// Controls for [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub max_outer_iters: usize,
    /// Fixed-point sweeps per E-step.
    pub inner_iters: usize,
    /// Stop when the relative ELBO change falls below this.
    pub elbo_rel_tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
    /// Known null variance. When set, `σ0²` is held at this value instead of
    /// being estimated.
    pub null_variance: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_outer_iters: 200,
            inner_iters: 5,
            elbo_rel_tol: 1e-6,
            n_restarts: 5,
            seed: 0,
            null_variance: None,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 || self.inner_iters == 0 || self.n_restarts == 0 {
            return Err(Error::Config("iteration and restart counts must be >= 1".into()));
        }
        if !(self.elbo_rel_tol > 0.0) {
            return Err(Error::Config("elbo_rel_tol must be > 0".into()));
        }
        if let Some(v) = self.null_variance {
            NullParams::new(v).map_err(|_| Error::Config(format!("null_variance must be finite and > 0, got {v}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub state: VariationalState,
    pub z1_hat: MembershipVector,
    pub z2_hat: MembershipVector,
    /// ELBO at initialisation followed by one value per outer iteration.
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub restart_index: usize,
    pub init_fallback: bool,
    /// Number of (iteration, block) events where an empty block kept its
    /// previous alternative parameters.
    pub empty_block_events: usize,
}

impl FitResult {
    pub fn elbo(&self) -> f64 {
        *self.elbo_trace.last().expect("trace is never empty")
    }
}

pub(crate) fn check_dims(x: &ZScoreMatrix, dims: Dimensions) -> Result<()> {
    if x.n1() != dims.n1 || x.n2() != dims.n2 {
        return Err(Error::Dimension(format!(
            "data is {}x{} but dimensions say {}x{}",
            x.n1(),
            x.n2(),
            dims.n1,
            dims.n2
        )));
    }
    Ok(())
}

fn argmax_lowest(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (q, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = q;
        }
    }
    best
}

/// MAP memberships from `β`; ties go to the lowest block index.
pub fn posterior_memberships(state: &VariationalState) -> (MembershipVector, MembershipVector) {
    let (b1, b2) = state.n_blocks();
    let z1 = state.beta1.rows().into_iter().map(argmax_lowest).collect();
    let z2 = state.beta2.rows().into_iter().map(argmax_lowest).collect();
    (
        MembershipVector::new(Side::Row, b1, z1).expect("argmax in range"),
        MembershipVector::new(Side::Column, b2, z2).expect("argmax in range"),
    )
}

/// Step-by-step VEM driver over one starting point.
pub struct VemRun<'a> {
    x: &'a ZScoreMatrix,
    params: ModelParams,
    state: VariationalState,
    workspace: EStepWorkspace,
    inner_iters: usize,
    fixed_null: Option<f64>,
    empty_block_events: usize,
}

impl<'a> VemRun<'a> {
    pub fn new(x: &'a ZScoreMatrix, init: Initialization, inner_iters: usize) -> Self {
        VemRun {
            x,
            params: init.params,
            state: init.state,
            workspace: EStepWorkspace::new(),
            inner_iters,
            fixed_null: None,
            empty_block_events: 0,
        }
    }

    /// Holds `σ0²` at `sigma0_sq` in every M-step.
    pub fn with_fixed_null(mut self, sigma0_sq: f64) -> Self {
        self.fixed_null = Some(sigma0_sq);
        self
    }

    /// One outer iteration; returns the ELBO after the M-step.
    pub fn step(&mut self) -> f64 {
        e_step_with(self.x, &self.params, &mut self.state, self.inner_iters, &mut self.workspace);
        let out = m_step(self.x, &self.state, &self.params);
        self.empty_block_events += out.empty_blocks.len();
        self.params = out.params;
        if let Some(v) = self.fixed_null {
            self.params.null_params.sigma0_sq = v;
        }
        self.state.elbo = elbo(self.x, &self.params, &self.state);
        self.state.elbo
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }
}

struct RestartOutcome {
    params: ModelParams,
    state: VariationalState,
    trace: Vec<f64>,
    converged: bool,
    fallback: bool,
    empty_block_events: usize,
}

fn run_restart(x: &ZScoreMatrix, dims: Dimensions, opts: &FitOptions, seed: u64) -> Result<RestartOutcome> {
    let init = initialize(x, dims, seed, opts.null_variance)?;
    let fallback = init.fallback_rows || init.fallback_cols;
    let mut trace = vec![init.state.elbo];
    let mut run = VemRun::new(x, init, opts.inner_iters);
    if let Some(v) = opts.null_variance {
        run = run.with_fixed_null(v);
    }
    let mut converged = false;
    for _ in 0..opts.max_outer_iters {
        let prev = *trace.last().expect("non-empty");
        let cur = run.step();
        trace.push(cur);
        if !cur.is_finite() {
            break;
        }
        if prev.is_finite() && (cur - prev).abs() <= opts.elbo_rel_tol * prev.abs() {
            converged = true;
            break;
        }
    }
    Ok(RestartOutcome {
        params: run.params,
        state: run.state,
        trace,
        converged,
        fallback,
        empty_block_events: run.empty_block_events,
    })
}

/// Sort key for canonical block order: descending proportion, then
/// ascending mean of the block's alternative means.
fn canonical_order(alpha: &[f64], mean_mu: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(mean_mu[a].total_cmp(&mean_mu[b])));
    order
}

fn canonicalize(params: &mut ModelParams, state: &mut VariationalState) {
    let (b1, b2) = (params.b1(), params.b2());
    let mu = &params.alt_params.mu;
    let row_means: Vec<f64> = mu.rows().into_iter().map(|r| r.sum() / b2 as f64).collect();
    let col_means: Vec<f64> = mu.columns().into_iter().map(|c| c.sum() / b1 as f64).collect();
    let rp = canonical_order(&params.alpha1, &row_means);
    let cp = canonical_order(&params.alpha2, &col_means);
    let remap = |m: &Array2<f64>| Array2::from_shape_fn((b1, b2), |(q, l)| m[[rp[q], cp[l]]]);
    params.pi = remap(&params.pi);
    params.alt_params.mu = remap(&params.alt_params.mu);
    params.alt_params.sigma_sq = remap(&params.alt_params.sigma_sq);
    params.alpha1 = rp.iter().map(|&q| params.alpha1[q]).collect();
    params.alpha2 = cp.iter().map(|&l| params.alpha2[l]).collect();
    state.permute(&rp, &cp);
}

/// Fits the model with `opts.n_restarts` independently seeded starts and
/// keeps the one with the highest final ELBO. Blocks of the result are in
/// canonical order.
pub fn fit(x: &ZScoreMatrix, dims: Dimensions, opts: &FitOptions) -> Result<FitResult> {
    dims.validate()?;
    opts.validate()?;
    check_dims(x, dims)?;
    let mut best: Option<(usize, RestartOutcome)> = None;
    for r in 0..opts.n_restarts {
        let out = run_restart(x, dims, opts, rng::derive_seed(opts.seed, r as u64))?;
        let last = *out.trace.last().expect("non-empty");
        if !last.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(_, b)| last > *b.trace.last().expect("non-empty")) {
            best = Some((r, out));
        }
    }
    let (restart_index, mut out) =
        best.ok_or_else(|| Error::Fit(format!("all {} restarts produced a non-finite ELBO", opts.n_restarts)))?;
    canonicalize(&mut out.params, &mut out.state);
    let (z1_hat, z2_hat) = posterior_memberships(&out.state);
    Ok(FitResult {
        params: out.params,
        state: out.state,
        z1_hat,
        z2_hat,
        elbo_trace: out.trace,
        converged: out.converged,
        restart_index,
        init_fallback: out.fallback,
        empty_block_events: out.empty_block_events,
    })
}
