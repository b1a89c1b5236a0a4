//! Domain types for the bipartite noisy block model and its Gaussian
//! observation layer.
//!
//! Block and node indices are 0-based in memory. Files written by the CLI use
//! 1-based block labels.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Connection probabilities are clamped to `[PI_CLAMP, 1 - PI_CLAMP]` before
/// they enter a log.
pub const PI_CLAMP: f64 = 1e-10;

/// Tolerance on the simplex constraint of the mixing proportions.
const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub n1: usize,
    pub n2: usize,
    pub b1: usize,
    pub b2: usize,
}

impl Dimensions {
    pub fn new(n1: usize, n2: usize, b1: usize, b2: usize) -> Result<Self> {
        let d = Dimensions { n1, n2, b1, b2 };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 || self.b1 == 0 || self.b2 == 0 {
            return Err(Error::Dimension(format!(
                "all of n1, n2, b1, b2 must be >= 1 (got {self:?})"
            )));
        }
        if self.b1 > self.n1 || self.b2 > self.n2 {
            return Err(Error::Dimension(format!(
                "block counts must not exceed node counts (got {self:?})"
            )));
        }
        Ok(())
    }

    pub fn n_pairs(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn n_block_pairs(&self) -> usize {
        self.b1 * self.b2
    }
}

/// Dense `n1 x n2` matrix of observed test statistics. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScoreMatrix {
    values: Array2<f64>,
}

impl ZScoreMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Dimension("z-score matrix must be non-empty".into()));
        }
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation {
                row: i,
                col: j,
                message: format!("non-finite z-score {v}"),
            });
        }
        Ok(ZScoreMatrix {
            values: values.as_standard_layout().into_owned(),
        })
    }

    pub fn from_rows(n1: usize, n2: usize, data: Vec<f64>) -> Result<Self> {
        let values = Array2::from_shape_vec((n1, n2), data)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(values)
    }

    pub fn n1(&self) -> usize {
        self.values.nrows()
    }

    pub fn n2(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Row-major view of the entries.
    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("standard layout")
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// Null density parameters: a centred Gaussian with free variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullParams {
    pub sigma0_sq: f64,
}

impl NullParams {
    pub const N_PARAMS: usize = 1;

    pub fn new(sigma0_sq: f64) -> Result<Self> {
        if !(sigma0_sq > 0.0 && sigma0_sq.is_finite()) {
            return Err(Error::Input(format!("null variance must be > 0, got {sigma0_sq}")));
        }
        Ok(NullParams { sigma0_sq })
    }

    pub fn standard() -> Self {
        NullParams { sigma0_sq: 1.0 }
    }
}

/// Per-block alternative Gaussian parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AltParams {
    pub mu: Array2<f64>,
    pub sigma_sq: Array2<f64>,
}

impl AltParams {
    pub const N_PARAMS: usize = 2;

    pub fn new(mu: Array2<f64>, sigma_sq: Array2<f64>) -> Result<Self> {
        if mu.dim() != sigma_sq.dim() {
            return Err(Error::Dimension("mu and sigma_sq shapes differ".into()));
        }
        if let Some(v) = sigma_sq.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Input(format!("alternative variance must be > 0, got {v}")));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("alternative means must be finite".into()));
        }
        Ok(AltParams { mu, sigma_sq })
    }

    pub fn n_blocks(&self) -> (usize, usize) {
        self.mu.dim()
    }
}

/// Closed family of null/alternative density pairs. The parameter counts
/// feed the ICL penalty.
pub trait DensityFamily: sealed::Sealed {
    /// Number of free null parameters.
    const D0: usize;
    /// Number of free parameters per alternative block.
    const D1: usize;
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for super::Gaussian {}
}

/// Centred Gaussian null with Gaussian alternatives.
#[derive(Debug, Clone, Copy, Default)]
pub struct Gaussian;

impl DensityFamily for Gaussian {
    const D0: usize = NullParams::N_PARAMS;
    const D1: usize = AltParams::N_PARAMS;
}

/// `θ = (α1, α2, Π, ν0, ν)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct ModelParams {
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub pi: Array2<f64>,
    pub null_params: NullParams,
    pub alt_params: AltParams,
}

impl ModelParams {
    pub fn new(
        alpha1: Vec<f64>,
        alpha2: Vec<f64>,
        pi: Array2<f64>,
        null_params: NullParams,
        alt_params: AltParams,
    ) -> Result<Self> {
        let p = ModelParams {
            alpha1,
            alpha2,
            pi,
            null_params,
            alt_params,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn b1(&self) -> usize {
        self.alpha1.len()
    }

    pub fn b2(&self) -> usize {
        self.alpha2.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha1", &self.alpha1), ("alpha2", &self.alpha2)] {
            if a.is_empty() {
                return Err(Error::Input(format!("{name} must be non-empty")));
            }
            if a.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::Input(format!("{name} entries must be >= 0")));
            }
            let s: f64 = a.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Input(format!("{name} sums to {s}, expected 1")));
            }
        }
        let shape = (self.b1(), self.b2());
        if self.pi.dim() != shape || self.alt_params.n_blocks() != shape {
            return Err(Error::Dimension(format!(
                "pi {:?} and alternative parameters {:?} must be {:?}",
                self.pi.dim(),
                self.alt_params.n_blocks(),
                shape
            )));
        }
        if self.pi.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pi entries must lie in [0, 1]".into()));
        }
        NullParams::new(self.null_params.sigma0_sq)?;
        AltParams::new(self.alt_params.mu.clone(), self.alt_params.sigma_sq.clone())?;
        Ok(())
    }

    /// Clamped connection probability of block pair `(q, l)`.
    pub fn pi_clamped(&self, q: usize, l: usize) -> f64 {
        self.pi[[q, l]].clamp(PI_CLAMP, 1.0 - PI_CLAMP)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRepr {
    alpha1: Vec<f64>,
    alpha2: Vec<f64>,
    pi: Vec<Vec<f64>>,
    sigma0_sq: f64,
    mu: Vec<Vec<f64>>,
    sigma_sq: Vec<Vec<f64>>,
}

fn nested_to_array(rows: &[Vec<f64>], name: &str) -> Result<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{name} rows have unequal lengths")));
    }
    Array2::from_shape_vec((nrows, ncols), rows.concat())
        .map_err(|e| Error::Config(format!("{name}: {e}")))
}

fn array_to_nested(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl TryFrom<ParamsRepr> for ModelParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        ModelParams::new(
            r.alpha1,
            r.alpha2,
            nested_to_array(&r.pi, "pi")?,
            NullParams::new(r.sigma0_sq)?,
            AltParams::new(
                nested_to_array(&r.mu, "mu")?,
                nested_to_array(&r.sigma_sq, "sigma_sq")?,
            )?,
        )
    }
}

impl From<ModelParams> for ParamsRepr {
    fn from(p: ModelParams) -> Self {
        ParamsRepr {
            pi: array_to_nested(&p.pi),
            mu: array_to_nested(&p.alt_params.mu),
            sigma_sq: array_to_nested(&p.alt_params.sigma_sq),
            sigma0_sq: p.null_params.sigma0_sq,
            alpha1: p.alpha1,
            alpha2: p.alpha2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Row,
    Column,
}

/// Block assignment of every row (or column) node. Labels are 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipVector {
    side: Side,
    n_blocks: usize,
    labels: Vec<usize>,
}

impl MembershipVector {
    pub fn new(side: Side, n_blocks: usize, labels: Vec<usize>) -> Result<Self> {
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_blocks) {
            return Err(Error::Input(format!(
                "{side:?} node {i} has label {l} outside 0..{n_blocks}"
            )));
        }
        Ok(MembershipVector {
            side,
            n_blocks,
            labels,
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Binary bipartite adjacency matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    entries: Array2<u8>,
}

impl AdjacencyMatrix {
    pub fn new(entries: Array2<u8>) -> Result<Self> {
        if let Some(((i, j), v)) = entries.indexed_iter().find(|(_, v)| **v > 1) {
            return Err(Error::Validation {
                row: i,
                col: j,
                message: format!("adjacency entry {v} is not 0/1"),
            });
        }
        Ok(AdjacencyMatrix {
            entries: entries.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(n1: usize, n2: usize) -> Self {
        AdjacencyMatrix {
            entries: Array2::zeros((n1, n2)),
        }
    }

    pub fn n1(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n2(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<u8> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[[i, j]] == 1
    }

    pub fn set(&mut self, i: usize, j: usize, edge: bool) {
        self.entries[[i, j]] = u8::from(edge);
    }

    pub fn n_edges(&self) -> usize {
        self.entries.iter().filter(|&&v| v == 1).count()
    }

    pub fn row_degrees(&self) -> Vec<usize> {
        self.entries
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|&&v| v == 1).count())
            .collect()
    }

    pub fn col_degrees(&self) -> Vec<usize> {
        self.entries
            .columns()
            .into_iter()
            .map(|c| c.iter().filter(|&&v| v == 1).count())
            .collect()
    }
}

/// Gaussian log-density `log N(x; mean, var)`.
#[inline]
pub fn gaussian_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
}

/// `log g0(x) = log N(x; 0, σ0²)`.
pub fn log_null_density(x: f64, params: &NullParams) -> f64 {
    gaussian_log_pdf(x, 0.0, params.sigma0_sq)
}

/// `log g(x; ν_ql) = log N(x; μ_ql, σ²_ql)`.
pub fn log_alt_density(x: f64, q: usize, l: usize, params: &AltParams) -> Result<f64> {
    let (b1, b2) = params.n_blocks();
    if q >= b1 || l >= b2 {
        return Err(Error::Index { q, l, b1, b2 });
    }
    Ok(gaussian_log_pdf(x, params.mu[[q, l]], params.sigma_sq[[q, l]]))
}

/// Log-odds of an edge, `log(π g(x)) - log((1-π) g0(x))`, from the
/// log-densities and a clamped `π`.
#[inline]
pub fn edge_log_odds(log_alt: f64, log_null: f64, pi: f64) -> f64 {
    (pi.ln() + log_alt) - ((-pi).ln_1p() + log_null)
}

/// Logistic function evaluated without overflow.
#[inline]
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Posterior edge probability `ρ = πg / (πg + (1-π)g0)` for block pair
/// `(q, l)`, evaluated in log space.
///
/// A raw `π` of exactly 0 or 1 gives 0 or 1; otherwise `π` is clamped to
/// `[PI_CLAMP, 1 - PI_CLAMP]`.
///
/// Panics if `(q, l)` is outside the block grid.
pub fn edge_responsibility(x: f64, q: usize, l: usize, params: &ModelParams) -> f64 {
    let raw = params.pi[[q, l]];
    if raw <= 0.0 {
        return 0.0;
    }
    if raw >= 1.0 {
        return 1.0;
    }
    let log_alt = gaussian_log_pdf(x, params.alt_params.mu[[q, l]], params.alt_params.sigma_sq[[q, l]]);
    let log_null = log_null_density(x, &params.null_params);
    logistic(edge_log_odds(log_alt, log_null, params.pi_clamped(q, l)))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use ndarray::array;

    /// Single block, `g0 = N(0,1)`, `g = N(mu, var)`.
    pub fn one_block(pi: f64, mu: f64, var: f64) -> ModelParams {
        ModelParams::new(
            vec![1.0],
            vec![1.0],
            array![[pi]],
            NullParams::standard(),
            AltParams::new(array![[mu]], array![[var]]).unwrap(),
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::one_block;
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

    #[test]
    fn null_density_values() {
        let unit = NullParams::standard();
        assert_abs_diff_eq!(log_null_density(0.0, &unit), -LOG_SQRT_2PI, epsilon = 1e-15);
        assert_abs_diff_eq!(log_null_density(1.0, &unit), -LOG_SQRT_2PI - 0.5, epsilon = 1e-15);
        // mpmath, 40 digits
        let wide = NullParams::new(4.0).unwrap();
        assert_abs_diff_eq!(log_null_density(2.0, &wide), -2.112_085_713_764_618, epsilon = 1e-14);
    }

    #[test]
    fn alt_density_values() {
        let alt = AltParams::new(array![[1.0, 0.0]], array![[0.25, 1.0]]).unwrap();
        // at the mean with unit variance
        let unit = AltParams::new(array![[0.3]], array![[1.0]]).unwrap();
        assert_abs_diff_eq!(log_alt_density(0.3, 0, 0, &unit).unwrap(), -LOG_SQRT_2PI, epsilon = 1e-15);
        // mpmath: log N(0; 1, 0.25)
        assert_abs_diff_eq!(
            log_alt_density(0.0, 0, 0, &alt).unwrap(),
            -2.225_791_352_644_727,
            epsilon = 1e-14
        );
        // coincides with the null when the parameters coincide
        for x in [-3.0, -0.2, 0.0, 1.7] {
            assert_eq!(
                log_alt_density(x, 0, 1, &alt).unwrap(),
                log_null_density(x, &NullParams::standard())
            );
        }
        assert!(matches!(log_alt_density(0.0, 1, 0, &alt), Err(Error::Index { .. })));
        assert!(matches!(log_alt_density(0.0, 0, 2, &alt), Err(Error::Index { .. })));
    }

    #[test]
    fn responsibility_values() {
        assert_eq!(edge_responsibility(3.0, 0, 0, &one_block(0.0, 1.0, 0.25)), 0.0);
        let same = one_block(0.3, 0.0, 1.0);
        for x in [-2.0, 0.0, 0.5, 4.0] {
            assert_abs_diff_eq!(edge_responsibility(x, 0, 0, &same), 0.3, epsilon = 1e-15);
        }
        // mpmath: 0.8 N(0;1,.25) / (0.8 N(0;1,.25) + 0.2 N(0;0,1))
        assert_abs_diff_eq!(
            edge_responsibility(0.0, 0, 0, &one_block(0.8, 1.0, 0.25)),
            0.519_849_947_168_358_3,
            epsilon = 1e-14
        );
    }

    #[test]
    fn responsibility_far_tails_stay_finite() {
        let p = one_block(0.5, 3.0, 1.0);
        assert_eq!(edge_responsibility(60.0, 0, 0, &p), 1.0);
        let low = edge_responsibility(-60.0, 0, 0, &p);
        assert!(low > 0.0 && low < 1e-79);
        let narrow = one_block(0.5, 0.0, 1e-4);
        let r = edge_responsibility(45.0, 0, 0, &narrow);
        assert!(r.is_finite() && (0.0..=1.0).contains(&r));
    }

    #[test]
    fn null_density_integrates_to_one() {
        for var in [0.25, 1.0, 9.0] {
            let p = NullParams::new(var).unwrap();
            let s = var.sqrt();
            let (a, b) = (-10.0 * s, 10.0 * s);
            // composite Simpson
            let n = 20_000;
            let h = (b - a) / n as f64;
            let mut acc = 0.0;
            for k in 0..=n {
                let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * log_null_density(a + k as f64 * h, &p).exp();
            }
            assert_abs_diff_eq!(acc * h / 3.0, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn params_validation() {
        let ok = one_block(0.5, 1.0, 1.0);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.alpha1 = vec![0.6, 0.5];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.pi[[0, 0]] = 1.5;
        assert!(bad.validate().is_err());
        assert!(NullParams::new(0.0).is_err());
        assert!(AltParams::new(array![[0.0]], array![[-1.0]]).is_err());
        assert!(Dimensions::new(3, 3, 4, 1).is_err());
        assert!(Dimensions::new(0, 3, 1, 1).is_err());
    }

    #[test]
    fn params_json_roundtrip() {
        let p = one_block(0.25, -1.5, 0.3);
        let s = serde_json::to_string(&p).unwrap();
        let back: ModelParams = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
        assert!(serde_json::from_str::<ModelParams>(&s.replace("\"mu\"", "\"mean\"")).is_err());
    }

    #[test]
    fn zscore_rejects_non_finite() {
        let err = ZScoreMatrix::new(array![[0.0, 1.0], [f64::NAN, 2.0]]).unwrap_err();
        assert_eq!(
            err,
            Error::Validation { row: 1, col: 0, message: "non-finite z-score NaN".into() }
        );
    }

    proptest! {
        #[test]
        fn responsibility_monotone_in_pi(x in -8.0f64..8.0, p1 in 0.0f64..1.0, p2 in 0.0f64..1.0) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let r_lo = edge_responsibility(x, 0, 0, &one_block(lo, 1.3, 0.7));
            let r_hi = edge_responsibility(x, 0, 0, &one_block(hi, 1.3, 0.7));
            prop_assert!(r_lo <= r_hi + 1e-15);
            prop_assert!((0.0..=1.0).contains(&r_lo));
            prop_assert_eq!(r_lo + (1.0 - r_lo), 1.0);
        }

        #[test]
        fn responsibility_monotone_in_x(x1 in -10.0f64..10.0, x2 in -10.0f64..10.0, mu in 0.01f64..5.0, pi in 0.01f64..0.99) {
            let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
            let p = one_block(pi, mu, 1.0);
            prop_assert!(edge_responsibility(lo, 0, 0, &p) <= edge_responsibility(hi, 0, 0, &p));
        }
    }
}
