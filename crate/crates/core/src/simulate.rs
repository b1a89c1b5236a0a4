//! Seeded generators for latent bipartite graphs and the noisy observation
//! layer.
//!
//! Every generator is a pure function of its configuration and seed; the same
//! seed always reproduces bit-identical output (see [`crate::rng`]).

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AdjacencyMatrix, AltParams, Dimensions, MembershipVector, ModelParams, NullParams, Side,
    ZScoreMatrix,
};
use crate::rng;

/// Latent memberships and adjacency of a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTruth {
    pub z1: MembershipVector,
    pub z2: MembershipVector,
    pub a: AdjacencyMatrix,
}

impl LatentTruth {
    pub fn new(z1: MembershipVector, z2: MembershipVector, a: AdjacencyMatrix) -> Result<Self> {
        if z1.len() != a.n1() || z2.len() != a.n2() {
            return Err(Error::Dimension(format!(
                "memberships ({}, {}) do not match adjacency {}x{}",
                z1.len(),
                z2.len(),
                a.n1(),
                a.n2()
            )));
        }
        Ok(LatentTruth { z1, z2, a })
    }

    /// Wraps a fixed graph with every node in a single block.
    pub fn from_graph(a: AdjacencyMatrix) -> Self {
        let z1 = MembershipVector::new(Side::Row, 1, vec![0; a.n1()]).expect("valid");
        let z2 = MembershipVector::new(Side::Column, 1, vec![0; a.n2()]).expect("valid");
        LatentTruth { z1, z2, a }
    }
}

/// Bipartite preferential-attachment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PAConfig {
    pub n1: usize,
    /// Per-edge probability of reusing an existing type-II vertex.
    pub lambda: f64,
    #[serde(default = "PAConfig::default_degrees")]
    pub degree_choices: Vec<usize>,
}

impl PAConfig {
    pub fn new(n1: usize, lambda: f64) -> Self {
        PAConfig {
            n1,
            lambda,
            degree_choices: Self::default_degrees(),
        }
    }

    fn default_degrees() -> Vec<usize> {
        vec![2, 3, 4, 5, 6]
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Input(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.degree_choices.is_empty() || self.degree_choices.contains(&0) {
            return Err(Error::Input("degree choices must be non-empty and >= 1".into()));
        }
        if self.n1 == 0 {
            return Err(Error::Input("n1 must be >= 1".into()));
        }
        Ok(())
    }
}

fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding slack: fall back to the last block with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draws memberships from `α1`, `α2` and edges `A_ij ~ Bernoulli(π_{z_i, z_j})`.
pub fn sample_bisbm(dims: Dimensions, params: &ModelParams, seed: u64) -> Result<LatentTruth> {
    dims.validate()?;
    params.validate()?;
    if params.b1() != dims.b1 || params.b2() != dims.b2 {
        return Err(Error::Dimension("parameters do not match block counts".into()));
    }
    let mut rng = rng::from_seed(seed);
    let z1: Vec<usize> = (0..dims.n1).map(|_| sample_categorical(&mut rng, &params.alpha1)).collect();
    let z2: Vec<usize> = (0..dims.n2).map(|_| sample_categorical(&mut rng, &params.alpha2)).collect();
    let mut a = AdjacencyMatrix::zeros(dims.n1, dims.n2);
    for (i, &q) in z1.iter().enumerate() {
        for (j, &l) in z2.iter().enumerate() {
            let u: f64 = rng.random();
            a.set(i, j, u < params.pi[[q, l]]);
        }
    }
    LatentTruth::new(
        MembershipVector::new(Side::Row, dims.b1, z1)?,
        MembershipVector::new(Side::Column, dims.b2, z2)?,
        a,
    )
}

/// Draws `x_ij` from the null where `A_ij = 0` and from the block alternative
/// where `A_ij = 1`.
pub fn sample_observations(truth: &LatentTruth, params: &ModelParams, seed: u64) -> Result<ZScoreMatrix> {
    let (n1, n2) = (truth.a.n1(), truth.a.n2());
    if truth.z1.n_blocks() != params.b1() || truth.z2.n_blocks() != params.b2() {
        return Err(Error::Dimension("memberships do not match parameter block counts".into()));
    }
    let mut rng = rng::from_seed(seed);
    let null_sd = params.null_params.sigma0_sq.sqrt();
    let alt_sd = params.alt_params.sigma_sq.mapv(f64::sqrt);
    let mut data = Vec::with_capacity(n1 * n2);
    for i in 0..n1 {
        let q = truth.z1.labels()[i];
        for j in 0..n2 {
            let e: f64 = StandardNormal.sample(&mut rng);
            let x = if truth.a.get(i, j) {
                let l = truth.z2.labels()[j];
                params.alt_params.mu[[q, l]] + alt_sd[[q, l]] * e
            } else {
                null_sd * e
            };
            data.push(x);
        }
    }
    ZScoreMatrix::from_rows(n1, n2, data)
}

/// Fully nested graph: with 0-based indices, `A_ij = 1` iff
/// `i/(n1-1) + j/(n2-1) <= 1`. Row 0 and column 0 are connected to everything.
pub fn nested_graph(n1: usize, n2: usize) -> Result<AdjacencyMatrix> {
    if n1 < 2 || n2 < 2 {
        return Err(Error::Dimension(format!("nested graph needs n1, n2 >= 2 (got {n1}x{n2})")));
    }
    let (r, c) = (n1 - 1, n2 - 1);
    let mut a = AdjacencyMatrix::zeros(n1, n2);
    for i in 0..n1 {
        for j in 0..n2 {
            a.set(i, j, i * c + j * r <= r * c);
        }
    }
    Ok(a)
}

/// Fully nested graph with one generalist per side: row 0 and column 0 are
/// connected to everything and no other pair is connected.
pub fn generalist_graph(n1: usize, n2: usize) -> Result<AdjacencyMatrix> {
    if n1 < 2 || n2 < 2 {
        return Err(Error::Dimension(format!("nested graph needs n1, n2 >= 2 (got {n1}x{n2})")));
    }
    let mut a = AdjacencyMatrix::zeros(n1, n2);
    for j in 0..n2 {
        a.set(0, j, true);
    }
    for i in 0..n1 {
        a.set(i, 0, true);
    }
    Ok(a)
}

/// Bipartite preferential attachment. Type-I vertices arrive one at a time
/// with a degree drawn uniformly from `degree_choices`; each edge reuses an
/// existing type-II vertex (chosen proportionally to degree, excluding
/// vertices already adjacent) with probability `lambda`, and otherwise
/// creates a new one. Multi-edges are never created.
pub fn preferential_attachment(config: &PAConfig, seed: u64) -> Result<AdjacencyMatrix> {
    config.validate()?;
    let mut rng = rng::from_seed(seed);
    let mut degrees: Vec<usize> = Vec::new();
    let mut edges: Vec<Vec<usize>> = Vec::with_capacity(config.n1);
    for _ in 0..config.n1 {
        let d = config.degree_choices[rng.random_range(0..config.degree_choices.len())];
        let mut nbrs: Vec<usize> = Vec::with_capacity(d);
        for _ in 0..d {
            let reuse = rng.random::<f64>() < config.lambda;
            let picked = if reuse { pick_by_degree(&mut rng, &degrees, &nbrs) } else { None };
            let v = picked.unwrap_or_else(|| {
                degrees.push(0);
                degrees.len() - 1
            });
            degrees[v] += 1;
            nbrs.push(v);
        }
        edges.push(nbrs);
    }
    let mut a = AdjacencyMatrix::zeros(config.n1, degrees.len());
    for (i, nbrs) in edges.iter().enumerate() {
        for &j in nbrs {
            a.set(i, j, true);
        }
    }
    Ok(a)
}

fn pick_by_degree<R: Rng>(rng: &mut R, degrees: &[usize], exclude: &[usize]) -> Option<usize> {
    let total: usize = degrees
        .iter()
        .enumerate()
        .filter(|(v, _)| !exclude.contains(v))
        .map(|(_, d)| d)
        .sum();
    if total == 0 {
        return None;
    }
    let mut target = rng.random_range(0..total);
    for (v, &d) in degrees.iter().enumerate() {
        if exclude.contains(&v) {
            continue;
        }
        if target < d {
            return Some(v);
        }
        target -= d;
    }
    unreachable!("target below total weight")
}

/// Simulation designs used by the experiment harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Three biclusters; dense diagonal blocks carry weak signal (mean 1),
    /// sparse off-diagonal blocks strong signal (mean 3).
    A,
    /// Fixed nested graph with a single generalist per side
    /// ([`generalist_graph`]), alternative `N(2, 1)`.
    B,
    /// Fixed preferential-attachment graph (`lambda = 0.8`), alternative `N(2, 1)`.
    C,
    /// 2 row x 3 column block design with alternative `N(mu, 0.25)`.
    NoisySbm { mu: f64 },
}

/// A simulated dataset. `has_blocks` is false for the fixed-graph scenarios,
/// whose memberships are a single placeholder block.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub truth: LatentTruth,
    pub x: ZScoreMatrix,
    pub has_blocks: bool,
}

fn block_params(
    alpha1: Vec<f64>,
    alpha2: Vec<f64>,
    pi: Array2<f64>,
    mu: Array2<f64>,
    var: f64,
) -> ModelParams {
    let sigma_sq = Array2::from_elem(mu.dim(), var);
    ModelParams::new(
        alpha1,
        alpha2,
        pi,
        NullParams::standard(),
        AltParams::new(mu, sigma_sq).expect("valid alternative"),
    )
    .expect("valid design")
}

/// Scenario (a) parameters. The alternative variance is not part of the
/// design description and is taken as 1.
pub fn scenario_a_params() -> ModelParams {
    let third = vec![1.0 / 3.0; 3];
    let pi = Array2::from_shape_fn((3, 3), |(q, l)| if q == l { 0.8 } else { 0.1 });
    let mu = Array2::from_shape_fn((3, 3), |(q, l)| if q == l { 1.0 } else { 3.0 });
    block_params(third.clone(), third, pi, mu, 1.0)
}

/// 2 x 3 block design with `π_11 = π_22 = 0.8`, 0.1 elsewhere.
pub fn noisy_sbm_params(mu: f64) -> ModelParams {
    let pi = Array2::from_shape_fn((2, 3), |(q, l)| if q == l { 0.8 } else { 0.1 });
    block_params(vec![0.5, 0.5], vec![1.0 / 3.0; 3], pi, Array2::from_elem((2, 3), mu), 0.25)
}

/// Single-block parameters for observations over a fixed graph.
pub fn fixed_graph_params(alt_mean: f64, alt_var: f64) -> ModelParams {
    block_params(vec![1.0], vec![1.0], Array2::ones((1, 1)), Array2::from_elem((1, 1), alt_mean), alt_var)
}

impl Scenario {
    /// Default dimensions `(n1, n2)`; `n2` is emergent for scenario C.
    pub fn default_dims(&self) -> (usize, usize) {
        match self {
            Scenario::NoisySbm { .. } => (40, 60),
            _ => (150, 200),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::A => "a",
            Scenario::B => "b",
            Scenario::C => "c",
            Scenario::NoisySbm { .. } => "noisy-sbm",
        }
    }

    /// Generates one replicate. `n2` is ignored for scenario C.
    pub fn generate(&self, n1: usize, n2: usize, seed: u64) -> Result<SimulatedData> {
        let graph_seed = rng::derive_seed(seed, 0);
        let obs_seed = rng::derive_seed(seed, 1);
        let (truth, params, has_blocks) = match *self {
            Scenario::A | Scenario::NoisySbm { .. } => {
                let params = match *self {
                    Scenario::A => scenario_a_params(),
                    Scenario::NoisySbm { mu } => noisy_sbm_params(mu),
                    _ => unreachable!(),
                };
                let dims = Dimensions::new(n1, n2, params.b1(), params.b2())?;
                (sample_bisbm(dims, &params, graph_seed)?, params, true)
            }
            Scenario::B => (LatentTruth::from_graph(generalist_graph(n1, n2)?), fixed_graph_params(2.0, 1.0), false),
            Scenario::C => {
                let a = preferential_attachment(&PAConfig::new(n1, 0.8), graph_seed)?;
                (LatentTruth::from_graph(a), fixed_graph_params(2.0, 1.0), false)
            }
        };
        let x = sample_observations(&truth, &params, obs_seed)?;
        Ok(SimulatedData { truth, x, has_blocks })
    }
}

/// Synthetic paired abundance tables: `counts` (samples x taxa, nonnegative
/// integers with structural zeros) and `metabolites` (samples x features,
/// log scale), plus a two-level group label per sample. A shared latent
/// factor couples a subset of taxa and metabolites, more strongly in group 1.
pub struct PairedFixture {
    pub counts: Array2<f64>,
    pub metabolites: Array2<f64>,
    pub group: Vec<u8>,
}

pub fn paired_fixture(m: usize, n_taxa: usize, n_metabolites: usize, seed: u64) -> PairedFixture {
    let mut rng = rng::from_seed(seed);
    let group: Vec<u8> = (0..m).map(|k| u8::from(k % 3 == 0)).collect();
    let factor: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
    let taxa_load: Vec<f64> = (0..n_taxa).map(|i| if i % 4 == 0 { 0.8 } else { 0.0 }).collect();
    let met_load: Vec<f64> = (0..n_metabolites).map(|j| if j % 5 == 0 { 0.8 } else { 0.0 }).collect();
    let mut counts = Array2::zeros((m, n_taxa));
    for k in 0..m {
        let strength = if group[k] == 1 { 1.5 } else { 0.5 };
        for i in 0..n_taxa {
            let e: f64 = StandardNormal.sample(&mut rng);
            let log_mean = 2.0 + strength * taxa_load[i] * factor[k] + e;
            let present = rng.random::<f64>() > 0.25;
            counts[[k, i]] = if present { log_mean.exp().floor() } else { 0.0 };
        }
    }
    let mut metabolites = Array2::zeros((m, n_metabolites));
    for k in 0..m {
        let strength = if group[k] == 1 { 1.5 } else { 0.5 };
        for j in 0..n_metabolites {
            let e: f64 = StandardNormal.sample(&mut rng);
            metabolites[[k, j]] = strength * met_load[j] * factor[k] + e;
        }
    }
    PairedFixture { counts, metabolites, group }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_params(b1: usize, b2: usize, pi: f64) -> ModelParams {
        block_params(
            vec![1.0 / b1 as f64; b1],
            vec![1.0 / b2 as f64; b2],
            Array2::from_elem((b1, b2), pi),
            Array2::zeros((b1, b2)),
            1.0,
        )
    }

    #[test]
    fn extreme_pi_gives_full_or_empty_graph() {
        let dims = Dimensions::new(20, 30, 2, 3).unwrap();
        assert_eq!(sample_bisbm(dims, &uniform_params(2, 3, 1.0), 1).unwrap().a.n_edges(), 600);
        assert_eq!(sample_bisbm(dims, &uniform_params(2, 3, 0.0), 1).unwrap().a.n_edges(), 0);
    }

    #[test]
    fn block_edge_frequencies_match_pi() {
        let dims = Dimensions::new(150, 200, 3, 3).unwrap();
        let params = scenario_a_params();
        let t = sample_bisbm(dims, &params, 11).unwrap();
        let mut hits = [[0usize; 3]; 3];
        let mut tot = [[0usize; 3]; 3];
        for i in 0..150 {
            for j in 0..200 {
                let (q, l) = (t.z1.labels()[i], t.z2.labels()[j]);
                tot[q][l] += 1;
                hits[q][l] += usize::from(t.a.get(i, j));
            }
        }
        for q in 0..3 {
            for l in 0..3 {
                let n = tot[q][l] as f64;
                let p = params.pi[[q, l]];
                let se = (p * (1.0 - p) / n).sqrt();
                assert!((hits[q][l] as f64 / n - p).abs() <= 3.0 * se, "block ({q},{l})");
            }
        }
    }

    #[test]
    fn membership_frequencies_converge() {
        let params = block_params(
            vec![0.2, 0.5, 0.3],
            vec![1.0],
            Array2::zeros((3, 1)),
            Array2::zeros((3, 1)),
            1.0,
        );
        let dims = Dimensions::new(10_000, 1, 3, 1).unwrap();
        let t = sample_bisbm(dims, &params, 3).unwrap();
        for (q, &a) in params.alpha1.iter().enumerate() {
            let f = t.z1.labels().iter().filter(|&&l| l == q).count() as f64 / 1e4;
            assert!((f - a).abs() <= 3.0 * (a * (1.0 - a) / 1e4).sqrt());
        }
    }

    #[test]
    fn null_observations_are_centred() {
        let truth = LatentTruth::from_graph(AdjacencyMatrix::zeros(60, 80));
        let x = sample_observations(&truth, &fixed_graph_params(5.0, 0.01), 5).unwrap();
        let mean = x.as_slice().iter().sum::<f64>() / 4800.0;
        assert!(mean.abs() <= 4.0 / 4800f64.sqrt());
    }

    #[test]
    fn alternative_observations_concentrate() {
        let mut a = AdjacencyMatrix::zeros(100, 100);
        for i in 0..100 {
            for j in 0..100 {
                a.set(i, j, true);
            }
        }
        let x = sample_observations(&LatentTruth::from_graph(a), &fixed_graph_params(5.0, 0.01), 9).unwrap();
        assert!(x.as_slice().iter().all(|&v| v > 4.0));
    }

    #[test]
    fn noisy_sbm_design() {
        let p = noisy_sbm_params(2.0);
        assert_eq!((p.b1(), p.b2()), (2, 3));
        assert_eq!(p.pi[[0, 0]], 0.8);
        assert_eq!(p.pi[[1, 1]], 0.8);
        assert_eq!(p.pi[[0, 1]], 0.1);
        assert_eq!(p.pi[[1, 2]], 0.1);
        assert!(p.alt_params.sigma_sq.iter().all(|&v| v == 0.25));
        let d = Scenario::NoisySbm { mu: 2.0 }.generate(40, 60, 1).unwrap();
        assert_eq!((d.x.n1(), d.x.n2()), (40, 60));
    }

    #[test]
    fn nested_small_case() {
        let a = nested_graph(2, 2).unwrap();
        assert!(a.get(0, 0) && a.get(0, 1) && a.get(1, 0) && !a.get(1, 1));
        assert!(matches!(nested_graph(1, 5), Err(Error::Dimension(_))));
        assert!(matches!(nested_graph(5, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn nested_generalists_and_containment() {
        for n1 in 2..=20 {
            for n2 in 2..=20 {
                let a = nested_graph(n1, n2).unwrap();
                assert_eq!(a.row_degrees()[0], n2);
                assert_eq!(a.col_degrees()[0], n1);
                for i in 1..n1 {
                    for j in 0..n2 {
                        assert!(!a.get(i, j) || a.get(i - 1, j));
                    }
                }
                for j in 1..n2 {
                    for i in 0..n1 {
                        assert!(!a.get(i, j) || a.get(i, j - 1));
                    }
                }
            }
        }
    }

    #[test]
    fn generalist_graph_is_nested_star() {
        for n1 in 2..=20 {
            for n2 in 2..=20 {
                let a = generalist_graph(n1, n2).unwrap();
                assert_eq!(a.n_edges(), n1 + n2 - 1);
                assert_eq!(a.row_degrees()[0], n2);
                assert_eq!(a.col_degrees()[0], n1);
                for i in 1..n1 {
                    for j in 0..n2 {
                        assert!(!a.get(i, j) || a.get(i - 1, j));
                    }
                }
            }
        }
        assert_eq!(generalist_graph(2, 2).unwrap(), nested_graph(2, 2).unwrap());
        assert!(generalist_graph(1, 3).is_err());
    }

    #[test]
    fn pa_without_reuse() {
        let cfg = PAConfig::new(40, 0.0);
        let a = preferential_attachment(&cfg, 2).unwrap();
        assert!(a.col_degrees().iter().all(|&d| d == 1));
        assert_eq!(a.n2(), a.row_degrees().iter().sum::<usize>());
        assert!(a.row_degrees().iter().all(|d| (2..=6).contains(d)));
    }

    #[test]
    fn pa_no_duplicate_edges_and_fallback() {
        // degree 6 with lambda 1 forces the fallback on the first vertex
        let cfg = PAConfig { n1: 30, lambda: 1.0, degree_choices: vec![6] };
        let a = preferential_attachment(&cfg, 4).unwrap();
        assert!(a.row_degrees().iter().all(|&d| d == 6));
        assert_eq!(a.n2(), 6);
    }

    #[test]
    fn pa_config_validation() {
        assert!(PAConfig::new(5, 1.5).validate().is_err());
        assert!(PAConfig { n1: 5, lambda: 0.5, degree_choices: vec![] }.validate().is_err());
        assert!(PAConfig { n1: 5, lambda: 0.5, degree_choices: vec![0, 2] }.validate().is_err());
    }

    #[test]
    fn pa_mean_degree_and_heavy_tail() {
        let cfg = PAConfig::new(150, 0.8);
        let mut mean_degrees = Vec::new();
        let mut heavy = 0;
        for seed in 0..100 {
            let a = preferential_attachment(&cfg, seed).unwrap();
            let rd = a.row_degrees();
            mean_degrees.push(rd.iter().sum::<usize>() as f64 / 150.0);
            let mut cd = a.col_degrees();
            cd.sort_unstable();
            let median = cd[cd.len() / 2] as f64;
            if *cd.last().unwrap() as f64 >= 3.0 * median {
                heavy += 1;
            }
        }
        let grand = mean_degrees.iter().sum::<f64>() / 100.0;
        // Var of Uniform{2..6} is 2; s.e. of the grand mean over 100 x 150 draws
        let se = (2.0f64 / 15_000.0).sqrt();
        assert!((grand - 4.0).abs() <= 3.0 * se, "grand mean degree {grand}");
        assert_eq!(heavy, 100);
    }

    #[test]
    fn generators_are_deterministic() {
        for s in [Scenario::A, Scenario::B, Scenario::C, Scenario::NoisySbm { mu: 1.0 }] {
            let (n1, n2) = (30, 40);
            let a = s.generate(n1, n2, 17).unwrap();
            let b = s.generate(n1, n2, 17).unwrap();
            assert_eq!(a.truth, b.truth);
            let bits = |x: &ZScoreMatrix| x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.x), bits(&b.x));
        }
        let cfg = PAConfig::new(50, 0.8);
        assert_eq!(preferential_attachment(&cfg, 3).unwrap(), preferential_attachment(&cfg, 3).unwrap());
    }

    #[test]
    fn paired_fixture_shape() {
        let f = paired_fixture(131, 49, 128, 1);
        assert_eq!(f.counts.dim(), (131, 49));
        assert_eq!(f.metabolites.dim(), (131, 128));
        assert!(f.counts.iter().all(|&v| v >= 0.0));
        assert!(f.counts.iter().any(|&v| v == 0.0));
    }
}
