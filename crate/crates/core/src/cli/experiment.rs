//! Replicated simulation studies comparing the block-model procedure with
//! BH, Storey and the lfdr baseline.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::FitOptions;
use crate::selection::{select_model, SelectionGrid};
use crate::simulate::Scenario;
use crate::testing::{
    bh, evaluate, evaluate_flat, l_values, lfdr_estimates, mfdr_threshold, decide, p_from_z, storey,
    threshold_lfdr, EvalMetrics, STOREY_LAMBDA,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bisbm,
    Bh,
    Storey,
    Sc,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Bisbm => "bisbm",
            Method::Bh => "bh",
            Method::Storey => "storey",
            Method::Sc => "sc",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub n1: usize,
    pub n2: usize,
    pub reps: usize,
    pub alphas: Vec<f64>,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub fit: FitOptions,
    pub grid: SelectionGrid,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be >= 1".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config("alphas must be a non-empty list of levels in (0, 1)".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        self.fit.validate()?;
        self.grid.validate()
    }
}

/// One (replicate, method, alpha) outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRow {
    pub method: Method,
    pub rep: usize,
    pub seed: u64,
    pub alpha: f64,
    pub fdp: f64,
    pub tdp: f64,
    pub n_rejected: usize,
    /// Selected block counts (0 for methods without blocks).
    pub b1: usize,
    pub b2: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub alpha: f64,
    pub mean_fdp: f64,
    pub mean_tdp: f64,
    pub se_fdp: f64,
    pub se_tdp: f64,
    pub reps: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub replicates: Vec<ReplicateRow>,
    pub summary: Vec<SummaryRow>,
}

fn replicate(spec: &ExperimentSpec, rep: usize) -> Result<Vec<ReplicateRow>> {
    let seed = spec.seed.wrapping_add(rep as u64);
    let data = spec.scenario.generate(spec.n1, spec.n2, seed)?;
    let truth = &data.truth.a;
    let edges: Vec<bool> = truth.entries().iter().map(|&v| v == 1).collect();
    let z = data.x.as_slice();
    let mut rows = Vec::new();
    for &method in &spec.methods {
        let start = Instant::now();
        let mut per_alpha: Vec<(f64, EvalMetrics)> = Vec::new();
        let mut blocks = (0, 0);
        match method {
            Method::Bisbm => {
                let opts = FitOptions { seed, ..spec.fit.clone() };
                let sel = select_model(&data.x, &spec.grid, &opts)?;
                let fit = &sel.best.fit;
                blocks = (sel.best.b1, sel.best.b2);
                let l = l_values(&data.x, &fit.z1_hat, &fit.z2_hat, &fit.params)?;
                for &alpha in &spec.alphas {
                    let t = mfdr_threshold(&l, alpha);
                    per_alpha.push((alpha, evaluate(&decide(&l, t.tau), truth)?));
                }
            }
            Method::Bh | Method::Storey => {
                let p: Vec<f64> = z.iter().map(|&v| p_from_z(v)).collect();
                for &alpha in &spec.alphas {
                    let d = if method == Method::Bh { bh(&p, alpha) } else { storey(&p, alpha, STOREY_LAMBDA) };
                    per_alpha.push((alpha, evaluate_flat(&d, &edges)));
                }
            }
            Method::Sc => {
                let lfdr = lfdr_estimates(z);
                for &alpha in &spec.alphas {
                    per_alpha.push((alpha, evaluate_flat(&threshold_lfdr(&lfdr, alpha), &edges)));
                }
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        for (alpha, m) in per_alpha {
            rows.push(ReplicateRow {
                method,
                rep,
                seed,
                alpha,
                fdp: m.fdp,
                tdp: m.tdp,
                n_rejected: m.n_rejected,
                b1: blocks.0,
                b2: blocks.1,
                seconds,
            });
        }
    }
    Ok(rows)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Aggregates replicate rows per (method, alpha) in the order of `spec`.
/// Rows are matched by key, so the result does not depend on the order in
/// which replicates finished.
pub fn summarize(spec: &ExperimentSpec, replicates: &[ReplicateRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &method in &spec.methods {
        for &alpha in &spec.alphas {
            let mut sel: Vec<&ReplicateRow> =
                replicates.iter().filter(|r| r.method == method && r.alpha == alpha).collect();
            sel.sort_by_key(|r| r.rep);
            let fdp: Vec<f64> = sel.iter().map(|r| r.fdp).collect();
            let tdp: Vec<f64> = sel.iter().map(|r| r.tdp).collect();
            let (mean_fdp, se_fdp) = mean_se(&fdp);
            let (mean_tdp, se_tdp) = mean_se(&tdp);
            out.push(SummaryRow {
                method,
                alpha,
                mean_fdp,
                mean_tdp,
                se_fdp,
                se_tdp,
                reps: sel.len(),
                wall_time: sel.iter().map(|r| r.seconds).sum::<f64>() / spec.alphas.len() as f64,
            });
        }
    }
    out
}

/// Runs all replicates (concurrently) and summarises them.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let per_rep: Vec<Result<Vec<ReplicateRow>>> = (0..spec.reps).into_par_iter().map(|r| replicate(spec, r)).collect();
    let mut replicates = Vec::new();
    for r in per_rep {
        replicates.extend(r?);
    }
    let summary = summarize(spec, &replicates);
    Ok(ExperimentOutput { replicates, summary })
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("method,alpha,mean_fdp,mean_tdp,reps,wall_time\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method.name(),
            r.alpha,
            r.mean_fdp,
            r.mean_tdp,
            r.reps,
            r.wall_time
        ));
    }
    s
}

pub fn roc_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("method,alpha,mean_fdp,mean_tdp,se_fdp,se_tdp\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method.name(),
            r.alpha,
            r.mean_fdp,
            r.mean_tdp,
            r.se_fdp,
            r.se_tdp
        ));
    }
    s
}

pub fn replicates_csv(rows: &[ReplicateRow]) -> String {
    let mut s = String::from("method,rep,seed,alpha,fdp,tdp,n_rejected,b1,b2\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method.name(),
            r.rep,
            r.seed,
            r.alpha,
            r.fdp,
            r.tdp,
            r.n_rejected,
            r.b1,
            r.b2
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(methods: Vec<Method>) -> ExperimentSpec {
        ExperimentSpec {
            scenario: Scenario::A,
            n1: 24,
            n2: 30,
            reps: 3,
            alphas: vec![0.05, 0.1],
            methods,
            seed: 5,
            fit: FitOptions { n_restarts: 1, null_variance: Some(1.0), ..FitOptions::default() },
            grid: SelectionGrid::new(1..=3, 1..=3).unwrap(),
        }
    }

    #[test]
    fn summary_is_order_independent() {
        let spec = small_spec(vec![Method::Bh, Method::Storey, Method::Sc, Method::Bisbm]);
        let out = run_experiment(&spec).unwrap();
        let mut shuffled = out.replicates.clone();
        shuffled.reverse();
        let again = summarize(&spec, &shuffled);
        for (a, b) in out.summary.iter().zip(&again) {
            assert_eq!((a.method, a.alpha, a.mean_fdp, a.mean_tdp, a.reps), (b.method, b.alpha, b.mean_fdp, b.mean_tdp, b.reps));
        }
        assert_eq!(out.summary.len(), 8);
        assert!(out.summary.iter().all(|r| r.reps == 3 && (0.0..=1.0).contains(&r.mean_fdp) && (0.0..=1.0).contains(&r.mean_tdp)));
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = small_spec(vec![Method::Bh]);
        spec.alphas = vec![1.5];
        assert!(matches!(run_experiment(&spec), Err(Error::Config(_))));
        let mut spec = small_spec(vec![]);
        spec.reps = 1;
        assert!(run_experiment(&spec).is_err());
    }
}
