//! Closed-form checks of the linear-encoder influence theory, runnable from
//! the CLI. Each claim is evaluated on seeded random instances and reports
//! its worst observed error against a fixed tolerance.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::augment::{moment_matrix, DiscreteXi, MomentMatrix};
use crate::curvature::{Backend, CurvatureConfig, CurvatureOperator, Damping};
use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::influence::{
    analytic_influence, analytic_influence_regularized, basis_sum, conservation_sum, enumerated_influence,
    expected_influence, influence_deviation, influence_ssl, stability_bound_check, subset_influence,
};
use crate::linalg::{axpy, dot, norm, random_orthogonal, scale, Matrix};
use crate::loss::{cosine_euclidean_ratio, LossKind};
use crate::rng::{mix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimResult {
    pub name: String,
    pub cases: usize,
    /// Worst error (or violation count for bound claims).
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl ClaimResult {
    fn new(name: &str, cases: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            cases,
            worst,
            tolerance,
            passed: worst <= tolerance,
        }
    }
}

impl fmt::Display for ClaimResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} cases={} worst={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

pub fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = rng.normal_vec(dim);
        let n = norm(&v);
        if n > 1e-6 {
            return scale(1.0 / n, &v);
        }
    }
}

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.uniform_range(lo.ln(), hi.ln()).exp()
}

fn shape(rng: &mut Rng) -> (usize, usize) {
    (1 + rng.below(6), 1 + rng.below(6))
}

/// `−gᵀ(H+λI)⁻¹g` for a linear encoder under the squared Euclidean loss,
/// solved densely over the full Gauss-Newton operator.
fn dense_linear_score(w: &Matrix, x: &[f64], delta: &[f64], epsilon: f64, lambda: f64) -> Result<f64> {
    let p = EncoderParams::linear(w);
    let mut x_hat = x.to_vec();
    axpy(epsilon, delta, &mut x_hat);
    let cfg = CurvatureConfig::new(Backend::DenseGaussNewton, Damping::Absolute(lambda));
    let op = CurvatureOperator::from_views(&cfg, LossKind::SquaredEuclidean, &p, &[(x.to_vec(), x_hat.clone())])?;
    Ok(influence_ssl(&p, &op, LossKind::SquaredEuclidean, x, &x_hat)?.raw_score)
}

fn rank_one_score(w: &Matrix, x: &[f64], delta: &[f64], epsilon: f64, lambda: f64) -> Result<f64> {
    let p = EncoderParams::linear(w);
    let mut x_hat = x.to_vec();
    axpy(epsilon, delta, &mut x_hat);
    let op = CurvatureOperator::rank_one(w.rows(), delta, epsilon, lambda)?;
    Ok(influence_ssl(&p, &op, LossKind::SquaredEuclidean, x, &x_hat)?.raw_score)
}

fn closed_form_vs_dense(rng: &mut Rng) -> Result<ClaimResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (k, d) = shape(rng);
        let w = Matrix::random_normal(k, d, rng);
        let delta = unit(rng, d);
        let x = rng.normal_vec(d);
        let eps = log_uniform(rng, 1e-3, 0.3);
        let lambda = log_uniform(rng, 1e-6, 1.0);
        let analytic = analytic_influence_regularized(&w, &delta, eps, lambda)?;
        worst = worst.max(relative(analytic, dense_linear_score(&w, &x, &delta, eps, lambda)?));
    }
    Ok(ClaimResult::new("damped-closed-form-vs-dense-solve", 200, worst, 1e-10))
}

fn closed_form_vs_rank_one(rng: &mut Rng) -> Result<ClaimResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (k, d) = shape(rng);
        let w = Matrix::random_normal(k, d, rng);
        let delta = unit(rng, d);
        let x = rng.normal_vec(d);
        let eps = log_uniform(rng, 1e-3, 0.3);
        let lambda = log_uniform(rng, 1e-6, 1.0);
        let analytic = analytic_influence_regularized(&w, &delta, eps, lambda)?;
        worst = worst.max(relative(analytic, rank_one_score(&w, &x, &delta, eps, lambda)?));
    }
    Ok(ClaimResult::new("damped-closed-form-vs-rank-one-backend", 200, worst, 1e-10))
}

fn undamped_limit(rng: &mut Rng) -> Result<ClaimResult> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..200 {
        let (k, d) = shape(rng);
        let w = Matrix::random_normal(k, d, rng);
        let delta = unit(rng, d);
        if norm(&w.matvec(&delta)?) <= 1e-6 {
            continue;
        }
        let eps = log_uniform(rng, 1e-2, 1.0);
        let damped = analytic_influence_regularized(&w, &delta, eps, 1e-10)?;
        worst = worst.max(relative(damped, analytic_influence(&w, &delta, eps)?));
        cases += 1;
    }
    Ok(ClaimResult::new("undamped-limit", cases, worst, 1e-6))
}

fn trace_decomposition(rng: &mut Rng) -> Result<ClaimResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (k, d) = shape(rng);
        let w = Matrix::random_normal(k, d, rng);
        let delta = unit(rng, d);
        let eps = rng.uniform_range(1e-3, 1.0);
        let outer = w.matmul(&Matrix::outer(&delta, &delta))?.matmul(&w.transpose())?;
        let trace_form = -2.0 * eps * eps * outer.trace();
        worst = worst.max(relative(analytic_influence(&w, &delta, eps)?, trace_form));
    }
    Ok(ClaimResult::new("scale-times-sensitivity-decomposition", 100, worst, 1e-12))
}

fn orthogonal_invariance(rng: &mut Rng) -> Result<ClaimResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (k, d) = shape(rng);
        let w = Matrix::random_normal(k, d, rng);
        let q = random_orthogonal(k, rng);
        let qw = q.matmul(&w)?;
        let delta = unit(rng, d);
        let x = rng.normal_vec(d);
        let eps = rng.uniform_range(1e-2, 0.5);
        let lambda = log_uniform(rng, 1e-6, 1.0);
        worst = worst.max(relative(
            analytic_influence(&w, &delta, eps)?,
            analytic_influence(&qw, &delta, eps)?,
        ));
        worst = worst.max(relative(
            rank_one_score(&w, &x, &delta, eps, lambda)?,
            rank_one_score(&qw, &x, &delta, eps, lambda)?,
        ));
    }
    Ok(ClaimResult::new("orthogonal-invariance", 100, worst, 1e-10))
}

fn scaling(rng: &mut Rng) -> Result<(ClaimResult, ClaimResult)> {
    let (mut worst_w, mut worst_e): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let (k, d) = shape(rng);
        let w = Matrix::random_normal(k, d, rng);
        let delta = unit(rng, d);
        let alpha = rng.uniform_range(-3.0, 3.0);
        let eps = rng.uniform_range(1e-3, 2.0);
        let base = analytic_influence(&w, &delta, eps)?;
        let scaled = analytic_influence(&w.scaled(alpha), &delta, eps)?;
        worst_w = worst_w.max(relative(scaled, alpha * alpha * base));
        let unit_eps = analytic_influence(&w, &delta, 1.0)?;
        worst_e = worst_e.max(relative(base, eps * eps * unit_eps));
    }
    Ok((
        ClaimResult::new("weight-scaling", 100, worst_w, 1e-12),
        ClaimResult::new("perturbation-scaling", 100, worst_e, 1e-12),
    ))
}

fn stability_bound(rng: &mut Rng) -> Result<ClaimResult> {
    let mut violations = 0usize;
    for _ in 0..100 {
        let (k, d) = shape(rng);
        let w = Matrix::random_normal(k, d, rng);
        let size = log_uniform(rng, 1e-4, 2.0);
        let e = Matrix::random_normal(k, d, rng).scaled(size);
        let delta = unit(rng, d);
        let eps = rng.uniform_range(1e-3, 1.0);
        if !stability_bound_check(&w, &e, &delta, eps)?.holds() {
            violations += 1;
        }
    }
    Ok(ClaimResult::new("perturbation-stability-bound", 100, violations as f64, 0.0))
}

fn random_xi(rng: &mut Rng, d: usize, outcomes: usize) -> Result<DiscreteXi> {
    let weights: Vec<f64> = (0..outcomes).map(|_| rng.uniform_range(0.1, 1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut pairs: Vec<(Vec<f64>, f64)> = weights.iter().map(|w| (unit(rng, d), w / total)).collect();
    let head: f64 = pairs[..outcomes - 1].iter().map(|(_, p)| p).sum();
    pairs[outcomes - 1].1 = 1.0 - head;
    DiscreteXi::single_input(&pairs)
}

fn deviation_identity(rng: &mut Rng) -> Result<ClaimResult> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..50 {
        let (k, d) = shape(rng);
        let w = Matrix::random_normal(k, d, rng);
        let outcomes = 2 + rng.below(5);
        let xi = random_xi(rng, d, outcomes)?;
        let sigma = moment_matrix(&xi, Some(0))?;
        let eps = rng.uniform_range(1e-2, 1.0);
        let expected = expected_influence(&w, &sigma, eps)?;
        let scale_ref = expected.abs().max(1e-300);
        worst = worst.max((enumerated_influence(&w, &xi, 0, eps)? - expected).abs() / scale_ref);
        for o in xi.outcomes() {
            let delta = &o.directions[0];
            let dev = influence_deviation(&w, delta, &sigma, eps)?;
            let gap = analytic_influence(&w, delta, eps)? - expected;
            worst = worst.max((dev - gap).abs() / scale_ref);
            cases += 1;
        }
    }
    Ok(ClaimResult::new("deviation-identity", cases, worst, 1e-12))
}

fn deviation_instance() -> Result<ClaimResult> {
    let w = Matrix::diag(&[2.0, 1.0]);
    let sigma = MomentMatrix::new(Matrix::diag(&[0.5, 0.5]))?;
    let dev = influence_deviation(&w, &[1.0, 0.0], &sigma, 0.1)?;
    Ok(ClaimResult::new("deviation-worked-instance", 1, (dev + 0.03).abs(), 1e-12))
}

fn conservation(rng: &mut Rng) -> Result<ClaimResult> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..20 {
        let (k, d) = shape(rng);
        let w = Matrix::random_normal(k, d, rng);
        let eps = rng.uniform_range(1e-2, 1.0);
        let target = conservation_sum(&w, eps);
        for _ in 0..10 {
            let q = random_orthogonal(d, rng);
            worst = worst.max(relative(basis_sum(&w, &q, eps)?, target));
            cases += 1;
        }
    }
    Ok(ClaimResult::new("conservation-of-total-influence", cases, worst, 1e-10))
}

fn additivity(rng: &mut Rng) -> Result<(ClaimResult, ClaimResult)> {
    let mut worst: f64 = 0.0;
    let mut violations = 0usize;
    for _ in 0..1000 {
        let (k, d) = shape(rng);
        let w = Matrix::random_normal(k, d, rng);
        let m = 2 + rng.below(7);
        let deltas: Vec<Vec<f64>> = (0..m).map(|_| unit(rng, d)).collect();
        let mut order: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut order);
        let size = 1 + rng.below(m);
        let mut subset = order[..size].to_vec();
        subset.sort_unstable();
        let eps = rng.uniform_range(1e-2, 1.0);
        let s = subset_influence(&w, &deltas, eps, &subset)?;
        let scale_ref = s.total.abs().max(s.individual_sum.abs()).max(s.remainder.abs()).max(1e-300);
        worst = worst.max((s.total - (s.individual_sum + s.remainder)).abs() / scale_ref);
        if s.remainder.abs() > s.bound * (1.0 + 1e-10) {
            violations += 1;
        }
    }
    Ok((
        ClaimResult::new("subset-additivity", 1000, worst, 1e-10),
        ClaimResult::new("interaction-bound", 1000, violations as f64, 0.0),
    ))
}

fn remainder_instance() -> Result<ClaimResult> {
    let h = 0.5f64.sqrt();
    let deltas = vec![vec![1.0, 0.0], vec![h, h]];
    let s = subset_influence(&Matrix::identity(2), &deltas, 1.0, &[0, 1])?;
    Ok(ClaimResult::new("remainder-worked-instance", 1, (s.remainder + 2.0 * 2f64.sqrt()).abs(), 1e-9))
}

fn cosine_proportionality(rng: &mut Rng) -> Result<ClaimResult> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    while cases < 100 {
        let k = 2 + rng.below(5);
        let d = k + rng.below(4);
        let w = Matrix::random_normal(k, d, rng);
        let x = rng.normal_vec(d);
        // remove the component of a random direction whose image aligns with Wx
        let wx = w.matvec(&x)?;
        let pull = w.tr_matvec(&wx)?;
        let mut delta = rng.normal_vec(d);
        let coeff = dot(&delta, &pull) / dot(&pull, &pull);
        axpy(-coeff, &pull, &mut delta);
        let n = norm(&delta);
        if n < 1e-6 || norm(&w.matvec(&delta)?) < 1e-3 {
            continue;
        }
        let delta = scale(1.0 / n, &delta);
        let ratio = cosine_euclidean_ratio(&EncoderParams::linear(&w), &x, &delta, 1e-4)?;
        worst = worst.max((ratio - 1.0).abs());
        cases += 1;
    }
    Ok(ClaimResult::new("cosine-euclidean-proportionality", cases, worst, 1e-3))
}

/// Runs every claim with generators derived from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<ClaimResult>> {
    let rng = |tag: u64| Rng::derive(seed, mix(0x7E51F1, tag));
    let mut out = vec![
        closed_form_vs_dense(&mut rng(1))?,
        closed_form_vs_rank_one(&mut rng(2))?,
        undamped_limit(&mut rng(3))?,
        trace_decomposition(&mut rng(4))?,
        orthogonal_invariance(&mut rng(5))?,
    ];
    let (w, e) = scaling(&mut rng(6))?;
    out.extend([w, e, stability_bound(&mut rng(7))?]);
    out.extend([deviation_identity(&mut rng(8))?, deviation_instance()?, conservation(&mut rng(9))?]);
    let (add, bound) = additivity(&mut rng(10))?;
    out.extend([add, bound, remainder_instance()?, cosine_proportionality(&mut rng(11))?]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run_suite(0).unwrap();
        assert_eq!(results.len(), 15);
        for r in &results {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn line_format() {
        let r = ClaimResult::new("x", 3, 0.5, 1.0);
        assert_eq!(r.to_string(), "PASS x cases=3 worst=5.000e-1 tol=1e0");
        assert!(!ClaimResult::new("y", 1, 2.0, 1.0).passed);
    }
}
