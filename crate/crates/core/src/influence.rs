//! Self-influence scores: the label-free score `−gᵀ(H+λI)⁻¹g` on an
//! `(x, x̂)` pair, its closed forms for a linear encoder under the squared
//! Euclidean loss, and the classical supervised self-influence baseline.
//!
//! For the linear forms `W` is `k x d`, `δ` is a unit vector in `R^d` and
//! every influence is non-positive.

use serde::{Deserialize, Serialize};

use crate::augment::{DiscreteXi, MomentMatrix};
use crate::curvature::{CurvatureOperator, Damping};
use crate::data::Dataset;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::linalg::{add, axpy, dot, norm, norm_sq, spectral_norm, Matrix};
use crate::loss::{loss_param_grad, LossKind};
use crate::par;

/// Tolerance on `‖δ‖ = 1` for the closed forms.
pub const UNIT_TOL: f64 = 1e-10;

/// Raw scores above this are reported as sign violations.
pub const SIGN_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub example_index: usize,
    pub raw_score: f64,
    pub magnitude: f64,
    pub grad_norm: f64,
    pub eps_eff: f64,
    /// Stream id of the example's first augmentation draw.
    pub seed: u64,
}

impl InfluenceRecord {
    /// `log₁₀|I|`; `-inf` for a zero score.
    pub fn log_magnitude(&self) -> f64 {
        self.magnitude.log10()
    }

    /// True when the score is positive beyond round-off, which an SPD
    /// operator rules out.
    pub fn sign_violation(&self) -> bool {
        self.raw_score > SIGN_SLACK
    }
}

/// `I = −gᵀ(H+λI)⁻¹g` with `g = ∇_θ loss(f_θ(x), f_θ(x̂))`.
pub fn influence_ssl(
    p: &EncoderParams,
    op: &CurvatureOperator,
    kind: LossKind,
    x: &[f64],
    x_hat: &[f64],
) -> Result<InfluenceRecord> {
    if x.len() != x_hat.len() {
        return Err(Error::shape("influence_ssl view", x.len(), x_hat.len()));
    }
    let g = loss_param_grad(kind, p, x, x_hat)?;
    let raw_score = self_influence(op, &g)?;
    let eps_eff = norm(&crate::linalg::sub(x_hat, x));
    Ok(InfluenceRecord {
        example_index: 0,
        raw_score,
        magnitude: raw_score.abs(),
        grad_norm: norm(&g),
        eps_eff,
        seed: 0,
    })
}

/// `−gᵀ(H+λI)⁻¹g`.
pub fn self_influence(op: &CurvatureOperator, g: &[f64]) -> Result<f64> {
    if g.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let y = op.inverse_vector_product(g)?;
    let s = -dot(g, &y);
    if !s.is_finite() {
        return Err(Error::Numeric("non-finite influence score".into()));
    }
    Ok(s)
}

fn check_unit(delta: &[f64]) -> Result<()> {
    let n = norm(delta);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Contract(format!("direction must be unit norm, got {n}")));
    }
    Ok(())
}

fn w_delta(w: &Matrix, delta: &[f64]) -> Result<Vec<f64>> {
    check_unit(delta)?;
    w.matvec(delta)
}

/// `−4ε⁴‖Wδ‖² / (λ + 2ε²)`.
pub fn analytic_influence_regularized(w: &Matrix, delta: &[f64], epsilon: f64, lambda: f64) -> Result<f64> {
    let wd = w_delta(w, delta)?;
    if !(lambda >= 0.0) {
        return Err(Error::Contract("damping must be non-negative".into()));
    }
    let e2 = epsilon * epsilon;
    let denom = lambda + 2.0 * e2;
    if !(denom > 0.0) {
        return Err(Error::Contract("λ + 2ε² must be positive".into()));
    }
    Ok(-4.0 * e2 * e2 * norm_sq(&wd) / denom)
}

/// `−2ε²‖Wδ‖²`, the undamped limit.
pub fn analytic_influence(w: &Matrix, delta: &[f64], epsilon: f64) -> Result<f64> {
    let wd = w_delta(w, delta)?;
    Ok(-2.0 * epsilon * epsilon * norm_sq(&wd))
}

/// `tr(WᵀW M)`.
fn gram_trace(w: &Matrix, m: &Matrix) -> Result<f64> {
    let wtw = w.transpose().matmul(w)?;
    Ok(wtw.matmul(m)?.trace())
}

/// `−2ε² tr(WᵀWΣ)`.
pub fn expected_influence(w: &Matrix, sigma: &MomentMatrix, epsilon: f64) -> Result<f64> {
    if sigma.dim() != w.cols() {
        return Err(Error::shape("expected_influence moment", w.cols(), sigma.dim()));
    }
    Ok(-2.0 * epsilon * epsilon * gram_trace(w, sigma.matrix())?)
}

/// `Σ_k p_k I(W, δ_k, ε)` for input `index` of an enumerable `ξ`.
pub fn enumerated_influence(w: &Matrix, xi: &DiscreteXi, index: usize, epsilon: f64) -> Result<f64> {
    if index >= xi.n_inputs() {
        return Err(Error::shape("enumerated_influence index", xi.n_inputs(), index));
    }
    let mut total = 0.0;
    for o in xi.outcomes() {
        total += o.probability * analytic_influence(w, &o.directions[index], epsilon)?;
    }
    Ok(total)
}

/// `−2ε² tr(WᵀW(δδᵀ − Σ_x))`.
pub fn influence_deviation(w: &Matrix, delta: &[f64], sigma_x: &MomentMatrix, epsilon: f64) -> Result<f64> {
    check_unit(delta)?;
    if sigma_x.dim() != delta.len() {
        return Err(Error::shape("influence_deviation moment", delta.len(), sigma_x.dim()));
    }
    let centred = Matrix::outer(delta, delta).sub(sigma_x.matrix())?;
    Ok(-2.0 * epsilon * epsilon * gram_trace(w, &centred)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetInfluence {
    pub indices: Vec<usize>,
    /// `−2ε²‖Σ_S Wδ_i‖²`
    pub total: f64,
    pub individual_sum: f64,
    /// `−4ε² Σ_{i<j} (Wδ_i)·(Wδ_j)`
    pub remainder: f64,
    /// `2ε²|S|(|S|−1)σ_max(W)²`
    pub bound: f64,
}

pub fn subset_influence(w: &Matrix, deltas: &[Vec<f64>], epsilon: f64, subset: &[usize]) -> Result<SubsetInfluence> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let e2 = epsilon * epsilon;
    let mut images = Vec::with_capacity(subset.len());
    for &i in subset {
        let delta = deltas.get(i).ok_or_else(|| Error::shape("subset index", deltas.len(), i))?;
        images.push(w_delta(w, delta)?);
    }
    let mut summed = vec![0.0; w.rows()];
    let mut individual_sum = 0.0;
    for v in &images {
        axpy(1.0, v, &mut summed);
        individual_sum += -2.0 * e2 * norm_sq(v);
    }
    let mut cross = 0.0;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            cross += dot(&images[i], &images[j]);
        }
    }
    let s = subset.len() as f64;
    let sigma = spectral_norm(w, 1e-12);
    Ok(SubsetInfluence {
        indices: subset.to_vec(),
        total: -2.0 * e2 * norm_sq(&summed),
        individual_sum,
        remainder: -4.0 * e2 * cross,
        bound: 2.0 * e2 * s * (s - 1.0) * sigma * sigma,
    })
}

/// `−2ε²‖W‖²_F`, the basis-independent sum of influences over any
/// orthonormal basis of directions.
pub fn conservation_sum(w: &Matrix, epsilon: f64) -> f64 {
    -2.0 * epsilon * epsilon * w.frobenius_norm_sq()
}

/// Explicit sum of `I(W, q_j, ε)` over the columns of an orthogonal `Q`.
pub fn basis_sum(w: &Matrix, basis: &Matrix, epsilon: f64) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..basis.cols() {
        total += analytic_influence(w, &basis.col(c), epsilon)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCheck {
    /// `|I(W+E) − I(W)|`
    pub lhs: f64,
    /// `4ε²‖δ‖²‖W‖_F‖E‖_F`
    pub first_order_bound: f64,
    /// `4ε²‖W‖_F‖E‖_F + 2ε²‖E‖²_F`
    pub exact_bound: f64,
}

impl StabilityCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.exact_bound * (1.0 + 1e-12) + 1e-300
    }
}

pub fn stability_bound_check(w: &Matrix, e: &Matrix, delta: &[f64], epsilon: f64) -> Result<StabilityCheck> {
    if w.rows() != e.rows() || w.cols() != e.cols() {
        return Err(Error::shape(
            "stability perturbation",
            format!("{}x{}", w.rows(), w.cols()),
            format!("{}x{}", e.rows(), e.cols()),
        ));
    }
    let base = analytic_influence(w, delta, epsilon)?;
    let moved = analytic_influence(&w.add(e)?, delta, epsilon)?;
    let e2 = epsilon * epsilon;
    let (wf, ef) = (w.frobenius_norm(), e.frobenius_norm());
    let first_order_bound = 4.0 * e2 * norm_sq(delta) * wf * ef;
    Ok(StabilityCheck {
        lhs: (moved - base).abs(),
        first_order_bound,
        exact_bound: 4.0 * e2 * wf * ef + 2.0 * e2 * ef * ef,
    })
}

/// How the supervised curvature is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedCurvature {
    /// `(1/n) Σ J_iᵀJ_i`
    #[default]
    GaussNewton,
    /// Central differences of the averaged supervised gradient.
    Exact,
}

fn check_scalar_head(p: &EncoderParams) -> Result<()> {
    if p.output_dim() != 1 {
        return Err(Error::Config("supervised influence needs a scalar-output model".into()));
    }
    Ok(())
}

/// `∇_θ ½(y − f_θ(x))² = −(y − f_θ(x)) ∇_θ f_θ(x)`.
pub fn supervised_grad(p: &EncoderParams, x: &[f64], y: f64) -> Result<Vec<f64>> {
    check_scalar_head(p)?;
    let f = p.forward(x)?[0];
    p.param_jacobian_vector(x, &[-(y - f)])
}

/// Damped curvature of `(1/n) Σ ½(y_i − f_θ(x_i))²` over a labeled dataset
/// with real-valued targets.
pub fn supervised_operator(
    p: &EncoderParams,
    data: &Dataset,
    targets: &[f64],
    curvature: SupervisedCurvature,
    damping: Damping,
) -> Result<CurvatureOperator> {
    check_scalar_head(p)?;
    if targets.len() != data.len() {
        return Err(Error::shape("supervised targets", data.len(), targets.len()));
    }
    if data.is_empty() {
        return Err(Error::DegenerateInput("empty dataset".into()));
    }
    let dim = p.len();
    crate::curvature::check_dense(dim)?;
    let n = data.len() as f64;
    let h = match curvature {
        SupervisedCurvature::GaussNewton => {
            let rows = par::try_map_indexed(data.len(), |i| p.param_jacobian_vector(data.get(i), &[1.0]))?;
            let mut h = Matrix::zeros(dim, dim);
            for j in &rows {
                for a in 0..dim {
                    if j[a] != 0.0 {
                        axpy(j[a] / n, j, h.row_mut(a));
                    }
                }
            }
            h
        }
        SupervisedCurvature::Exact => {
            let mean_grad = |q: &EncoderParams| -> Result<Vec<f64>> {
                let mut acc = vec![0.0; dim];
                for i in 0..data.len() {
                    axpy(1.0 / n, &supervised_grad(q, data.get(i), targets[i])?, &mut acc);
                }
                Ok(acc)
            };
            let theta = p.flat();
            let step = 1e-4 * (1.0 + crate::linalg::max_abs(theta));
            let cols = par::try_map_indexed(dim, |j| {
                let mut plus = theta.to_vec();
                plus[j] += step;
                let mut minus = theta.to_vec();
                minus[j] -= step;
                let gp = mean_grad(&p.with_flat(plus)?)?;
                let gm = mean_grad(&p.with_flat(minus)?)?;
                Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * step)).collect::<Vec<f64>>())
            })?;
            let mut h = Matrix::zeros(dim, dim);
            for (j, col) in cols.iter().enumerate() {
                for (i, v) in col.iter().enumerate() {
                    h[(i, j)] = *v;
                }
            }
            h
        }
    };
    CurvatureOperator::from_matrix(h, damping)
}

/// Classical self-influence `−∇Lᵀ(H+λI)⁻¹∇L` of a labeled example under the
/// squared-error loss `½(y − f_θ(x))²`.
pub fn supervised_self_influence(p: &EncoderParams, op: &CurvatureOperator, x: &[f64], y: f64) -> Result<f64> {
    let g = supervised_grad(p, x, y)?;
    self_influence(op, &g)
}

/// `−2ε²‖W(δ₁+δ₂)‖²`.
pub fn pair_total(w: &Matrix, d1: &[f64], d2: &[f64], epsilon: f64) -> Result<f64> {
    let v = w.matvec(&add(d1, d2))?;
    Ok(-2.0 * epsilon * epsilon * norm_sq(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{moment_matrix, XiOutcome};
    use crate::curvature::{Backend, CurvatureConfig};
    use crate::encoder::EncoderSpec;
    use crate::linalg::{random_orthogonal, Cholesky};
    use crate::rng::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// `−gᵀ(H+λI)⁻¹g` from an explicitly assembled dense block matrix.
    fn dense_oracle(w: &Matrix, delta: &[f64], eps: f64, lambda: f64) -> f64 {
        let (k, d) = (w.rows(), w.cols());
        let e2 = eps * eps;
        let wd = w.matvec(delta).unwrap();
        let mut g = vec![0.0; k * d];
        for r in 0..k {
            for c in 0..d {
                g[r * d + c] = 2.0 * e2 * wd[r] * delta[c];
            }
        }
        let mut h = Matrix::zeros(k * d, k * d);
        for r in 0..k {
            for i in 0..d {
                for j in 0..d {
                    h[(r * d + i, r * d + j)] = 2.0 * e2 * delta[i] * delta[j];
                }
            }
        }
        h.add_diagonal(lambda);
        let y = Cholesky::factor(&h).unwrap().solve(&g).unwrap();
        -dot(&g, &y)
    }

    #[test]
    fn regularized_worked_values() {
        let e1 = [1.0, 0.0];
        let got = analytic_influence_regularized(&Matrix::identity(2), &e1, 0.1, 0.02).unwrap();
        assert!(close(got, -0.01, 1e-15));
        assert!(close(got, dense_oracle(&Matrix::identity(2), &e1, 0.1, 0.02), 1e-14));
        let w = Matrix::diag(&[2.0, 1.0]);
        let got = analytic_influence_regularized(&w, &e1, 0.1, 0.02).unwrap();
        assert!(close(got, -0.04, 1e-15));
        assert!(close(got, dense_oracle(&w, &e1, 0.1, 0.02), 1e-14));
        let null = Matrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(analytic_influence_regularized(&null, &e1, 0.3, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn limit_worked_values() {
        let e1 = [1.0, 0.0];
        assert!(close(analytic_influence(&Matrix::identity(2), &e1, 0.1).unwrap(), -0.02, 1e-16));
        let w = Matrix::diag(&[2.0, 1.0]);
        let lim = analytic_influence(&w, &e1, 0.1).unwrap();
        assert!(close(lim, -0.08, 1e-16));
        let reg = analytic_influence_regularized(&w, &e1, 0.1, 1e-8).unwrap();
        assert!(((reg - lim) / lim).abs() < 1e-5);
    }

    #[test]
    fn non_unit_direction_rejected() {
        assert!(matches!(
            analytic_influence(&Matrix::identity(2), &[1.0, 1.0], 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn trace_form() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let w = Matrix::random_normal(3, 4, &mut rng);
            let mut d = rng.normal_vec(4);
            let n = norm(&d);
            d.iter_mut().for_each(|v| *v /= n);
            let wdd = w.matmul(&Matrix::outer(&d, &d)).unwrap().matmul(&w.transpose()).unwrap();
            let expect = -2.0 * 0.04 * wdd.trace();
            let got = analytic_influence(&w, &d, 0.2).unwrap();
            assert!(close(got, expect, 1e-12 * expect.abs().max(1.0)));
        }
    }

    #[test]
    fn expected_and_deviation_worked() {
        let w = Matrix::diag(&[2.0, 1.0]);
        let sigma = MomentMatrix::new(Matrix::identity(2).scaled(0.5)).unwrap();
        assert!(close(expected_influence(&w, &sigma, 0.1).unwrap(), -0.05, 1e-15));
        assert!(close(influence_deviation(&w, &[1.0, 0.0], &sigma, 0.1).unwrap(), -0.03, 1e-12));
        let d = 5;
        let iso = MomentMatrix::new(Matrix::identity(d).scaled(1.0 / d as f64)).unwrap();
        assert!(close(expected_influence(&Matrix::identity(d), &iso, 0.3).unwrap(), -0.18, 1e-15));
    }

    #[test]
    fn expected_matches_enumeration() {
        let w = Matrix::diag(&[2.0, 1.0]);
        let xi = DiscreteXi::new(vec![
            XiOutcome { directions: vec![vec![1.0, 0.0]], probability: 0.5 },
            XiOutcome { directions: vec![vec![0.0, 1.0]], probability: 0.5 },
        ])
        .unwrap();
        let sigma = moment_matrix(&xi, Some(0)).unwrap();
        let exp = expected_influence(&w, &sigma, 0.1).unwrap();
        assert!(close(exp, enumerated_influence(&w, &xi, 0, 0.1).unwrap(), 1e-12));
        assert!(close(exp, -0.05, 1e-15));
    }

    #[test]
    fn single_outcome_has_no_deviation() {
        let delta = vec![0.6, 0.8];
        let xi = DiscreteXi::single_input(&[(delta.clone(), 1.0)]).unwrap();
        let sigma = moment_matrix(&xi, Some(0)).unwrap();
        let w = Matrix::new(2, 2, vec![1.0, 2.0, -0.5, 0.3]).unwrap();
        assert!(influence_deviation(&w, &delta, &sigma, 0.4).unwrap().abs() < 1e-15);
    }

    #[test]
    fn subset_worked_instance() {
        let h = 0.5f64.sqrt();
        let deltas = vec![vec![1.0, 0.0], vec![h, h]];
        let s = subset_influence(&Matrix::identity(2), &deltas, 1.0, &[0, 1]).unwrap();
        assert!(close(s.individual_sum, -4.0, 1e-12));
        assert!(close(s.remainder, -2.0 * 2f64.sqrt(), 1e-12));
        assert!(close(s.total, -4.0 - 2.0 * 2f64.sqrt(), 1e-12));
        assert!(close(s.bound, 4.0, 1e-9));
        assert!(close(s.total, pair_total(&Matrix::identity(2), &deltas[0], &deltas[1], 1.0).unwrap(), 1e-12));
    }

    #[test]
    fn orthogonal_images_have_no_remainder() {
        let deltas = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
        let s = subset_influence(&Matrix::diag(&[3.0, 1.0, 2.0]), &deltas, 0.5, &[0, 1]).unwrap();
        assert_eq!(s.remainder, 0.0);
        assert!(close(s.total, s.individual_sum, 1e-14));
        assert!(matches!(subset_influence(&Matrix::identity(2), &deltas, 1.0, &[]), Err(Error::EmptySubset)));
    }

    #[test]
    fn conservation_matches_basis_sum() {
        let w = Matrix::diag(&[2.0, 1.0]);
        assert!(close(conservation_sum(&w, 0.1), -0.1, 1e-16));
        assert_eq!(conservation_sum(&Matrix::zeros(3, 3), 0.7), 0.0);
        let mut rng = Rng::new(5);
        let w = Matrix::random_normal(4, 4, &mut rng);
        let q = random_orthogonal(4, &mut rng);
        let expect = conservation_sum(&w, 0.3);
        assert!(close(basis_sum(&w, &q, 0.3).unwrap(), expect, 1e-10 * expect.abs()));
    }

    #[test]
    fn stability_cases() {
        let w = Matrix::new(2, 3, vec![1.0, -0.5, 0.2, 0.3, 0.9, -1.1]).unwrap();
        let d = vec![0.0, 0.6, 0.8];
        let zero = stability_bound_check(&w, &Matrix::zeros(2, 3), &d, 0.2).unwrap();
        assert_eq!(zero.lhs, 0.0);
        let alpha = 1e-3;
        let c = stability_bound_check(&w, &w.scaled(alpha), &d, 0.2).unwrap();
        let expect = ((1.0 + alpha) * (1.0 + alpha) - 1.0) * 2.0 * 0.04 * norm_sq(&w.matvec(&d).unwrap());
        assert!(close(c.lhs, expect, 1e-15));
        assert!(c.holds());
    }

    #[test]
    fn score_equals_regularized_form() {
        let mut rng = Rng::new(11);
        let w = Matrix::random_normal(3, 4, &mut rng);
        let p = EncoderParams::linear(&w);
        let x = rng.normal_vec(4);
        let mut d = rng.normal_vec(4);
        let n = norm(&d);
        d.iter_mut().for_each(|v| *v /= n);
        let (eps, lambda) = (0.05, 1e-3);
        let x_hat: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + eps * b).collect();
        let op = CurvatureOperator::from_views(
            &CurvatureConfig::new(Backend::RankOneLinear, Damping::Absolute(lambda)),
            LossKind::SquaredEuclidean,
            &p,
            &[(x.clone(), x_hat.clone())],
        )
        .unwrap();
        let rec = influence_ssl(&p, &op, LossKind::SquaredEuclidean, &x, &x_hat).unwrap();
        let expect = analytic_influence_regularized(&w, &d, eps, lambda).unwrap();
        assert!(((rec.raw_score - expect) / expect).abs() < 1e-10);
        assert_eq!(rec.magnitude, rec.raw_score.abs());
    }

    #[test]
    fn identity_view_scores_zero() {
        let p = EncoderParams::init_seeded(&EncoderSpec::mlp(3, &[4], 2).with_seed(2)).unwrap();
        let x = vec![0.4, -0.1, 0.7];
        let op = CurvatureOperator::from_views(
            &CurvatureConfig::new(Backend::DenseGaussNewton, Damping::Absolute(1e-2)),
            LossKind::CosineDistance,
            &p,
            &[(x.clone(), vec![0.5, 0.0, 0.6])],
        )
        .unwrap();
        let rec = influence_ssl(&p, &op, LossKind::CosineDistance, &x, &x).unwrap();
        assert!(rec.raw_score.abs() < 1e-20);
    }

    #[test]
    fn mlp_score_matches_dense_solve() {
        let p = EncoderParams::init_seeded(&EncoderSpec::mlp(3, &[4], 2).with_seed(9)).unwrap();
        let views = vec![
            (vec![0.3, -0.2, 0.8], vec![0.35, -0.1, 0.7]),
            (vec![-0.6, 0.4, 0.1], vec![-0.5, 0.5, 0.0]),
        ];
        let op = CurvatureOperator::from_views(
            &CurvatureConfig::new(Backend::DenseGaussNewton, Damping::Absolute(1e-2)),
            LossKind::CosineDistance,
            &p,
            &views,
        )
        .unwrap();
        let (x, xh) = &views[0];
        let rec = influence_ssl(&p, &op, LossKind::CosineDistance, x, xh).unwrap();
        let mut m = op.dense_matrix().unwrap().clone();
        m.add_diagonal(op.lambda());
        let g = loss_param_grad(LossKind::CosineDistance, &p, x, xh).unwrap();
        let expect = -dot(&g, &Cholesky::factor(&m).unwrap().solve(&g).unwrap());
        assert!(((rec.raw_score - expect) / expect).abs() < 1e-10);
        assert!(rec.raw_score <= 0.0);
    }

    #[test]
    fn two_layer_supervised_gradient() {
        let w = Matrix::new(2, 3, vec![0.5, -1.0, 0.2, 0.3, 0.8, -0.4]).unwrap();
        let v = vec![1.5, -0.7];
        let p = EncoderParams::two_layer_linear(&w, &v).unwrap();
        let x = vec![0.2, 0.1, -0.3];
        let y = 0.9;
        let wx = w.matvec(&x).unwrap();
        let r = y - dot(&v, &wx);
        let g = supervised_grad(&p, &x, y).unwrap();
        for a in 0..2 {
            for c in 0..3 {
                assert!(close(g[a * 3 + c], -r * v[a] * x[c], 1e-15));
            }
            assert!(close(g[6 + a], -r * wx[a], 1e-15));
        }
    }

    #[test]
    fn supervised_interpolated_and_dense() {
        let w = Matrix::new(2, 2, vec![0.5, -1.0, 0.3, 0.8]).unwrap();
        let p = EncoderParams::two_layer_linear(&w, &[1.0, 0.5]).unwrap();
        let data = Dataset::new(vec![vec![0.2, 0.1], vec![-0.4, 0.9], vec![1.0, 0.3]]).unwrap();
        let targets = vec![0.3, -0.2, 0.6];
        for curvature in [SupervisedCurvature::GaussNewton, SupervisedCurvature::Exact] {
            let op = supervised_operator(&p, &data, &targets, curvature, Damping::Absolute(1.0)).unwrap();
            let x = data.get(1);
            let fitted = p.forward(x).unwrap()[0];
            assert_eq!(supervised_self_influence(&p, &op, x, fitted).unwrap(), 0.0);
            let g = supervised_grad(&p, x, targets[1]).unwrap();
            let mut m = op.dense_matrix().unwrap().clone();
            m.add_diagonal(1.0);
            let expect = -dot(&g, &Cholesky::factor(&m).unwrap().solve(&g).unwrap());
            let got = supervised_self_influence(&p, &op, x, targets[1]).unwrap();
            assert!(((got - expect) / expect).abs() < 1e-10);
        }
    }
}
