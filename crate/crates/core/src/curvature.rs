//! The damped curvature operator `H + λI` over the averaged alignment loss,
//! with interchangeable backends for inverse-vector products.
//!
//! `H` is the Hessian (or its Gauss-Newton surrogate) of
//! `L̄(θ) = (1/n) Σ_i loss(f_θ(x_i), f_θ(x̂_i))`, each `x̂_i` drawn once from
//! the example's own augmentation stream.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::augment::{example_view, AugmentationSpec};
use crate::data::Dataset;
use crate::encoder::{EncoderKind, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Cholesky, Matrix, SymmetricEigen};
use crate::loss::{loss_output_hessian, loss_param_grad, LossKind};
use crate::par;

/// Largest parameter count the dense backends will materialise.
pub const MAX_DENSE_PARAMS: usize = 5000;

/// Draw index reserved for the views that define `H`; scored views use
/// draws `0..draws`.
pub const CURVATURE_DRAW: usize = u32::MAX as usize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Backend {
    /// Central differences of the exact averaged gradient.
    DenseExact,
    /// `(1/n) Σ J_iᵀ Λ_i⁺ J_i` with `Λ_i⁺` the PSD part of the loss's output Hessian.
    DenseGaussNewton,
    /// Matrix-free Gauss-Newton products solved by conjugate gradients.
    ConjugateGradient { max_iters: usize, tol: f64 },
    /// Closed form `(λI + 2ε²δδᵀ)⁻¹` per output row, for a linear encoder
    /// under the squared Euclidean loss on a single `(x, δ)` pair.
    RankOneLinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Damping {
    Absolute(f64),
    /// `λ = factor · trace(H) / D`
    Relative(f64),
}

impl Default for Damping {
    fn default() -> Self {
        Damping::Relative(1e-3)
    }
}

/// Which augmented views define `H`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureViews {
    /// A separate seeded draw per example, independent of the scored views.
    #[default]
    Independent,
    /// The first scored view of each example.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureConfig {
    pub backend: Backend,
    #[serde(default)]
    pub damping: Damping,
    #[serde(default)]
    pub views: CurvatureViews,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        Self {
            backend: Backend::DenseGaussNewton,
            damping: Damping::default(),
            views: CurvatureViews::default(),
        }
    }
}

impl CurvatureConfig {
    pub fn new(backend: Backend, damping: Damping) -> Self {
        Self {
            backend,
            damping,
            views: CurvatureViews::default(),
        }
    }

    /// Gauss-Newton for nonlinear encoders, rank-one for linear theory paths.
    pub fn default_for(kind: EncoderKind) -> Self {
        match kind {
            EncoderKind::Linear => Self::new(Backend::RankOneLinear, Damping::default()),
            _ => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let value = match self.damping {
            Damping::Absolute(v) | Damping::Relative(v) => v,
        };
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Config("damping must be finite and non-negative".into()));
        }
        if let Backend::ConjugateGradient { max_iters, tol } = self.backend {
            if max_iters == 0 || !(tol > 0.0) {
                return Err(Error::Config("conjugate gradient needs max_iters >= 1 and tol > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Inner {
    Dense { h: Matrix, chol: Option<Cholesky> },
    MatrixFree { factors: Vec<Matrix>, max_iters: usize, tol: f64 },
    RankOne { rows: usize, delta: Vec<f64>, two_eps_sq: f64 },
}

/// Immutable damped operator; safe to share across threads.
#[derive(Clone, Debug)]
pub struct CurvatureOperator {
    backend: Backend,
    lambda: f64,
    dim: usize,
    inner: Inner,
}

impl CurvatureOperator {
    /// Builds the operator for `params` over `data`, drawing each example's
    /// curvature view from `aug`.
    pub fn build(
        config: &CurvatureConfig,
        kind: LossKind,
        params: &EncoderParams,
        data: &Dataset,
        aug: &AugmentationSpec,
    ) -> Result<Self> {
        config.validate()?;
        aug.validate()?;
        let draw = match config.views {
            CurvatureViews::Independent => CURVATURE_DRAW,
            CurvatureViews::Shared => 0,
        };
        let views = par::try_map_indexed(data.len(), |i| {
            let x = data.get(i);
            example_view(aug, x, i, draw).map(|a| (x.to_vec(), a.x_hat))
        })?;
        Self::from_views(config, kind, params, &views)
    }

    /// Builds the operator from explicit `(x, x̂)` pairs.
    pub fn from_views(
        config: &CurvatureConfig,
        kind: LossKind,
        params: &EncoderParams,
        views: &[(Vec<f64>, Vec<f64>)],
    ) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(Error::DegenerateInput("curvature needs at least one example".into()));
        }
        let dim = params.len();
        match config.backend {
            Backend::DenseExact => {
                check_dense(dim)?;
                let h = dense_exact(kind, params, views)?;
                Self::dense(config.backend, h, config.damping)
            }
            Backend::DenseGaussNewton => {
                check_dense(dim)?;
                let factors = gauss_newton_factors(kind, params, views)?;
                let h = accumulate_gram(&factors, dim, views.len());
                Self::dense(config.backend, h, config.damping)
            }
            Backend::ConjugateGradient { max_iters, tol } => {
                let factors = gauss_newton_factors(kind, params, views)?;
                let n = views.len() as f64;
                let trace = factors.iter().map(Matrix::frobenius_norm_sq).sum::<f64>() / n;
                // fold the 1/n average into the factors
                let s = n.sqrt().recip();
                let factors = factors.into_iter().map(|b| b.scaled(s)).collect();
                Ok(Self {
                    backend: config.backend,
                    lambda: resolve_damping(config.damping, trace, dim),
                    dim,
                    inner: Inner::MatrixFree {
                        factors,
                        max_iters,
                        tol,
                    },
                })
            }
            Backend::RankOneLinear => {
                if params.kind() != EncoderKind::Linear || kind != LossKind::SquaredEuclidean {
                    return Err(Error::Config(
                        "rank-one backend needs a linear encoder and the squared Euclidean loss".into(),
                    ));
                }
                if views.len() != 1 {
                    return Err(Error::Config("rank-one backend is defined for a single (x, δ) pair".into()));
                }
                let (x, x_hat) = &views[0];
                let diff: Vec<f64> = x_hat.iter().zip(x).map(|(a, b)| a - b).collect();
                let eps = norm(&diff);
                let delta = if eps > 0.0 {
                    diff.iter().map(|v| v / eps).collect()
                } else {
                    let mut e = vec![0.0; diff.len()];
                    e[0] = 1.0;
                    e
                };
                let rows = params.output_dim();
                let trace = 2.0 * eps * eps * rows as f64;
                let lambda = resolve_damping(config.damping, trace, dim);
                Self::rank_one(rows, &delta, eps, lambda)
            }
        }
    }

    /// `λI + 2ε²(I_rows ⊗ δδᵀ)` with unit `δ`.
    pub fn rank_one(rows: usize, delta: &[f64], epsilon: f64, lambda: f64) -> Result<Self> {
        if (norm(delta) - 1.0).abs() > 1e-10 {
            return Err(Error::Contract("rank-one direction must have unit norm".into()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Config("damping must be non-negative".into()));
        }
        Ok(Self {
            backend: Backend::RankOneLinear,
            lambda,
            dim: rows * delta.len(),
            inner: Inner::RankOne {
                rows,
                delta: delta.to_vec(),
                two_eps_sq: 2.0 * epsilon * epsilon,
            },
        })
    }

    /// Wraps an explicit symmetric matrix `H`.
    pub fn from_matrix(h: Matrix, damping: Damping) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::shape("CurvatureOperator::from_matrix", "square", format!("{}x{}", h.rows(), h.cols())));
        }
        Self::dense(Backend::DenseExact, h, damping)
    }

    fn dense(backend: Backend, mut h: Matrix, damping: Damping) -> Result<Self> {
        h.symmetrize();
        let dim = h.rows();
        let lambda = resolve_damping(damping, h.trace(), dim);
        let mut damped = h.clone();
        damped.add_diagonal(lambda);
        let chol = Cholesky::factor(&damped)?;
        Ok(Self {
            backend,
            lambda,
            dim,
            inner: Inner::Dense { h, chol: Some(chol) },
        })
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The undamped dense `H`, when materialised.
    pub fn dense_matrix(&self) -> Option<&Matrix> {
        match &self.inner {
            Inner::Dense { h, .. } => Some(h),
            _ => None,
        }
    }

    /// `(H + λI) v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        let mut out = match &self.inner {
            Inner::Dense { h, .. } => h.matvec(v)?,
            Inner::MatrixFree { factors, .. } => gram_apply(factors, v),
            Inner::RankOne {
                rows,
                delta,
                two_eps_sq,
            } => {
                let d = delta.len();
                let mut out = vec![0.0; v.len()];
                for r in 0..*rows {
                    let c = two_eps_sq * dot(delta, &v[r * d..(r + 1) * d]);
                    axpy(c, delta, &mut out[r * d..(r + 1) * d]);
                }
                out
            }
        };
        axpy(self.lambda, v, &mut out);
        Ok(out)
    }

    /// `(H + λI)⁻¹ g`. The rank-one backend at `λ = 0` returns the
    /// pseudo-inverse product.
    pub fn inverse_vector_product(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_len(g)?;
        match &self.inner {
            Inner::Dense { chol, .. } => match chol {
                Some(c) => c.solve(g),
                None => Err(Error::IllConditioned {
                    min_eigenvalue: f64::NAN,
                }),
            },
            Inner::MatrixFree { max_iters, tol, .. } => self.conjugate_gradient(g, *max_iters, *tol),
            Inner::RankOne {
                rows,
                delta,
                two_eps_sq,
            } => Ok(sherman_morrison_blocks(*rows, delta, *two_eps_sq, self.lambda, g)),
        }
    }

    fn conjugate_gradient(&self, b: &[f64], max_iters: usize, tol: f64) -> Result<Vec<f64>> {
        let b_norm = norm(b);
        let mut x = vec![0.0; b.len()];
        if b_norm == 0.0 {
            return Ok(x);
        }
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut rs = dot(&r, &r);
        for _ in 0..max_iters {
            let ap = self.apply(&p)?;
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                return Err(Error::IllConditioned { min_eigenvalue: pap / dot(&p, &p) });
            }
            let alpha = rs / pap;
            axpy(alpha, &p, &mut x);
            axpy(-alpha, &ap, &mut r);
            let rs_new = dot(&r, &r);
            if rs_new.sqrt() <= tol * b_norm {
                return Ok(x);
            }
            let beta = rs_new / rs;
            for (pi, ri) in p.iter_mut().zip(&r) {
                *pi = ri + beta * *pi;
            }
            rs = rs_new;
        }
        Err(Error::Convergence {
            iterations: max_iters,
            residual: rs.sqrt() / b_norm,
        })
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape("curvature operand", self.dim, v.len()));
        }
        Ok(())
    }

    /// Debug dump: `D` (u64), `λ` (f64), then `H` row-major, little-endian.
    /// Only dense backends can be dumped.
    pub fn dump_dense<W: Write>(&self, mut w: W) -> Result<()> {
        let h = self
            .dense_matrix()
            .ok_or_else(|| Error::Config("only dense backends can be dumped".into()))?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.lambda.to_le_bytes())?;
        for v in h.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

pub(crate) fn check_dense(dim: usize) -> Result<()> {
    if dim > MAX_DENSE_PARAMS {
        return Err(Error::Config(format!(
            "{dim} parameters exceed the dense limit of {MAX_DENSE_PARAMS}; use the conjugate gradient backend"
        )));
    }
    Ok(())
}

fn resolve_damping(damping: Damping, trace: f64, dim: usize) -> f64 {
    match damping {
        Damping::Absolute(l) => l,
        Damping::Relative(f) => f * trace / dim.max(1) as f64,
    }
}

/// `(λI + cδδᵀ)⁻¹` applied independently to each length-`d` block of `g`.
fn sherman_morrison_blocks(rows: usize, delta: &[f64], c: f64, lambda: f64, g: &[f64]) -> Vec<f64> {
    let d = delta.len();
    let mut out = vec![0.0; g.len()];
    for r in 0..rows {
        let block = &g[r * d..(r + 1) * d];
        let proj = dot(delta, block);
        let dst = &mut out[r * d..(r + 1) * d];
        if lambda > 0.0 {
            // (1/λ) g − (c/λ²) δ(δᵀg) / (1 + c/λ)
            let coef = (c / (lambda * lambda)) / (1.0 + c / lambda);
            for (o, b) in dst.iter_mut().zip(block) {
                *o = b / lambda;
            }
            axpy(-coef * proj, delta, dst);
        } else if c > 0.0 {
            axpy(proj / c, delta, dst);
        }
    }
    out
}

fn mean_gradient(kind: LossKind, params: &EncoderParams, views: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; params.len()];
    for (x, x_hat) in views {
        let g = loss_param_grad(kind, params, x, x_hat)?;
        axpy(1.0, &g, &mut acc);
    }
    let n = views.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

fn dense_exact(kind: LossKind, params: &EncoderParams, views: &[(Vec<f64>, Vec<f64>)]) -> Result<Matrix> {
    let dim = params.len();
    let theta = params.flat();
    let step = 1e-4 * (1.0 + crate::linalg::max_abs(theta));
    let columns = par::try_map_indexed(dim, |j| {
        let mut plus = theta.to_vec();
        plus[j] += step;
        let mut minus = theta.to_vec();
        minus[j] -= step;
        let gp = mean_gradient(kind, &params.with_flat(plus)?, views)?;
        let gm = mean_gradient(kind, &params.with_flat(minus)?, views)?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * step)).collect::<Vec<f64>>())
    })?;
    let mut h = Matrix::zeros(dim, dim);
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            h[(i, j)] = *v;
        }
    }
    h.symmetrize();
    Ok(h)
}

/// Per-example `B_i = F_iᵀ [J(x_i); J(x̂_i)]` with `F_i F_iᵀ` the PSD part of
/// the output Hessian, so that `J_iᵀ Λ_i⁺ J_i = B_iᵀ B_i`.
fn gauss_newton_factors(
    kind: LossKind,
    params: &EncoderParams,
    views: &[(Vec<f64>, Vec<f64>)],
) -> Result<Vec<Matrix>> {
    par::try_map_indexed(views.len(), |i| {
        let (x, x_hat) = &views[i];
        let a = params.forward(x)?;
        let b = params.forward(x_hat)?;
        let lam = loss_output_hessian(kind, &a, &b)?;
        let eig = SymmetricEigen::new(&lam)?;
        let floor = 1e-12 * eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let f = eig.psd_factor(floor);
        let ja = params.jacobian(x)?;
        let jb = params.jacobian(x_hat)?;
        let m = a.len();
        let mut stacked = Matrix::zeros(2 * m, params.len());
        for r in 0..m {
            stacked.row_mut(r).copy_from_slice(ja.row(r));
            stacked.row_mut(m + r).copy_from_slice(jb.row(r));
        }
        f.transpose().matmul(&stacked)
    })
}

/// `(1/n) Σ B_iᵀ B_i`, reduced in fixed-size blocks combined in index order.
fn accumulate_gram(factors: &[Matrix], dim: usize, n: usize) -> Matrix {
    let n_chunks = factors.len().div_ceil(par::CHUNK);
    let partials = par::map_indexed(n_chunks, |c| {
        let mut acc = vec![0.0; dim * dim];
        for b in &factors[c * par::CHUNK..((c + 1) * par::CHUNK).min(factors.len())] {
            for r in 0..b.rows() {
                let row = b.row(r);
                for (i, &bi) in row.iter().enumerate() {
                    if bi == 0.0 {
                        continue;
                    }
                    // upper triangle only
                    axpy(bi, &row[i..], &mut acc[i * dim + i..(i + 1) * dim]);
                }
            }
        }
        acc
    });
    let mut h = Matrix::zeros(dim, dim);
    let data = h.as_mut_slice();
    for p in &partials {
        axpy(1.0, p, data);
    }
    let inv_n = 1.0 / n as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = data[i * dim + j] * inv_n;
            data[i * dim + j] = v;
            data[j * dim + i] = v;
        }
    }
    h
}

fn gram_apply(factors: &[Matrix], v: &[f64]) -> Vec<f64> {
    let dim = v.len();
    let n_chunks = factors.len().div_ceil(par::CHUNK);
    let partials = par::map_indexed(n_chunks, |c| {
        let mut acc = vec![0.0; dim];
        for b in &factors[c * par::CHUNK..((c + 1) * par::CHUNK).min(factors.len())] {
            for r in 0..b.rows() {
                let s = dot(b.row(r), v);
                axpy(s, b.row(r), &mut acc);
            }
        }
        acc
    });
    let mut out = vec![0.0; dim];
    for p in &partials {
        axpy(1.0, p, &mut out);
    }
    out
}
