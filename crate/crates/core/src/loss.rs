//! Alignment losses between an embedding and the embedding of its view.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderKind, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, norm_sq, scale, sub, Matrix};

/// Embeddings shorter than this are rejected by the cosine loss.
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1 − a·b / (‖a‖‖b‖)`
    #[default]
    CosineDistance,
    /// `‖a − b‖²`
    SquaredEuclidean,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("loss operands", a.len(), b.len()));
    }
    Ok(())
}

fn unit(a: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(a);
    if !(n > MIN_EMBEDDING_NORM) {
        return Err(Error::DegenerateEmbedding { norm: n });
    }
    Ok((scale(1.0 / n, a), n))
}

pub fn loss(kind: LossKind, a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    match kind {
        LossKind::CosineDistance => {
            let (ua, _) = unit(a)?;
            let (ub, _) = unit(b)?;
            // 1 − cos = ½‖â − b̂‖², without the cancellation of 1 − â·b̂
            Ok(0.5 * norm_sq(&sub(&ua, &ub)))
        }
        LossKind::SquaredEuclidean => Ok(norm_sq(&sub(a, b))),
    }
}

/// Gradients of the loss with respect to both operands.
pub fn loss_output_grad(kind: LossKind, a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(a, b)?;
    match kind {
        LossKind::CosineDistance => {
            let (ua, na) = unit(a)?;
            let (ub, nb) = unit(b)?;
            let c = dot(&ua, &ub);
            let mut ga = ub.clone();
            axpy(-c, &ua, &mut ga);
            ga.iter_mut().for_each(|v| *v *= -1.0 / na);
            let mut gb = ua;
            axpy(-c, &ub, &mut gb);
            gb.iter_mut().for_each(|v| *v *= -1.0 / nb);
            Ok((ga, gb))
        }
        LossKind::SquaredEuclidean => {
            let diff = sub(a, b);
            Ok((scale(2.0, &diff), scale(-2.0, &diff)))
        }
    }
}

/// Hessian of the loss in the stacked output `(a, b)`, size `2m x 2m`.
pub fn loss_output_hessian(kind: LossKind, a: &[f64], b: &[f64]) -> Result<Matrix> {
    check_pair(a, b)?;
    let m = a.len();
    let mut h = Matrix::zeros(2 * m, 2 * m);
    match kind {
        LossKind::SquaredEuclidean => {
            for i in 0..m {
                h[(i, i)] = 2.0;
                h[(m + i, m + i)] = 2.0;
                h[(i, m + i)] = -2.0;
                h[(m + i, i)] = -2.0;
            }
        }
        LossKind::CosineDistance => {
            let (ua, na) = unit(a)?;
            let (ub, nb) = unit(b)?;
            let c = dot(&ua, &ub);
            let ra: Vec<f64> = (0..m).map(|i| ub[i] - c * ua[i]).collect();
            let rb: Vec<f64> = (0..m).map(|i| ua[i] - c * ub[i]).collect();
            for i in 0..m {
                for j in 0..m {
                    let eye = if i == j { 1.0 } else { 0.0 };
                    h[(i, j)] = (ra[i] * ua[j] + ua[i] * ra[j] + c * (eye - ua[i] * ua[j])) / (na * na);
                    h[(m + i, m + j)] =
                        (rb[i] * ub[j] + ub[i] * rb[j] + c * (eye - ub[i] * ub[j])) / (nb * nb);
                    let cross = -(eye - ub[i] * ub[j] - ua[i] * ua[j] + c * ua[i] * ub[j]) / (na * nb);
                    h[(i, m + j)] = cross;
                    h[(m + j, i)] = cross;
                }
            }
        }
    }
    Ok(h)
}

/// Exact `∇_θ loss(f_θ(x), f_θ(x̂))`, differentiating through both branches
/// of the shared encoder.
pub fn loss_param_grad(kind: LossKind, p: &EncoderParams, x: &[f64], x_hat: &[f64]) -> Result<Vec<f64>> {
    let a = p.forward(x)?;
    let b = p.forward(x_hat)?;
    let (ga, gb) = loss_output_grad(kind, &a, &b)?;
    let mut g = p.param_jacobian_vector(x, &ga)?;
    let gb_theta = p.param_jacobian_vector(x_hat, &gb)?;
    axpy(1.0, &gb_theta, &mut g);
    Ok(g)
}

pub fn loss_at(kind: LossKind, p: &EncoderParams, x: &[f64], x_hat: &[f64]) -> Result<f64> {
    loss(kind, &p.forward(x)?, &p.forward(x_hat)?)
}

/// Cosine loss of `(Wx, W(x + εδ))` divided by its small-angle Euclidean
/// proxy `ε²‖Wδ‖² / (2‖Wx‖²)`.
pub fn cosine_euclidean_ratio(p: &EncoderParams, x: &[f64], delta: &[f64], epsilon: f64) -> Result<f64> {
    if p.kind() != EncoderKind::Linear {
        return Err(Error::Contract("cosine/euclidean ratio needs a linear encoder".into()));
    }
    if (norm(delta) - 1.0).abs() > 1e-10 {
        return Err(Error::Contract("delta must have unit norm".into()));
    }
    let wx = p.forward(x)?;
    let wdelta = p.forward(delta)?;
    let nwx = norm(&wx);
    if !(nwx > MIN_EMBEDDING_NORM) {
        return Err(Error::DegenerateEmbedding { norm: nwx });
    }
    let nwd_sq = norm_sq(&wdelta);
    if nwd_sq.sqrt() < 1e-14 || epsilon == 0.0 {
        return Err(Error::IndeterminateRatio("Wδ or ε is zero".into()));
    }
    let mut x_aug = x.to_vec();
    axpy(epsilon, delta, &mut x_aug);
    let cos = loss(LossKind::CosineDistance, &wx, &p.forward(&x_aug)?)?;
    let proxy = epsilon * epsilon * nwd_sq / (2.0 * nwx * nwx);
    Ok(cos / proxy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderSpec;
    use crate::numdiff::{finite_diff_grad, relative_error};
    use crate::rng::Rng;

    #[test]
    fn cosine_special_values() {
        let a = [1.0, 2.0];
        assert!(loss(LossKind::CosineDistance, &a, &a).unwrap().abs() < 1e-15);
        assert!((loss(LossKind::CosineDistance, &[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((loss(LossKind::CosineDistance, &a, &[-1.0, -2.0]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_degenerate() {
        assert!(matches!(
            loss(LossKind::CosineDistance, &[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn squared_euclidean_linear_simplifies() {
        let mut rng = Rng::new(5);
        let w = Matrix::random_normal(3, 4, &mut rng);
        let p = EncoderParams::linear(&w);
        let x = rng.normal_vec(4);
        let mut delta = rng.normal_vec(4);
        let nd = norm(&delta);
        delta.iter_mut().for_each(|v| *v /= nd);
        let eps = 0.07;
        let mut x_hat = x.clone();
        axpy(eps, &delta, &mut x_hat);
        let got = loss_at(LossKind::SquaredEuclidean, &p, &x, &x_hat).unwrap();
        let expect = eps * eps * norm_sq(&w.matvec(&delta).unwrap());
        assert!((got - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn zero_gradient_at_identity_view() {
        let p = EncoderParams::init_seeded(&EncoderSpec::mlp(3, &[4], 2).with_seed(1)).unwrap();
        let x = [0.2, -0.4, 0.9];
        let g = loss_param_grad(LossKind::CosineDistance, &p, &x, &x).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn linear_squared_gradient_closed_form() {
        let w = Matrix::from_rows(&[vec![1.5, -0.5], vec![0.25, 2.0]]).unwrap();
        let p = EncoderParams::linear(&w);
        let x = [0.3, 0.8];
        let delta = [0.6, 0.8];
        let eps = 0.2;
        let x_hat = [x[0] + eps * delta[0], x[1] + eps * delta[1]];
        let g = loss_param_grad(LossKind::SquaredEuclidean, &p, &x, &x_hat).unwrap();
        let wd = w.matvec(&delta).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let expect = 2.0 * eps * eps * wd[r] * delta[c];
                assert!((g[r * 2 + c] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mlp_cosine_gradient_vs_finite_differences() {
        let p = EncoderParams::init_seeded(&EncoderSpec::mlp(4, &[5], 3).with_seed(8)).unwrap();
        let x = [0.5, -0.3, 0.2, 1.0];
        let x_hat = [0.6, -0.1, 0.25, 0.7];
        let analytic = loss_param_grad(LossKind::CosineDistance, &p, &x, &x_hat).unwrap();
        let fd = finite_diff_grad(
            |t| loss_at(LossKind::CosineDistance, &p.with_flat(t.to_vec()).unwrap(), &x, &x_hat).unwrap(),
            p.flat(),
            1e-6,
        )
        .unwrap();
        assert!(relative_error(&analytic, &fd, 1e-12) < 1e-5);
    }

    #[test]
    fn output_hessian_vs_finite_differences() {
        let a = [0.7, -0.2, 0.4];
        let b = [0.1, 0.9, -0.3];
        for kind in [LossKind::CosineDistance, LossKind::SquaredEuclidean] {
            let h = loss_output_hessian(kind, &a, &b).unwrap();
            let mut z: Vec<f64> = a.iter().chain(&b).copied().collect();
            for j in 0..6 {
                let step = 1e-6;
                let orig = z[j];
                z[j] = orig + step;
                let (pa, pb) = loss_output_grad(kind, &z[..3], &z[3..]).unwrap();
                z[j] = orig - step;
                let (ma, mb) = loss_output_grad(kind, &z[..3], &z[3..]).unwrap();
                z[j] = orig;
                let plus: Vec<f64> = pa.into_iter().chain(pb).collect();
                let minus: Vec<f64> = ma.into_iter().chain(mb).collect();
                for i in 0..6 {
                    let fd = (plus[i] - minus[i]) / (2.0 * step);
                    assert!((h[(i, j)] - fd).abs() < 1e-7, "{kind:?} ({i},{j}) {} vs {fd}", h[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn cosine_scale_invariance() {
        let a = [0.3, -1.0, 2.0];
        let b = [1.0, 0.5, 0.1];
        let base = loss(LossKind::CosineDistance, &a, &b).unwrap();
        let scaled = loss(LossKind::CosineDistance, &scale(3.5, &a), &scale(0.01, &b)).unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn ratio_perpendicular_small_eps() {
        // Wx = (1, 0), Wδ = (0, 1)
        let p = EncoderParams::linear(&Matrix::identity(2));
        let r4 = cosine_euclidean_ratio(&p, &[1.0, 0.0], &[0.0, 1.0], 1e-4).unwrap();
        assert!((r4 - 1.0).abs() < 1e-3);
        let r3 = cosine_euclidean_ratio(&p, &[1.0, 0.0], &[0.0, 1.0], 1e-3).unwrap();
        let r5 = cosine_euclidean_ratio(&p, &[1.0, 0.0], &[0.0, 1.0], 1e-5).unwrap();
        assert!((r5 - 1.0).abs() < (r3 - 1.0).abs());
    }

    #[test]
    fn ratio_parallel_is_bounded() {
        let p = EncoderParams::linear(&Matrix::identity(2));
        for eps in [1e-2, 1e-3, 1e-4] {
            let r = cosine_euclidean_ratio(&p, &[1.0, 0.0], &[1.0, 0.0], eps).unwrap();
            assert!(r.is_finite() && r.abs() < 1.0);
        }
    }

    #[test]
    fn ratio_indeterminate() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let p = EncoderParams::linear(&w);
        assert!(matches!(
            cosine_euclidean_ratio(&p, &[1.0, 0.0], &[0.0, 1.0], 1e-3),
            Err(Error::IndeterminateRatio(_))
        ));
    }
}
