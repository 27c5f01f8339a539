use nalgebra::DMatrix;
use proptest::prelude::*;

use ssl_influence::augment::{example_view, AugmentationSpec};
use ssl_influence::curvature::{Backend, CurvatureConfig, CurvatureOperator, Damping};
use ssl_influence::data::{make_synthetic, SyntheticSpec};
use ssl_influence::encoder::{EncoderParams, EncoderSpec};
use ssl_influence::influence::{analytic_influence, influence_ssl, self_influence};
use ssl_influence::linalg::{random_orthogonal, Matrix};
use ssl_influence::loss::{loss_at, LossKind};
use ssl_influence::par;
use ssl_influence::pipeline::score_dataset;
use ssl_influence::rng::Rng;
use ssl_influence::stats::{pearson, spearman};

fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let v = rng.normal_vec(d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

fn small_linear_operator(seed: u64, n: usize) -> (EncoderParams, CurvatureOperator) {
    let data = make_synthetic(&SyntheticSpec {
        clusters: 2,
        per_cluster: n,
        dim: 4,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .data;
    let p = EncoderParams::init_seeded(&EncoderSpec::linear(4, 3).with_seed(seed)).unwrap();
    let op = CurvatureOperator::build(
        &CurvatureConfig::new(Backend::DenseGaussNewton, Damping::Relative(1e-2)),
        LossKind::CosineDistance,
        &p,
        &data,
        &AugmentationSpec::default().with_seed(seed),
    )
    .unwrap();
    (p, op)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_one_inverse_matches_dense_inverse(seed in any::<u64>(), k in 1usize..5, d in 1usize..6,
                                              eps in 1e-3f64..0.5, lambda in 1e-2f64..1.0) {
        let mut rng = Rng::new(seed);
        let delta = unit(&mut rng, d);
        let op = CurvatureOperator::rank_one(k, &delta, eps, lambda).unwrap();
        let dim = k * d;
        let mut a = DMatrix::<f64>::identity(dim, dim) * lambda;
        for r in 0..k {
            for i in 0..d {
                for j in 0..d {
                    a[(r * d + i, r * d + j)] += 2.0 * eps * eps * delta[i] * delta[j];
                }
            }
        }
        let inv = a.try_inverse().unwrap();
        let g = rng.normal_vec(dim);
        let got = op.inverse_vector_product(&g).unwrap();
        let want = inv * nalgebra::DVector::from_column_slice(&g);
        for i in 0..dim {
            prop_assert!((got[i] - want[i]).abs() <= 1e-10 * (1.0 + want[i].abs()));
        }
    }

    #[test]
    fn inverse_product_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let (p, op) = small_linear_operator(seed, 6);
        let mut rng = Rng::new(seed ^ 0xF00D);
        let g1 = rng.normal_vec(p.len());
        let g2 = rng.normal_vec(p.len());
        let combo: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| alpha * a + b).collect();
        let lhs = op.inverse_vector_product(&combo).unwrap();
        let s1 = op.inverse_vector_product(&g1).unwrap();
        let s2 = op.inverse_vector_product(&g2).unwrap();
        let scale = lhs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (alpha * s1[i] + s2[i])).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn self_influence_is_nonpositive_and_bounded(seed in 0u64..1000) {
        let (p, op) = small_linear_operator(seed, 5);
        let mut rng = Rng::new(seed);
        let g = rng.normal_vec(p.len());
        let s = self_influence(&op, &g).unwrap();
        let h = DMatrix::from_row_slice(p.len(), p.len(), op.dense_matrix().unwrap().as_slice());
        let eig = h.symmetric_eigenvalues();
        let (lo, hi) = (eig.min().max(0.0) + op.lambda(), eig.max() + op.lambda());
        let g2: f64 = g.iter().map(|v| v * v).sum();
        // −‖g‖²/λ_min ≤ −gᵀA⁻¹g ≤ −‖g‖²/λ_max
        prop_assert!(s <= 0.0);
        prop_assert!(s >= -g2 / lo * (1.0 + 1e-9));
        prop_assert!(s <= -g2 / hi * (1.0 - 1e-9));
    }

    #[test]
    fn analytic_influence_is_rotation_invariant(seed in any::<u64>(), k in 1usize..6, d in 1usize..6,
                                                eps in 1e-3f64..1.0) {
        let mut rng = Rng::new(seed);
        let w = Matrix::random_normal(k, d, &mut rng);
        let q = random_orthogonal(k, &mut rng);
        let delta = unit(&mut rng, d);
        let a = analytic_influence(&w, &delta, eps).unwrap();
        let b = analytic_influence(&q.matmul(&w).unwrap(), &delta, eps).unwrap();
        prop_assert!(rel(a, b) <= 1e-10);
    }

    #[test]
    fn rank_one_score_is_rotation_invariant(seed in any::<u64>(), k in 1usize..6, d in 1usize..6,
                                            eps in 1e-2f64..0.5, lambda in 1e-6f64..1.0) {
        let mut rng = Rng::new(seed);
        let w = Matrix::random_normal(k, d, &mut rng);
        let q = random_orthogonal(k, &mut rng);
        let delta = unit(&mut rng, d);
        let x = rng.normal_vec(d);
        let x_hat: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + eps * b).collect();
        let op = CurvatureOperator::rank_one(k, &delta, eps, lambda).unwrap();
        let score = |m: &Matrix| influence_ssl(&EncoderParams::linear(m), &op, LossKind::SquaredEuclidean, &x, &x_hat)
            .unwrap().raw_score;
        prop_assert!(rel(score(&w), score(&q.matmul(&w).unwrap())) <= 1e-10);
    }

    #[test]
    fn analytic_influence_scales_quadratically(seed in any::<u64>(), alpha in -4.0f64..4.0, eps in 1e-3f64..2.0) {
        let mut rng = Rng::new(seed);
        let w = Matrix::random_normal(3, 4, &mut rng);
        let delta = unit(&mut rng, 4);
        let base = analytic_influence(&w, &delta, eps).unwrap();
        prop_assert!(rel(analytic_influence(&w.scaled(alpha), &delta, eps).unwrap(), alpha * alpha * base) <= 1e-12);
        prop_assert!(rel(base, eps * eps * analytic_influence(&w, &delta, 1.0).unwrap()) <= 1e-12);
    }

    #[test]
    fn euclidean_loss_of_linear_view(seed in any::<u64>(), k in 1usize..6, d in 1usize..6, eps in 1e-3f64..1.0) {
        let mut rng = Rng::new(seed);
        let w = Matrix::random_normal(k, d, &mut rng);
        let x = rng.normal_vec(d);
        let delta = unit(&mut rng, d);
        let x_hat: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + eps * b).collect();
        let l = loss_at(LossKind::SquaredEuclidean, &EncoderParams::linear(&w), &x, &x_hat).unwrap();
        let wd = w.matvec(&delta).unwrap();
        let expect = eps * eps * wd.iter().map(|v| v * v).sum::<f64>();
        // x̂ − x carries rounding of order ulp(x)/ε
        prop_assert!(rel(l, expect) <= 1e-12 + 1e-14 / eps);
    }

    #[test]
    fn linear_forward_is_homogeneous(seed in any::<u64>(), alpha in -5.0f64..5.0) {
        let mut rng = Rng::new(seed);
        let w = Matrix::random_normal(3, 5, &mut rng);
        let x = rng.normal_vec(5);
        let base = EncoderParams::linear(&w).forward(&x).unwrap();
        let scaled = EncoderParams::linear(&w.scaled(alpha)).forward(&x).unwrap();
        for (s, b) in scaled.iter().zip(&base) {
            prop_assert!((s - alpha * b).abs() <= 1e-12 * (1.0 + (alpha * b).abs()));
        }
    }

    #[test]
    fn flat_layout_round_trips(seed in any::<u64>(), hidden in 1usize..6) {
        let p = EncoderParams::init_seeded(&EncoderSpec::mlp(4, &[hidden], 3).with_seed(seed)).unwrap();
        let back = p.with_flat(p.flat().to_vec()).unwrap();
        prop_assert_eq!(back.flat(), p.flat());
        let rebuilt = EncoderParams::from_layers(p.kind(), &p.layers()).unwrap();
        prop_assert_eq!(rebuilt.flat(), p.flat());
    }

    #[test]
    fn pearson_of_affine_map_is_sign(seed in any::<u64>(), alpha in 0.1f64..10.0, beta in -5.0f64..5.0, flip in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let a = rng.normal_vec(20);
        let s = if flip { -alpha } else { alpha };
        let b: Vec<f64> = a.iter().map(|v| s * v + beta).collect();
        let r = pearson(&a, &b).unwrap();
        prop_assert!((r - s.signum()).abs() <= 1e-12);
        prop_assert!((spearman(&a, &b).unwrap() - s.signum()).abs() <= 1e-12);
    }

    #[test]
    fn random_orthogonal_preserves_norms(seed in any::<u64>(), d in 1usize..10) {
        let mut rng = Rng::new(seed);
        let q = random_orthogonal(d, &mut rng);
        let x = rng.normal_vec(d);
        let n = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!((n(&q.matvec(&x).unwrap()) - n(&x)).abs() <= 1e-10 * (1.0 + n(&x)));
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), a in 1usize..6, b in 1usize..6, c in 1usize..6, d in 1usize..6) {
        let mut rng = Rng::new(seed);
        let x = Matrix::random_normal(a, b, &mut rng);
        let y = Matrix::random_normal(b, c, &mut rng);
        let z = Matrix::random_normal(c, d, &mut rng);
        let left = x.matmul(&y).unwrap().matmul(&z).unwrap();
        let right = x.matmul(&y.matmul(&z).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-10 * (1.0 + left.max_abs()));
    }

    #[test]
    fn augmentation_views_are_reproducible(seed in any::<u64>(), index in 0usize..100, draw in 0usize..4) {
        let spec = AugmentationSpec::default().with_seed(seed);
        let x = Rng::new(seed).normal_vec(6);
        let a = example_view(&spec, &x, index, draw).unwrap();
        let b = example_view(&spec, &x, index, draw).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn equal_seeds_emit_identical_streams() {
    let (mut a, mut b) = (Rng::new(42), Rng::new(42));
    for _ in 0..10_000 {
        assert_eq!(a.next_u64(), b.next_u64());
    }
}

#[test]
fn scores_do_not_depend_on_thread_count() {
    let data = make_synthetic(&SyntheticSpec {
        clusters: 3,
        per_cluster: 20,
        dim: 6,
        duplicate_pairs: 2,
        seed: 9,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .data;
    let p = EncoderParams::init_seeded(&EncoderSpec::mlp(6, &[5], 3).with_seed(9)).unwrap();
    let aug = AugmentationSpec::default().with_seed(9).with_draws(2);
    let cfg = CurvatureConfig::default();
    let one = par::with_threads(1, || score_dataset(&p, &data, LossKind::CosineDistance, &aug, &cfg)).unwrap();
    let many = par::with_threads(4, || score_dataset(&p, &data, LossKind::CosineDistance, &aug, &cfg)).unwrap();
    assert_eq!(one, many);
    for r in &one {
        assert!(r.raw_score <= 0.0);
    }
    let groups = data.duplicate_groups().unwrap();
    for g in 0..2 {
        let pair: Vec<usize> = (0..data.len()).filter(|&i| groups[i] == g).collect();
        assert!((one[pair[0]].magnitude - one[pair[1]].magnitude).abs() <= 1e-10 * one[pair[0]].magnitude);
    }
}

#[test]
fn conjugate_gradient_agrees_with_cholesky() {
    let data = make_synthetic(&SyntheticSpec {
        clusters: 2,
        per_cluster: 10,
        dim: 5,
        seed: 2,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .data;
    let p = EncoderParams::init_seeded(&EncoderSpec::mlp(5, &[4], 3).with_seed(2)).unwrap();
    let aug = AugmentationSpec::default().with_seed(2);
    let build = |backend| {
        CurvatureOperator::build(
            &CurvatureConfig::new(backend, Damping::Relative(1e-2)),
            LossKind::CosineDistance,
            &p,
            &data,
            &aug,
        )
        .unwrap()
    };
    let dense = build(Backend::DenseGaussNewton);
    let cg = build(Backend::ConjugateGradient { max_iters: 1000, tol: 1e-13 });
    let g = Rng::new(3).normal_vec(p.len());
    let a = dense.inverse_vector_product(&g).unwrap();
    let b = cg.inverse_vector_product(&g).unwrap();
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(diff <= 1e-8 * scale, "{diff} vs {scale}");
}
