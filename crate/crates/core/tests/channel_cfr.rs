use std::f64::consts::PI;

use hyphy_core::channel_cfr::*;
use hyphy_core::linalg::{complex_normal, rel_frobenius, sample_covariance, toeplitz_hermitian};
use hyphy_core::C64;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn alice() -> DiffuseNoiseParams {
    DiffuseNoiseParams::new(200.0, 0.02, 20, 20.0).unwrap()
}

/// Per-subcarrier `A_R Gamma A_T^H`, column-major vec, stacked over n.
fn mean_by_matrices(sp: &SpecularParams, dims: &CfrDims) -> Vec<C64> {
    let (nt, nr, nf) = (dims.n_tx, dims.n_rx, dims.n_f);
    let k = sp.n_paths();
    let at = DMatrix::from_fn(nt, k, |t, p| steering_vector(sp.psi_t[p], nt)[t]);
    let ar = DMatrix::from_fn(nr, k, |r, p| steering_vector(sp.psi_r[p], nr)[r]);
    let cf = (nf as f64 - 1.0) / 2.0;
    let mut out = Vec::new();
    for n in 0..nf {
        let gamma = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                sp.rho[i] * C64::from_polar(((nt * nr) as f64).sqrt(), -(n as f64 - cf) * sp.tau[i])
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let h = &ar * gamma * at.adjoint();
        out.extend(h.iter().copied());
    }
    out
}

#[test]
fn specular_mean_matches_matrix_construction() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = CfrDims::new(3, 2, 7).unwrap();
    let sp = SpecularParams::new(
        vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
        vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
        vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        vec![complex_normal(&mut rng), complex_normal(&mut rng)],
    )
    .unwrap();
    let h = specular_mean(&sp, &dims).unwrap();
    let lit = mean_by_matrices(&sp, &dims);
    // Literal order is (n, t, r) with r fastest; ours puts n fastest.
    for t in 0..3 {
        for r in 0..2 {
            for n in 0..7 {
                let d = (h[dims.index(t, r, n)] - lit[n * 6 + t * 2 + r]).norm();
                assert!(d < 1e-10, "t={t} r={r} n={n}: {d}");
            }
        }
    }
}

#[test]
fn specular_mean_trivial_cases() {
    let dims = CfrDims::new(2, 2, 5).unwrap();
    let zero = SpecularParams::new(vec![0.3], vec![0.1], vec![0.2], vec![C64::new(0.0, 0.0)]).unwrap();
    assert!(specular_mean(&zero, &dims).unwrap().norm() == 0.0);
    let flat = SpecularParams::new(vec![0.0], vec![0.0], vec![0.0], vec![C64::new(1.0, 0.0)]).unwrap();
    let h = specular_mean(&flat, &dims).unwrap();
    assert!(h.iter().all(|z| (z.norm() - h[0].norm()).abs() < 1e-14));
    let bad = CfrDims::new(2, 2, 5).unwrap();
    assert!(specular_mean(&zero, &bad).is_ok());
}

#[test]
fn steering_vector_phases_are_conjugate_symmetric() {
    let v = steering_vector(0.7, 4);
    for j in 0..4 {
        let want = C64::from_polar(0.25, (j as f64 - 1.5) * 0.7);
        assert!((v[j] - want).norm() < 1e-15);
        assert!((v[j] - v[3 - j].conj()).norm() < 1e-15);
    }
}

/// Monte-Carlo covariance of the tap-domain diffuse CFR at lags 0 and 1.
fn mc_kappa(dn: &DiffuseNoiseParams, n_f: usize, draws: usize, seed: u64) -> (C64, C64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let var = dn.tap_variances();
    let (mut c0, mut c1) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
    for _ in 0..draws {
        let taps: Vec<C64> = var.iter().map(|v| complex_normal(&mut rng) * v.sqrt()).collect();
        let q = |n: usize| -> C64 {
            taps.iter()
                .enumerate()
                .map(|(l, a)| a * C64::from_polar(1.0, 2.0 * PI * (n * l) as f64 / n_f as f64))
                .sum()
        };
        let (q0, q1) = (q(0), q(1));
        c0 += q0 * q0.conj();
        c1 += q1 * q0.conj();
    }
    (c0 / draws as f64, c1 / draws as f64)
}

#[test]
fn kappa_matches_tap_domain_monte_carlo() {
    let dn = alice();
    let (c0, c1) = mc_kappa(&dn, 80, 1_000_000, 11);
    let k0 = kappa(&dn, 0.0);
    let k1 = kappa(&dn, 1.0 / 80.0);
    assert!((k0.re - 183.78).abs() < 0.05, "{k0}");
    assert!((c0 - k0).norm() / k0.norm() < 0.01);
    assert!((c1 - k1).norm() / k1.norm() < 0.01, "mc {c1} vs {k1}");
    let zero = DiffuseNoiseParams { alpha2: 0.0, ..dn };
    assert_eq!(kappa(&zero, 0.3), C64::new(0.0, 0.0));
}

#[test]
fn diffuse_noise_cov_examples() {
    let white = DiffuseNoiseParams { alpha2: 0.0, beta: 0.1, l_taps: 3, sigma2: 1.0 };
    let nu = diffuse_noise_cov(&white, 6).nu;
    assert_eq!(nu[0], C64::new(1.0, 0.0));
    assert!(nu[1..].iter().all(|z| z.norm() == 0.0));
    let cov = diffuse_noise_cov(&alice(), 20);
    assert!((cov.nu[0].re - 203.78).abs() < 0.05);
    let r = cov.to_matrix();
    assert_eq!(r, r.adjoint());
    assert!(cov.factor(&CfrDims::new(1, 1, 20).unwrap()).is_ok());
}

#[test]
fn kron_expand_structure() {
    let cov = diffuse_noise_cov(&alice(), 20);
    let one = kron_expand(&cov, &CfrDims::new(1, 1, 20).unwrap()).unwrap();
    assert_eq!(one, cov.to_matrix());
    let dims = CfrDims::new(2, 2, 20).unwrap();
    let r = kron_expand(&cov, &dims).unwrap();
    assert_eq!(r.shape(), (80, 80));
    assert!((r.trace() - cov.nu[0] * 80.0).norm() < 1e-9);
    for i in 0..80 {
        for j in 0..80 {
            if i / 20 != j / 20 {
                assert_eq!(r[(i, j)], C64::new(0.0, 0.0));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = DVector::from_fn(80, |_, _| complex_normal(&mut rng));
    let y = &r * &x;
    let t = cov.to_matrix();
    for b in 0..4 {
        let yb = &t * x.rows(b * 20, 20);
        assert!((yb - y.rows(b * 20, 20)).norm() < 1e-9);
    }
}

#[test]
fn frozen_sequence_is_constant() {
    let dims = CfrDims::new(2, 1, 8).unwrap();
    let sp = SpecularParams::new(vec![0.4], vec![-0.2], vec![0.1], vec![C64::new(3.0, 1.0)]).unwrap();
    let dn = DiffuseNoiseParams { sigma2: 0.0, ..alice() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq = sample_cfr_sequence(&sp, &dn, SimilarityParam::new(1.0).unwrap(), &dims, 5, &mut rng).unwrap();
    assert_eq!(seq.len(), 5);
    for s in &seq[1..] {
        assert_eq!(s.h, seq[0].h);
    }
}

fn sampled_diffuse(dn: &DiffuseNoiseParams, n_f: usize, draws: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<C64>> {
    let dims = CfrDims::new(1, 1, n_f).unwrap();
    let sp = SpecularParams::new(vec![0.0], vec![0.0], vec![0.0], vec![C64::new(0.0, 0.0)]).unwrap();
    let a = SimilarityParam::new(0.0).unwrap();
    (0..draws)
        .map(|_| sample_cfr_sequence(&sp, dn, a, &dims, 1, rng).unwrap().remove(0).h)
        .collect()
}

#[test]
fn sampled_covariance_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dn = alice();
    let xs = sampled_diffuse(&dn, 20, 100_000, &mut rng);
    let s = sample_covariance(&xs).unwrap();
    let r = diffuse_noise_cov(&dn, 20).to_matrix();
    assert!(rel_frobenius(&s, &r) < 0.03);
}

#[test]
fn independent_steps_have_vanishing_cross_covariance() {
    let dims = CfrDims::new(1, 1, 10).unwrap();
    let sp = SpecularParams::new(vec![0.0], vec![0.0], vec![0.0], vec![C64::new(0.0, 0.0)]).unwrap();
    let dn = alice();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cross = DMatrix::<C64>::zeros(10, 10);
    let n = 20_000;
    for _ in 0..n {
        let seq = sample_cfr_sequence(&sp, &dn, SimilarityParam::new(0.0).unwrap(), &dims, 2, &mut rng).unwrap();
        cross.gerc(C64::new(1.0, 0.0), &seq[1].h, &seq[0].h, C64::new(1.0, 0.0));
    }
    cross /= C64::new(n as f64, 0.0);
    let scale = diffuse_noise_cov(&dn, 10).nu[0].re;
    assert!(cross.norm() / (scale * 10.0) < 0.03);
}

#[test]
fn sample_mean_converges_to_specular_mean() {
    let dims = CfrDims::new(2, 2, 6).unwrap();
    let sp = SpecularParams::new(vec![0.5, -1.0], vec![0.2, 0.9], vec![0.3, -0.4], vec![C64::new(10.0, 2.0), C64::new(-4.0, 6.0)]).unwrap();
    let dn = alice();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 100_000;
    let mut acc = DVector::<C64>::zeros(dims.m());
    for _ in 0..n {
        acc += &sample_cfr_sequence(&sp, &dn, SimilarityParam::new(0.0).unwrap(), &dims, 1, &mut rng).unwrap()[0].h;
    }
    acc /= C64::new(n as f64, 0.0);
    let mean = specular_mean(&sp, &dims).unwrap();
    let nu0 = diffuse_noise_cov(&dn, 6).nu[0].re;
    let bound = 5.0 * (nu0 / n as f64).sqrt();
    let dev = (acc - mean).iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(dev < bound, "{dev} vs {bound}");
}

#[test]
fn difference_covariance_examples() {
    let a = alice();
    let one = SimilarityParam::new(1.0).unwrap();
    assert!(diff_cov_h0(&a, one, 20).nu.iter().all(|z| z.norm() == 0.0));
    let h0 = diff_cov_h0(&a, SimilarityParam::new(0.85).unwrap(), 20);
    assert!((h0.nu[0].re - 0.3 * kappa(&a, 0.0).re).abs() < 1e-10);
    assert!((h0.nu[0].re - 55.13).abs() < 0.02);
    assert!(diff_cov_h1(&a, &a, one, 20).nu.iter().all(|z| z.norm() < 1e-12));
    let sim = SimilarityParam::new(0.65).unwrap();
    let d1 = diff_cov_h1(&a, &a, sim, 20);
    let d0 = diff_cov_h0(&a, sim, 20);
    for k in 0..20 {
        assert!((d1.nu[k] - d0.nu[k]).norm() < 1e-12);
    }
}

#[test]
fn null_difference_covariance_matches_monte_carlo() {
    let dn = DiffuseNoiseParams { sigma2: 0.0, ..alice() };
    let a = SimilarityParam::new(0.85).unwrap();
    let tt = TapTransform::new(20, dn.l_taps);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let diffs: Vec<DVector<C64>> = (0..100_000)
        .map(|_| {
            let s0 = TapState::stationary(&dn, 1, &mut rng);
            let s1 = s0.evolve(&dn, a, &mut rng);
            tt.apply(&s1) - tt.apply(&s0)
        })
        .collect();
    let s = sample_covariance(&diffs).unwrap();
    let r = diff_cov_h0(&dn, a, 20).to_matrix();
    assert!(rel_frobenius(&s, &r) < 0.03);
}

#[test]
fn log_likelihood_examples() {
    let one = DVector::from_element(1, C64::new(1.0, 0.0));
    let zero = DVector::from_element(1, C64::new(0.0, 0.0));
    let cov = DMatrix::from_element(1, 1, C64::new(1.0, 0.0));
    let ll = gaussian_log_likelihood_dense(&zero, &zero, &cov).unwrap();
    assert!((ll + PI.ln()).abs() < 1e-14);
    let ll = gaussian_log_likelihood_dense(&one, &zero, &cov).unwrap();
    assert!((ll + PI.ln() + 1.0).abs() < 1e-14);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = DMatrix::from_fn(4, 4, |_, _| complex_normal(&mut rng));
    let r = &b * b.adjoint() + DMatrix::identity(4, 4);
    let h = DVector::from_fn(4, |_, _| complex_normal(&mut rng));
    let mu = DVector::from_fn(4, |_, _| complex_normal(&mut rng));
    let d = &h - &mu;
    let inv = r.clone().try_inverse().unwrap();
    let q = (d.adjoint() * inv * &d)[(0, 0)].re;
    let det = r.determinant().re;
    let want = -4.0 * PI.ln() - det.ln() - q;
    let got = gaussian_log_likelihood_dense(&h, &mu, &r).unwrap();
    assert!((got - want).abs() < 1e-9);
    let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)]));
    assert!(gaussian_log_likelihood_dense(&zero.clone().resize_vertically(2, C64::new(0.0, 0.0)), &DVector::zeros(2), &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn toeplitz_is_hermitian_and_psd_with_jitter(
        alpha2 in 0.1f64..500.0, beta in 0.001f64..0.2, l in 1usize..40, sigma2 in 0.0f64..50.0, n_f in 2usize..24,
    ) {
        let dn = DiffuseNoiseParams::new(alpha2, beta, l, sigma2).unwrap();
        let cov = diffuse_noise_cov(&dn, n_f);
        let r = cov.to_matrix();
        prop_assert_eq!(&r, &r.adjoint());
        prop_assert_eq!(&r, &toeplitz_hermitian(&cov.nu));
        prop_assert!(cov.factor(&CfrDims::new(1, 1, n_f).unwrap()).is_ok());
    }

    #[test]
    fn h1_collapses_to_h0_under_equal_parameters(
        alpha2 in 0.1f64..500.0, beta in 0.001f64..0.2, l in 1usize..40, a in 0.0f64..1.0,
    ) {
        let dn = DiffuseNoiseParams::new(alpha2, beta, l, 1.0).unwrap();
        let s = SimilarityParam::new(a).unwrap();
        let d1 = diff_cov_h1(&dn, &dn, s, 16);
        let d0 = diff_cov_h0(&dn, s, 16);
        for k in 0..16 {
            prop_assert!((d1.nu[k] - d0.nu[k]).norm() <= 1e-10 * (1.0 + d0.nu[k].norm()));
        }
    }
}
