use hyphy_core::hyphylearn::toy::{run_toy, toy_specs, ToyGaussian, ToySettings};
use hyphy_core::hyphylearn::*;
use hyphy_core::nnet::{HiddenActivation, NetworkParams, NetworkSpec, OutputActivation};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(n: usize, sep: f64, rng: &mut ChaCha8Rng) -> LabeledDataset {
    let s0 = GaussianSampler::new(DVector::from_vec(vec![0.0, 0.0]), &DMatrix::identity(2, 2)).unwrap();
    let s1 = GaussianSampler::new(DVector::from_vec(vec![sep, sep]), &DMatrix::identity(2, 2)).unwrap();
    generate_synthetic(&[&s0, &s1], &[0.5, 0.5], n, rng).unwrap()
}

#[test]
fn synthetic_priors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = GaussianSampler::new(DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap();
    let d = generate_synthetic(&[&s, &s], &[1.0, 0.0], 500, &mut rng).unwrap();
    assert!(d.labels.iter().all(|&y| y == 0));
    let d = generate_synthetic(&[&s, &s], &[0.5, 0.5], 400_000, &mut rng).unwrap();
    assert!((d.prior_estimates[0] - 0.5).abs() < 0.005, "{:?}", d.prior_estimates);
    let p = GaussianSampler::point_mass(DVector::from_vec(vec![1.5, -2.0]));
    let d = generate_synthetic(&[&p], &[1.0], 50, &mut rng).unwrap();
    assert!(d.features.column_iter().all(|c| c[0] == 1.5 && c[1] == -2.0));
    assert!(generate_synthetic(&[&s, &s], &[0.7, 0.7], 5, &mut rng).is_err());
}

#[test]
fn synthetic_fractions_concentrate() {
    let s = GaussianSampler::point_mass(DVector::zeros(1));
    let n = 100_000;
    let p = 0.3;
    let band = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = generate_synthetic(&[&s, &s], &[p, 1.0 - p], n, &mut rng).unwrap();
        assert!((d.prior_estimates[0] - p).abs() < band);
    }
}

#[test]
fn gmm_separates_blobs_and_em_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = blobs(1000, 8.0, &mut rng);
    let anchors = vec![(d.labels.iter().position(|&y| y == 0).unwrap(), 0), (d.labels.iter().position(|&y| y == 1).unwrap(), 1)];
    let g = gmm_baseline(&d.features, &anchors, 2, &GmmOptions::default(), &mut rng).unwrap();
    assert!(accuracy(&g, &d.features, &d.labels).unwrap() > 0.99);
    let tr = &g.mixture.log_likelihood_trace;
    assert!(tr.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{tr:?}");

    // Overlapping data takes more EM iterations.
    let d = blobs(600, 1.5, &mut rng);
    let g = GaussianMixture::fit(&d.features, &GmmOptions::default(), &mut rng).unwrap();
    let tr = &g.log_likelihood_trace;
    assert!(tr.len() > 3);
    assert!(tr.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{tr:?}");
}

#[test]
fn gmm_degenerate_input_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = DMatrix::from_element(2, 50, 1.0);
    assert!(GaussianMixture::fit(&x, &GmmOptions::default(), &mut rng).is_err());
    assert!(GaussianMixture::fit(&DMatrix::zeros(2, 0), &GmmOptions::default(), &mut rng).is_err());
}

#[test]
fn cluster_labeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = blobs(400, 10.0, &mut rng);
    let i0 = d.labels.iter().position(|&y| y == 0).unwrap();
    let i1 = d.labels.iter().position(|&y| y == 1).unwrap();
    let (labels, err) = cluster_label(&d.features, &[(i0, 0), (i1, 1)], 2, &mut rng).unwrap();
    assert_eq!(labels, d.labels);
    assert_eq!(err, 0.0);
    let (labels, _) = cluster_label(&d.features, &[(i0, 1), (i1, 1)], 2, &mut rng).unwrap();
    assert!(labels.iter().all(|&y| y == 1));
    assert!(cluster_label(&d.features, &[], 2, &mut rng).is_err());
}

#[test]
fn cluster_labeling_on_toy_data() {
    let toy = ToyGaussian::default();
    let mut errs = vec![];
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = toy.sample(false, 500, &mut rng).unwrap();
        let anchors: Vec<_> = (0..10).map(|i| (i, d.labels[i])).collect();
        let (labels, _) = cluster_label(&d.features, &anchors, 2, &mut rng).unwrap();
        errs.push(labels.iter().zip(&d.labels).filter(|(a, b)| a != b).count() as f64 / 500.0);
    }
    assert!(errs.iter().all(|&e| e < 0.05), "{errs:?}");
}

#[test]
fn majority_mapping_ties_go_low() {
    let clusters = [0, 0, 1, 1];
    let map = map_clusters_to_classes(&clusters, 2, &[(0, 1), (1, 0), (2, 1)], 2).unwrap();
    assert_eq!(map, vec![0, 1]);
}

/// `0.5 * integral |p - q|` on a grid for two Gaussians sharing `sigma`.
fn tv_quadrature(mu: &DVector<f64>, mu_hat: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let inv = sigma.clone().try_inverse().unwrap();
    let det = sigma.determinant();
    let pdf = |x: &DVector<f64>, m: &DVector<f64>| {
        let d = x - m;
        (-0.5 * (d.transpose() * &inv * &d)[(0, 0)]).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
    };
    let c = (mu + mu_hat) / 2.0;
    let (h, half) = (0.01, 4.0);
    let steps = (2.0 * half / h) as usize;
    let mut s = 0.0;
    for i in 0..steps {
        for j in 0..steps {
            let x = DVector::from_vec(vec![c[0] - half + (i as f64 + 0.5) * h, c[1] - half + (j as f64 + 0.5) * h]);
            s += (pdf(&x, mu) - pdf(&x, mu_hat)).abs();
        }
    }
    0.5 * s * h * h
}

#[test]
fn tv_bound_cases() {
    let toy = ToyGaussian::default();
    let s = &toy.sigma;
    assert_eq!(tv_bound_equal_cov(&toy.mu_true[0], &toy.mu_true[0], s).unwrap(), 0.0);
    let far = DVector::from_vec(vec![100.0, -50.0]);
    assert_eq!(tv_bound_equal_cov(&far, &toy.mu_true[0], s).unwrap(), 4.5);
    // Toy class 0: v = (0.9, 1.4), v'v = 2.77, v'Sv = 0.6927, ratio 3.33 saturates.
    let b0 = tv_bound_equal_cov(&toy.mu_true[0], &toy.mu_est[0], s).unwrap();
    assert_eq!(b0, 4.5);
    assert!(tv_quadrature(&toy.mu_true[0], &toy.mu_est[0], s) <= b0);
    // A small shift along the same direction is below saturation.
    let near = &toy.mu_est[0] + (&toy.mu_true[0] - &toy.mu_est[0]) * 0.05;
    let v: DVector<f64> = &near - &toy.mu_est[0];
    let hand = 4.5 * v.norm_squared() / (v.transpose() * s * &v)[(0, 0)].sqrt();
    let b = tv_bound_equal_cov(&near, &toy.mu_est[0], s).unwrap();
    assert!((b - hand).abs() < 1e-12 && b < 4.5);
    let tv = tv_quadrature(&near, &toy.mu_est[0], s);
    assert!(tv > 0.0 && tv <= b, "tv {tv} bound {b}");
    assert!(tv_bound_equal_cov(&near, &toy.mu_est[0], &DMatrix::zeros(2, 2)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn tv_bound_monotone_along_direction(dx in -3.0f64..3.0, dy in -3.0f64..3.0, a in 0.0f64..2.0, b in 0.0f64..2.0) {
        prop_assume!(dx.abs() + dy.abs() > 1e-3);
        let s = ToyGaussian::default().sigma;
        let o = DVector::zeros(2);
        let dir = DVector::from_vec(vec![dx, dy]);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let f = |t: f64| tv_bound_equal_cov(&(&dir * t), &o, &s).unwrap();
        prop_assert!(f(lo) <= f(hi) + 1e-12);
        prop_assert!((0.0..=4.5).contains(&f(hi)));
    }
}

#[test]
fn a_distance_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = DMatrix::from_fn(2, 10_000, |_, _| rng.random::<f64>());
    let spec = NetworkSpec::new(vec![2, 2], HiddenActivation::Identity, OutputActivation::Softmax).unwrap();
    // Zero weights answer 1/2 everywhere.
    let flat = NetworkParams::zeros(&spec).unwrap();
    let a = empirical_a_distance_proxy(&z, &z, &flat).unwrap();
    assert!(a.proxy_loss.abs() < 1e-12);
    // Any fixed discriminator scores a set against itself at zero (accuracy form).
    let random = NetworkParams::init(&spec, &mut rng).unwrap();
    let a = empirical_a_distance_proxy(&z, &z, &random).unwrap();
    assert!(a.proxy_accuracy.abs() <= 0.05);
    // Disjoint supports, perfect discriminator.
    let mut sharp = NetworkParams::zeros(&spec).unwrap();
    sharp.layers[0].w = DMatrix::from_row_slice(2, 2, &[-100.0, 0.0, 100.0, 0.0]);
    let zr = DMatrix::from_element(2, 30, -1.0);
    let zs = DMatrix::from_element(2, 40, 1.0);
    let a = empirical_a_distance_proxy(&zr, &zs, &sharp).unwrap();
    assert_eq!(a.proxy_accuracy, 2.0);
    assert!((a.proxy_loss - 2.0).abs() < 1e-6);
    assert!(empirical_a_distance_proxy(&DMatrix::zeros(2, 0), &zs, &sharp).is_err());
}

fn toy_sets(seed: u64) -> (LabeledDataset, LabeledDataset) {
    let toy = ToyGaussian::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (toy.sample(false, 40, &mut rng).unwrap(), toy.sample(true, 400, &mut rng).unwrap())
}

#[test]
fn zero_rates_leave_parameters_at_init() {
    let (d_r, d_s) = toy_sets(6);
    let specs = toy_specs(20).unwrap();
    let cfg = TrainingConfig {
        n_train_steps: 5,
        batch_size: 16,
        lr_mapper: 0.0,
        lr_classifier: 0.0,
        lr_discriminator: 0.0,
        standardize: false,
        seed: 9,
        ..TrainingConfig::default()
    };
    let out = adversarial_train(&d_r, &d_s, &specs, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = NetworkParams::init(&specs.mapper, &mut rng).unwrap();
    let h = NetworkParams::init(&specs.classifier, &mut rng).unwrap();
    let d = NetworkParams::init(&specs.discriminator, &mut rng).unwrap();
    assert_eq!(out.classifier.mapper.as_ref().unwrap(), &m);
    assert_eq!(out.classifier.head, h);
    assert_eq!(out.discriminator, d);
    assert_eq!(out.diagnostics.len(), 5);
}

fn l_s_minus_l_c(m: &NetworkParams, h: &NetworkParams, d: &NetworkParams, xr: &DMatrix<f64>, xs: &DMatrix<f64>, ys: &[usize]) -> (f64, f64) {
    use hyphy_core::nnet::cross_entropy;
    let zs = m.forward_batch(xs).unwrap();
    let zr = m.forward_batch(xr).unwrap();
    let ls = cross_entropy(&h.forward_batch(&zs).unwrap(), ys).unwrap();
    let lc = cross_entropy(&d.forward_batch(&zr).unwrap(), &vec![0; xr.ncols()]).unwrap()
        + cross_entropy(&d.forward_batch(&zs).unwrap(), &vec![1; xs.ncols()]).unwrap();
    (ls, lc)
}

#[test]
fn saddle_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        // Random biases keep ReLU pre-activations off their kinks; with zero
        // biases an all-dead hidden layer maps a row exactly onto z = 0.
        let mut net = |s: Vec<usize>, o| {
            let mut p = NetworkParams::zeros(&NetworkSpec::new(s, HiddenActivation::Relu, o).unwrap()).unwrap();
            let v: Vec<f64> = (0..p.n_params()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            p.set_flat(&v).unwrap();
            p
        };
        let m = net(vec![3, 5, 4], OutputActivation::Linear);
        let h = net(vec![4, 6, 3], OutputActivation::Softmax);
        let d = net(vec![4, 5, 2], OutputActivation::Softmax);
        let xr = DMatrix::from_fn(3, 7, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let xs = DMatrix::from_fn(3, 9, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let ys: Vec<usize> = (0..9).map(|_| rng.random_range(0..3)).collect();
        let lambda = 0.7;
        let g = hyphy_core::hyphylearn::saddle_gradients(&m, &h, &d, &xr, &xs, &ys, lambda).unwrap();
        let (ls, lc) = l_s_minus_l_c(&m, &h, &d, &xr, &xs, &ys);
        assert!((g.loss_s - ls).abs() < 1e-12 && (g.loss_c - lc).abs() < 1e-12);
        let eps = 1e-6;
        let fd = |net: &NetworkParams, f: &dyn Fn(&NetworkParams) -> f64| -> Vec<f64> {
            let base = net.flat();
            (0..base.len())
                .map(|i| {
                    let mut p = net.clone();
                    let mut v = base.clone();
                    v[i] += eps;
                    p.set_flat(&v).unwrap();
                    let up = f(&p);
                    v[i] -= 2.0 * eps;
                    p.set_flat(&v).unwrap();
                    (up - f(&p)) / (2.0 * eps)
                })
                .collect()
        };
        let check = |analytic: Vec<f64>, numeric: Vec<f64>, what: &str| {
            let num: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den = numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-8);
            assert!(num / den < 1e-5, "{what} rel err {}", num / den);
        };
        check(g.mapper.flat(), fd(&m, &|p| {
            let (a, b) = l_s_minus_l_c(p, &h, &d, &xr, &xs, &ys);
            a - lambda * b
        }), "mapper");
        check(g.classifier.flat(), fd(&h, &|p| l_s_minus_l_c(&m, p, &d, &xr, &xs, &ys).0), "head");
        check(g.discriminator.flat(), fd(&d, &|p| l_s_minus_l_c(&m, &h, p, &xr, &xs, &ys).1), "disc");
    }
}

#[test]
fn one_sgd_step_follows_update_rule() {
    let (d_r, d_s) = toy_sets(8);
    let specs = toy_specs(6).unwrap();
    let cfg = TrainingConfig {
        n_train_steps: 1,
        batch_size: 8,
        lr_mapper: 0.1,
        lr_classifier: 0.2,
        lr_discriminator: 0.3,
        optimizer: OptimizerKind::Sgd,
        standardize: false,
        seed: 11,
        ..TrainingConfig::default()
    };
    let out = adversarial_train(&d_r, &d_s, &specs, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut m = NetworkParams::init(&specs.mapper, &mut rng).unwrap();
    let mut h = NetworkParams::init(&specs.classifier, &mut rng).unwrap();
    let mut d = NetworkParams::init(&specs.discriminator, &mut rng).unwrap();
    let ir = d_r.sample_indices(8, &mut rng);
    let is = d_s.sample_indices(8, &mut rng);
    let (xr, _) = d_r.gather(&ir);
    let (xs, ys) = d_s.gather(&is);
    let g = hyphy_core::hyphylearn::saddle_gradients(&m, &h, &d, &xr, &xs, &ys, 1.0).unwrap();
    m.axpy(-0.1, &g.mapper);
    h.axpy(-0.2, &g.classifier);
    d.axpy(-0.3, &g.discriminator);
    assert_eq!(out.classifier.mapper.unwrap(), m);
    assert_eq!(out.classifier.head, h);
    assert_eq!(out.discriminator, d);
}

#[test]
fn training_rejects_bad_inputs() {
    let (d_r, mut d_s) = toy_sets(9);
    let specs = toy_specs(4).unwrap();
    let cfg = TrainingConfig { n_train_steps: 3, batch_size: 4, standardize: false, ..TrainingConfig::default() };
    d_s.features[(0, 0)] = f64::NAN;
    let all = d_s.subset(&[0]).unwrap();
    let err = adversarial_train(&d_r, &all, &specs, &cfg).unwrap_err();
    assert!(err.to_string().contains("step 0"), "{err}");
    let wide = LabeledDataset::new(DMatrix::zeros(3, 5), vec![0; 5], 2, Origin::Synthetic).unwrap();
    assert!(adversarial_train(&d_r, &wide, &specs, &cfg).is_err());
}

#[test]
fn no_mismatch_matches_synthetic_only() {
    let toy = ToyGaussian::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = toy.sample(true, 2000, &mut rng).unwrap();
    let test = toy.sample(true, 5000, &mut rng).unwrap();
    let specs = toy_specs(20).unwrap();
    let s = ToySettings::default();
    let adv = adversarial_train(&d, &d, &specs, &s.train).unwrap();
    let plain = adversarial_train(&d, &d, &specs, &TrainingConfig { domain_weight: 0.0, ..s.train }).unwrap();
    let a = accuracy(&adv.classifier, &test.features, &test.labels).unwrap();
    let b = accuracy(&plain.classifier, &test.features, &test.labels).unwrap();
    assert!((a - b).abs() <= 0.02, "{a} vs {b}");
}

#[test]
fn toy_adversarial_training_helps() {
    let toy = ToyGaussian::default();
    let mut ratio = vec![];
    let mut gain = vec![];
    for seed in 0..5 {
        let o = run_toy(&toy, &ToySettings::default(), seed).unwrap();
        ratio.push(o.proxy_adversarial / o.proxy_identity);
        gain.push(o.accuracy_hybrid - o.accuracy_synthetic_only);
    }
    ratio.sort_by(f64::total_cmp);
    gain.sort_by(f64::total_cmp);
    assert!(ratio[2] <= 0.5, "{ratio:?}");
    assert!(gain[2] > 0.0, "{gain:?}");
}

#[test]
fn diagnostics_and_checkpoint_round_trip() {
    let (d_r, d_s) = toy_sets(12);
    let cfg = TrainingConfig { n_train_steps: 20, batch_size: 8, ..ToySettings::default().train };
    let out = adversarial_train(&d_r, &d_s, &toy_specs(5).unwrap(), &cfg).unwrap();
    let mut buf = Vec::new();
    write_diagnostics_csv(&out.diagnostics, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,L_s,L_c,d_hat_proxy\n0,"));
    assert_eq!(text.lines().count(), 21);
    let mut buf = Vec::new();
    out.classifier.write_checkpoint(&mut buf).unwrap();
    let back = NetClassifier::read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back, out.classifier);
}

#[test]
fn fine_tune_without_phase_two_is_synthetic_only() {
    let (d_r, d_s) = toy_sets(13);
    let spec = NetworkSpec::new(vec![2, 8, 2], HiddenActivation::Relu, OutputActivation::Softmax).unwrap();
    let cfg = FineTuneConfig { pretrain_steps: 200, finetune_steps: 0, batch_size: 16, lr: 1e-2, ..FineTuneConfig::default() };
    let a = fine_tune_baseline(&d_s, &d_r, &spec, &cfg).unwrap();
    let empty = d_r.subset(&[]).unwrap();
    let b = fine_tune_baseline(&d_s, &empty, &spec, &cfg).unwrap();
    assert_eq!(a, b);
    let c = fine_tune_baseline(&d_s, &d_r, &spec, &FineTuneConfig { finetune_steps: 50, ..cfg }).unwrap();
    assert_ne!(a, c);
    // Fine-tuning on true-distribution rows should pull accuracy up.
    let toy = ToyGaussian::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let test = toy.sample(false, 4000, &mut rng).unwrap();
    let big_r = toy.sample(false, 400, &mut rng).unwrap();
    let tuned = fine_tune_baseline(&d_s, &big_r, &spec, &FineTuneConfig { finetune_steps: 500, ..cfg }).unwrap();
    assert!(accuracy(&tuned, &test.features, &test.labels).unwrap() > accuracy(&a, &test.features, &test.labels).unwrap());
}

/// Oracle labels, sample-mean Gaussian fit with pooled covariance.
struct GaussianProblem {
    truth: Vec<usize>,
    n_classes: usize,
}

impl HybridProblem for GaussianProblem {
    type Estimate = (Vec<DVector<f64>>, DMatrix<f64>);

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn label(&self, _raw: &DMatrix<f64>) -> hyphy_core::Result<Vec<usize>> {
        Ok(self.truth.clone())
    }

    fn estimate(&self, d: &LabeledDataset) -> hyphy_core::Result<Self::Estimate> {
        let means: Vec<DVector<f64>> = (0..self.n_classes)
            .map(|c| {
                let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
                d.features.select_columns(&idx).column_mean()
            })
            .collect();
        let mut cov = DMatrix::zeros(d.dim(), d.dim());
        for i in 0..d.len() {
            let r = d.features.column(i) - &means[d.labels[i]];
            cov += &r * r.transpose();
        }
        Ok((means, cov / d.len() as f64))
    }

    fn samplers(&self, e: &Self::Estimate) -> hyphy_core::Result<Vec<Box<dyn ClassSampler>>> {
        e.0.iter().map(|m| Ok(Box::new(GaussianSampler::new(m.clone(), &e.1)?) as Box<dyn ClassSampler>)).collect()
    }
}

#[test]
fn pipeline_with_oracle_parameters() {
    let toy = ToyGaussian::default();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let d_r = toy.sample(false, 200, &mut rng).unwrap();
    let test = toy.sample(false, 4000, &mut rng).unwrap();
    let problem = GaussianProblem { truth: d_r.labels.clone(), n_classes: 2 };
    let cfg = TrainingConfig { n_synthetic: 2000, n_train_steps: 1500, ..ToySettings::default().train };
    let out = run_hyphylearn(&problem, &d_r.features, &toy_specs(20).unwrap(), &cfg).unwrap();
    assert_eq!(out.synthetic.len(), 2000);
    assert_eq!(out.labeled.prior_estimates, d_r.prior_estimates);
    assert!(accuracy(&out.classifier, &test.features, &test.labels).unwrap() > 0.97);

    let single = GaussianProblem { truth: vec![0; 200], n_classes: 1 };
    let out = run_hyphylearn(&single, &d_r.features, &toy_specs(20).unwrap(), &cfg).unwrap();
    assert_eq!(out.classifier.predict(&test.features).unwrap(), vec![0; 4000]);
}
