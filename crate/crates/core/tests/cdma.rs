use hyphy_core::cdma::*;
use hyphy_core::C64;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> CdmaConfig {
    CdmaConfig::default()
}

fn noiseless() -> CdmaConfig {
    CdmaConfig { snr_db: f64::INFINITY, ..cfg() }
}

fn single(cfg: &CdmaConfig, delay: f64, gain: C64) -> UserChannel {
    UserChannel { amplitude: C64::new(1.0, 0.0), offset: 0.0, path_gains: vec![gain], path_delays: vec![delay] }
        .tap(|u| u.validate(cfg).unwrap())
}

trait Tap: Sized {
    fn tap(self, f: impl FnOnce(&Self)) -> Self {
        f(&self);
        self
    }
}
impl<T> Tap for T {}

#[test]
fn rc_pulse_support_and_peak() {
    let c = cfg();
    assert_eq!(rc_pulse(-1e-9, c.t_c, c.rolloff), 0.0);
    assert_eq!(rc_pulse(8.0 * c.t_c, c.t_c, c.rolloff), 0.0);
    let peak = rc_pulse(4.0 * c.t_c, c.t_c, c.rolloff);
    assert!((peak - 1.0).abs() < 1e-12);
    for i in 0..800 {
        assert!(rc_pulse(i as f64 * c.t_c / 100.0, c.t_c, c.rolloff) <= peak);
    }
    // Zero crossings at whole chips away from the centre.
    for n in 1..4 {
        assert!(rc_pulse((4.0 + n as f64) * c.t_c, c.t_c, c.rolloff).abs() < 1e-12);
    }
}

/// Relative L2 distance between `T_c` times the RC samples on
/// `[0, 8 T_c)` and the discrete self-convolution of `s` sampled on
/// `[c - w, c + w]` chips around its centre `c`.
fn self_convolution_error(s: impl Fn(f64) -> f64, half_width: f64, rolloff: f64) -> f64 {
    let du = 0.002;
    let n = (2.0 * half_width / du).round() as usize;
    let v: Vec<f64> = (0..=n).map(|i| s(-half_width + i as f64 * du)).collect();
    let (mut err, mut norm) = (0.0, 0.0);
    for t in 0..=2 * n {
        // Convolution time in chips relative to the RC centre.
        let x = -2.0 * half_width + t as f64 * du;
        if !(-4.0..4.0).contains(&x) {
            continue;
        }
        let conv: f64 = (t.saturating_sub(n)..=t.min(n)).map(|i| v[i] * v[t - i] * du).sum();
        let rc = rc_pulse((x + 4.0) * 1e-3, 1e-3, rolloff);
        err += (conv - rc).powi(2);
        norm += rc * rc;
    }
    (err / norm).sqrt()
}

#[test]
fn rc_is_srrc_self_convolution() {
    let b = cfg().rolloff;
    let wide = self_convolution_error(|x| srrc_shape(x, b), 8.0, b);
    assert!(wide < 0.02, "relative L2 error {wide}");
    // The [0, 4 T_c] time limit keeps only two chips per side.
    let truncated = self_convolution_error(|x| srrc_pulse((x + 2.0) * 1e-3, 1e-3, b), 2.0, b);
    assert!(truncated > wide);
    assert_eq!(srrc_pulse(-1e-9, 1e-3, b), 0.0);
    assert_eq!(srrc_pulse(2e-3, 1e-3, b), srrc_shape(0.0, b));
}

#[test]
fn effective_pulse_linearity_and_superposition() {
    let c = cfg();
    let dt = c.sample_period();
    let g = effective_chip_pulse(&single(&c, 0.0, C64::new(1.0, 0.0)), &c).unwrap();
    for j in 0..c.g_len() {
        assert_eq!(g[j].re, rc_pulse((j + 1) as f64 * dt, c.t_c, c.rolloff));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let uc = random_channels(&c, &mut rng).unwrap().remove(0);
    let g1 = effective_chip_pulse(&uc, &c).unwrap();
    let g2 = effective_chip_pulse(&UserChannel { amplitude: uc.amplitude * 2.0, ..uc.clone() }, &c).unwrap();
    assert_eq!(g2, g1.map(|v| v * 2.0));
    let sum = (0..uc.path_gains.len())
        .map(|l| {
            let one = UserChannel { path_gains: vec![uc.path_gains[l]], path_delays: vec![uc.path_delays[l]], ..uc.clone() };
            effective_chip_pulse(&one, &c).unwrap()
        })
        .fold(DVector::zeros(c.g_len()), |a, b| a + b);
    assert!((sum - g1).camax() < 1e-12);
    let late = UserChannel { offset: c.t_b(), ..uc };
    assert!(effective_chip_pulse(&late, &c).is_err());
}

#[test]
fn code_matrix_matches_waveform_sampling() {
    let c = cfg();
    let dt = c.sample_period();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let codes = SpreadingCodes::random_short(1, c.n_gain, &mut rng).unwrap();
        let uc = random_channels(&c, &mut rng).unwrap().remove(0);
        let g = effective_chip_pulse(&uc, &c).unwrap();
        let p = rng.random_range(2..50i64);
        for lag in 0..3 {
            let cm = code_matrix(&codes, 0, p, lag, &c).unwrap();
            assert!(cm.row_iter().all(|r| r.iter().filter(|v| **v != 0.0).count() <= c.n_gain));
            let fast = cm.map(|v| C64::new(v, 0.0)) * &g;
            let code = codes.code(0, p - lag as i64);
            for r in 0..c.frame_len() {
                let t = r as f64 * dt + lag as f64 * c.t_b();
                let direct: C64 = code
                    .iter()
                    .enumerate()
                    .map(|(n, &b)| {
                        uc.path_gains
                            .iter()
                            .zip(&uc.path_delays)
                            .map(|(a, d)| uc.amplitude * a * rc_pulse(t - n as f64 * c.t_c - uc.offset - d, c.t_c, c.rolloff))
                            .sum::<C64>()
                            * b as f64
                    })
                    .sum();
                assert!((fast[r] - direct).norm() < 1e-9, "lag {lag} row {r}");
            }
        }
    }
    assert!(code_matrix(&SpreadingCodes::gold(1, 32).unwrap(), 0, 0, 3, &c).is_err());
}

#[test]
fn gold_codes_have_three_valued_cross_correlation() {
    let codes = SpreadingCodes::gold(6, 31).unwrap();
    for a in 0..6 {
        for b in a + 1..6 {
            for shift in 0..31 {
                let x: i32 = (0..31).map(|i| (codes.code(a, 0)[i] * codes.code(b, 0)[(i + shift) % 31]) as i32).sum();
                assert!([-1, -9, 7].contains(&x), "codes {a},{b} shift {shift}: {x}");
            }
        }
    }
    assert_eq!(SpreadingCodes::gold(3, 32).unwrap().n_gain(), 32);
}

#[test]
fn noiseless_scene_is_the_compact_model() {
    let c = CdmaConfig { k_users: 1, ..noiseless() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let codes = SpreadingCodes::gold(1, 32).unwrap();
    let ch = random_channels(&c, &mut rng).unwrap();
    let bits = random_bits(1, 12, &mut rng);
    let scene = synthesize_scene(&c, &codes, &ch, &bits, &mut rng).unwrap();
    assert_eq!(scene.noise_var, 0.0);
    for p in 0..12 {
        let a = frame_matrix(&codes, &bits, p as i64, &c).unwrap();
        let y = a.map(|v| C64::new(v, 0.0)) * &scene.g_true[0];
        assert!((y - &scene.frames[p]).camax() < 1e-12);
    }
}

#[test]
fn scene_noise_matches_snr() {
    let c = CdmaConfig { snr_db: 4.0, ..cfg() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let codes = SpreadingCodes::gold(3, 32).unwrap();
    let ch = random_channels(&c, &mut rng).unwrap();
    let bits = random_bits(3, 1000, &mut rng);
    let scene = synthesize_scene(&c, &codes, &ch, &bits, &mut rng).unwrap();
    let sig = Signatures::new(&codes, &scene.g_true, &c).unwrap();
    let energy = (0..3).map(|k| sig.bit_energy(k)).sum::<f64>() / 3.0;
    assert!((scene.noise_var - energy / 10f64.powf(0.4)).abs() < 1e-12 * energy);
    let n = (0..1000).map(|p| (&scene.frames[p] - sig.frame(&bits, p as i64)).norm_squared()).sum::<f64>()
        / (1000 * c.frame_len()) as f64;
    assert!((n / scene.noise_var - 1.0).abs() < 0.05, "empirical {n} vs {}", scene.noise_var);
}

fn training_scene(c: &CdmaConfig, n: usize, seed: u64) -> (CdmaScene, SpreadingCodes, Vec<UserChannel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = SpreadingCodes::gold(c.k_users, c.n_gain).unwrap();
    let ch = random_channels(c, &mut rng).unwrap();
    let bits = random_bits(c.k_users, n, &mut rng);
    (synthesize_scene(c, &codes, &ch, &bits, &mut rng).unwrap(), codes, ch)
}

#[test]
fn ls_is_exact_without_noise() {
    let c = noiseless();
    let (scene, codes, _) = training_scene(&c, 40, 21);
    let est = ls_channel_estimate(&scene.frames, &codes, &scene.true_bits, 40, &c).unwrap();
    for k in 0..3 {
        assert!((&est.g[k] - &scene.g_true[k]).camax() < 1e-8);
    }
    assert!(est.noise_var < 1e-20);
    let scaled: Vec<DVector<C64>> = scene.frames.iter().map(|y| y * C64::new(0.0, 3.0)).collect();
    let est2 = ls_channel_estimate(&scaled, &codes, &scene.true_bits, 40, &c).unwrap();
    assert!((&est2.g[1] - &est.g[1] * C64::new(0.0, 3.0)).camax() < 1e-8);
    assert!(ls_channel_estimate(&scene.frames, &codes, &scene.true_bits, 1, &c).is_err());
}

#[test]
fn ls_residual_is_orthogonal_to_the_model() {
    let c = CdmaConfig { snr_db: 3.0, ..cfg() };
    let (scene, codes, _) = training_scene(&c, 40, 22);
    let est = ls_channel_estimate(&scene.frames, &codes, &scene.true_bits, 40, &c).unwrap();
    let x = DVector::from_iterator(3 * c.g_len(), est.g.iter().flat_map(|g| g.iter().copied()));
    let mut grad = DVector::<C64>::zeros(x.len());
    let mut aty = DVector::<C64>::zeros(x.len());
    for (p, y) in scene.frames.iter().enumerate() {
        let a = frame_matrix(&codes, &scene.true_bits, p as i64, &c).unwrap().map(|v| C64::new(v, 0.0));
        grad += a.adjoint() * (y - &a * &x);
        aty += a.adjoint() * y;
    }
    assert!(grad.norm() < 1e-8 * aty.norm());
    assert!((est.noise_var / scene.noise_var - 1.0).abs() < 0.15);
}

#[test]
fn single_path_recovery_on_the_fine_grid() {
    let c = noiseless();
    let dt = c.sample_period();
    for (i, frac) in [(10usize, 0i32), (23, 3), (40, -7), (57, 9)] {
        let tau = (i as f64 + frac as f64 / 10.0) * dt;
        let g = effective_chip_pulse(&single(&c, tau, C64::from_polar(2.0, 0.3)), &c).unwrap();
        let pe = extract_single_path(&g, &c).unwrap();
        assert!((pe.delay - tau).abs() <= dt / 10.0 + 1e-15, "delay {} vs {tau}", pe.delay);
        assert!((pe.amplitude - 2.0).abs() / 2.0 < 0.02);
        assert!((pe.phase - 0.3).abs() < 0.05);

        let rot = extract_single_path(&g.map(|v| v * C64::from_polar(1.0, 0.9)), &c).unwrap();
        assert_eq!(rot.delay, pe.delay);
        assert!((rot.amplitude - pe.amplitude).abs() < 1e-12);
        assert!((rot.phase - pe.phase - 0.9).abs() < 1e-12);
        let big = extract_single_path(&g.map(|v| v * 3.5), &c).unwrap();
        assert_eq!(big.delay, pe.delay);
        assert!((big.amplitude - 3.5 * pe.amplitude).abs() < 1e-12);
        assert!((big.phase - pe.phase).abs() < 1e-12);
    }
    assert!(extract_single_path(&DVector::zeros(c.g_len()), &c).is_err());
}

#[test]
fn multipath_extraction_separable_channel() {
    let c = noiseless();
    let dt = c.sample_period();
    let tc = c.t_c;
    let uc = UserChannel {
        amplitude: C64::new(1.0, 0.0),
        offset: 6.3 * tc,
        path_gains: vec![C64::from_polar(1.0, 0.4), C64::from_polar(0.55, -1.2), C64::from_polar(0.316, 2.5)],
        path_delays: vec![0.0, 2.6 * tc, 5.2 * tc],
    };
    let g = effective_chip_pulse(&uc, &c).unwrap();
    let paths = extract_multipath(&g, 3, &c).unwrap();
    for (pe, (a, d)) in paths.iter().zip(uc.path_gains.iter().zip(&uc.path_delays)) {
        assert!((pe.delay - uc.offset - d).abs() <= dt / 10.0 + 1e-12, "delay {} vs {}", pe.delay, uc.offset + d);
        assert!((pe.amplitude - a.norm()).abs() / a.norm() < 0.10);
    }
    let rebuilt = effective_chip_pulse(&paths_to_channel(&paths, &c), &c).unwrap();
    assert!((&g - rebuilt).norm_squared() < 0.05 * g.norm_squared());

    let one = extract_multipath(&g, 1, &c).unwrap();
    assert_eq!(one[0], extract_single_path(&g, &c).unwrap());
}

#[test]
fn corrupt_codes_flip_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let codes = SpreadingCodes::random_short(5, 20_000, &mut rng).unwrap();
    assert_eq!(corrupt_codes(&codes, 0.0, &mut rng).unwrap(), codes);
    let all = corrupt_codes(&codes, 1.0, &mut rng).unwrap();
    assert!(all.chips.iter().flatten().flatten().zip(codes.chips.iter().flatten().flatten()).all(|(a, b)| a == &-b));
    let some = corrupt_codes(&codes, 0.2, &mut rng).unwrap();
    let flips = some.chips.iter().flatten().flatten().zip(codes.chips.iter().flatten().flatten()).filter(|(a, b)| a != b).count();
    assert!((flips as f64 / 1e5 - 0.2).abs() < 0.01);
    assert!(corrupt_codes(&codes, 1.5, &mut rng).is_err());
}

/// Independent enumeration: recursive over users, keeping the first
/// strictly smaller distance.
fn brute_force(y: &DVector<C64>, offset: &DVector<C64>, s: &[DVector<C64>]) -> Vec<i8> {
    fn rec(i: usize, acc: Vec<i8>, s: &[DVector<C64>], r: &DVector<C64>, best: &mut (Vec<i8>, f64)) {
        if i == s.len() {
            let mut e = r.clone();
            for (b, v) in acc.iter().zip(s) {
                e -= v * C64::new(*b as f64, 0.0);
            }
            let d = e.norm_squared();
            if d < best.1 {
                *best = (acc, d);
            }
            return;
        }
        for b in [-1i8, 1] {
            let mut next = acc.clone();
            next.push(b);
            rec(i + 1, next, s, r, best);
        }
    }
    let mut best = (vec![], f64::INFINITY);
    rec(0, vec![], s, &(y - offset), &mut best);
    best.0
}

#[test]
fn map_matches_brute_force() {
    let c = CdmaConfig { snr_db: 0.0, ..cfg() };
    let (scene, codes, _) = training_scene(&c, 110, 31);
    let sig = Signatures::new(&codes, &scene.g_true, &c).unwrap();
    for p in 2..102 {
        let y = &scene.frames[p];
        let offset = sig.frame(&scene.true_bits.iter().map(|u| u[..p].to_vec()).collect::<Vec<_>>(), p as i64);
        let cols: Vec<DVector<C64>> = (0..3).map(|k| sig.get(k, p as i64, 0).clone()).collect();
        assert_eq!(map_detect_exhaustive(y, &offset, &cols).unwrap(), brute_force(y, &offset, &cols));
    }
    let z = DVector::<C64>::zeros(4);
    assert!(map_detect_exhaustive(&z, &z, &vec![z.clone(); 13]).is_err());
}

#[test]
fn map_recovers_noiseless_bits() {
    for k in 1..=5 {
        let c = CdmaConfig { k_users: k, ..noiseless() };
        let (scene, codes, _) = training_scene(&c, 30, 40 + k as u64);
        let sig = Signatures::new(&codes, &scene.g_true, &c).unwrap();
        for p in scene.decision_frames() {
            let b = map_detect_window(&scene.window(p).unwrap(), p, &sig, &scene.true_bits).unwrap();
            assert_eq!(b, scene.true_bits.iter().map(|u| u[p]).collect::<Vec<_>>());
        }
    }
}

fn ber(scene: &CdmaScene, det: impl Fn(usize) -> Vec<i8>) -> f64 {
    let mut errs = 0;
    let mut n = 0;
    for p in scene.decision_frames() {
        let b = det(p);
        for (k, u) in scene.true_bits.iter().enumerate() {
            errs += (b[k] != u[p]) as usize;
            n += 1;
        }
    }
    errs as f64 / n as f64
}

#[test]
fn mmse_single_user_noiseless_is_error_free() {
    let c = CdmaConfig { k_users: 1, ..noiseless() };
    let (scene, codes, _) = training_scene(&c, 1003, 50);
    let det = MmseDetector::new(&codes, &scene.g_true, 0.0, &c).unwrap();
    assert_eq!(ber(&scene, |p| det.detect(&scene.window(p).unwrap(), p).unwrap()), 0.0);
    assert_eq!(mmse_detect(&scene, 7, &scene.g_true, 0.0, &codes, &c).unwrap()[0], scene.true_bits[0][7]);
}

#[test]
fn mismatch_hurts_mmse_and_map_beats_mmse() {
    let c = CdmaConfig { snr_db: 0.0, ..cfg() };
    let (scene, codes, _) = training_scene(&c, 4000, 60);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let bad = corrupt_codes(&codes, 0.25, &mut rng).unwrap();
    let perfect = MmseDetector::new(&codes, &scene.g_true, scene.noise_var, &c).unwrap();
    let wrong = MmseDetector::new(&bad, &scene.g_true, scene.noise_var, &c).unwrap();
    let ber_perfect = ber(&scene, |p| perfect.detect(&scene.window(p).unwrap(), p).unwrap());
    let ber_wrong = ber(&scene, |p| wrong.detect(&scene.window(p).unwrap(), p).unwrap());
    assert!(ber_wrong > ber_perfect, "{ber_wrong} vs {ber_perfect}");

    let sig = Signatures::new(&codes, &scene.g_true, &c).unwrap();
    let ber_map = ber(&scene, |p| map_detect_window(&scene.window(p).unwrap(), p, &sig, &scene.true_bits).unwrap());
    assert!(ber_map <= ber_perfect, "MAP {ber_map} vs MMSE {ber_perfect}");
}

#[test]
fn scene_directory_round_trip() {
    let c = cfg();
    let (scene, codes, ch) = training_scene(&c, 8, 70);
    let dir = tempfile::tempdir().unwrap();
    scene.write_dir(dir.path(), &codes, &ch).unwrap();
    let (back, codes2, ch2) = CdmaScene::read_dir(dir.path(), &c).unwrap();
    assert_eq!(codes2, codes);
    assert_eq!(ch2, ch);
    assert_eq!(back.frames, scene.frames);
    assert_eq!(back.true_bits, scene.true_bits);
    assert_eq!(back.noise_var, scene.noise_var);
    assert_eq!(back.g_true, scene.g_true);
}

#[test]
fn class_encoding_round_trip() {
    for class in 0..32 {
        assert_eq!(bits_to_class(&class_to_bits(class, 5)), class);
    }
}
