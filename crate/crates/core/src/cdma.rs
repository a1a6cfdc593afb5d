//! Asynchronous DS-CDMA uplink: chip pulses, the compact frame model
//! `y(p) = A(p) g + n(p)`, least-squares CIR estimation, multipath
//! extraction from the CIR, and linear MMSE / exhaustive detectors.
//!
//! Time is sampled at `M / T_c`. Frame `p` holds the `M N` samples at
//! `p T_b + r T_c / M`, `r = 0..M N`. The effective chip pulse vector `g_k`
//! holds `g_k(j T_c / M)` for `j = 1..=M N + 8M - 1`.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::hyphylearn::{ClassSampler, HybridProblem, LabeledDataset};
use crate::linalg::{complex_normal, C64};
use crate::spoofing::complex_to_features;

#[derive(Clone, Debug, PartialEq)]
pub struct CdmaConfig {
    pub k_users: usize,
    /// Processing gain `N` (chips per bit).
    pub n_gain: usize,
    pub m_oversample: usize,
    pub n_packets: usize,
    pub l_paths: usize,
    /// Bit-energy to per-sample noise ratio. `+inf` means noiseless.
    pub snr_db: f64,
    /// Total spread of user amplitudes around the nominal one.
    pub nfr_db: f64,
    pub rho_mismatch: f64,
    pub t_c: f64,
    pub rolloff: f64,
    /// Largest path delay relative to the user offset, in chips.
    pub max_delay_spread_chips: f64,
    pub nominal_amplitude: f64,
}

impl Default for CdmaConfig {
    fn default() -> Self {
        Self {
            k_users: 3,
            n_gain: 32,
            m_oversample: 2,
            n_packets: 200,
            l_paths: 3,
            snr_db: 8.0,
            nfr_db: 10.0,
            rho_mismatch: 0.0,
            t_c: 1e-3,
            rolloff: 0.22,
            max_delay_spread_chips: 6.0,
            nominal_amplitude: 2.0,
        }
    }
}

impl CdmaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.k_users == 0 || self.n_gain == 0 || self.n_packets == 0 || self.l_paths == 0 {
            return bad("user, gain, packet and path counts must be positive".into());
        }
        if self.m_oversample != 2 {
            return bad(format!("oversampling factor {} (only 2 is supported)", self.m_oversample));
        }
        if !(0.0..=1.0).contains(&self.rho_mismatch) {
            return bad(format!("mismatch {} outside [0, 1]", self.rho_mismatch));
        }
        if !(self.t_c > 0.0) || !(0.0..=1.0).contains(&self.rolloff) || self.snr_db.is_nan() || !(self.nfr_db >= 0.0) {
            return bad("chip interval, roll-off, SNR or NFR out of range".into());
        }
        if !(self.max_delay_spread_chips >= 0.0) || self.max_delay_spread_chips >= self.n_gain as f64 {
            return bad(format!("delay spread {} chips for {} chips per bit", self.max_delay_spread_chips, self.n_gain));
        }
        Ok(())
    }

    /// Samples per frame, `M N`.
    pub fn frame_len(&self) -> usize {
        self.m_oversample * self.n_gain
    }

    /// Length of `g_k`, `M N + 8M - 1`.
    pub fn g_len(&self) -> usize {
        self.m_oversample * self.n_gain + 8 * self.m_oversample - 1
    }

    pub fn sample_period(&self) -> f64 {
        self.t_c / self.m_oversample as f64
    }

    pub fn t_b(&self) -> f64 {
        self.n_gain as f64 * self.t_c
    }

    pub fn n_classes(&self) -> usize {
        1 << self.k_users
    }

    /// Per-sample noise power for the configured SNR and the users' mean
    /// bit energy.
    pub fn noise_var(&self, mean_bit_energy: f64) -> f64 {
        if self.snr_db == f64::INFINITY {
            0.0
        } else {
            mean_bit_energy / 10f64.powf(self.snr_db / 10.0)
        }
    }
}

/// Raised-cosine chip waveform centred at `4 T_c`, time-limited to
/// `[0, 8 T_c)`.
pub fn rc_pulse(t: f64, t_c: f64, rolloff: f64) -> f64 {
    if !(0.0..8.0 * t_c).contains(&t) {
        return 0.0;
    }
    let x = (t - 4.0 * t_c) / t_c;
    let d = 2.0 * rolloff * x;
    if (1.0 - d * d).abs() < 1e-10 {
        return PI / 4.0 * sinc(1.0 / (2.0 * rolloff));
    }
    sinc(x) * (PI * rolloff * x).cos() / (1.0 - d * d)
}

/// Square-root raised cosine centred at `2 T_c`, time-limited to
/// `[0, 4 T_c]`, scaled so that its self-convolution approximates
/// `T_c` times [`rc_pulse`].
pub fn srrc_pulse(t: f64, t_c: f64, rolloff: f64) -> f64 {
    if !(0.0..=4.0 * t_c).contains(&t) {
        return 0.0;
    }
    srrc_shape((t - 2.0 * t_c) / t_c, rolloff)
}

/// Untruncated unit-energy SRRC at `x` chips from its centre.
pub fn srrc_shape(x: f64, rolloff: f64) -> f64 {
    let b = rolloff;
    if x.abs() < 1e-12 {
        return 1.0 - b + 4.0 * b / PI;
    }
    if b > 0.0 && (4.0 * b * x.abs() - 1.0).abs() < 1e-10 {
        let a = PI / (4.0 * b);
        return b / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    ((PI * x * (1.0 - b)).sin() + 4.0 * b * x * (PI * x * (1.0 + b)).cos()) / (PI * x * (1.0 - (4.0 * b * x).powi(2)))
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Complex amplitude, timing offset and multipath of one user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserChannel {
    pub amplitude: C64,
    /// Seconds.
    pub offset: f64,
    pub path_gains: Vec<C64>,
    /// Seconds, relative to `offset`.
    pub path_delays: Vec<f64>,
}

impl UserChannel {
    pub fn validate(&self, cfg: &CdmaConfig) -> Result<()> {
        if self.path_gains.len() != self.path_delays.len() || self.path_gains.is_empty() {
            return Err(Error::Dimension(format!(
                "{} path gains for {} delays",
                self.path_gains.len(),
                self.path_delays.len()
            )));
        }
        let spread = self.path_delays.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let low = self.path_delays.iter().cloned().fold(f64::INFINITY, f64::min);
        if self.offset < 0.0 || low < 0.0 || self.offset + spread >= cfg.t_b() {
            return Err(Error::InvalidParameter(format!(
                "delays [{}, {}] s outside [0, T_b = {})",
                self.offset + low,
                self.offset + spread,
                cfg.t_b()
            )));
        }
        Ok(())
    }
}

/// `g_k(j T_c / M)` for `j = 1..=M N + 8M - 1`.
pub fn effective_chip_pulse(uc: &UserChannel, cfg: &CdmaConfig) -> Result<DVector<C64>> {
    uc.validate(cfg)?;
    let dt = cfg.sample_period();
    Ok(DVector::from_fn(cfg.g_len(), |i, _| {
        let t = (i + 1) as f64 * dt;
        uc.path_gains
            .iter()
            .zip(&uc.path_delays)
            .map(|(a, d)| uc.amplitude * a * rc_pulse(t - uc.offset - d, cfg.t_c, cfg.rolloff))
            .sum()
    }))
}

/// Draws users with amplitudes `A 10^{u/20}`, `u ~ U(-nfr/2, nfr/2)` dB,
/// CN(0, 1/L) path gains, a uniform offset and uniform path delays (the
/// first path at zero delay).
pub fn random_channels<R: Rng + ?Sized>(cfg: &CdmaConfig, rng: &mut R) -> Result<Vec<UserChannel>> {
    cfg.validate()?;
    let spread = cfg.max_delay_spread_chips * cfg.t_c;
    let scale = (1.0 / cfg.l_paths as f64).sqrt();
    Ok((0..cfg.k_users)
        .map(|_| {
            let u = (rng.random::<f64>() - 0.5) * cfg.nfr_db;
            let offset = rng.random::<f64>() * (cfg.t_b() - spread) * (1.0 - 1e-9);
            let mut delays: Vec<f64> = (0..cfg.l_paths).map(|l| if l == 0 { 0.0 } else { rng.random::<f64>() * spread }).collect();
            delays.sort_by(f64::total_cmp);
            UserChannel {
                amplitude: C64::new(cfg.nominal_amplitude * 10f64.powf(u / 20.0), 0.0),
                offset,
                path_gains: (0..cfg.l_paths).map(|_| complex_normal(rng) * scale).collect(),
                path_delays: delays,
            }
        })
        .collect())
}

/// Antipodal chips `chips[k][c][n]`. Bit `p` of user `k` is spread with
/// period `c = p mod chips[k].len()`; one period means short codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpreadingCodes {
    pub chips: Vec<Vec<Vec<i8>>>,
}

impl SpreadingCodes {
    pub fn new(chips: Vec<Vec<Vec<i8>>>) -> Result<Self> {
        let n = chips.first().and_then(|u| u.first()).map(Vec::len).unwrap_or(0);
        if n == 0 {
            return Err(Error::EmptyInput("no spreading codes".into()));
        }
        for u in &chips {
            if u.is_empty() || u.iter().any(|c| c.len() != n || c.iter().any(|&v| v != 1 && v != -1)) {
                return Err(Error::InvalidParameter("codes must be antipodal with one common length".into()));
            }
        }
        Ok(Self { chips })
    }

    pub fn n_users(&self) -> usize {
        self.chips.len()
    }

    pub fn n_gain(&self) -> usize {
        self.chips[0][0].len()
    }

    pub fn code(&self, k: usize, p: i64) -> &[i8] {
        let per = &self.chips[k];
        &per[p.rem_euclid(per.len() as i64) as usize]
    }

    /// Common code period over users (`lcm` of the per-user periods).
    pub fn period(&self) -> usize {
        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 { a } else { gcd(b, a % b) }
        }
        self.chips.iter().map(Vec::len).fold(1, |acc, l| acc / gcd(acc, l) * l)
    }

    pub fn random_short<R: Rng + ?Sized>(k_users: usize, n_gain: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..k_users).map(|_| vec![(0..n_gain).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()]).collect())
    }

    /// Short Gold codes from the degree-5 preferred pair. Length 32 appends
    /// a `+1` chip to each length-31 sequence.
    pub fn gold(k_users: usize, n_gain: usize) -> Result<Self> {
        if n_gain != 31 && n_gain != 32 {
            return Err(Error::InvalidParameter(format!("Gold codes have 31 or 32 chips, not {n_gain}")));
        }
        if k_users > 33 {
            return Err(Error::InvalidParameter(format!("{k_users} users exceed the 33-code Gold family")));
        }
        let mseq = |taps: &[usize]| {
            let mut s = vec![1u8; 5];
            while s.len() < 31 {
                let n = s.len() - 5;
                // s[n + 5] = sum over taps t < 5 of s[n + t], plus s[n].
                let v = taps.iter().fold(s[n], |acc, &t| acc ^ s[n + t]);
                s.push(v);
            }
            s
        };
        let u = mseq(&[2]);
        let v = mseq(&[2, 3, 4]);
        let chips = (0..k_users)
            .map(|k| {
                let seq: Vec<u8> = match k {
                    0 => u.clone(),
                    1 => v.clone(),
                    _ => (0..31).map(|i| u[i] ^ v[(i + k - 2) % 31]).collect(),
                };
                let mut c: Vec<i8> = seq.iter().map(|&b| if b == 0 { 1 } else { -1 }).collect();
                if n_gain == 32 {
                    c.push(1);
                }
                vec![c]
            })
            .collect();
        Self::new(chips)
    }
}

/// Flips every chip independently with probability `rho`.
pub fn corrupt_codes<R: Rng + ?Sized>(codes: &SpreadingCodes, rho: f64, rng: &mut R) -> Result<SpreadingCodes> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!("flip probability {rho} outside [0, 1]")));
    }
    let chips = codes
        .chips
        .iter()
        .map(|u| u.iter().map(|c| c.iter().map(|&v| if rng.random::<f64>() < rho { -v } else { v }).collect()).collect())
        .collect();
    Ok(SpreadingCodes { chips })
}

/// `C_{k,p-lag}(p)`: maps `g_k` to the samples, inside frame `p`, of the
/// waveform carrying bit `p - lag`. Row `r` picks `g` index
/// `j = r + (lag N - n) M` for every chip `n`.
pub fn code_matrix(codes: &SpreadingCodes, k: usize, p: i64, lag: usize, cfg: &CdmaConfig) -> Result<DMatrix<f64>> {
    if lag > 2 {
        return Err(Error::InvalidParameter(format!("lag {lag} (must be 0, 1 or 2)")));
    }
    if k >= codes.n_users() || codes.n_gain() != cfg.n_gain {
        return Err(Error::Dimension(format!("user {k} of {} with {} chips", codes.n_users(), codes.n_gain())));
    }
    let code = codes.code(k, p - lag as i64);
    let (mn, gl, m) = (cfg.frame_len(), cfg.g_len(), cfg.m_oversample as i64);
    let mut c = DMatrix::zeros(mn, gl);
    for r in 0..mn as i64 {
        for (n, &beta) in code.iter().enumerate() {
            let j = r + (lag as i64 * cfg.n_gain as i64 - n as i64) * m;
            if (1..=gl as i64).contains(&j) {
                c[(r as usize, j as usize - 1)] += beta as f64;
            }
        }
    }
    Ok(c)
}

/// Antipodal bits `bits[k][p]`; indices outside the packet read as 0.
fn bit(bits: &[Vec<i8>], k: usize, q: i64) -> f64 {
    if q < 0 {
        return 0.0;
    }
    bits[k].get(q as usize).map_or(0.0, |&b| b as f64)
}

pub fn random_bits<R: Rng + ?Sized>(k_users: usize, n: usize, rng: &mut R) -> Vec<Vec<i8>> {
    (0..k_users).map(|_| (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()).collect()
}

/// Precomputed `C_{k,q}(q + lag) g_k` for every user, code phase and lag.
#[derive(Clone, Debug)]
pub struct Signatures {
    sig: Vec<Vec<[DVector<C64>; 3]>>,
    frame_len: usize,
}

impl Signatures {
    pub fn new(codes: &SpreadingCodes, g: &[DVector<C64>], cfg: &CdmaConfig) -> Result<Self> {
        if g.len() != codes.n_users() || g.iter().any(|v| v.len() != cfg.g_len()) {
            return Err(Error::Dimension(format!("{} pulse vectors for {} users", g.len(), codes.n_users())));
        }
        let sig = (0..codes.n_users())
            .map(|k| {
                let gk = &g[k];
                (0..codes.chips[k].len() as i64)
                    .map(|c| {
                        let one = |lag: usize| -> Result<DVector<C64>> {
                            Ok(code_matrix(codes, k, c + lag as i64, lag, cfg)?.map(|v| C64::new(v, 0.0)) * gk)
                        };
                        Ok([one(0)?, one(1)?, one(2)?])
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sig, frame_len: cfg.frame_len() })
    }

    pub fn n_users(&self) -> usize {
        self.sig.len()
    }

    /// Samples of bit `q`'s waveform in frame `q + lag`.
    pub fn get(&self, k: usize, q: i64, lag: usize) -> &DVector<C64> {
        let per = &self.sig[k];
        &per[q.rem_euclid(per.len() as i64) as usize][lag]
    }

    /// Noise-free frame `p` for the given bits.
    pub fn frame(&self, bits: &[Vec<i8>], p: i64) -> DVector<C64> {
        let mut y = DVector::zeros(self.frame_len);
        for k in 0..self.n_users() {
            for lag in 0..3 {
                let b = bit(bits, k, p - lag as i64);
                if b != 0.0 {
                    y.axpy(C64::new(b, 0.0), self.get(k, p - lag as i64, lag), C64::new(1.0, 0.0));
                }
            }
        }
        y
    }

    /// Sample-domain energy of one bit waveform of user `k`.
    pub fn bit_energy(&self, k: usize) -> f64 {
        (0..3).map(|lag| self.get(k, 0, lag).norm_squared()).sum()
    }

    /// Window `[y(p); y(p+1)]` signature of bit `q`, zero where it does not
    /// reach.
    pub fn window(&self, k: usize, q: i64, p: i64) -> DVector<C64> {
        let mn = self.frame_len;
        let mut s = DVector::zeros(2 * mn);
        for (half, f) in [p, p + 1].into_iter().enumerate() {
            let lag = f - q;
            if (0..3).contains(&lag) {
                s.rows_mut(half * mn, mn).copy_from(self.get(k, q, lag as usize));
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct CdmaScene {
    pub frames: Vec<DVector<C64>>,
    pub true_bits: Vec<Vec<i8>>,
    pub g_true: Vec<DVector<C64>>,
    pub noise_var: f64,
}

impl CdmaScene {
    /// Stacked window `[y(p); y(p+1)]`.
    pub fn window(&self, p: usize) -> Result<DVector<C64>> {
        if p + 1 >= self.frames.len() {
            return Err(Error::InvalidParameter(format!("window at {p} needs frame {}", p + 1)));
        }
        let mn = self.frames[p].len();
        let mut w = DVector::zeros(2 * mn);
        w.rows_mut(0, mn).copy_from(&self.frames[p]);
        w.rows_mut(mn, mn).copy_from(&self.frames[p + 1]);
        Ok(w)
    }

    /// Frames whose bits can be decided from a full window after the cold
    /// start, `2..P-1`.
    pub fn decision_frames(&self) -> std::ops::Range<usize> {
        2..self.frames.len().saturating_sub(1).max(2)
    }

    /// Real features (re then im) of every decision window, one per column,
    /// and the matching class labels.
    pub fn window_dataset(&self) -> Result<(DMatrix<f64>, Vec<usize>)> {
        let frames: Vec<usize> = self.decision_frames().collect();
        if frames.is_empty() {
            return Err(Error::EmptyInput("scene too short for any decision window".into()));
        }
        let mut cols = Vec::with_capacity(frames.len());
        let mut labels = Vec::with_capacity(frames.len());
        for &p in &frames {
            cols.push(DVector::from_vec(complex_to_features(&self.window(p)?)));
            let b: Vec<i8> = self.true_bits.iter().map(|u| u[p]).collect();
            labels.push(bits_to_class(&b));
        }
        Ok((DMatrix::from_columns(&cols), labels))
    }

    /// Writes `frames.csv`, `bits.csv`, `codes.csv` and `channels.csv`.
    pub fn write_dir(&self, dir: &Path, codes: &SpreadingCodes, channels: &[UserChannel]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<fs::File>> { Ok(BufWriter::new(fs::File::create(dir.join(name))?)) };
        let mut f = open("frames.csv")?;
        writeln!(f, "# p, then re,im per sample; noise_var={:?}", self.noise_var)?;
        for (p, y) in self.frames.iter().enumerate() {
            let vals: Vec<String> = y.iter().flat_map(|c| [format!("{:?}", c.re), format!("{:?}", c.im)]).collect();
            writeln!(f, "{p},{}", vals.join(","))?;
        }
        let mut f = open("bits.csv")?;
        writeln!(f, "# user, then one antipodal bit per frame")?;
        for (k, b) in self.true_bits.iter().enumerate() {
            writeln!(f, "{k},{}", b.iter().map(i8::to_string).collect::<Vec<_>>().join(","))?;
        }
        let mut f = open("codes.csv")?;
        writeln!(f, "# user,period, then chips")?;
        for (k, per) in codes.chips.iter().enumerate() {
            for (c, chips) in per.iter().enumerate() {
                writeln!(f, "{k},{c},{}", chips.iter().map(i8::to_string).collect::<Vec<_>>().join(","))?;
            }
        }
        let mut f = open("channels.csv")?;
        writeln!(f, "# user,amp_re,amp_im,offset_s,path,gain_re,gain_im,delay_s")?;
        for (k, uc) in channels.iter().enumerate() {
            for (l, (a, d)) in uc.path_gains.iter().zip(&uc.path_delays).enumerate() {
                writeln!(
                    f,
                    "{k},{:?},{:?},{:?},{l},{:?},{:?},{:?}",
                    uc.amplitude.re, uc.amplitude.im, uc.offset, a.re, a.im, d
                )?;
            }
        }
        Ok(())
    }

    /// Reads frames and bits back from [`CdmaScene::write_dir`]; the true
    /// pulse vectors are rebuilt from `channels.csv`.
    pub fn read_dir(dir: &Path, cfg: &CdmaConfig) -> Result<(Self, SpreadingCodes, Vec<UserChannel>)> {
        let bad = |m: String| Error::Config(format!("scene directory: {m}"));
        let rows = |name: &str| -> Result<(Vec<String>, Vec<Vec<String>>)> {
            let file = fs::File::open(dir.join(name))?;
            let mut comments = vec![];
            let mut out = vec![];
            for line in BufReader::new(file).lines() {
                let line = line?;
                if let Some(c) = line.strip_prefix('#') {
                    comments.push(c.to_string());
                } else if !line.trim().is_empty() {
                    out.push(line.split(',').map(|s| s.trim().to_string()).collect());
                }
            }
            Ok((comments, out))
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
        let int = |s: &str| s.parse::<i64>().map_err(|_| bad(format!("bad integer {s:?}")));

        let (comments, frame_rows) = rows("frames.csv")?;
        let noise_var = comments
            .iter()
            .find_map(|c| c.split("noise_var=").nth(1))
            .ok_or_else(|| bad("missing noise_var".into()))
            .and_then(|s| num(s.trim()))?;
        let mut frames = vec![];
        for r in &frame_rows {
            let v = r[1..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            frames.push(DVector::from_iterator(v.len() / 2, v.chunks(2).map(|c| C64::new(c[0], c[1]))));
        }
        let (_, bit_rows) = rows("bits.csv")?;
        let true_bits = bit_rows
            .iter()
            .map(|r| r[1..].iter().map(|s| int(s).map(|v| v as i8)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let (_, code_rows) = rows("codes.csv")?;
        let mut chips: Vec<Vec<Vec<i8>>> = vec![];
        for r in &code_rows {
            let k = int(&r[0])? as usize;
            if chips.len() <= k {
                chips.resize(k + 1, vec![]);
            }
            chips[k].push(r[2..].iter().map(|s| int(s).map(|v| v as i8)).collect::<Result<Vec<_>>>()?);
        }
        let codes = SpreadingCodes::new(chips)?;
        let (_, ch_rows) = rows("channels.csv")?;
        let mut channels: Vec<UserChannel> = vec![];
        for r in &ch_rows {
            if r.len() != 8 {
                return Err(bad("channels.csv needs 8 columns".into()));
            }
            let k = int(&r[0])? as usize;
            if channels.len() <= k {
                channels.push(UserChannel {
                    amplitude: C64::new(num(&r[1])?, num(&r[2])?),
                    offset: num(&r[3])?,
                    path_gains: vec![],
                    path_delays: vec![],
                });
            }
            channels[k].path_gains.push(C64::new(num(&r[5])?, num(&r[6])?));
            channels[k].path_delays.push(num(&r[7])?);
        }
        let g_true = channels.iter().map(|uc| effective_chip_pulse(uc, cfg)).collect::<Result<Vec<_>>>()?;
        Ok((Self { frames, true_bits, g_true, noise_var }, codes, channels))
    }
}

/// Frames `y(p) = sum_k A_k(p) g_k + n(p)` for `p = 0..P`, with white
/// complex noise at the configured SNR.
pub fn synthesize_scene<R: Rng + ?Sized>(
    cfg: &CdmaConfig,
    codes: &SpreadingCodes,
    channels: &[UserChannel],
    bits: &[Vec<i8>],
    rng: &mut R,
) -> Result<CdmaScene> {
    cfg.validate()?;
    if channels.len() != cfg.k_users || bits.len() != cfg.k_users || codes.n_users() != cfg.k_users {
        return Err(Error::Dimension(format!(
            "{} channels, {} bit streams and {} codes for {} users",
            channels.len(),
            bits.len(),
            codes.n_users(),
            cfg.k_users
        )));
    }
    let n_p = bits[0].len();
    if bits.iter().any(|b| b.len() != n_p || b.iter().any(|&v| v != 1 && v != -1)) {
        return Err(Error::InvalidParameter("bits must be antipodal with one common length".into()));
    }
    let g_true = channels.iter().map(|uc| effective_chip_pulse(uc, cfg)).collect::<Result<Vec<_>>>()?;
    let sig = Signatures::new(codes, &g_true, cfg)?;
    let mean_energy = (0..cfg.k_users).map(|k| sig.bit_energy(k)).sum::<f64>() / cfg.k_users as f64;
    let noise_var = cfg.noise_var(mean_energy);
    let sd = noise_var.sqrt();
    let frames = (0..n_p as i64)
        .map(|p| {
            let mut y = sig.frame(bits, p);
            if sd > 0.0 {
                y.iter_mut().for_each(|v| *v += complex_normal(rng) * sd);
            }
            y
        })
        .collect();
    Ok(CdmaScene { frames, true_bits: bits.to_vec(), g_true, noise_var })
}

/// `A(p)`, the `M N x K (M N + 8M - 1)` real frame matrix for known bits.
pub fn frame_matrix(codes: &SpreadingCodes, bits: &[Vec<i8>], p: i64, cfg: &CdmaConfig) -> Result<DMatrix<f64>> {
    let gl = cfg.g_len();
    let mut a = DMatrix::zeros(cfg.frame_len(), codes.n_users() * gl);
    for k in 0..codes.n_users() {
        for lag in 0..3 {
            let b = bit(bits, k, p - lag as i64);
            if b != 0.0 {
                let c = code_matrix(codes, k, p, lag, cfg)?;
                let mut blk = a.columns_mut(k * gl, gl);
                blk += c * b;
            }
        }
    }
    Ok(a)
}

/// LS estimate of the stacked CIR from the first `n_t` frames and their
/// known bits, with the residual noise power per sample.
#[derive(Clone, Debug)]
pub struct LsEstimate {
    pub g: Vec<DVector<C64>>,
    pub noise_var: f64,
}

pub fn ls_channel_estimate(
    frames: &[DVector<C64>],
    codes: &SpreadingCodes,
    bits: &[Vec<i8>],
    n_t: usize,
    cfg: &CdmaConfig,
) -> Result<LsEstimate> {
    if n_t == 0 || n_t > frames.len() {
        return Err(Error::InvalidParameter(format!("{n_t} training frames of {}", frames.len())));
    }
    let dim = codes.n_users() * cfg.g_len();
    let mut ata = DMatrix::<f64>::zeros(dim, dim);
    let mut aty_re = DVector::<f64>::zeros(dim);
    let mut aty_im = DVector::<f64>::zeros(dim);
    let mut mats = Vec::with_capacity(n_t);
    for (p, y) in frames.iter().take(n_t).enumerate() {
        let a = frame_matrix(codes, bits, p as i64, cfg)?;
        ata += a.tr_mul(&a);
        aty_re += a.tr_mul(&y.map(|c| c.re));
        aty_im += a.tr_mul(&y.map(|c| c.im));
        mats.push(a);
    }
    let chol = nalgebra::Cholesky::new(ata.clone()).ok_or_else(|| {
        let sv = ata.clone().singular_values();
        let tol = sv.max() * dim as f64 * f64::EPSILON;
        let rank = sv.iter().filter(|&&s| s > tol).count();
        Error::SingularModel(format!("LS normal matrix has rank {rank} of {dim}; add training frames"))
    })?;
    let re = chol.solve(&aty_re);
    let im = chol.solve(&aty_im);
    let x = DVector::from_fn(dim, |i, _| C64::new(re[i], im[i]));
    let mut rss = 0.0;
    for (a, y) in mats.iter().zip(frames) {
        rss += (y - a.map(|v| C64::new(v, 0.0)) * &x).norm_squared();
    }
    let n_obs = n_t * cfg.frame_len();
    let noise_var = rss / if n_obs > dim { (n_obs - dim) as f64 } else { n_obs as f64 };
    let gl = cfg.g_len();
    Ok(LsEstimate { g: (0..codes.n_users()).map(|k| x.rows(k * gl, gl).into_owned()).collect(), noise_var })
}

/// One path: delay (seconds, absolute), amplitude and phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathEstimate {
    pub delay: f64,
    pub amplitude: f64,
    pub phase: f64,
}

fn sample_or_zero<T: Copy + Default>(v: &[T], one_based: usize) -> T {
    if one_based == 0 { T::default() } else { v.get(one_based - 1).copied().unwrap_or_default() }
}

/// Coarse sliding correlation of `|g|^2` with the squared RC samples, a
/// fine delay search at `T_c / (10 M)` and a projection for the complex
/// gain.
pub fn extract_single_path(g_hat: &DVector<C64>, cfg: &CdmaConfig) -> Result<PathEstimate> {
    let gl = cfg.g_len();
    if g_hat.len() != gl {
        return Err(Error::Dimension(format!("pulse vector of {} samples, expected {gl}", g_hat.len())));
    }
    if g_hat.iter().all(|c| c.norm_sqr() == 0.0) {
        return Err(Error::EmptyInput("all-zero pulse vector".into()));
    }
    let m = cfg.m_oversample;
    let dt = cfg.sample_period();
    let h = |t: f64| rc_pulse(t, cfg.t_c, cfg.rolloff);
    let mag: Vec<f64> = g_hat.iter().map(|c| c.norm_sqr()).collect();
    let w: Vec<f64> = (1..8 * m).map(|i| h(i as f64 * dt).powi(2)).collect();

    let mut best = (0, f64::NEG_INFINITY);
    for l in 1..=cfg.frame_len() + 1 {
        let q: f64 = w.iter().enumerate().map(|(i, wi)| sample_or_zero(&mag, l + i) * wi).sum();
        if q > best.1 {
            best = (l, q);
        }
    }
    let i_k = best.0 - 1;
    let peak: Vec<f64> = (1..=8 * m).map(|j| sample_or_zero(&mag, i_k + j)).collect();
    // gamma_n is the squared pulse advanced by n/10 samples, so the best n
    // sits at minus the fractional delay.
    let mut fine = (0i64, f64::NEG_INFINITY);
    for n in -19i64..=19 {
        let score: f64 = (1..=8 * m).map(|j| h((j as f64 + n as f64 / 10.0) * dt).powi(2) * peak[j - 1]).sum();
        if score > fine.1 {
            fine = (n, score);
        }
    }
    let delay = i_k as f64 * dt - fine.0 as f64 * dt / 10.0;
    let mut num = C64::new(0.0, 0.0);
    let mut den = 0.0;
    for j in 1..=8 * m {
        let psi = h((i_k + j) as f64 * dt - delay);
        num += sample_or_zero(g_hat.as_slice(), i_k + j) * psi;
        den += psi * psi;
    }
    if den == 0.0 {
        return Err(Error::Numerical("delay estimate outside the pulse window".into()));
    }
    let z = num / den;
    let mut phase = z.arg();
    if phase <= -PI {
        phase = PI;
    }
    Ok(PathEstimate { delay, amplitude: z.norm(), phase })
}

/// Applies [`extract_single_path`] `l_paths` times, subtracting each
/// reconstructed path before the next. Paths come back strongest first.
pub fn extract_multipath(g_hat: &DVector<C64>, l_paths: usize, cfg: &CdmaConfig) -> Result<Vec<PathEstimate>> {
    if l_paths == 0 {
        return Err(Error::InvalidParameter("at least one path".into()));
    }
    let dt = cfg.sample_period();
    let mut resid = g_hat.clone();
    let mut paths = Vec::with_capacity(l_paths);
    for _ in 0..l_paths {
        let pe = extract_single_path(&resid, cfg)?;
        let gain = C64::from_polar(pe.amplitude, pe.phase);
        for (i, v) in resid.iter_mut().enumerate() {
            *v -= gain * rc_pulse((i + 1) as f64 * dt - pe.delay, cfg.t_c, cfg.rolloff);
        }
        paths.push(pe);
    }
    paths.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
    Ok(paths)
}

/// Channel rebuilt from extracted paths: unit amplitude, zero offset and
/// absolute path delays clamped into the admissible range.
pub fn paths_to_channel(paths: &[PathEstimate], cfg: &CdmaConfig) -> UserChannel {
    let hi = cfg.t_b() * (1.0 - 1e-9);
    UserChannel {
        amplitude: C64::new(1.0, 0.0),
        offset: 0.0,
        path_gains: paths.iter().map(|p| C64::from_polar(p.amplitude, p.phase)).collect(),
        path_delays: paths.iter().map(|p| p.delay.clamp(0.0, hi)).collect(),
    }
}

/// Linear MMSE detector over `[y(p); y(p+1)]`. Bits `p-2..=p+1` of every
/// user enter the window covariance. With signature matrix `S`,
/// `(S S^H + s I)^{-1} S = S (S^H S + s I)^{-1}`, so each filter is a
/// combination of signatures from a `4K x 4K` solve.
#[derive(Clone, Debug)]
pub struct MmseDetector {
    /// Per code phase, the filters of the current bits as columns.
    filters: Vec<DMatrix<C64>>,
    period: usize,
}

impl MmseDetector {
    pub fn new(codes: &SpreadingCodes, g: &[DVector<C64>], noise_var: f64, cfg: &CdmaConfig) -> Result<Self> {
        if !(noise_var >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise variance {noise_var}")));
        }
        let sig = Signatures::new(codes, g, cfg)?;
        let k = codes.n_users();
        let period = codes.period();
        let filters = (0..period as i64)
            .map(|p| {
                // Use a phase-equivalent frame index past the cold start.
                let p = p + 2 * period as i64;
                let cols: Vec<DVector<C64>> =
                    (p - 2..=p + 1).flat_map(|q| (0..k).map(move |u| (u, q))).map(|(u, q)| sig.window(u, q, p)).collect();
                let s = DMatrix::from_columns(&cols);
                let mut gram = s.adjoint() * &s;
                for i in 0..gram.nrows() {
                    gram[(i, i)] += C64::new(noise_var, 0.0);
                }
                let current = DMatrix::from_fn(4 * k, k, |i, j| if i == 2 * k + j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) });
                let coef = solve_jittered(gram, &current)?;
                Ok(s * coef)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { filters, period })
    }

    /// Decisions on the bits of frame `p` from `window = [y(p); y(p+1)]`.
    pub fn detect(&self, window: &DVector<C64>, p: usize) -> Result<Vec<i8>> {
        let w = &self.filters[p % self.period];
        if window.len() != w.nrows() {
            return Err(Error::Dimension(format!("window of {} samples, expected {}", window.len(), w.nrows())));
        }
        Ok((0..w.ncols()).map(|k| if w.column(k).dotc(window).re >= 0.0 { 1 } else { -1 }).collect())
    }
}

fn solve_jittered(mut a: DMatrix<C64>, b: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].re).sum::<f64>() / n as f64;
    let mut jitter = 0.0;
    for attempt in 0..8 {
        if let Some(ch) = nalgebra::Cholesky::new(a.clone()) {
            return Ok(ch.solve(b));
        }
        let next = scale.max(1e-300) * 1e-12 * 10f64.powi(attempt);
        for i in 0..n {
            a[(i, i)] += C64::new(next - jitter, 0.0);
        }
        jitter = next;
    }
    Err(Error::SingularModel("MMSE window covariance".into()))
}

/// Convenience form of [`MmseDetector`] for one window of a scene.
pub fn mmse_detect(
    scene: &CdmaScene,
    p: usize,
    g_assumed: &[DVector<C64>],
    noise_var: f64,
    codes_assumed: &SpreadingCodes,
    cfg: &CdmaConfig,
) -> Result<Vec<i8>> {
    MmseDetector::new(codes_assumed, g_assumed, noise_var, cfg)?.detect(&scene.window(p)?, p)
}

/// Largest number of unknown bits [`map_detect_exhaustive`] enumerates.
pub const MAX_EXHAUSTIVE_BITS: usize = 12;

/// Minimum-distance decision `argmin_b ||y - offset - sum_i b_i s_i||` over
/// all antipodal `b`, enumerated with `-1 < +1` in lexicographic order;
/// the first minimiser wins ties.
pub fn map_detect_exhaustive(y: &DVector<C64>, offset: &DVector<C64>, signatures: &[DVector<C64>]) -> Result<Vec<i8>> {
    let n = signatures.len();
    if n == 0 || n > MAX_EXHAUSTIVE_BITS {
        return Err(Error::InvalidParameter(format!("{n} unknown bits (1 to {MAX_EXHAUSTIVE_BITS} allowed)")));
    }
    if offset.len() != y.len() || signatures.iter().any(|s| s.len() != y.len()) {
        return Err(Error::Dimension("signature and observation lengths differ".into()));
    }
    let target = y - offset;
    let mut best = (vec![], f64::INFINITY);
    for code in 0..1usize << n {
        // Bit 0 of the counter is the last symbol, so counting up walks the
        // patterns in lexicographic order.
        let b: Vec<i8> = (0..n).map(|i| if code >> (n - 1 - i) & 1 == 1 { 1 } else { -1 }).collect();
        let mut r = target.clone();
        for (bi, s) in b.iter().zip(signatures) {
            r.axpy(C64::new(-(*bi as f64), 0.0), s, C64::new(1.0, 0.0));
        }
        let d = r.norm_squared();
        if d < best.1 {
            best = (b, d);
        }
    }
    Ok(best.0)
}

/// Genie-aided joint decision over `[y(p); y(p+1)]`: bits before `p` are
/// taken from `known_bits`; bits `p` and `p+1` of every user are
/// enumerated and the frame-`p` half of the minimiser is returned.
pub fn map_detect_window(
    window: &DVector<C64>,
    p: usize,
    sig: &Signatures,
    known_bits: &[Vec<i8>],
) -> Result<Vec<i8>> {
    let k = sig.n_users();
    let p = p as i64;
    let mut offset = DVector::zeros(window.len());
    for u in 0..k {
        for q in [p - 2, p - 1] {
            let b = bit(known_bits, u, q);
            if b != 0.0 {
                offset.axpy(C64::new(b, 0.0), &sig.window(u, q, p), C64::new(1.0, 0.0));
            }
        }
    }
    let cols: Vec<DVector<C64>> = (0..k).map(|u| sig.window(u, p, p)).chain((0..k).map(|u| sig.window(u, p + 1, p))).collect();
    Ok(map_detect_exhaustive(window, &offset, &cols)?[..k].to_vec())
}

/// Class index of a bit pattern: bit `k` set iff user `k` sent `+1`.
pub fn bits_to_class(bits: &[i8]) -> usize {
    bits.iter().enumerate().filter(|(_, &b)| b > 0).map(|(k, _)| 1 << k).sum()
}

pub fn class_to_bits(class: usize, k_users: usize) -> Vec<i8> {
    (0..k_users).map(|k| if class >> k & 1 == 1 { 1 } else { -1 }).collect()
}

/// Generative window model: signatures from assumed codes and pulses,
/// random surrounding bits and white noise.
#[derive(Clone, Debug)]
pub struct WindowModel {
    pub sig: Signatures,
    pub noise_var: f64,
    pub period: usize,
}

impl WindowModel {
    pub fn new(codes: &SpreadingCodes, g: &[DVector<C64>], noise_var: f64, cfg: &CdmaConfig) -> Result<Self> {
        Ok(Self { sig: Signatures::new(codes, g, cfg)?, noise_var, period: codes.period() })
    }

    /// One window with the frame-`p` bits fixed to `class`.
    pub fn sample(&self, class: usize, rng: &mut dyn RngCore) -> DVector<C64> {
        let k = self.sig.n_users();
        let p = 2 * self.period as i64 + rng.random_range(0..self.period) as i64;
        let current = class_to_bits(class, k);
        let mut w = DVector::zeros(2 * self.sig.frame_len);
        for u in 0..k {
            for q in p - 2..=p + 1 {
                let b = if q == p { current[u] } else if rng.random::<bool>() { 1 } else { -1 };
                w.axpy(C64::new(b as f64, 0.0), &self.sig.window(u, q, p), C64::new(1.0, 0.0));
            }
        }
        let sd = self.noise_var.sqrt();
        if sd > 0.0 {
            w.iter_mut().for_each(|v| *v += complex_normal(rng) * sd);
        }
        w
    }
}

struct WindowSampler {
    model: Arc<WindowModel>,
    class: usize,
}

impl ClassSampler for WindowSampler {
    fn dim(&self) -> usize {
        4 * self.model.sig.frame_len
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        complex_to_features(&self.model.sample(self.class, rng))
    }
}

/// Estimated channel of every user and the LS residual noise power.
#[derive(Clone, Debug)]
pub struct CdmaEstimate {
    pub ls: LsEstimate,
    pub paths: Vec<Vec<PathEstimate>>,
    pub channels: Vec<UserChannel>,
    pub g_param: Vec<DVector<C64>>,
}

/// Which pulse estimate drives the synthetic windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PulseModel {
    /// Pulses rebuilt from the extracted paths.
    Paths,
    /// The unstructured LS estimate.
    LeastSquares,
}

/// Multi-user detection as a `2^K`-class problem. The training frames
/// carry known bits, so the labeler is exact; estimation is LS on the
/// training frames with the receiver's codes followed by path extraction;
/// synthetic windows use the receiver's codes with the pulses chosen by
/// `pulse_model`.
pub struct CdmaProblem {
    pub cfg: CdmaConfig,
    pub codes_assumed: SpreadingCodes,
    pub training: CdmaScene,
    pub pulse_model: PulseModel,
}

impl CdmaProblem {
    pub fn estimate_channels(&self) -> Result<CdmaEstimate> {
        let t = &self.training;
        let ls = ls_channel_estimate(&t.frames, &self.codes_assumed, &t.true_bits, t.frames.len(), &self.cfg)?;
        let paths = ls.g.iter().map(|g| extract_multipath(g, self.cfg.l_paths, &self.cfg)).collect::<Result<Vec<_>>>()?;
        let channels: Vec<UserChannel> = paths.iter().map(|p| paths_to_channel(p, &self.cfg)).collect();
        let g_param = channels.iter().map(|c| effective_chip_pulse(c, &self.cfg)).collect::<Result<Vec<_>>>()?;
        Ok(CdmaEstimate { ls, paths, channels, g_param })
    }
}

impl HybridProblem for CdmaProblem {
    type Estimate = CdmaEstimate;

    fn n_classes(&self) -> usize {
        self.cfg.n_classes()
    }

    fn label(&self, raw: &DMatrix<f64>) -> Result<Vec<usize>> {
        let (x, labels) = self.training.window_dataset()?;
        if x.shape() != raw.shape() {
            return Err(Error::Dimension(format!("raw rows {:?} are not the training windows {:?}", raw.shape(), x.shape())));
        }
        Ok(labels)
    }

    fn estimate(&self, _labeled: &LabeledDataset) -> Result<CdmaEstimate> {
        self.estimate_channels()
    }

    fn samplers(&self, est: &CdmaEstimate) -> Result<Vec<Box<dyn ClassSampler>>> {
        let g = match self.pulse_model {
            PulseModel::Paths => &est.g_param,
            PulseModel::LeastSquares => &est.ls.g,
        };
        let model = Arc::new(WindowModel::new(&self.codes_assumed, g, est.ls.noise_var, &self.cfg)?);
        Ok((0..self.n_classes())
            .map(|class| Box::new(WindowSampler { model: model.clone(), class }) as Box<dyn ClassSampler>)
            .collect())
    }

    fn priors(&self, _labeled: &LabeledDataset) -> Vec<f64> {
        vec![1.0 / self.n_classes() as f64; self.n_classes()]
    }
}
