//! Tag modulation: PN codes, the chip-mixed square wave, and clock jitter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Nominal modulation frequency of the tags (Hz).
pub const NOMINAL_MOD_HZ: f64 = 256.0;

/// Upper bound reported by [`max_jitter_for_integration`] when the integration
/// is too short to accumulate any deviation.
pub const JITTER_CAP_PPM: f64 = 1.0e6;

/// Fibonacci feedback taps (polynomial exponents, highest first) of one
/// primitive polynomial per register size. Index 0 is the 2-bit register.
const PRIMITIVE_TAPS: [&[u32]; 15] = [
    &[2, 1],
    &[3, 2],
    &[4, 3],
    &[5, 3],
    &[6, 5],
    &[7, 6],
    &[8, 6, 5, 4],
    &[9, 5],
    &[10, 7],
    &[11, 9],
    &[12, 11, 10, 4],
    &[13, 12, 11, 8],
    &[14, 13, 12, 2],
    &[15, 14],
    &[16, 15, 13, 4],
];

/// Preferred pairs of primitive polynomials, whose m-sequences have
/// three-valued cross-correlation. Used to build Gold families.
const PREFERRED_PAIRS: [(u32, &[u32], &[u32]); 3] = [
    (5, &[5, 2], &[5, 3, 2, 1]),
    (6, &[6, 1], &[6, 5]),
    (7, &[7, 1], &[7, 3]),
];

pub fn default_taps(register_bits: u32) -> Result<&'static [u32]> {
    if !(2..=16).contains(&register_bits) {
        return domain(format!(
            "register size must be in 2..=16, got {register_bits}"
        ));
    }
    Ok(PRIMITIVE_TAPS[register_bits as usize - 2])
}

/// Maximal-length sequence from the default primitive polynomial.
pub fn pn_sequence(register_bits: u32, seed_state: u32) -> Result<Vec<i8>> {
    pn_sequence_with_taps(register_bits, default_taps(register_bits)?, seed_state)
}

/// Runs a Fibonacci LFSR for one full period `2^n - 1` and maps bits
/// `0 -> +1`, `1 -> -1`. The caller is responsible for `taps` describing a
/// primitive polynomial; otherwise the output is not an m-sequence.
pub fn pn_sequence_with_taps(register_bits: u32, taps: &[u32], seed_state: u32) -> Result<Vec<i8>> {
    if !(2..=16).contains(&register_bits) {
        return domain(format!(
            "register size must be in 2..=16, got {register_bits}"
        ));
    }
    let mask = (1u32 << register_bits) - 1;
    let mut state = seed_state & mask;
    if state == 0 {
        return domain("LFSR seed state must be nonzero");
    }
    if taps.iter().any(|&t| t == 0 || t > register_bits) {
        return domain(format!(
            "taps {taps:?} out of range for {register_bits} bits"
        ));
    }
    let len = (1usize << register_bits) - 1;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(if state & 1 == 0 { 1 } else { -1 });
        let fb = taps
            .iter()
            .fold(0u32, |acc, &t| acc ^ ((state >> (register_bits - t)) & 1));
        state = (state >> 1) | (fb << (register_bits - 1));
    }
    Ok(out)
}

/// Member `index` of the Gold family built from the preferred pair for this
/// register size. Indices 0 and 1 are the two m-sequences themselves, index
/// `k + 2` is their product with the second one cyclically shifted by `k`.
pub fn gold_code(register_bits: u32, index: usize) -> Result<Vec<i8>> {
    let (_, a, b) = PREFERRED_PAIRS
        .iter()
        .find(|(n, _, _)| *n == register_bits)
        .ok_or_else(|| {
            Error::Domain(format!(
                "no preferred pair tabulated for {register_bits} bits"
            ))
        })?;
    let u = pn_sequence_with_taps(register_bits, a, 1)?;
    let v = pn_sequence_with_taps(register_bits, b, 1)?;
    let len = u.len();
    match index {
        0 => Ok(u),
        1 => Ok(v),
        k if k - 2 < len => {
            let shift = k - 2;
            Ok((0..len).map(|i| u[i] * v[(i + shift) % len]).collect())
        }
        _ => domain(format!("Gold family index {index} out of range")),
    }
}

/// Circular correlation of two equal-length ±1 sequences at every lag.
pub fn circular_correlation(a: &[i8], b: &[i8]) -> Vec<i32> {
    let n = a.len();
    (0..n)
        .map(|lag| (0..n).map(|i| a[i] as i32 * b[(i + lag) % n] as i32).sum())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TagConfig {
    /// Nominal modulation frequency (Hz).
    pub f_mod: f64,
    /// ±1 chips.
    pub code: Vec<i8>,
    pub cycles_per_chip: u32,
    pub jitter_ppm: f64,
    /// Fixed deviation of the true modulation rate from nominal (ppm).
    pub freq_offset_ppm: f64,
    pub seed: u64,
    /// How long the tag had been running when the anchors' clock read zero (s).
    pub time_offset: f64,
}

impl Default for TagConfig {
    fn default() -> Self {
        Self {
            f_mod: NOMINAL_MOD_HZ,
            code: vec![1],
            cycles_per_chip: 4,
            jitter_ppm: 0.0,
            freq_offset_ppm: 0.0,
            seed: 0,
            time_offset: 0.0,
        }
    }
}

impl TagConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.f_mod > 0.0) {
            bad.push(format!("f_mod must be positive, got {}", self.f_mod));
        }
        if self.code.is_empty() {
            bad.push("code must contain at least one chip".into());
        }
        if self.code.iter().any(|&c| c != 1 && c != -1) {
            bad.push("code chips must be +1 or -1".into());
        }
        if self.cycles_per_chip == 0 {
            bad.push("cycles_per_chip must be at least 1".into());
        }
        if !(self.jitter_ppm >= 0.0) {
            bad.push(format!(
                "jitter_ppm must be non-negative, got {}",
                self.jitter_ppm
            ));
        }
        if !(self.freq_offset_ppm.abs() <= 500.0) {
            bad.push(format!(
                "|freq_offset_ppm| must be <= 500, got {}",
                self.freq_offset_ppm
            ));
        }
        if !(self.time_offset >= 0.0) || !self.time_offset.is_finite() {
            bad.push(format!(
                "time_offset must be finite and non-negative, got {}",
                self.time_offset
            ));
        }
        bad
    }

    /// True modulation rate including the fixed offset.
    pub fn true_frequency(&self) -> f64 {
        self.f_mod * (1.0 + self.freq_offset_ppm * 1e-6)
    }

    pub fn code_period(&self) -> f64 {
        self.code.len() as f64 * self.cycles_per_chip as f64 / self.true_frequency()
    }

    fn half_period(&self) -> f64 {
        0.5 / self.true_frequency()
    }

    /// State during half-period number `k` counted from the tag's start.
    fn half_state(&self, k: u64) -> i8 {
        let cycle = k / 2;
        let chip = ((cycle / self.cycles_per_chip as u64) % self.code.len() as u64) as usize;
        let square = if k.is_multiple_of(2) { 1 } else { -1 };
        self.code[chip] * square
    }
}

/// A realized tag waveform. Jitter-free tags are evaluated analytically;
/// jittered tags carry their half-period boundaries up to a horizon.
#[derive(Debug, Clone)]
pub struct TagWaveform {
    cfg: TagConfig,
    half: f64,
    /// Boundary `k` is the start of half-period `k` in tag-local time.
    /// Empty for a jitter-free tag.
    boundaries: Vec<f64>,
}

impl TagWaveform {
    /// `horizon` is the last anchor-clock time the waveform must cover.
    pub fn new(cfg: &TagConfig, horizon: f64) -> Self {
        let half = cfg.half_period();
        let mut boundaries = Vec::new();
        if cfg.jitter_ppm > 0.0 {
            let sigma = cfg.jitter_ppm * 1e-6 * half;
            let end = cfg.time_offset + horizon.max(0.0) + 2.0 * half;
            let n = (end / half).ceil() as usize + 2;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            boundaries.reserve(n + 1);
            let mut t = 0.0;
            boundaries.push(t);
            for _ in 0..n {
                let e: f64 = StandardNormal.sample(&mut rng);
                t += half + sigma * e;
                boundaries.push(t);
            }
        }
        Self {
            cfg: cfg.clone(),
            half,
            boundaries,
        }
    }

    pub fn config(&self) -> &TagConfig {
        &self.cfg
    }

    /// Half-period index containing tag-local time `u`.
    fn half_index(&self, u: f64) -> u64 {
        if self.boundaries.is_empty() {
            (u / self.half).floor().max(0.0) as u64
        } else {
            let k = self.boundaries.partition_point(|&b| b <= u);
            k.saturating_sub(1) as u64
        }
    }

    fn boundary(&self, k: u64) -> f64 {
        if self.boundaries.is_empty() {
            k as f64 * self.half
        } else {
            match self.boundaries.get(k as usize) {
                Some(&b) => b,
                // Past the horizon: continue at the nominal rate.
                None => {
                    let last = self.boundaries.len() - 1;
                    self.boundaries[last] + (k as usize - last) as f64 * self.half
                }
            }
        }
    }

    /// Antenna state (+1 reflect, -1 absorb) at anchor time `t`.
    pub fn state(&self, t: f64) -> i8 {
        let u = t + self.cfg.time_offset;
        self.cfg.half_state(self.half_index(u))
    }

    /// Mean state over the anchor-time interval `[a, b)`.
    pub fn average(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return self.state(a) as f64;
        }
        let (ua, ub) = (a + self.cfg.time_offset, b + self.cfg.time_offset);
        let mut k = self.half_index(ua);
        let mut lo = ua;
        let mut acc = 0.0;
        loop {
            let hi = self.boundary(k + 1).min(ub);
            acc += self.cfg.half_state(k) as f64 * (hi - lo);
            if hi >= ub {
                break;
            }
            lo = hi;
            k += 1;
        }
        acc / (ub - ua)
    }

    /// Timing error of half-period boundary `k` relative to the ideal clock.
    pub fn boundary_error(&self, k: u64) -> f64 {
        self.boundary(k) - k as f64 * self.half
    }

    /// State flips over `[0, duration)` in anchor time.
    pub fn timeline(&self, duration: f64) -> ChipTimeline {
        let off = self.cfg.time_offset;
        let mut k = self.half_index(off);
        let mut states = vec![self.cfg.half_state(k)];
        let mut transitions = Vec::new();
        loop {
            let b = self.boundary(k + 1) - off;
            if b >= duration {
                break;
            }
            k += 1;
            let s = self.cfg.half_state(k);
            if s != *states.last().unwrap() {
                transitions.push(b);
                states.push(s);
            }
        }
        ChipTimeline {
            transitions,
            states,
            duration,
        }
    }
}

/// Piecewise-constant antenna state: `states[i]` holds between
/// `transitions[i - 1]` and `transitions[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipTimeline {
    pub transitions: Vec<f64>,
    pub states: Vec<i8>,
    pub duration: f64,
}

impl ChipTimeline {
    pub fn mean(&self) -> f64 {
        let mut acc = 0.0;
        let mut lo = 0.0;
        for (i, &s) in self.states.iter().enumerate() {
            let hi = self.transitions.get(i).copied().unwrap_or(self.duration);
            acc += s as f64 * (hi - lo);
            lo = hi;
        }
        acc / self.duration
    }
}

/// Tag state at anchor time `t`. Builds the jitter realization up to `t`, so
/// prefer [`TagWaveform`] when sampling many times.
pub fn tag_state(cfg: &TagConfig, t: f64) -> i8 {
    TagWaveform::new(cfg, t).state(t)
}

/// Largest jitter (ppm) for which at least 95% of simulated clocks stay within
/// a quarter of a half-period of their best-fit constant rate over `t_int`.
///
/// The clock error is linear in the jitter, so each trial is simulated once at
/// unit step variance and the answer read off the order statistic.
pub fn max_jitter_for_integration(t_int: f64, f_mod: f64, trials: usize, seed: u64) -> Result<f64> {
    if !(t_int > 0.0) {
        return domain(format!("integration time must be positive, got {t_int}"));
    }
    if !(f_mod > 0.0) {
        return domain(format!(
            "modulation frequency must be positive, got {f_mod}"
        ));
    }
    if trials < 100 {
        return domain(format!("need at least 100 trials, got {trials}"));
    }
    let steps = (2.0 * f_mod * t_int).round() as usize;
    if steps < 2 {
        return Ok(JITTER_CAP_PPM);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut walk = vec![0.0f64; steps + 1];
    let mut worst: Vec<f64> = (0..trials)
        .map(|_| {
            for k in 1..=steps {
                let e: f64 = StandardNormal.sample(&mut rng);
                walk[k] = walk[k - 1] + e;
            }
            detrended_max_deviation(&walk)
        })
        .collect();
    worst.sort_by(f64::total_cmp);
    let idx = ((0.95 * trials as f64).ceil() as usize).clamp(1, trials) - 1;
    let d = worst[idx];
    if d <= 0.0 {
        return Ok(JITTER_CAP_PPM);
    }
    Ok((0.25e6 / d).min(JITTER_CAP_PPM))
}

/// Max |w_k - (a + b k)| for the least-squares line through `w`.
fn detrended_max_deviation(w: &[f64]) -> f64 {
    let n = w.len() as f64;
    let mean_k = (n - 1.0) / 2.0;
    let mean_w = w.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, &y) in w.iter().enumerate() {
        let dk = k as f64 - mean_k;
        sxy += dk * (y - mean_w);
        sxx += dk * dk;
    }
    let slope = sxy / sxx;
    w.iter()
        .enumerate()
        .map(|(k, &y)| (y - mean_w - slope * (k as f64 - mean_k)).abs())
        .fold(0.0, f64::max)
}
