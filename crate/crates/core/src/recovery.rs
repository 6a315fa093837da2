//! Sub-noise tag recovery: high-pass filtering, frequency/phase/code search,
//! per-band coherent integration and stitching into a CIR.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::rfmodel::{linear_to_db, DETECTION_SNR_DB};
use crate::sweep::{apply_calibration, BandRecording, Calibration, SweepRecording};

pub const DEFAULT_ZERO_PAD: usize = 10;

/// SNR lost to the correlation window relative to a rectangular one (dB):
/// `10 log10(n * sum(w^2) / sum(w)^2)`. About 2.37 dB for long windows.
pub fn window_processing_loss_db(n: usize) -> f64 {
    let w = blackman(n);
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    linear_to_db(n as f64 * s2 / (s * s))
}

pub fn blackman(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| {
            let x = i as f64 / m;
            0.42 - 0.5 * (TAU * x).cos() + 0.08 * (2.0 * TAU * x).cos()
        })
        .collect()
}

/// Linear-phase FIR high-pass. The stopband ends at `cutoff`; the passband
/// begins half an octave above it.
#[derive(Debug, Clone)]
pub struct HighPass {
    pub taps: Vec<f64>,
}

impl HighPass {
    pub fn design(cutoff: f64, rate: f64) -> Result<Self> {
        let nyquist = 0.5 * rate;
        if !(cutoff > 0.0) || cutoff >= nyquist {
            return domain(format!("cutoff {cutoff} Hz must lie in (0, {nyquist}) Hz"));
        }
        let transition = (0.5 * cutoff).min(nyquist - cutoff);
        // Blackman-windowed sinc: about 5.5 fs / N of transition width.
        let mut n = (5.5 * rate / transition).ceil() as usize;
        if n.is_multiple_of(2) {
            n += 1;
        }
        let fc = (cutoff + 0.5 * transition) / rate;
        let w = blackman(n);
        let mid = (n / 2) as f64;
        let mut lp: Vec<f64> = (0..n)
            .map(|i| {
                let x = i as f64 - mid;
                let sinc = if x == 0.0 {
                    2.0 * fc
                } else {
                    (TAU * fc * x).sin() / (PI * x)
                };
                sinc * w[i]
            })
            .collect();
        let sum: f64 = lp.iter().sum();
        lp.iter_mut().for_each(|v| *v /= sum);
        let mut taps: Vec<f64> = lp.iter().map(|v| -v).collect();
        taps[n / 2] += 1.0;
        // Force the DC response to exactly zero after rounding.
        let dc: f64 = taps.iter().sum();
        taps[n / 2] -= dc;
        Ok(Self { taps })
    }

    /// Sum of squared taps: the white-noise power gain.
    pub fn noise_gain(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }

    /// Magnitude response at `f` Hz for sample rate `rate`.
    pub fn response(&self, f: f64, rate: f64) -> f64 {
        let mid = (self.taps.len() / 2) as f64;
        let z: Complex64 = self
            .taps
            .iter()
            .enumerate()
            .map(|(i, &h)| h * Complex64::from_polar(1.0, -TAU * f / rate * (i as f64 - mid)))
            .sum();
        z.norm()
    }

    /// Filters one series; edges are extended by even reflection so constant
    /// input maps to zero everywhere.
    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let half = self.taps.len() / 2;
        let period = 2 * n;
        let ext: Vec<Complex64> = (0..n + 2 * half)
            .map(|e| {
                let j = (e as isize - half as isize).rem_euclid(period as isize) as usize;
                x[if j >= n { period - 1 - j } else { j }]
            })
            .collect();
        let last = self.taps.len() - 1;
        (0..n)
            .map(|i| {
                let window = &ext[i..i + self.taps.len()];
                let (mut re, mut im) = (0.0, 0.0);
                for (k, &h) in self.taps.iter().enumerate() {
                    let v = window[last - k];
                    re += h * v.re;
                    im += h * v.im;
                }
                Complex64::new(re, im)
            })
            .collect()
    }
}

/// High-passes every sub-bin series of one band.
pub fn highpass(band: &BandRecording, cutoff: f64, rate: f64) -> Result<BandRecording> {
    let filter = HighPass::design(cutoff, rate)?;
    Ok(filter_band(band, &filter))
}

fn filter_band(band: &BandRecording, filter: &HighPass) -> BandRecording {
    let bins = band.sub_bins;
    let mut data = vec![Complex64::new(0.0, 0.0); band.data.len()];
    for k in 0..bins {
        let y = filter.apply(&band.bin_series(k));
        for (i, v) in y.into_iter().enumerate() {
            data[i * bins + k] = v;
        }
    }
    BandRecording {
        times: band.times.clone(),
        data,
        sub_bins: bins,
    }
}

pub fn highpass_recording(rec: &SweepRecording, cutoff: f64) -> Result<SweepRecording> {
    let filter = HighPass::design(cutoff, rec.plan.snapshot_rate)?;
    let bands = rec
        .bands
        .par_iter()
        .map(|b| filter_band(b, &filter))
        .collect();
    Ok(SweepRecording {
        plan: rec.plan.clone(),
        bands,
        meta: rec.meta.clone(),
    })
}

/// A chip code together with the number of modulation cycles per chip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSpec {
    pub chips: Vec<i8>,
    pub cycles_per_chip: u32,
}

impl CodeSpec {
    pub fn uncoded() -> Self {
        Self {
            chips: vec![1],
            cycles_per_chip: 1,
        }
    }

    /// Distinct template alignments, in half modulation cycles. A single-chip
    /// code only needs one: a half-cycle shift merely flips the sign.
    pub fn offsets(&self) -> usize {
        if self.chips.len() <= 1 {
            1
        } else {
            2 * self.chips.len() * self.cycles_per_chip as usize
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSignalHypothesis {
    pub f_cand: f64,
    /// Frequency offset from nominal (ppm).
    pub offset_ppm: f64,
    /// In `[0, pi)`.
    pub phi0: f64,
    pub code: CodeSpec,
    /// Template alignment in half modulation cycles.
    pub code_offset: usize,
    pub correlation_score: f64,
}

impl TagSignalHypothesis {
    pub fn plain(f_cand: f64, phi0: f64) -> Self {
        Self {
            f_cand,
            offset_ppm: 0.0,
            phi0,
            code: CodeSpec::uncoded(),
            code_offset: 0,
            correlation_score: 0.0,
        }
    }

    /// Ideal (jitter-free) template value at anchor time `t`.
    pub fn template(&self, t: f64) -> f64 {
        let u = self.f_cand * t + self.phi0 / TAU + 0.5 * self.code_offset as f64;
        let square = if u - u.floor() < 0.5 { 1.0 } else { -1.0 };
        let cycle = u.floor().max(0.0) as u64;
        let chip = (cycle / self.code.cycles_per_chip as u64) % self.code.chips.len() as u64;
        square * self.code.chips[chip as usize] as f64
    }

    /// The hypothesis that exactly matches a jitter-free tag.
    pub fn matching(cfg: &crate::waveform::TagConfig) -> Self {
        let u0 = cfg.true_frequency() * cfg.time_offset;
        let period = (cfg.code.len() as u64 * cfg.cycles_per_chip as u64) as f64;
        let u0 = u0 - (u0 / period).floor() * period;
        let halves = (2.0 * u0).floor();
        let frac = u0 - 0.5 * halves;
        let code = CodeSpec {
            chips: cfg.code.clone(),
            cycles_per_chip: cfg.cycles_per_chip,
        };
        // An uncoded template has one searched alignment, but an odd half-cycle
        // still flips its sign.
        let code_offset = if cfg.code.len() <= 1 {
            halves as usize % 2
        } else {
            halves as usize
        };
        Self {
            f_cand: cfg.true_frequency(),
            offset_ppm: cfg.freq_offset_ppm,
            phi0: frac * TAU,
            code,
            code_offset,
            correlation_score: 0.0,
        }
    }
}

/// Zero-mean windowed correlation weights for a band.
struct Weights {
    a: Vec<f64>,
    /// `sum(a * s)`: amplitude normalization.
    gain: f64,
    /// `sum(a^2)`: noise normalization.
    energy: f64,
}

fn weights(times: &[f64], hyp: &TagSignalHypothesis) -> Weights {
    let n = times.len();
    let w = blackman(n);
    let s: Vec<f64> = times.iter().map(|&t| hyp.template(t)).collect();
    let sw: f64 = w.iter().zip(&s).map(|(a, b)| a * b).sum();
    let sum_w: f64 = w.iter().sum();
    let mu = if sum_w > 0.0 { sw / sum_w } else { 0.0 };
    let a: Vec<f64> = w.iter().zip(&s).map(|(wi, si)| wi * si - mu * wi).collect();
    let gain = a.iter().zip(&s).map(|(x, y)| x * y).sum();
    let energy = a.iter().map(|x| x * x).sum();
    Weights { a, gain, energy }
}

fn correlate(band: &BandRecording, n: usize, a: &[f64]) -> Vec<Complex64> {
    let mut acc = vec![Complex64::new(0.0, 0.0); band.sub_bins];
    for (i, &ai) in a.iter().enumerate().take(n) {
        if ai == 0.0 {
            continue;
        }
        for (o, v) in acc.iter_mut().zip(band.snapshot(i)) {
            *o += v * ai;
        }
    }
    acc
}

fn span_samples(band: &BandRecording, t_int: Option<f64>, rate: f64) -> Result<usize> {
    let available = band.len();
    match t_int {
        None => Ok(available),
        Some(t) => {
            if !(t > 0.0) {
                return domain(format!("integration time must be positive, got {t}"));
            }
            let n = (t * rate + 1e-9).floor() as usize;
            if n > available {
                return Err(Error::ExceedsRecording {
                    requested: t,
                    available: available as f64 / rate,
                });
            }
            Ok(n.max(1))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    pub nominal_f: f64,
    pub span_ppm: f64,
    pub step_ppm: f64,
    pub n_phases: usize,
    /// Candidate codes; empty means an uncoded square wave.
    pub codes: Vec<CodeSpec>,
    /// Restrict the search to these bands (all when empty).
    pub bands: Vec<usize>,
    /// Seconds of each band to use (all when absent).
    pub t_int: Option<f64>,
    /// Coarse step for a coarse-to-fine search; exhaustive when absent.
    pub coarse_step_ppm: Option<f64>,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            nominal_f: crate::waveform::NOMINAL_MOD_HZ,
            span_ppm: 500.0,
            step_ppm: 5.0,
            n_phases: 8,
            codes: Vec::new(),
            bands: Vec::new(),
            t_int: None,
            coarse_step_ppm: None,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.nominal_f > 0.0) {
            bad.push(format!(
                "nominal_f must be positive, got {}",
                self.nominal_f
            ));
        }
        if !(self.step_ppm > 0.0) || !(self.span_ppm >= self.step_ppm) {
            bad.push(format!(
                "need span_ppm >= step_ppm > 0, got span {} step {}",
                self.span_ppm, self.step_ppm
            ));
        }
        if self.n_phases == 0 {
            bad.push("n_phases must be at least 1".into());
        }
        if let Some(c) = self.coarse_step_ppm {
            if !(c >= self.step_ppm) {
                bad.push(format!(
                    "coarse step {c} must be >= fine step {}",
                    self.step_ppm
                ));
            }
        }
        bad
    }

    fn code_list(&self) -> Vec<CodeSpec> {
        if self.codes.is_empty() {
            vec![CodeSpec::uncoded()]
        } else {
            self.codes.clone()
        }
    }
}

/// One evaluated cell of the search grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub offset_ppm: f64,
    pub phase_index: usize,
    pub code_index: usize,
    pub code_offset: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: TagSignalHypothesis,
    pub grid: Vec<CandidateScore>,
}

fn ppm_grid(center: f64, half_span: f64, step: f64) -> Vec<f64> {
    let n = (half_span / step + 1e-9).floor() as i64;
    (-n..=n).map(|i| center + i as f64 * step).collect()
}

fn phase_of(index: usize, n_phases: usize) -> f64 {
    PI * index as f64 / n_phases as f64
}

/// Scores of every template shift for one candidate frequency and code.
///
/// The template is piecewise constant on slots of `1 / (2 * n_phases)` cycles,
/// and every (phase, alignment) hypothesis is a whole number of slots of
/// shift. Folding the windowed snapshots into slots therefore turns the
/// per-hypothesis correlation into one circular correlation per band, with
/// results identical to correlating each hypothesis directly.
fn shift_scores(
    rec: &SweepRecording,
    band_ids: &[usize],
    spans: &[usize],
    f_cand: f64,
    code: &CodeSpec,
    n_phases: usize,
) -> Vec<f64> {
    let period = code.chips.len() * code.cycles_per_chip as usize;
    let slots_per_cycle = 2 * n_phases;
    let l = slots_per_cycle * period;
    // Template value on each slot (unshifted).
    let pattern: Vec<f64> = (0..l)
        .map(|j| {
            let cycle = j / slots_per_cycle;
            let square = if j % slots_per_cycle < n_phases {
                1.0
            } else {
                -1.0
            };
            let chip = (cycle / code.cycles_per_chip as usize) % code.chips.len();
            square * code.chips[chip] as f64
        })
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(l);
    let inv = planner.plan_fft_inverse(l);
    let mut t_hat: Vec<Complex64> = pattern.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut t_hat);
    // corr[s] = sum_j pattern[(j + s) mod l] * y[j]
    let circular = |y: &[Complex64]| -> Vec<Complex64> {
        let mut buf = y.to_vec();
        fwd.process(&mut buf);
        let mut prod: Vec<Complex64> = (0..l).map(|m| t_hat[m] * buf[(l - m) % l]).collect();
        inv.process(&mut prod);
        prod.iter().map(|v| v / l as f64).collect()
    };

    let mut total = vec![0.0; l];
    for (&b, &n) in band_ids.iter().zip(spans) {
        let band = &rec.bands[b];
        let bins = band.sub_bins;
        let w = blackman(n);
        let mut y = vec![Complex64::new(0.0, 0.0); l * bins];
        let mut wsum = vec![0.0; l];
        let mut w2sum = vec![0.0; l];
        let mut x0 = vec![Complex64::new(0.0, 0.0); bins];
        for (i, &wi) in w.iter().enumerate() {
            let u = f_cand * band.times[i] * slots_per_cycle as f64;
            let j = (u.floor() as i64).rem_euclid(l as i64) as usize;
            wsum[j] += wi;
            w2sum[j] += wi * wi;
            let snap = band.snapshot(i);
            for k in 0..bins {
                let v = snap[k] * wi;
                y[k * l + j] += v;
                x0[k] += v;
            }
        }
        let sum_w: f64 = wsum.iter().sum();
        let sum_w2: f64 = w2sum.iter().sum();
        let to_c = |v: &[f64]| {
            v.iter()
                .map(|&x| Complex64::new(x, 0.0))
                .collect::<Vec<_>>()
        };
        let sw = circular(&to_c(&wsum));
        let sw2 = circular(&to_c(&w2sum));
        let corr: Vec<Vec<Complex64>> = (0..bins)
            .map(|k| circular(&y[k * l..(k + 1) * l]))
            .collect();
        for s in 0..l {
            let mu = if sum_w > 0.0 { sw[s].re / sum_w } else { 0.0 };
            let energy = sum_w2 * (1.0 + mu * mu) - 2.0 * mu * sw2[s].re;
            if energy <= 1e-12 * sum_w2 {
                continue;
            }
            let num: f64 = (0..bins)
                .map(|k| (corr[k][s] - x0[k] * mu).norm_sqr())
                .sum();
            total[s] += num / energy;
        }
    }
    total
}

/// Scores every (frequency, phase, code, alignment) cell of the grid.
fn score_grid(
    rec: &SweepRecording,
    params: &SearchParams,
    band_ids: &[usize],
    ppms: &[f64],
    codes: &[CodeSpec],
) -> Result<Vec<CandidateScore>> {
    let spans: Vec<usize> = band_ids
        .iter()
        .map(|&b| span_samples(&rec.bands[b], params.t_int, rec.plan.snapshot_rate))
        .collect::<Result<_>>()?;
    let jobs: Vec<(f64, usize)> = ppms
        .iter()
        .flat_map(|&p| (0..codes.len()).map(move |c| (p, c)))
        .collect();
    let n = params.n_phases;
    let per_job: Vec<Vec<CandidateScore>> = jobs
        .par_iter()
        .map(|&(ppm, ci)| {
            let code = &codes[ci];
            let f = params.nominal_f * (1.0 + ppm * 1e-6);
            let scores = shift_scores(rec, band_ids, &spans, f, code, n);
            let mut out = Vec::with_capacity(code.offsets() * n);
            for off in 0..code.offsets() {
                for p in 0..n {
                    out.push(CandidateScore {
                        offset_ppm: ppm,
                        phase_index: p,
                        code_index: ci,
                        code_offset: off,
                        score: scores[p + off * n],
                    });
                }
            }
            out
        })
        .collect();
    Ok(per_job.into_iter().flatten().collect())
}

/// Search score of a single hypothesis, correlating it directly. Matches the
/// corresponding cell of [`search_tag`]'s grid.
pub fn hypothesis_score(
    rec: &SweepRecording,
    hyp: &TagSignalHypothesis,
    bands: &[usize],
    t_int: Option<f64>,
) -> Result<f64> {
    let mut score = 0.0;
    for &b in bands {
        let band = rec.bands.get(b).ok_or(Error::UnknownBand(b))?;
        let n = span_samples(band, t_int, rec.plan.snapshot_rate)?;
        let w = weights(&band.times[..n], hyp);
        if w.energy <= 0.0 {
            continue;
        }
        let c = correlate(band, n, &w.a);
        score += c.iter().map(|v| v.norm_sqr()).sum::<f64>() / w.energy;
    }
    Ok(score)
}

fn argmax(grid: &[CandidateScore]) -> Option<&CandidateScore> {
    // First maximum wins, independent of evaluation order.
    grid.iter()
        .fold(None, |best: Option<&CandidateScore>, c| match best {
            Some(b) if b.score >= c.score => Some(b),
            _ => Some(c),
        })
}

/// Exhaustive (or coarse-to-fine) correlation search for the tag's modulation.
pub fn search_tag(rec: &SweepRecording, params: &SearchParams) -> Result<SearchResult> {
    let bad = params.validate();
    if !bad.is_empty() {
        return Err(Error::InvalidConfig(bad));
    }
    if rec.bands.is_empty() || rec.snapshot_count() == 0 {
        return Err(Error::EmptyRecording);
    }
    let band_ids: Vec<usize> = if params.bands.is_empty() {
        (0..rec.bands.len()).collect()
    } else {
        params.bands.clone()
    };
    if let Some(&b) = band_ids.iter().find(|&&b| b >= rec.bands.len()) {
        return Err(Error::UnknownBand(b));
    }
    let codes = params.code_list();
    let grid = match params.coarse_step_ppm {
        None => score_grid(
            rec,
            params,
            &band_ids,
            &ppm_grid(0.0, params.span_ppm, params.step_ppm),
            &codes,
        )?,
        Some(coarse) => {
            let first = score_grid(
                rec,
                params,
                &band_ids,
                &ppm_grid(0.0, params.span_ppm, coarse),
                &codes,
            )?;
            let center = argmax(&first).map_or(0.0, |c| c.offset_ppm);
            let fine: Vec<f64> = ppm_grid(center, coarse, params.step_ppm)
                .into_iter()
                .filter(|p| p.abs() <= params.span_ppm + 1e-9)
                .collect();
            let mut g = score_grid(rec, params, &band_ids, &fine, &codes)?;
            g.extend(first);
            g
        }
    };
    let top = *argmax(&grid).ok_or(Error::EmptyRecording)?;
    let best = TagSignalHypothesis {
        f_cand: params.nominal_f * (1.0 + top.offset_ppm * 1e-6),
        offset_ppm: top.offset_ppm,
        phi0: phase_of(top.phase_index, params.n_phases),
        code: codes[top.code_index].clone(),
        code_offset: top.code_offset,
        correlation_score: top.score,
    };
    Ok(SearchResult { best, grid })
}

/// Coherently integrates the first `t_int` seconds of one band against the
/// hypothesis. Each output bin estimates the tag-path amplitude.
pub fn integrate_band(
    band: &BandRecording,
    hyp: &TagSignalHypothesis,
    t_int: Option<f64>,
    rate: f64,
) -> Result<Vec<Complex64>> {
    if band.is_empty() {
        return Err(Error::EmptyRecording);
    }
    let n = span_samples(band, t_int, rate)?;
    let w = weights(&band.times[..n], hyp);
    let c = correlate(band, n, &w.a);
    if w.gain.abs() <= 0.0 {
        return Ok(vec![Complex64::new(0.0, 0.0); band.sub_bins]);
    }
    Ok(c.into_iter().map(|v| v / w.gain).collect())
}

/// Integrates every band of a recording against the hypothesis.
pub fn integrate_recording(
    rec: &SweepRecording,
    hyp: &TagSignalHypothesis,
    t_int: Option<f64>,
) -> Result<Vec<Vec<Complex64>>> {
    rec.bands
        .par_iter()
        .map(|b| integrate_band(b, hyp, t_int, rec.plan.snapshot_rate))
        .collect()
}

/// Per-band time averages of the first `t_int` seconds (no correlation): the
/// static channel including the direct path.
pub fn average_recording(rec: &SweepRecording, t_int: Option<f64>) -> Result<Vec<Vec<Complex64>>> {
    rec.bands
        .iter()
        .map(|b| {
            let n = span_samples(b, t_int, rec.plan.snapshot_rate)?;
            let mut acc = vec![Complex64::new(0.0, 0.0); b.sub_bins];
            for i in 0..n {
                acc.iter_mut().zip(b.snapshot(i)).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= n as f64);
            Ok(acc)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CirEstimate {
    pub samples: Vec<Complex64>,
    /// Seconds between samples: `1 / (zero_pad_factor * bandwidth)`.
    pub time_step: f64,
    pub origin: f64,
    pub snr: f64,
    /// Number of stitched frequency bins before padding.
    pub n_bins: usize,
    pub zero_pad_factor: usize,
}

/// Mainlobe half-width (in resolution cells) excluded from the noise estimate.
const SNR_GUARD_CELLS: usize = 8;

impl CirEstimate {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.samples.iter().map(|v| v.norm()).collect()
    }

    pub fn peak_index(&self) -> usize {
        self.samples
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bi, bv), (i, v)| {
                if v.norm() > bv {
                    (i, v.norm())
                } else {
                    (bi, bv)
                }
            })
            .0
    }

    pub fn time_of(&self, index: f64) -> f64 {
        self.origin + index * self.time_step
    }

    /// Unambiguous delay span covered by the samples.
    pub fn span(&self) -> f64 {
        self.samples.len() as f64 * self.time_step
    }

    pub fn detected(&self) -> bool {
        self.snr >= DETECTION_SNR_DB
    }

    /// Peak power over the noise power, in dB. Noise comes from the median of
    /// the off-peak power divided by ln 2, the median-to-mean ratio of the
    /// exponential distribution followed by complex Gaussian noise power; the
    /// noise contribution is removed from the peak before forming the ratio.
    pub fn estimate_snr(samples: &[Complex64], zero_pad_factor: usize) -> f64 {
        let n = samples.len();
        if n == 0 {
            return f64::NEG_INFINITY;
        }
        let power: Vec<f64> = samples.iter().map(|v| v.norm_sqr()).collect();
        let (peak_i, peak) =
            power.iter().enumerate().fold(
                (0, 0.0),
                |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
            );
        let guard = SNR_GUARD_CELLS * zero_pad_factor;
        let mut off: Vec<f64> = power
            .iter()
            .enumerate()
            .filter(|&(i, _)| {
                let d = (i as isize - peak_i as isize).unsigned_abs();
                d.min(n - d) > guard
            })
            .map(|(_, &p)| p)
            .collect();
        if off.is_empty() || peak <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let mid = off.len() / 2;
        let (_, median, _) = off.select_nth_unstable_by(mid, f64::total_cmp);
        let noise = *median / std::f64::consts::LN_2;
        if noise <= 0.0 {
            return f64::INFINITY;
        }
        linear_to_db(((peak - noise) / noise).max(f64::MIN_POSITIVE))
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "time_s,re,im,magnitude_db")?;
        for (i, v) in self.samples.iter().enumerate() {
            writeln!(
                w,
                "{:.6e},{:.9e},{:.9e},{:.4}",
                self.time_of(i as f64),
                v.re,
                v.im,
                20.0 * v.norm().max(1e-300).log10()
            )?;
        }
        Ok(())
    }
}

/// Inverse transform of a stitched, already calibrated CFR, zero-padded by
/// `zero_pad_factor`. A single path of amplitude `a` peaks at magnitude `a`.
pub fn cfr_to_cir(
    cfr: &[Complex64],
    bin_spacing: f64,
    zero_pad_factor: usize,
) -> Result<CirEstimate> {
    if cfr.is_empty() {
        return Err(Error::EmptyRecording);
    }
    if zero_pad_factor == 0 {
        return domain("zero_pad_factor must be at least 1");
    }
    let n = cfr.len();
    let m = n * zero_pad_factor;
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    buf[..n].copy_from_slice(cfr);
    FftPlanner::<f64>::new()
        .plan_fft_inverse(m)
        .process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
    let snr = CirEstimate::estimate_snr(&buf, zero_pad_factor);
    Ok(CirEstimate {
        samples: buf,
        time_step: 1.0 / (m as f64 * bin_spacing),
        origin: 0.0,
        snr,
        n_bins: n,
        zero_pad_factor,
    })
}

/// Concatenates bands in frequency order, deconvolves the calibration,
/// zero-pads and inverse-transforms.
pub fn stitch_to_cir(
    bands: &[Vec<Complex64>],
    cal: &Calibration,
    zero_pad_factor: usize,
) -> Result<CirEstimate> {
    let plan = &cal.plan;
    if bands.len() < plan.n_bands {
        return Err(Error::MissingBand(bands.len()));
    }
    if let Some(b) = bands.iter().position(|v| v.len() != plan.sub_bins_per_band) {
        return Err(Error::MissingBand(b));
    }
    let stitched: Vec<Complex64> = bands.iter().take(plan.n_bands).flatten().copied().collect();
    let calibrated = apply_calibration(&stitched, cal)?;
    cfr_to_cir(&calibrated, plan.bin_spacing(), zero_pad_factor)
}
