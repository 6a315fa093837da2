//! Bandstitching: sweep plans, snapshot capture, PLL-settling trim, inter-anchor
//! clock ambiguity and calibration deconvolution.

use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelModel, Scene};
use crate::error::{Error, Result};

pub const RECORDING_MAGIC: &[u8; 8] = b"SLOREC1\0";

/// Number of equispaced phase states the divided reference can lock to.
pub const CLOCK_PHASE_CANDIDATES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepPlan {
    pub f0: f64,
    pub band_width: f64,
    pub n_bands: usize,
    pub sub_bins_per_band: usize,
    /// Seconds spent on each band, including the trimmed settling interval.
    pub dwell: f64,
    pub snapshot_rate: f64,
    /// Seconds discarded after each retune.
    pub trim: f64,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            f0: 3.3e9,
            band_width: 25e6,
            n_bands: 49,
            sub_bins_per_band: 20,
            dwell: 2.0,
            snapshot_rate: 1250.0,
            trim: 0.080,
        }
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.f0 > 0.0) {
            bad.push(format!("f0 must be positive, got {}", self.f0));
        }
        if !(self.band_width > 0.0) {
            bad.push(format!(
                "band_width must be positive, got {}",
                self.band_width
            ));
        }
        if self.n_bands == 0 {
            bad.push("n_bands must be at least 1".into());
        }
        if self.sub_bins_per_band == 0 {
            bad.push("sub_bins_per_band must be at least 1".into());
        }
        if !(self.snapshot_rate > 0.0) {
            bad.push(format!(
                "snapshot_rate must be positive, got {}",
                self.snapshot_rate
            ));
        }
        if !(self.trim >= 0.0) {
            bad.push(format!("trim must be non-negative, got {}", self.trim));
        }
        if !(self.dwell > self.trim) {
            bad.push(format!(
                "dwell ({}) must exceed trim ({})",
                self.dwell, self.trim
            ));
        }
        bad
    }

    pub fn n_bins(&self) -> usize {
        self.n_bands * self.sub_bins_per_band
    }

    pub fn total_bandwidth(&self) -> f64 {
        self.n_bands as f64 * self.band_width
    }

    pub fn bin_spacing(&self) -> f64 {
        self.band_width / self.sub_bins_per_band as f64
    }

    /// Longest delay the stitched CIR can represent without aliasing.
    pub fn unambiguous_range(&self) -> f64 {
        1.0 / self.bin_spacing()
    }

    pub fn sub_bin_frequency(&self, band: usize, k: usize) -> f64 {
        self.f0 + band as f64 * self.band_width + (k as f64 + 0.5) * self.bin_spacing()
    }

    pub fn snapshots_per_band(&self) -> usize {
        ((self.dwell - self.trim) * self.snapshot_rate + 1e-9).floor() as usize
    }

    pub fn snapshot_time(&self, band: usize, i: usize) -> f64 {
        band as f64 * self.dwell + self.trim + i as f64 / self.snapshot_rate
    }

    pub fn sweep_duration(&self) -> f64 {
        self.n_bands as f64 * self.dwell
    }
}

/// Builds a plan with the default snapshot rate and trim.
pub fn plan_sweep(
    f0: f64,
    band_width: f64,
    n_bands: usize,
    sub_bins: usize,
    dwell: f64,
) -> Result<SweepPlan> {
    let plan = SweepPlan {
        f0,
        band_width,
        n_bands,
        sub_bins_per_band: sub_bins,
        dwell,
        ..SweepPlan::default()
    };
    let bad = plan.validate();
    if bad.is_empty() {
        Ok(plan)
    } else {
        Err(Error::InvalidConfig(bad))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub tx: u32,
    pub rx: u32,
    pub scene_hash: u64,
    pub seed: u64,
    /// Clock-phase candidate index applied to each band, when injected.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub injected_offsets: Vec<usize>,
}

/// Snapshots of one band, stored snapshot-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BandRecording {
    pub times: Vec<f64>,
    pub data: Vec<Complex64>,
    pub sub_bins: usize,
}

impl BandRecording {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn snapshot(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.sub_bins..(i + 1) * self.sub_bins]
    }

    /// Time series of sub-bin `k`.
    pub fn bin_series(&self, k: usize) -> Vec<Complex64> {
        self.data
            .iter()
            .skip(k)
            .step_by(self.sub_bins)
            .copied()
            .collect()
    }

    pub fn mean(&self) -> Vec<Complex64> {
        let mut acc = vec![Complex64::new(0.0, 0.0); self.sub_bins];
        for i in 0..self.len() {
            for (a, v) in acc.iter_mut().zip(self.snapshot(i)) {
                *a += v;
            }
        }
        let n = self.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    fn rotate(&mut self, phasor: Complex64) {
        self.data.iter_mut().for_each(|v| *v *= phasor);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecording {
    pub plan: SweepPlan,
    pub bands: Vec<BandRecording>,
    pub meta: RecordingMeta,
}

impl SweepRecording {
    pub fn snapshot_count(&self) -> usize {
        self.bands.first().map_or(0, |b| b.len())
    }

    /// Per-band time average, stitched in frequency order.
    pub fn mean_cfr(&self) -> Vec<Complex64> {
        self.bands.iter().flat_map(|b| b.mean()).collect()
    }

    /// Multiplies every sample by `k`; used for scale-invariance checks.
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.bands
            .iter_mut()
            .for_each(|b| b.data.iter_mut().for_each(|v| *v *= k));
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let count = self.snapshot_count();
        if self.bands.iter().any(|b| b.len() != count) {
            return Err(Error::Format("bands have unequal snapshot counts".into()));
        }
        w.write_all(RECORDING_MAGIC)?;
        for v in [
            self.plan.n_bands as u32,
            self.plan.sub_bins_per_band as u32,
            count as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let p = &self.plan;
        for v in [p.f0, p.band_width, p.snapshot_rate, p.dwell, p.trim] {
            w.write_all(&v.to_le_bytes())?;
        }
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        let mut buf = Vec::with_capacity(8 * (1 + 2 * p.sub_bins_per_band));
        for band in &self.bands {
            for i in 0..band.len() {
                buf.clear();
                buf.extend_from_slice(&band.times[i].to_le_bytes());
                for v in band.snapshot(i) {
                    buf.extend_from_slice(&v.re.to_le_bytes());
                    buf.extend_from_slice(&v.im.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != RECORDING_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let n_bands = read_u32(r)? as usize;
        let sub_bins = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let f0 = read_f64(r)?;
        let band_width = read_f64(r)?;
        let snapshot_rate = read_f64(r)?;
        let dwell = read_f64(r)?;
        let trim = read_f64(r)?;
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta = std::str::from_utf8(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let meta: RecordingMeta = serde_json::from_str(meta)?;
        if sub_bins == 0 {
            return Err(Error::Format("zero sub-bins".into()));
        }
        let plan = SweepPlan {
            f0,
            band_width,
            n_bands,
            sub_bins_per_band: sub_bins,
            dwell,
            snapshot_rate,
            trim,
        };
        let mut bands = Vec::with_capacity(n_bands);
        for _ in 0..n_bands {
            let mut times = Vec::with_capacity(count);
            let mut data = Vec::with_capacity(count * sub_bins);
            for _ in 0..count {
                times.push(read_f64(r)?);
                for _ in 0..sub_bins {
                    let re = read_f64(r)?;
                    let im = read_f64(r)?;
                    data.push(Complex64::new(re, im));
                }
            }
            bands.push(BandRecording {
                times,
                data,
                sub_bins,
            });
        }
        Ok(Self { plan, bands, meta })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Per-band complex response of the radio frontends (what a cabled
/// calibration captures).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Frontend {
    /// Group delay through the frontends (s).
    pub delay: f64,
    /// Peak-to-peak magnitude ripple across each band (dB).
    pub ripple_db: f64,
    /// Random PLL lock phase per band.
    pub random_band_phase: bool,
    pub seed: u64,
}

impl Default for Frontend {
    fn default() -> Self {
        Self {
            delay: 0.0,
            ripple_db: 1.0,
            random_band_phase: true,
            seed: 0x5eed,
        }
    }
}

impl Frontend {
    pub fn ideal() -> Self {
        Self {
            delay: 0.0,
            ripple_db: 0.0,
            random_band_phase: false,
            seed: 0,
        }
    }

    pub fn response(&self, plan: &SweepPlan) -> Vec<Vec<Complex64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..plan.n_bands)
            .map(|band| {
                let phase = if self.random_band_phase {
                    rng.gen::<f64>() * std::f64::consts::TAU
                } else {
                    0.0
                };
                let tilt: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
                (0..plan.sub_bins_per_band)
                    .map(|k| {
                        let x = (k as f64 + 0.5) / plan.sub_bins_per_band as f64;
                        let db = 0.5 * self.ripple_db * (std::f64::consts::TAU * x + tilt).cos();
                        let mag = 10f64.powf(db / 20.0);
                        let f = plan.sub_bin_frequency(band, k);
                        Complex64::from_polar(mag, phase - std::f64::consts::TAU * f * self.delay)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Reference response per band, captured over a direct cabled connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub plan: SweepPlan,
    pub bands: Vec<Vec<Complex64>>,
}

impl Calibration {
    pub fn capture(frontend: &Frontend, plan: &SweepPlan) -> Self {
        Self {
            plan: plan.clone(),
            bands: frontend.response(plan),
        }
    }

    pub fn identity(plan: &SweepPlan) -> Self {
        Self {
            plan: plan.clone(),
            bands: vec![vec![Complex64::new(1.0, 0.0); plan.sub_bins_per_band]; plan.n_bands],
        }
    }

    pub fn stitched(&self) -> Vec<Complex64> {
        self.bands.iter().flatten().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (b, band) in self.bands.iter().enumerate() {
            if let Some(k) = band
                .iter()
                .position(|v| !(v.norm() > 0.0) || !v.is_finite())
            {
                return Err(Error::ZeroCalibration { band: b, bin: k });
            }
        }
        Ok(())
    }

    /// Same container as a recording with a single snapshot per band.
    pub fn to_recording(&self) -> SweepRecording {
        SweepRecording {
            plan: self.plan.clone(),
            bands: self
                .bands
                .iter()
                .map(|b| BandRecording {
                    times: vec![0.0],
                    data: b.clone(),
                    sub_bins: b.len(),
                })
                .collect(),
            meta: RecordingMeta::default(),
        }
    }

    pub fn from_recording(rec: &SweepRecording) -> Result<Self> {
        if rec.snapshot_count() != 1 {
            return Err(Error::Format(format!(
                "calibration needs exactly one snapshot per band, got {}",
                rec.snapshot_count()
            )));
        }
        Ok(Self {
            plan: rec.plan.clone(),
            bands: rec.bands.iter().map(|b| b.data.clone()).collect(),
        })
    }
}

/// Per-bin complex division by the calibration response.
pub fn apply_calibration(cfr: &[Complex64], cal: &Calibration) -> Result<Vec<Complex64>> {
    let reference = cal.stitched();
    if reference.len() != cfr.len() {
        return Err(Error::Format(format!(
            "CFR has {} bins but calibration has {}",
            cfr.len(),
            reference.len()
        )));
    }
    cal.validate()?;
    Ok(cfr.iter().zip(&reference).map(|(v, c)| v / c).collect())
}

#[derive(Debug, Clone, Default)]
pub struct CaptureOptions {
    pub frontend: Option<Frontend>,
    /// Draw a random clock-phase candidate per band (band 0 is the reference).
    pub inject_clock_ambiguity: bool,
}

/// SplitMix64 finalizer; derives independent sub-seeds from a root seed.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root
        ^ stream
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn clock_phasor(candidate: usize) -> Complex64 {
    Complex64::from_polar(
        1.0,
        std::f64::consts::TAU * candidate as f64 / CLOCK_PHASE_CANDIDATES as f64,
    )
}

/// Simulates a full sweep for the pair `(tx, rx)`. Band `b` occupies
/// `[b * dwell, (b + 1) * dwell)` in anchor time; snapshots start after the trim.
pub fn capture_sweep(
    scene: &Scene,
    tx: u32,
    rx: u32,
    plan: &SweepPlan,
    seed: u64,
    opts: &CaptureOptions,
) -> Result<SweepRecording> {
    let bad: Vec<String> = plan
        .validate()
        .into_iter()
        .chain(scene.validate())
        .collect();
    if !bad.is_empty() {
        return Err(Error::InvalidConfig(bad));
    }
    let model = ChannelModel::new(scene, tx, rx, plan, plan.sweep_duration())?;
    let frontend = opts.frontend.as_ref().map(|f| f.response(plan));
    let offsets: Vec<usize> = if opts.inject_clock_ambiguity {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
        (0..plan.n_bands)
            .map(|b| {
                if b == 0 {
                    0
                } else {
                    rng.gen_range(0..CLOCK_PHASE_CANDIDATES)
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let count = plan.snapshots_per_band();
    let bins = plan.sub_bins_per_band;
    let bands = (0..plan.n_bands)
        .into_par_iter()
        .map(|band| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, band as u64));
            let mut times = Vec::with_capacity(count);
            let mut data = vec![Complex64::new(0.0, 0.0); count * bins];
            let rot = offsets
                .get(band)
                .map_or(Complex64::new(1.0, 0.0), |&c| clock_phasor(c));
            for (i, chunk) in data.chunks_mut(bins).enumerate() {
                let t = plan.snapshot_time(band, i);
                times.push(t);
                model.snapshot_into(band, t, &mut rng, chunk)?;
                if let Some(fe) = &frontend {
                    chunk.iter_mut().zip(&fe[band]).for_each(|(v, h)| *v *= h);
                }
                if rot != Complex64::new(1.0, 0.0) {
                    chunk.iter_mut().for_each(|v| *v *= rot);
                }
            }
            Ok(BandRecording {
                times,
                data,
                sub_bins: bins,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepRecording {
        plan: plan.clone(),
        bands,
        meta: RecordingMeta {
            tx,
            rx,
            scene_hash: scene.content_hash(),
            seed,
            injected_offsets: offsets,
        },
    })
}

#[derive(Debug, Clone)]
pub struct ClockResolution {
    pub recording: SweepRecording,
    /// Candidate index removed from each band, relative to band 0.
    pub offsets: Vec<usize>,
    /// Mean adjacent-bin phase coherence of the calibrated CFR, in `[0, 1]`.
    pub coherence: f64,
    pub ambiguous: bool,
}

/// Below this adjacent-bin coherence the stitched phase cannot be trusted.
pub const MIN_CLOCK_COHERENCE: f64 = 0.5;

/// Removes per-band clock-phase jumps by choosing, at each band boundary, the
/// candidate that continues the phase slope of the neighbouring bins.
pub fn resolve_clock_ambiguity(rec: &SweepRecording, cal: &Calibration) -> Result<ClockResolution> {
    if rec.bands.is_empty() || rec.snapshot_count() == 0 {
        return Err(Error::EmptyRecording);
    }
    if cal.bands.len() != rec.bands.len() {
        return Err(Error::MissingBand(cal.bands.len().min(rec.bands.len())));
    }
    cal.validate()?;
    let mut means: Vec<Vec<Complex64>> = rec
        .bands
        .iter()
        .zip(&cal.bands)
        .map(|(b, c)| b.mean().iter().zip(c).map(|(v, h)| v / h).collect())
        .collect();

    let slope = |v: &[Complex64]| -> (Complex64, f64) {
        let mut s = Complex64::new(0.0, 0.0);
        let mut m = 0.0;
        for w in v.windows(2) {
            s += w[1] * w[0].conj();
            m += w[1].norm() * w[0].norm();
        }
        (s, m)
    };

    let mut coherence_acc = 0.0;
    for m in &means {
        let (s, mag) = slope(m);
        coherence_acc += if mag > 0.0 { s.norm() / mag } else { 0.0 };
    }
    let coherence = coherence_acc / means.len() as f64;

    let mut offsets = vec![0usize; means.len()];
    for b in 1..means.len() {
        let (s_prev, _) = slope(&means[b - 1]);
        let (s_next, _) = slope(&means[b]);
        let step = s_prev + s_next;
        let step = if step.norm() > 0.0 {
            step / step.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        let last = *means[b - 1].last().unwrap();
        let first = means[b][0];
        let predicted = last * step;
        let best = (0..CLOCK_PHASE_CANDIDATES)
            .map(|c| (c, (first * clock_phasor(c).conj() * predicted.conj()).re))
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, x| if x.1 > acc.1 { x } else { acc },
            )
            .0;
        offsets[b] = best;
        let fix = clock_phasor(best).conj();
        means[b].iter_mut().for_each(|v| *v *= fix);
    }

    let mut recording = rec.clone();
    for (band, &c) in recording.bands.iter_mut().zip(&offsets) {
        if c != 0 {
            band.rotate(clock_phasor(c).conj());
        }
    }
    Ok(ClockResolution {
        recording,
        offsets,
        coherence,
        ambiguous: coherence < MIN_CLOCK_COHERENCE,
    })
}
