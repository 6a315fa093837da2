//! Ground-truth channel synthesis: direct path, static multipath, tag-modulated
//! reflections, environmental interference and thermal noise.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{path_delay, Vec3};
use crate::rfmodel::{backscatter_rx_power, db_to_linear, LinkBudget, THERMAL_NOISE_DBM};
use crate::sweep::SweepPlan;
use crate::waveform::{TagConfig, TagWaveform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub id: u32,
    pub position: Vec3,
    #[serde(default)]
    pub tx_antenna_offset: Vec3,
    #[serde(default)]
    pub rx_antenna_offset: Vec3,
    /// Excess attenuation on every path touching this anchor (dB), e.g. an
    /// anchor hidden behind a tile.
    #[serde(default)]
    pub obstruction_db: f64,
}

impl Anchor {
    pub fn new(id: u32, position: Vec3) -> Self {
        Self {
            id,
            position,
            tx_antenna_offset: Vec3::ZERO,
            rx_antenna_offset: Vec3::ZERO,
            obstruction_db: 0.0,
        }
    }

    pub fn tx_position(&self) -> Vec3 {
        self.position + self.tx_antenna_offset
    }

    pub fn rx_position(&self) -> Vec3 {
        self.position + self.rx_antenna_offset
    }
}

/// Specular reflector; its path is the direct-path law evaluated over the
/// bounce length, scaled by `reflection_gain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflector {
    pub position: Vec3,
    pub reflection_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedTag {
    pub config: TagConfig,
    pub position: Vec3,
    #[serde(default)]
    pub excess_loss_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionModel {
    /// Reflect and absorb as ±1 around a static mean folded into the static CIR.
    #[default]
    Antipodal,
    /// Reflect = 1, absorb = 0.
    OnOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub freq_hz: f64,
    pub amplitude_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterferenceKind {
    /// People moving: Lorentzian spectrum with the given corner, truncated at `max_hz`.
    Walking {
        corner_hz: f64,
        max_hz: f64,
    },
    /// Lamp flicker: lines at `1..=harmonics` times `line_hz`, each with a
    /// carrier plus a flat random skirt of half-width `linewidth_hz`.
    Fluorescent {
        line_hz: f64,
        harmonics: u32,
        linewidth_hz: f64,
    },
    Custom {
        tones: Vec<Tone>,
    },
}

impl InterferenceKind {
    pub fn walking() -> Self {
        Self::Walking {
            corner_hz: 3.0,
            max_hz: 40.0,
        }
    }

    pub fn fluorescent() -> Self {
        Self::Fluorescent {
            line_hz: 60.0,
            harmonics: 2,
            linewidth_hz: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceSource {
    #[serde(flatten)]
    pub kind: InterferenceKind,
    /// Power relative to the direct path (dB). Negative infinity disables it.
    pub amplitude_db: f64,
    #[serde(default)]
    pub seed: u64,
}

impl InterferenceSource {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.amplitude_db.is_nan() || self.amplitude_db == f64::INFINITY {
            bad.push(format!(
                "interference amplitude must be finite, got {}",
                self.amplitude_db
            ));
        }
        match &self.kind {
            InterferenceKind::Walking { corner_hz, max_hz } => {
                if !(*corner_hz > 0.0 && *max_hz > 0.0) {
                    bad.push("walking corner and max frequencies must be positive".into());
                }
            }
            InterferenceKind::Fluorescent {
                line_hz,
                harmonics,
                linewidth_hz,
            } => {
                if !(*line_hz > 0.0) || *harmonics == 0 || !(*linewidth_hz >= 0.0) {
                    bad.push(
                        "fluorescent line frequency and harmonic count must be positive".into(),
                    );
                }
            }
            InterferenceKind::Custom { tones } => {
                if tones
                    .iter()
                    .any(|t| !t.freq_hz.is_finite() || t.amplitude_db.is_nan())
                {
                    bad.push("custom tones must have finite frequencies".into());
                }
            }
        }
        bad
    }
}

/// Unit-power random process realized as a fixed sum of complex sinusoids, so
/// it can be evaluated at any time from its seed alone.
#[derive(Debug, Clone)]
pub struct InterferenceProcess {
    components: Vec<(f64, Complex64)>,
}

const SPECTRAL_LINES: usize = 64;

impl InterferenceProcess {
    pub fn new(src: &InterferenceSource) -> Self {
        let scale = db_to_linear(src.amplitude_db).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(src.seed);
        let mut components = Vec::new();
        let phasor = |rng: &mut ChaCha8Rng, mag: f64| {
            Complex64::from_polar(mag, rng.gen::<f64>() * std::f64::consts::TAU)
        };
        match &src.kind {
            InterferenceKind::Walking { corner_hz, max_hz } => {
                let cauchy = Cauchy::new(0.0, *corner_hz).expect("positive corner");
                let mag = (1.0 / SPECTRAL_LINES as f64).sqrt();
                while components.len() < SPECTRAL_LINES {
                    let f: f64 = cauchy.sample(&mut rng);
                    if f.abs() <= *max_hz {
                        components.push((f, phasor(&mut rng, mag)));
                    }
                }
            }
            InterferenceKind::Fluorescent {
                line_hz,
                harmonics,
                linewidth_hz,
            } => {
                // Half the power in the carriers, half in the skirts.
                let lines = 2 * *harmonics as usize;
                let skirt = SPECTRAL_LINES / lines;
                let carrier_mag = (0.5 / lines as f64).sqrt();
                let skirt_mag = (0.5 / (lines * skirt) as f64).sqrt();
                for m in 1..=*harmonics {
                    for sign in [1.0, -1.0] {
                        let center = sign * m as f64 * line_hz;
                        components.push((center, phasor(&mut rng, carrier_mag)));
                        for _ in 0..skirt {
                            let df = (2.0 * rng.gen::<f64>() - 1.0) * linewidth_hz;
                            components.push((center + df, phasor(&mut rng, skirt_mag)));
                        }
                    }
                }
            }
            InterferenceKind::Custom { tones } => {
                for t in tones {
                    let mag = db_to_linear(t.amplitude_db).sqrt();
                    components.push((t.freq_hz, phasor(&mut rng, mag)));
                }
            }
        }
        for c in &mut components {
            c.1 *= scale;
        }
        if scale == 0.0 {
            components.clear();
        }
        Self { components }
    }

    pub fn sample(&self, t: f64) -> Complex64 {
        self.components
            .iter()
            .map(|&(f, a)| a * Complex64::from_polar(1.0, std::f64::consts::TAU * f * t))
            .sum()
    }

    pub fn components(&self) -> &[(f64, Complex64)] {
        &self.components
    }
}

/// Complex multiplier contributed by `src` at time `t`, relative to the
/// direct path. Deterministic in the source's seed.
pub fn interference_waveform(src: &InterferenceSource, t: f64) -> Complex64 {
    InterferenceProcess::new(src).sample(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub anchors: Vec<Anchor>,
    #[serde(default)]
    pub reflectors: Vec<Reflector>,
    #[serde(default)]
    pub tags: Vec<PlacedTag>,
    #[serde(default)]
    pub interference: Vec<InterferenceSource>,
    /// Thermal floor integrated over one second (dBm).
    #[serde(default = "default_noise_floor")]
    pub temperature_noise_floor: f64,
    #[serde(default = "default_true")]
    pub thermal_noise: bool,
    /// Transmit power, antenna gains, wavelength, tag loss and receiver noise
    /// figure. Distances in the budget are ignored; geometry supplies them.
    #[serde(default)]
    pub budget: LinkBudget,
    #[serde(default)]
    pub reflection_model: ReflectionModel,
}

fn default_noise_floor() -> f64 {
    THERMAL_NOISE_DBM
}

fn default_true() -> bool {
    true
}

impl Scene {
    pub fn new(anchors: Vec<Anchor>) -> Self {
        Self {
            anchors,
            reflectors: Vec::new(),
            tags: Vec::new(),
            interference: Vec::new(),
            temperature_noise_floor: THERMAL_NOISE_DBM,
            thermal_noise: true,
            budget: LinkBudget::default(),
            reflection_model: ReflectionModel::Antipodal,
        }
    }

    pub fn anchor(&self, id: u32) -> Result<&Anchor> {
        self.anchors
            .iter()
            .find(|a| a.id == id)
            .ok_or(Error::UnknownAnchor(id))
    }

    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.anchors.len() < 2 {
            bad.push(format!(
                "a bistatic scene needs at least 2 anchors, got {}",
                self.anchors.len()
            ));
        }
        for (i, a) in self.anchors.iter().enumerate() {
            if self.anchors[..i].iter().any(|b| b.id == a.id) {
                bad.push(format!("duplicate anchor id {}", a.id));
            }
            if !(a.position.is_finite()
                && a.tx_antenna_offset.is_finite()
                && a.rx_antenna_offset.is_finite())
            {
                bad.push(format!("anchor {} has a non-finite position", a.id));
            }
        }
        for (i, r) in self.reflectors.iter().enumerate() {
            if !r.position.is_finite() {
                bad.push(format!("reflector {i} has a non-finite position"));
            }
            if !(r.reflection_gain <= 0.0) {
                bad.push(format!(
                    "reflector {i} gain must be <= 0 dB, got {}",
                    r.reflection_gain
                ));
            }
        }
        for (i, t) in self.tags.iter().enumerate() {
            if !t.position.is_finite() {
                bad.push(format!("tag {i} has a non-finite position"));
            }
            bad.extend(
                t.config
                    .validate()
                    .into_iter()
                    .map(|m| format!("tag {i}: {m}")),
            );
        }
        for (i, s) in self.interference.iter().enumerate() {
            bad.extend(
                s.validate()
                    .into_iter()
                    .map(|m| format!("interference {i}: {m}")),
            );
        }
        if !self.temperature_noise_floor.is_finite() {
            bad.push("temperature_noise_floor must be finite".into());
        }
        bad
    }

    /// Stable 64-bit FNV-1a hash of the scene's JSON form.
    pub fn content_hash(&self) -> u64 {
        let json = serde_json::to_string(self).unwrap_or_default();
        json.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    /// Direct-path power between the transmit antenna of `tx` and the receive
    /// antenna of `rx` (dBm/MHz).
    pub fn direct_power(&self, tx: &Anchor, rx: &Anchor) -> f64 {
        let b = &self.budget;
        let d = tx.tx_position().distance(rx.rx_position()).max(1e-3);
        b.p_t + b.g_t + b.g_r + b.free_space_term(d) - tx.obstruction_db - rx.obstruction_db
    }

    /// Backscatter power of a tag at `pos` for the pair (dBm/MHz).
    pub fn tag_power(&self, tx: &Anchor, rx: &Anchor, tag: &PlacedTag) -> Result<f64> {
        let r1 = tx.tx_position().distance(tag.position).max(1e-3);
        let r2 = tag.position.distance(rx.rx_position()).max(1e-3);
        Ok(backscatter_rx_power(&self.budget.with_distances(r1, r2))?
            - tag.excess_loss_db
            - tx.obstruction_db
            - rx.obstruction_db)
    }
}

/// Precomputed per-pair channel: path phasors per band plus the time-varying
/// processes. Cheap to sample repeatedly.
pub struct ChannelModel {
    plan: SweepPlan,
    /// `[band][bin]` sum of all static paths.
    static_cfr: Vec<Vec<Complex64>>,
    /// `[band][bin]` direct path only; interference modulates it.
    direct_cfr: Vec<Vec<Complex64>>,
    /// `[tag][band][bin]`, already scaled by the tag amplitude.
    tag_cfr: Vec<Vec<Vec<Complex64>>>,
    tags: Vec<TagWaveform>,
    interference: Vec<InterferenceProcess>,
    noise_sigma: f64,
    pub direct_delay: f64,
    pub tag_delays: Vec<f64>,
}

fn ramp(plan: &SweepPlan, band: usize, amplitude: f64, delay: f64) -> Vec<Complex64> {
    (0..plan.sub_bins_per_band)
        .map(|k| {
            let f = plan.sub_bin_frequency(band, k);
            Complex64::from_polar(amplitude, -std::f64::consts::TAU * f * delay)
        })
        .collect()
}

impl ChannelModel {
    /// `horizon` bounds the anchor time at which tag waveforms are sampled.
    pub fn new(scene: &Scene, tx: u32, rx: u32, plan: &SweepPlan, horizon: f64) -> Result<Self> {
        let txa = scene.anchor(tx)?;
        let rxa = scene.anchor(rx)?;
        let (t_pos, r_pos) = (txa.tx_position(), rxa.rx_position());
        let direct_delay = path_delay(t_pos, r_pos, None);
        let direct_amp = db_to_linear(scene.direct_power(txa, rxa)).sqrt();

        let b = &scene.budget;
        let mut statics: Vec<(f64, f64)> = vec![(direct_amp, direct_delay)];
        for r in &scene.reflectors {
            let len = t_pos.distance(r.position) + r.position.distance(r_pos);
            let p = b.p_t + b.g_t + b.g_r + b.free_space_term(len.max(1e-3)) + r.reflection_gain
                - txa.obstruction_db
                - rxa.obstruction_db;
            statics.push((
                db_to_linear(p).sqrt(),
                path_delay(t_pos, r.position, Some(r_pos)),
            ));
        }

        let mut tag_amps = Vec::new();
        let mut tag_delays = Vec::new();
        for t in &scene.tags {
            tag_amps.push(db_to_linear(scene.tag_power(txa, rxa, t)?).sqrt());
            tag_delays.push(path_delay(t_pos, t.position, Some(r_pos)));
        }

        let mut static_cfr = Vec::with_capacity(plan.n_bands);
        let mut direct_cfr = Vec::with_capacity(plan.n_bands);
        for band in 0..plan.n_bands {
            let mut acc = vec![Complex64::new(0.0, 0.0); plan.sub_bins_per_band];
            for &(a, d) in &statics {
                for (o, v) in acc.iter_mut().zip(ramp(plan, band, a, d)) {
                    *o += v;
                }
            }
            // On-off tags leave half their amplitude as a static reflection.
            if scene.reflection_model == ReflectionModel::OnOff {
                for (&a, &d) in tag_amps.iter().zip(&tag_delays) {
                    for (o, v) in acc.iter_mut().zip(ramp(plan, band, 0.5 * a, d)) {
                        *o += v;
                    }
                }
            }
            static_cfr.push(acc);
            direct_cfr.push(ramp(plan, band, direct_amp, direct_delay));
        }
        let tag_scale = match scene.reflection_model {
            ReflectionModel::Antipodal => 1.0,
            ReflectionModel::OnOff => 0.5,
        };
        let tag_cfr = tag_amps
            .iter()
            .zip(&tag_delays)
            .map(|(&a, &d)| {
                (0..plan.n_bands)
                    .map(|band| ramp(plan, band, tag_scale * a, d))
                    .collect()
            })
            .collect();

        let noise_sigma = if scene.thermal_noise {
            let per_snapshot =
                scene.temperature_noise_floor + 10.0 * plan.snapshot_rate.log10() + b.eta_r;
            db_to_linear(per_snapshot).sqrt()
        } else {
            0.0
        };

        Ok(Self {
            plan: plan.clone(),
            static_cfr,
            direct_cfr,
            tag_cfr,
            tags: scene
                .tags
                .iter()
                .map(|t| TagWaveform::new(&t.config, horizon))
                .collect(),
            interference: scene
                .interference
                .iter()
                .map(InterferenceProcess::new)
                .collect(),
            noise_sigma,
            direct_delay,
            tag_delays,
        })
    }

    /// Standard deviation of the complex noise in one snapshot bin.
    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn snapshot_into<R: Rng + ?Sized>(
        &self,
        band: usize,
        t: f64,
        rng: &mut R,
        out: &mut [Complex64],
    ) -> Result<()> {
        if band >= self.plan.n_bands {
            return Err(Error::UnknownBand(band));
        }
        out.copy_from_slice(&self.static_cfr[band]);
        for (wave, cfr) in self.tags.iter().zip(&self.tag_cfr) {
            let s = wave.state(t) as f64;
            for (o, v) in out.iter_mut().zip(&cfr[band]) {
                *o += v * s;
            }
        }
        if !self.interference.is_empty() {
            let g: Complex64 = self.interference.iter().map(|p| p.sample(t)).sum();
            for (o, v) in out.iter_mut().zip(&self.direct_cfr[band]) {
                *o += v * g;
            }
        }
        if self.noise_sigma > 0.0 {
            let s = self.noise_sigma * std::f64::consts::FRAC_1_SQRT_2;
            for o in out.iter_mut() {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                *o += Complex64::new(re * s, im * s);
            }
        }
        Ok(())
    }
}

/// One CFR snapshot for the pair `(tx, rx)` on `band` at anchor time `t`.
pub fn synthesize_cfr<R: Rng + ?Sized>(
    scene: &Scene,
    tx: u32,
    rx: u32,
    plan: &SweepPlan,
    band: usize,
    t: f64,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    let model = ChannelModel::new(scene, tx, rx, plan, t + 1.0)?;
    let mut out = vec![Complex64::new(0.0, 0.0); plan.sub_bins_per_band];
    model.snapshot_into(band, t, rng, &mut out)?;
    Ok(out)
}
