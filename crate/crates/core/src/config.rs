//! Versioned scenario documents and the built-in presets.

use serde::{Deserialize, Serialize};

use crate::channel::{Anchor, InterferenceSource, PlacedTag, Reflector, Scene};
use crate::error::{Error, Result};
use crate::geometry::{Bounds, Vec3};
use crate::ranging::DEFAULT_THRESHOLD;
use crate::recovery::{window_processing_loss_db, CodeSpec, DEFAULT_ZERO_PAD};
use crate::rfmodel::{db_to_linear, LinkBudget};
use crate::sweep::{Frontend, SweepPlan};
use crate::waveform::{gold_code, TagConfig, NOMINAL_MOD_HZ};

pub const SCHEMA_VERSION: u32 = 1;

/// Anchor-side processing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub nominal_f: f64,
    pub span_ppm: f64,
    pub step_ppm: f64,
    pub n_phases: usize,
    /// Coarse frequency step for a coarse-to-fine search; exhaustive when absent.
    pub coarse_step_ppm: Option<f64>,
    /// Bands scored during the search (all when empty). Integration always
    /// uses every band.
    pub search_bands: Vec<usize>,
    pub cutoff_hz: f64,
    pub zero_pad_factor: usize,
    pub threshold_fraction: f64,
    /// Codes to look for. Empty means one target per distinct code among the
    /// scene's tags, or a single uncoded target when the scene has none.
    pub targets: Vec<CodeSpec>,
    /// Use separate transmit and receive antenna positions as ellipsoid foci.
    pub split_antennas: bool,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            nominal_f: NOMINAL_MOD_HZ,
            span_ppm: 500.0,
            step_ppm: 5.0,
            n_phases: 8,
            coarse_step_ppm: None,
            search_bands: Vec::new(),
            cutoff_hz: 50.0,
            zero_pad_factor: DEFAULT_ZERO_PAD,
            threshold_fraction: DEFAULT_THRESHOLD,
            targets: Vec::new(),
            split_antennas: true,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self, plan: &SweepPlan) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.nominal_f > 0.0) {
            bad.push(format!(
                "recovery.nominal_f must be positive, got {}",
                self.nominal_f
            ));
        }
        if !(self.step_ppm > 0.0) || !(self.span_ppm >= self.step_ppm) {
            bad.push(format!(
                "recovery needs span_ppm >= step_ppm > 0, got span {} step {}",
                self.span_ppm, self.step_ppm
            ));
        }
        if self.n_phases == 0 {
            bad.push("recovery.n_phases must be at least 1".into());
        }
        if let Some(c) = self.coarse_step_ppm {
            if !(c >= self.step_ppm) {
                bad.push(format!(
                    "recovery.coarse_step_ppm {c} must be >= step_ppm {}",
                    self.step_ppm
                ));
            }
        }
        for &b in &self.search_bands {
            if b >= plan.n_bands {
                bad.push(format!(
                    "recovery.search_bands references band {b} but the plan has {}",
                    plan.n_bands
                ));
            }
        }
        if !(self.cutoff_hz >= 0.0 && self.cutoff_hz < 0.5 * plan.snapshot_rate) {
            bad.push(format!(
                "recovery.cutoff_hz must be in [0, {}), got {}",
                0.5 * plan.snapshot_rate,
                self.cutoff_hz
            ));
        }
        if self.zero_pad_factor == 0 {
            bad.push("recovery.zero_pad_factor must be at least 1".into());
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction < 1.0) {
            bad.push(format!(
                "recovery.threshold_fraction must be in (0, 1), got {}",
                self.threshold_fraction
            ));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if t.chips.is_empty() || t.cycles_per_chip == 0 {
                bad.push(format!(
                    "recovery.targets[{i}] needs chips and cycles_per_chip >= 1"
                ));
            }
        }
        bad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub scene: Scene,
    #[serde(default)]
    pub sweep: SweepPlan,
    #[serde(default)]
    pub recovery: RecoveryConfig,
    /// Radio frontend response; the cabled calibration captures it exactly.
    #[serde(default)]
    pub frontend: Option<Frontend>,
    #[serde(default)]
    pub inject_clock_ambiguity: bool,
    /// Search volume for the position solver.
    pub room: Bounds,
    /// When non-empty, the scene's first tag is moved to each position in turn
    /// and one fix is produced per position.
    #[serde(default)]
    pub positions: Vec<Vec3>,
    /// Root of every random stream in the run.
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Every violation in the document.
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            bad.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        bad.extend(self.scene.validate());
        if let Err(e) = self.scene.budget.validate() {
            bad.push(format!("budget: {e}"));
        }
        bad.extend(self.sweep.validate());
        bad.extend(self.recovery.validate(&self.sweep));
        let r = &self.room;
        if !(r.min.is_finite()
            && r.max.is_finite()
            && r.max.x > r.min.x
            && r.max.y > r.min.y
            && r.max.z >= r.min.z)
        {
            bad.push("room bounds must be finite with max > min".into());
        }
        if !self.positions.is_empty() && self.scene.tags.is_empty() {
            bad.push("positions were given but the scene has no tag to move".into());
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !p.is_finite() {
                bad.push(format!("positions[{i}] is not finite"));
            }
        }
        bad
    }

    pub fn check(&self) -> Result<()> {
        let bad = self.validate();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }

    /// Code targets searched for by the pipeline.
    pub fn targets(&self) -> Vec<CodeSpec> {
        if !self.recovery.targets.is_empty() {
            return self.recovery.targets.clone();
        }
        let mut out: Vec<CodeSpec> = Vec::new();
        for t in &self.scene.tags {
            let spec = code_spec(&t.config);
            if !out.contains(&spec) {
                out.push(spec);
            }
        }
        if out.is_empty() {
            out.push(CodeSpec::uncoded());
        }
        out
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "room" => Ok(room_preset()),
            "furnished" => Ok(furnished_preset()),
            "hallway" => Ok(hallway_preset()),
            "multitag" => Ok(multitag_preset()),
            "empty" => Ok(empty_preset()),
            other => Err(Error::InvalidConfig(vec![format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )])),
        }
    }
}

pub const PRESETS: [&str; 5] = ["room", "furnished", "hallway", "multitag", "empty"];

/// Search target matching a tag's configured code.
pub fn code_spec(cfg: &TagConfig) -> CodeSpec {
    if cfg.code.len() <= 1 {
        CodeSpec::uncoded()
    } else {
        CodeSpec {
            chips: cfg.code.clone(),
            cycles_per_chip: cfg.cycles_per_chip,
        }
    }
}

fn v(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3::new(x, y, z)
}

/// Anchor with transmit and receive antennas 10 cm apart along x.
fn split_anchor(id: u32, p: Vec3) -> Anchor {
    Anchor {
        tx_antenna_offset: v(-0.05, 0.0, 0.0),
        rx_antenna_offset: v(0.05, 0.0, 0.0),
        ..Anchor::new(id, p)
    }
}

fn room_anchors() -> Vec<Anchor> {
    vec![
        split_anchor(1, v(0.2, 0.2, 2.2)),
        split_anchor(2, v(4.3, 0.3, 2.2)),
        split_anchor(3, v(2.3, 2.8, 2.2)),
    ]
}

/// Receiver noise figure for the room presets. Raised above the default so
/// that a 2 s dwell lands the stitched tag CIR near the detection operating
/// point instead of far above it.
const ROOM_NOISE_FIGURE_DB: f64 = 25.0;

fn room_preset() -> ScenarioConfig {
    let mut scene = Scene::new(room_anchors());
    scene.budget = LinkBudget {
        eta_r: ROOM_NOISE_FIGURE_DB,
        ..LinkBudget::default()
    };
    scene.tags.push(PlacedTag {
        config: TagConfig {
            freq_offset_ppm: 120.0,
            time_offset: 0.0123,
            seed: 7,
            ..TagConfig::default()
        },
        position: v(2.0, 1.5, 1.0),
        excess_loss_db: 0.0,
    });
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: "room".into(),
        scene,
        sweep: SweepPlan {
            dwell: 2.0,
            ..SweepPlan::default()
        },
        recovery: RecoveryConfig::default(),
        frontend: Some(Frontend::default()),
        inject_clock_ambiguity: true,
        room: Bounds::new(v(0.0, 0.0, 0.0), v(4.5, 3.0, 2.3)),
        positions: vec![
            v(1.0, 1.0, 0.8),
            v(2.0, 1.5, 1.0),
            v(3.2, 0.8, 1.4),
            v(3.8, 2.2, 0.9),
            v(1.5, 2.4, 1.6),
            v(2.8, 2.0, 0.5),
            v(0.8, 1.8, 1.2),
            v(3.5, 1.4, 1.4),
            v(2.2, 0.7, 1.5),
            v(1.2, 0.6, 0.4),
        ],
        seed: 2024,
    }
}

/// The room with the kind of static clutter a furnished office shows. The
/// reflector placements and losses are assumptions: a desk, a whiteboard, a
/// metal cabinet, the floor and the ceiling.
fn furnished_preset() -> ScenarioConfig {
    let mut cfg = room_preset();
    cfg.name = "furnished".into();
    cfg.scene.reflectors = vec![
        Reflector {
            position: v(1.5, 1.0, 0.75),
            reflection_gain: -6.0,
        },
        Reflector {
            position: v(4.4, 1.5, 1.5),
            reflection_gain: -3.0,
        },
        Reflector {
            position: v(0.1, 2.5, 1.0),
            reflection_gain: -2.0,
        },
        Reflector {
            position: v(2.2, 1.5, 0.0),
            reflection_gain: -8.0,
        },
        Reflector {
            position: v(2.2, 1.5, 2.3),
            reflection_gain: -10.0,
        },
    ];
    cfg
}

/// Two anchors side by side at one end of a 30 m hallway. Tag positions run
/// down its axis; the last one is 15 m from both anchors. The snapshot rate is
/// halved to keep the long dwell affordable; per-second integration gain is
/// unchanged because the per-snapshot noise scales with the rate.
fn hallway_preset() -> ScenarioConfig {
    let anchors = vec![
        split_anchor(1, v(0.0, 0.5, 1.5)),
        split_anchor(2, v(0.0, 1.5, 1.5)),
    ];
    let mut scene = Scene::new(anchors);
    let mid = hallway_midpoint();
    scene.tags.push(PlacedTag {
        config: TagConfig {
            freq_offset_ppm: -80.0,
            time_offset: 0.0071,
            seed: 11,
            ..TagConfig::default()
        },
        position: mid,
        excess_loss_db: 0.0,
    });
    let dwell = hallway_dwell(&scene.budget);
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: "hallway".into(),
        scene,
        sweep: SweepPlan {
            dwell,
            snapshot_rate: 625.0,
            ..SweepPlan::default()
        },
        recovery: RecoveryConfig::default(),
        frontend: Some(Frontend::default()),
        inject_clock_ambiguity: true,
        room: Bounds::new(v(0.0, 0.0, 0.0), v(30.0, 2.0, 3.0)),
        positions: Vec::new(),
        seed: 30,
    }
}

/// On the hallway axis, 15 m from both anchor centers.
pub fn hallway_midpoint() -> Vec3 {
    v((15f64.powi(2) - 0.25).sqrt(), 1.0, 1.5)
}

/// Tag positions along the hallway axis for the range sweep, ending at the midpoint.
pub fn hallway_positions() -> Vec<Vec3> {
    let mut out: Vec<Vec3> = [1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0]
        .iter()
        .map(|&x| v(x, 1.0, 1.5))
        .collect();
    out.push(hallway_midpoint());
    out
}

/// Integration per band the pipeline needs for a tag at `(r1, r2)`: the link
/// budget requirement stretched by the correlation window's processing loss.
pub fn required_integration(budget: &LinkBudget, r1: f64, r2: f64) -> Result<f64> {
    let t = budget.min_integration_time(r1, r2)?;
    // The window loss converges quickly; 10^4 samples is its long-window value.
    Ok(t * db_to_linear(window_processing_loss_db(10_000)))
}

/// Dwell that gives the midpoint tag its required integration on every band,
/// plus the settling trim.
pub fn hallway_dwell(budget: &LinkBudget) -> f64 {
    let t = required_integration(budget, 15.0, 15.0).unwrap_or(20.0);
    (t * 10.0).ceil() / 10.0 + SweepPlan::default().trim
}

/// Three tags with distinct 63-chip codes in the room.
fn multitag_preset() -> ScenarioConfig {
    let mut cfg = room_preset();
    cfg.name = "multitag".into();
    cfg.positions.clear();
    let spots = [v(1.2, 1.0, 1.0), v(3.3, 1.1, 1.4), v(2.4, 2.3, 0.8)];
    let offsets = [60.0, -40.0, 150.0];
    let starts = [0.0031, 0.4172, 0.7393];
    cfg.scene.tags = (0..3)
        .map(|i| PlacedTag {
            config: TagConfig {
                code: gold_code(6, i).expect("6-bit gold family"),
                cycles_per_chip: 1,
                freq_offset_ppm: offsets[i],
                time_offset: starts[i],
                seed: 100 + i as u64,
                ..TagConfig::default()
            },
            position: spots[i],
            excess_loss_db: 0.0,
        })
        .collect();
    cfg.recovery.span_ppm = 200.0;
    cfg.recovery.n_phases = 4;
    cfg
}

/// The room with nothing in it to find.
fn empty_preset() -> ScenarioConfig {
    let mut cfg = room_preset();
    cfg.name = "empty".into();
    cfg.scene.tags.clear();
    cfg.positions.clear();
    cfg
}

/// Adds an interference source to a preset.
pub fn with_interference(mut cfg: ScenarioConfig, src: InterferenceSource) -> ScenarioConfig {
    cfg.scene.interference.push(src);
    cfg
}
