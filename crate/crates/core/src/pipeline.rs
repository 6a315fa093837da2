//! End-to-end composition of the recovery chain: capture, clock-ambiguity
//! removal, high-pass filtering, modulation search, integration, stitching,
//! TDoA estimation and lateration.
//!
//! Random streams: fix `i` (one tag position and code target) uses
//! `derive_seed(root, i)`; the sweep for anchor pair `j` within it uses
//! `derive_seed(fix_seed, j)`; band `b` of that sweep uses
//! `derive_seed(pair_seed, b)`. Tag jitter and interference draw from the
//! seeds in their own configurations.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::Scene;
use crate::config::{code_spec, ScenarioConfig};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::locate::{
    solve_position, write_positions_csv, AnchorGeometry, PositionEstimate, SolverOptions,
};
use crate::ranging::{estimate_tdoa, write_tdoa_csv, TdoaMeasurement};
use crate::recovery::{
    average_recording, highpass_recording, integrate_recording, search_tag, stitch_to_cir,
    CirEstimate, CodeSpec, SearchParams, TagSignalHypothesis,
};
use crate::rfmodel::DETECTION_SNR_DB;
use crate::sweep::{
    capture_sweep, derive_seed, resolve_clock_ambiguity, Calibration, CaptureOptions, Frontend,
    SweepRecording,
};

/// Result of running the anchor-side chain on one pair's recording for one target.
#[derive(Debug, Clone)]
pub struct PairRecovery {
    pub tx: u32,
    pub rx: u32,
    pub hypothesis: TagSignalHypothesis,
    pub tag_cir: CirEstimate,
    pub direct_cir: CirEstimate,
    pub clock_offsets: Vec<usize>,
    pub clock_ambiguous: bool,
}

impl PairRecovery {
    pub fn detected(&self) -> bool {
        self.tag_cir.snr >= DETECTION_SNR_DB
    }

    pub fn tdoa(&self, threshold_fraction: f64) -> Result<TdoaMeasurement> {
        estimate_tdoa(
            self.tx,
            self.rx,
            &self.direct_cir,
            &self.tag_cir,
            threshold_fraction,
        )
    }
}

/// Loopback calibration for the configured frontend.
pub fn calibration_for(cfg: &ScenarioConfig) -> Calibration {
    match &cfg.frontend {
        Some(f) => Calibration::capture(f, &cfg.sweep),
        None => Calibration::capture(&Frontend::ideal(), &cfg.sweep),
    }
}

pub fn search_params(cfg: &ScenarioConfig, targets: &[CodeSpec]) -> SearchParams {
    let r = &cfg.recovery;
    SearchParams {
        nominal_f: r.nominal_f,
        span_ppm: r.span_ppm,
        step_ppm: r.step_ppm,
        n_phases: r.n_phases,
        codes: targets.to_vec(),
        bands: r.search_bands.clone(),
        t_int: None,
        coarse_step_ppm: r.coarse_step_ppm,
    }
}

/// Runs the chain on a captured recording, once per target. The clock
/// resolution, direct-path CIR and filtering are shared between targets.
pub fn recover_targets(
    rec: &SweepRecording,
    cfg: &ScenarioConfig,
    targets: &[CodeSpec],
) -> Result<Vec<PairRecovery>> {
    let cal = calibration_for(cfg);
    let clock = resolve_clock_ambiguity(rec, &cal)?;
    let pad = cfg.recovery.zero_pad_factor;
    let direct_cir = stitch_to_cir(&average_recording(&clock.recording, None)?, &cal, pad)?;
    let filtered = if cfg.recovery.cutoff_hz > 0.0 {
        highpass_recording(&clock.recording, cfg.recovery.cutoff_hz)?
    } else {
        clock.recording.clone()
    };
    targets
        .iter()
        .map(|target| {
            let found = search_tag(&filtered, &search_params(cfg, std::slice::from_ref(target)))?;
            let bands = integrate_recording(&filtered, &found.best, None)?;
            let tag_cir = stitch_to_cir(&bands, &cal, pad)?;
            Ok(PairRecovery {
                tx: rec.meta.tx,
                rx: rec.meta.rx,
                hypothesis: found.best,
                tag_cir,
                direct_cir: direct_cir.clone(),
                clock_offsets: clock.offsets.clone(),
                clock_ambiguous: clock.ambiguous,
            })
        })
        .collect()
}

/// Unordered anchor pairs, lower id transmitting.
pub fn anchor_pairs(scene: &Scene) -> Vec<(u32, u32)> {
    let mut ids: Vec<u32> = scene.anchors.iter().map(|a| a.id).collect();
    ids.sort_unstable();
    let mut out = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            out.push((a, b));
        }
    }
    out
}

/// The scene with its first tag moved to `position`.
pub fn scene_at(cfg: &ScenarioConfig, position: Option<Vec3>) -> Scene {
    let mut scene = cfg.scene.clone();
    if let (Some(p), Some(tag)) = (position, scene.tags.first_mut()) {
        tag.position = p;
    }
    scene
}

pub fn capture_options(cfg: &ScenarioConfig) -> CaptureOptions {
    CaptureOptions {
        frontend: cfg.frontend.clone(),
        inject_clock_ambiguity: cfg.inject_clock_ambiguity,
    }
}

/// Recording of pair number `pair` for fix seed `fix_seed`.
pub fn simulate_pair(
    cfg: &ScenarioConfig,
    scene: &Scene,
    fix_seed: u64,
    pair: usize,
    tx: u32,
    rx: u32,
) -> Result<SweepRecording> {
    capture_sweep(
        scene,
        tx,
        rx,
        &cfg.sweep,
        derive_seed(fix_seed, pair as u64),
        &capture_options(cfg),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixStatus {
    Located,
    /// Detected on too few pairs to solve for a position.
    RangedOnly,
    TagNotFound,
    NotConverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub tx: u32,
    pub rx: u32,
    pub detected: bool,
    pub offset_ppm: f64,
    pub code_offset: usize,
    pub phase: f64,
    pub tag_snr_db: f64,
    pub direct_snr_db: f64,
    pub tdoa: Option<TdoaMeasurement>,
    /// Measured minus true excess path length (m), when the truth is known.
    pub tdoa_error_m: Option<f64>,
    pub clock_ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixReport {
    pub index: usize,
    pub target: usize,
    pub truth: Option<Vec3>,
    pub status: FixStatus,
    pub position: Option<PositionEstimate>,
    pub error_m: Option<f64>,
    pub pairs: Vec<PairReport>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub simulate_s: f64,
    pub recover_s: f64,
    pub locate_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub fixes: Vec<FixReport>,
    pub mean_error_m: Option<f64>,
    pub median_error_m: Option<f64>,
    /// Wall-clock only; excluded from the serialized report so reruns are
    /// byte-identical.
    #[serde(skip)]
    pub timings: Timings,
}

impl Report {
    pub fn located(&self) -> impl Iterator<Item = &FixReport> {
        self.fixes.iter().filter(|f| f.status == FixStatus::Located)
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// True position of the scene tag carrying `target`, if exactly one does.
fn truth_for(scene: &Scene, target: &CodeSpec) -> Option<Vec3> {
    let mut hits = scene
        .tags
        .iter()
        .filter(|t| &code_spec(&t.config) == target);
    match (hits.next(), hits.next()) {
        (Some(t), None) => Some(t.position),
        _ => None,
    }
}

pub fn run_end_to_end(cfg: &ScenarioConfig) -> Result<Report> {
    run_end_to_end_to(cfg, None)
}

/// Full run. With `out`, writes per-fix CIRs, the TDoA table, the position
/// table, the recordings of the first fix and `report.json`.
pub fn run_end_to_end_to(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<Report> {
    cfg.check()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let targets = cfg.targets();
    let positions: Vec<Option<Vec3>> = if cfg.positions.is_empty() {
        vec![None]
    } else {
        cfg.positions.iter().copied().map(Some).collect()
    };
    let pairs = anchor_pairs(&cfg.scene);
    let geom = AnchorGeometry::from_anchors(&cfg.scene.anchors, cfg.recovery.split_antennas);
    let frac = cfg.recovery.threshold_fraction;
    let mut timings = Timings::default();
    let mut fixes = Vec::new();
    let mut all_tdoas = Vec::new();
    let mut all_positions = Vec::new();

    for (pi, pos) in positions.iter().enumerate() {
        let scene = scene_at(cfg, *pos);
        let fix_seed = derive_seed(cfg.seed, pi as u64);
        // recovered[pair][target]
        let mut recovered = Vec::with_capacity(pairs.len());
        for (j, &(tx, rx)) in pairs.iter().enumerate() {
            let t0 = Instant::now();
            let rec = simulate_pair(cfg, &scene, fix_seed, j, tx, rx)?;
            timings.simulate_s += t0.elapsed().as_secs_f64();
            if let (Some(dir), 0) = (out, pi) {
                let mut w = BufWriter::new(File::create(
                    dir.join(format!("recording_{tx}_{rx}.slorec")),
                )?);
                rec.write_to(&mut w)?;
            }
            let t1 = Instant::now();
            recovered.push(recover_targets(&rec, cfg, &targets)?);
            timings.recover_s += t1.elapsed().as_secs_f64();
            log::info!("fix {pi} pair {tx}-{rx} recovered");
        }

        for (ti, target) in targets.iter().enumerate() {
            let index = fixes.len();
            let truth = truth_for(&scene, target);
            let mut reports = Vec::new();
            let mut measurements = Vec::new();
            for per_target in &recovered {
                let r = &per_target[ti];
                let tdoa = r.tdoa(frac).ok();
                let detected = r.detected() && tdoa.as_ref().is_some_and(|m| m.valid);
                let tdoa_error_m = match (truth, &tdoa) {
                    (Some(p), Some(m)) => {
                        let ideal = crate::locate::ellipsoid_residual(
                            p,
                            &TdoaMeasurement::from_tdoa(r.tx, r.rx, 0.0),
                            &geom,
                        )?;
                        Some(m.tdoa_m() - ideal)
                    }
                    _ => None,
                };
                if let Some(dir) = out {
                    let mut w = BufWriter::new(File::create(
                        dir.join(format!("cir_fix{index}_{}_{}_tag.csv", r.tx, r.rx)),
                    )?);
                    r.tag_cir.write_csv(&mut w)?;
                    let mut w = BufWriter::new(File::create(
                        dir.join(format!("cir_fix{index}_{}_{}_direct.csv", r.tx, r.rx)),
                    )?);
                    r.direct_cir.write_csv(&mut w)?;
                }
                if detected {
                    measurements.push(tdoa.clone().expect("detected implies a TDoA"));
                }
                reports.push(PairReport {
                    tx: r.tx,
                    rx: r.rx,
                    detected,
                    offset_ppm: r.hypothesis.offset_ppm,
                    code_offset: r.hypothesis.code_offset,
                    phase: r.hypothesis.phi0,
                    tag_snr_db: r.tag_cir.snr,
                    direct_snr_db: r.direct_cir.snr,
                    tdoa,
                    tdoa_error_m,
                    clock_ambiguous: r.clock_ambiguous,
                });
            }
            all_tdoas.extend(measurements.iter().cloned());

            let t2 = Instant::now();
            let (status, position) = if measurements.is_empty() {
                (FixStatus::TagNotFound, None)
            } else if measurements.len() < 3 {
                (FixStatus::RangedOnly, None)
            } else {
                match solve_position(
                    &measurements,
                    &geom,
                    &cfg.room,
                    None,
                    &SolverOptions::default(),
                ) {
                    Ok(p) if p.converged => (FixStatus::Located, Some(p)),
                    Ok(p) => (FixStatus::NotConverged, Some(p)),
                    Err(Error::Underdetermined { .. }) => (FixStatus::RangedOnly, None),
                    Err(e) => return Err(e),
                }
            };
            timings.locate_s += t2.elapsed().as_secs_f64();
            if let Some(p) = position {
                all_positions.push(p);
            }
            let error_m = match (status, truth, position) {
                (FixStatus::Located, Some(t), Some(p)) => Some(p.position.distance(t)),
                _ => None,
            };
            fixes.push(FixReport {
                index,
                target: ti,
                truth,
                status,
                position,
                error_m,
                pairs: reports,
            });
        }
    }

    let errors: Vec<f64> = fixes.iter().filter_map(|f| f.error_m).collect();
    let mean_error_m = if errors.is_empty() {
        None
    } else {
        Some(errors.iter().sum::<f64>() / errors.len() as f64)
    };
    let report = Report {
        name: cfg.name.clone(),
        seed: cfg.seed,
        fixes,
        mean_error_m,
        median_error_m: median(errors),
        timings,
    };
    if let Some(dir) = out {
        let mut w = BufWriter::new(File::create(dir.join("tdoa.csv"))?);
        write_tdoa_csv(&mut w, &all_tdoas)?;
        let mut w = BufWriter::new(File::create(dir.join("positions.csv"))?);
        write_positions_csv(&mut w, &all_positions)?;
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
    }
    Ok(report)
}
