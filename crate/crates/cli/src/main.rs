//! `slocal`: command line front end for the backscatter localization twin.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use slocal::config::{ScenarioConfig, PRESETS};
use slocal::coverage::{
    cdf_quantile, coverage_cdf, integration_time_map, layout_preset, write_cdf_csv,
};
use slocal::locate::{solve_position, write_positions_csv, AnchorGeometry, SolverOptions};
use slocal::pipeline::{
    anchor_pairs, calibration_for, recover_targets, run_end_to_end_to, scene_at, search_params,
    simulate_pair, FixStatus,
};
use slocal::ranging::{read_tdoa_csv, write_tdoa_csv};
use slocal::recovery::{highpass_recording, search_tag};
use slocal::rfmodel::{backscatter_rx_power, required_noise_floor, IntegrationLaw};
use slocal::sweep::{derive_seed, resolve_clock_ambiguity, SweepRecording};
use slocal::Error;

#[derive(Parser)]
#[command(
    name = "slocal",
    version,
    about = "Slow-integration UWB backscatter localization twin"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario JSON document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in scenario, used when no --config is given.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Root seed; overrides the scenario's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seconds per band; overrides the scenario's sweep dwell.
    #[arg(long, global = true)]
    dwell: Option<f64>,
    /// Leading-edge threshold as a fraction of the CIR peak.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// High-pass cutoff applied before the modulation search (Hz).
    #[arg(long = "cutoff-hz", global = true)]
    cutoff_hz: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Link budget and integration requirement for a tag at (r1, r2).
    Budget {
        #[arg(long, default_value_t = 5.0)]
        r1: f64,
        #[arg(long, default_value_t = 5.0)]
        r2: f64,
    },
    /// Print a built-in scenario as JSON.
    Preset { name: String },
    /// Simulate one sweep per anchor pair and write the recordings.
    Simulate {
        /// Which entry of the scenario's position list to place the tag at.
        #[arg(long, default_value_t = 0)]
        position: usize,
    },
    /// Recover tag and direct-path CIRs from recordings.
    Recover { recordings: Vec<PathBuf> },
    /// Recover and estimate TDoA for each recording.
    Range { recordings: Vec<PathBuf> },
    /// Solve for tag positions from a TDoA table.
    Locate {
        #[arg(long)]
        tdoa: PathBuf,
    },
    /// Map required integration time over a square floor.
    Coverage {
        #[arg(long, default_value = "bistatic-corners")]
        layout: String,
        /// Floor edge length (m).
        #[arg(long, default_value_t = 80.0)]
        size: f64,
        #[arg(long, default_value_t = 1.0)]
        resolution: f64,
    },
    /// Simulate, recover, range and locate every fix in the scenario.
    E2e,
    /// Score every scenario code target on a recording and report the best cells.
    MultitagSearch { recording: PathBuf },
}

/// Error with the exit code and machine-readable kind it maps to.
struct Failure {
    code: u8,
    kind: &'static str,
    messages: Vec<String>,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        if let Some(core) = e.downcast_ref::<Error>() {
            let (code, kind) = match core {
                Error::InvalidConfig(_) | Error::Json(_) => (2, "config"),
                Error::NoCrossing | Error::EmptyRecording => (3, "not_found"),
                Error::Underdetermined { .. } => (4, "not_converged"),
                _ => (1, "runtime"),
            };
            let messages = match core {
                Error::InvalidConfig(v) => v.clone(),
                other => vec![other.to_string()],
            };
            return Self {
                code,
                kind,
                messages,
            };
        }
        Self {
            code: 1,
            kind: "runtime",
            messages: vec![format!("{e:#}")],
        }
    }
}

fn fail(code: u8, kind: &'static str, msg: impl Into<String>) -> Failure {
    Failure {
        code,
        kind,
        messages: vec![msg.into()],
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SLOC_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "messages": f.messages }));
            ExitCode::from(f.code)
        }
    }
}

fn load_config(c: &Common) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| fail(2, "config", format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<ScenarioConfig>(&text)
                .map_err(|e| fail(2, "config", e.to_string()))?
        }
        (None, Some(name)) => ScenarioConfig::preset(name).map_err(anyhow::Error::from)?,
        (None, None) => {
            return Err(fail(
                2,
                "config",
                format!("pass --config <path> or --preset <{}>", PRESETS.join("|")),
            ))
        }
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = c.dwell {
        cfg.sweep.dwell = d;
    }
    if let Some(t) = c.threshold {
        cfg.recovery.threshold_fraction = t;
    }
    if let Some(f) = c.cutoff_hz {
        cfg.recovery.cutoff_hz = f;
    }
    cfg.check().map_err(anyhow::Error::from)?;
    Ok(cfg)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

fn read_recording(path: &Path) -> anyhow::Result<SweepRecording> {
    let mut r = BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    );
    Ok(SweepRecording::read_from(&mut r)?)
}

fn run(cli: &Cli) -> Outcome {
    let c = &cli.common;
    match &cli.command {
        Command::Preset { name } => {
            let cfg = ScenarioConfig::preset(name).map_err(anyhow::Error::from)?;
            println!("{}", cfg.to_json().map_err(anyhow::Error::from)?);
            Ok(())
        }
        Command::Budget { r1, r2 } => budget(c, *r1, *r2),
        Command::Coverage {
            layout,
            size,
            resolution,
        } => coverage(c, layout, *size, *resolution),
        Command::Simulate { position } => simulate(c, *position),
        Command::Recover { recordings } => recover(c, recordings),
        Command::Range { recordings } => range(c, recordings),
        Command::Locate { tdoa } => locate(c, tdoa),
        Command::E2e => e2e(c),
        Command::MultitagSearch { recording } => multitag_search(c, recording),
    }
}

fn budget(c: &Common, r1: f64, r2: f64) -> Outcome {
    let base = if c.config.is_some() || c.preset.is_some() {
        load_config(c)?.scene.budget
    } else {
        Default::default()
    };
    let b = base.with_distances(r1, r2);
    let run = || -> anyhow::Result<serde_json::Value> {
        Ok(json!({
            "r1_m": r1,
            "r2_m": r2,
            "rx_power_dbm_mhz": backscatter_rx_power(&b)?,
            "required_noise_floor_dbm": required_noise_floor(&b)?,
            "min_integration_time_s": b.min_integration_time(r1, r2)?,
            "log10_coefficient": IntegrationLaw::from_budget(&b)?.log10_coeff,
        }))
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&run()?).map_err(anyhow::Error::from)?
    );
    Ok(())
}

fn coverage(c: &Common, layout: &str, size: f64, resolution: f64) -> Outcome {
    let budget = if c.config.is_some() || c.preset.is_some() {
        load_config(c)?.scene.budget
    } else {
        Default::default()
    };
    let run = || -> anyhow::Result<()> {
        let layout = layout_preset(layout, size, resolution)?;
        let map = integration_time_map(&layout, &budget)?;
        fs::create_dir_all(&c.out)?;
        map.write_csv(&mut create(&c.out.join("coverage_map.csv"))?)?;
        map.write_grid(&mut create(&c.out.join("coverage_grid.txt"))?)?;
        let cdf = coverage_cdf(&map.values);
        write_cdf_csv(&mut create(&c.out.join("coverage_cdf.csv"))?, &cdf)?;
        println!(
            "{}",
            json!({
                "cells": map.values.len(),
                "median_s": cdf_quantile(&cdf, 0.5),
                "p95_s": cdf_quantile(&cdf, 0.95),
            })
        );
        Ok(())
    };
    Ok(run()?)
}

fn simulate(c: &Common, position: usize) -> Outcome {
    let cfg = load_config(c)?;
    let pos = if cfg.positions.is_empty() {
        None
    } else {
        Some(*cfg.positions.get(position).ok_or_else(|| {
            fail(
                2,
                "config",
                format!(
                    "position {position} out of range ({} defined)",
                    cfg.positions.len()
                ),
            )
        })?)
    };
    let run = || -> anyhow::Result<()> {
        fs::create_dir_all(&c.out)?;
        let scene = scene_at(&cfg, pos);
        let fix_seed = derive_seed(cfg.seed, position as u64);
        for (j, &(tx, rx)) in anchor_pairs(&scene).iter().enumerate() {
            let rec = simulate_pair(&cfg, &scene, fix_seed, j, tx, rx)?;
            let path = c.out.join(format!("recording_{tx}_{rx}.slorec"));
            let mut w = create(&path)?;
            rec.write_to(&mut w)?;
            w.flush()?;
            log::info!("wrote {}", path.display());
        }
        let cal = calibration_for(&cfg).to_recording();
        let mut w = create(&c.out.join("calibration.slorec"))?;
        cal.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    };
    Ok(run()?)
}

fn recover(c: &Common, recordings: &[PathBuf]) -> Outcome {
    let cfg = load_config(c)?;
    let targets = cfg.targets();
    let run = || -> anyhow::Result<bool> {
        fs::create_dir_all(&c.out)?;
        let mut any = false;
        let mut summary = Vec::new();
        for path in recordings {
            let rec = read_recording(path)?;
            for (ti, r) in recover_targets(&rec, &cfg, &targets)?.iter().enumerate() {
                let stem = format!("cir_{}_{}_t{ti}", r.tx, r.rx);
                r.tag_cir
                    .write_csv(&mut create(&c.out.join(format!("{stem}_tag.csv")))?)?;
                r.direct_cir
                    .write_csv(&mut create(&c.out.join(format!("{stem}_direct.csv")))?)?;
                any |= r.detected();
                summary.push(json!({
                    "tx": r.tx,
                    "rx": r.rx,
                    "target": ti,
                    "detected": r.detected(),
                    "offset_ppm": r.hypothesis.offset_ppm,
                    "phase": r.hypothesis.phi0,
                    "code_offset": r.hypothesis.code_offset,
                    "tag_snr_db": r.tag_cir.snr,
                    "direct_snr_db": r.direct_cir.snr,
                    "clock_offsets": r.clock_offsets,
                    "clock_ambiguous": r.clock_ambiguous,
                }));
            }
        }
        fs::write(
            c.out.join("recovery.json"),
            serde_json::to_string_pretty(&summary)? + "\n",
        )?;
        Ok(any)
    };
    if run()? {
        Ok(())
    } else {
        Err(fail(3, "not_found", "no tag cleared the detection SNR"))
    }
}

fn range(c: &Common, recordings: &[PathBuf]) -> Outcome {
    let cfg = load_config(c)?;
    let targets = cfg.targets();
    let run = || -> anyhow::Result<usize> {
        fs::create_dir_all(&c.out)?;
        let mut rows = Vec::new();
        for path in recordings {
            let rec = read_recording(path)?;
            for r in recover_targets(&rec, &cfg, &targets)? {
                if !r.detected() {
                    log::warn!(
                        "pair {}-{}: tag below detection SNR ({:.1} dB)",
                        r.tx,
                        r.rx,
                        r.tag_cir.snr
                    );
                    continue;
                }
                rows.push(r.tdoa(cfg.recovery.threshold_fraction)?);
            }
        }
        write_tdoa_csv(&mut create(&c.out.join("tdoa.csv"))?, &rows)?;
        Ok(rows.len())
    };
    match run()? {
        0 => Err(fail(3, "not_found", "no detected tag, no TDoA written")),
        _ => Ok(()),
    }
}

fn locate(c: &Common, tdoa: &Path) -> Outcome {
    let cfg = load_config(c)?;
    let run = || -> anyhow::Result<_> {
        let text =
            fs::read_to_string(tdoa).with_context(|| format!("cannot read {}", tdoa.display()))?;
        let rows: Vec<_> = read_tdoa_csv(&text)?
            .into_iter()
            .filter(|m| m.valid)
            .collect();
        let geom = AnchorGeometry::from_anchors(&cfg.scene.anchors, cfg.recovery.split_antennas);
        let est = solve_position(&rows, &geom, &cfg.room, None, &SolverOptions::default())?;
        fs::create_dir_all(&c.out)?;
        write_positions_csv(&mut create(&c.out.join("positions.csv"))?, &[est])?;
        Ok(est)
    };
    let est = run()?;
    if est.converged {
        println!(
            "{}",
            serde_json::to_string(&est).map_err(anyhow::Error::from)?
        );
        Ok(())
    } else {
        Err(fail(4, "not_converged", "position solver did not converge"))
    }
}

fn e2e(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    let report = run_end_to_end_to(&cfg, Some(&c.out)).map_err(anyhow::Error::from)?;
    log::info!("timings: {:?}", report.timings);
    println!(
        "{}",
        json!({
            "name": report.name,
            "fixes": report.fixes.len(),
            "located": report.located().count(),
            "mean_error_m": report.mean_error_m,
            "median_error_m": report.median_error_m,
        })
    );
    if report
        .fixes
        .iter()
        .any(|f| f.status == FixStatus::NotConverged)
    {
        return Err(fail(
            4,
            "not_converged",
            "position solver did not converge on at least one fix",
        ));
    }
    if report
        .fixes
        .iter()
        .all(|f| f.status == FixStatus::TagNotFound)
    {
        return Err(fail(3, "not_found", "tag not found"));
    }
    Ok(())
}

fn multitag_search(c: &Common, recording: &Path) -> Outcome {
    let cfg = load_config(c)?;
    let targets = cfg.targets();
    let run = || -> anyhow::Result<()> {
        let rec = read_recording(recording)?;
        let clock = resolve_clock_ambiguity(&rec, &calibration_for(&cfg))?;
        let filtered = if cfg.recovery.cutoff_hz > 0.0 {
            highpass_recording(&clock.recording, cfg.recovery.cutoff_hz)?
        } else {
            clock.recording
        };
        fs::create_dir_all(&c.out)?;
        let mut w = create(&c.out.join("multitag_search.csv"))?;
        writeln!(w, "target,offset_ppm,phase_index,code_offset,score")?;
        let mut best = Vec::new();
        for (ti, t) in targets.iter().enumerate() {
            let found = search_tag(&filtered, &search_params(&cfg, std::slice::from_ref(t)))?;
            for g in &found.grid {
                writeln!(
                    w,
                    "{ti},{},{},{},{:.6e}",
                    g.offset_ppm, g.phase_index, g.code_offset, g.score
                )?;
            }
            best.push(json!({
                "target": ti,
                "offset_ppm": found.best.offset_ppm,
                "phase": found.best.phi0,
                "code_offset": found.best.code_offset,
                "score": found.best.correlation_score,
            }));
        }
        w.flush()?;
        println!("{}", serde_json::to_string_pretty(&best)?);
        Ok(())
    };
    Ok(run()?)
}
