//! Leading-edge time of arrival and time difference of arrival from CIRs.

use std::io::Write;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::SPEED_OF_LIGHT;
use crate::recovery::CirEstimate;
use crate::rfmodel::DETECTION_SNR_DB;

pub const DEFAULT_THRESHOLD: f64 = 0.30;

/// Fraction of the unambiguous range searched before the global peak.
pub const LEADING_EDGE_WINDOW: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Toa {
    pub time: f64,
    /// The CIR was below the detection SNR.
    pub low_confidence: bool,
}

/// Fractional index of the first upward threshold crossing in `[start, peak]`,
/// linearly interpolated between the bracketing samples.
fn leading_edge(mags: &[f64], threshold_fraction: f64) -> Result<(f64, usize)> {
    let n = mags.len();
    let (peak, max) = mags
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    if !(max > 0.0) {
        return Err(Error::NoCrossing);
    }
    let thr = threshold_fraction * max;
    let start = peak.saturating_sub((LEADING_EDGE_WINDOW * n as f64).round() as usize);
    for i in start + 1..=peak {
        if mags[i] >= thr && mags[i - 1] < thr {
            let frac = (thr - mags[i - 1]) / (mags[i] - mags[i - 1]);
            return Ok((i as f64 - 1.0 + frac, peak));
        }
    }
    Err(Error::NoCrossing)
}

/// How far the threshold crossing of an isolated path sits ahead of the path
/// itself, in samples, for this bin count and padding.
pub fn pulse_lead(n_bins: usize, zero_pad_factor: usize, threshold_fraction: f64) -> Result<f64> {
    let m = n_bins * zero_pad_factor;
    let center = m / 2;
    let mut buf: Vec<Complex64> = (0..m)
        .map(|k| {
            if k < n_bins {
                Complex64::from_polar(1.0, -std::f64::consts::TAU * (k * center) as f64 / m as f64)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    FftPlanner::<f64>::new()
        .plan_fft_inverse(m)
        .process(&mut buf);
    let mags: Vec<f64> = buf.iter().map(|v| v.norm()).collect();
    let (edge, _) = leading_edge(&mags, threshold_fraction)?;
    Ok(center as f64 - edge)
}

/// Arrival time of the first path: the leading-edge crossing at
/// `threshold_fraction` of the tallest peak (on magnitude), shifted by the
/// known lead of the band-limited pulse so that isolated paths are unbiased.
pub fn estimate_toa(cir: &CirEstimate, threshold_fraction: f64) -> Result<Toa> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return domain(format!(
            "threshold fraction must be in (0, 1), got {threshold_fraction}"
        ));
    }
    let mags = cir.magnitudes();
    let (edge, _) = leading_edge(&mags, threshold_fraction)?;
    let lead = pulse_lead(cir.n_bins, cir.zero_pad_factor, threshold_fraction)?;
    Ok(Toa {
        time: cir.time_of(edge + lead),
        low_confidence: cir.snr < DETECTION_SNR_DB,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdoaMeasurement {
    pub tx_anchor: u32,
    pub rx_anchor: u32,
    /// Backscatter arrival minus direct arrival (s).
    pub tdoa: f64,
    pub direct_snr: f64,
    pub tag_snr: f64,
    pub threshold_fraction: f64,
    /// False when the tag arrived before the direct path.
    pub valid: bool,
}

impl TdoaMeasurement {
    pub fn from_tdoa(tx_anchor: u32, rx_anchor: u32, tdoa: f64) -> Self {
        Self {
            tx_anchor,
            rx_anchor,
            tdoa,
            direct_snr: f64::INFINITY,
            tag_snr: f64::INFINITY,
            threshold_fraction: DEFAULT_THRESHOLD,
            valid: tdoa >= 0.0,
        }
    }

    /// Excess path length in meters.
    pub fn tdoa_m(&self) -> f64 {
        self.tdoa * SPEED_OF_LIGHT
    }
}

pub fn estimate_tdoa(
    tx_anchor: u32,
    rx_anchor: u32,
    direct: &CirEstimate,
    tag: &CirEstimate,
    threshold_fraction: f64,
) -> Result<TdoaMeasurement> {
    let d = estimate_toa(direct, threshold_fraction)?;
    let t = estimate_toa(tag, threshold_fraction)?;
    let tdoa = t.time - d.time;
    Ok(TdoaMeasurement {
        tx_anchor,
        rx_anchor,
        tdoa,
        direct_snr: direct.snr,
        tag_snr: tag.snr,
        threshold_fraction,
        valid: tdoa >= 0.0,
    })
}

pub fn write_tdoa_csv<W: Write>(w: &mut W, rows: &[TdoaMeasurement]) -> Result<()> {
    writeln!(w, "tx,rx,tdoa_s,tdoa_m,direct_snr_db,tag_snr_db")?;
    for m in rows {
        writeln!(
            w,
            "{},{},{:.9e},{:.6},{:.3},{:.3}",
            m.tx_anchor,
            m.rx_anchor,
            m.tdoa,
            m.tdoa_m(),
            m.direct_snr,
            m.tag_snr
        )?;
    }
    Ok(())
}

/// Reads the table written by [`write_tdoa_csv`]. SNR columns are optional.
pub fn read_tdoa_csv(text: &str) -> Result<Vec<TdoaMeasurement>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty TDoA table".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| cols.iter().position(|c| *c == name);
    let (tx, rx, tdoa) = match (col("tx"), col("rx"), col("tdoa_s")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::Format(
                "TDoA table needs tx, rx and tdoa_s columns".into(),
            ))
        }
    };
    let (dsnr, tsnr) = (col("direct_snr_db"), col("tag_snr_db"));
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Format(format!("TDoA table row {} is malformed: {line}", i + 1));
            let get = |k: usize| f.get(k).copied().ok_or_else(bad);
            let mut m = TdoaMeasurement::from_tdoa(
                get(tx)?.parse().map_err(|_| bad())?,
                get(rx)?.parse().map_err(|_| bad())?,
                get(tdoa)?.parse().map_err(|_| bad())?,
            );
            if let Some(k) = dsnr {
                m.direct_snr = get(k)?.parse().map_err(|_| bad())?;
            }
            if let Some(k) = tsnr {
                m.tag_snr = get(k)?.parse().map_err(|_| bad())?;
            }
            Ok(m)
        })
        .collect()
}
