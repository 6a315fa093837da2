//! Required integration time over a floor plan for monostatic and bistatic
//! anchor arrangements.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Bounds, Vec3};
use crate::rfmodel::{IntegrationLaw, LinkBudget};

/// Distances are clamped to this before evaluating the integration law.
pub const MIN_DISTANCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// Each anchor transmits and receives on its own.
    Monostatic,
    /// Every ordered pair of distinct anchors forms a transmit/receive link.
    Bistatic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorLayout {
    pub arrangement: Arrangement,
    pub anchors: Vec<Vec3>,
    pub room: Bounds,
    pub resolution: f64,
    /// Height of the evaluated plane.
    pub tag_height: f64,
    /// Monostatic cells closer than this to the anchor are lost to flash.
    #[serde(default = "default_flash")]
    pub flash_radius: f64,
}

fn default_flash() -> f64 {
    1.0
}

impl AnchorLayout {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.resolution > 0.0) {
            bad.push(format!(
                "grid resolution must be positive, got {}",
                self.resolution
            ));
        }
        if self.anchors.is_empty() {
            bad.push("layout needs at least one anchor".into());
        }
        if self.arrangement == Arrangement::Bistatic {
            let distinct = self
                .anchors
                .iter()
                .enumerate()
                .any(|(i, a)| self.anchors[..i].iter().any(|b| b.distance(*a) > 0.0));
            if !distinct {
                bad.push("bistatic layout needs at least two distinct anchor positions".into());
            }
        }
        if !(self.room.max.x > self.room.min.x && self.room.max.y > self.room.min.y) {
            bad.push("room bounds are empty".into());
        }
        if !(self.flash_radius >= 0.0) {
            bad.push("flash radius must be non-negative".into());
        }
        bad
    }
}

/// Named square-floor layouts: `monostatic-center`, `bistatic-center`,
/// `monostatic-corner` and `bistatic-corners`. Anchors sit 1 m in from the
/// walls (corner layouts) or 5 m either side of the middle (bistatic center),
/// and the map is evaluated in the anchor plane.
pub fn layout_preset(name: &str, size: f64, resolution: f64) -> Result<AnchorLayout> {
    const HEIGHT: f64 = 1.0;
    let at = |x: f64, y: f64| Vec3::new(x, y, HEIGHT);
    let mid = 0.5 * size;
    let (arrangement, anchors) = match name {
        "monostatic-center" => (Arrangement::Monostatic, vec![at(mid, mid)]),
        "bistatic-center" => (
            Arrangement::Bistatic,
            vec![at(mid - 5.0, mid), at(mid + 5.0, mid)],
        ),
        "monostatic-corner" => (Arrangement::Monostatic, vec![at(1.0, 1.0)]),
        "bistatic-corners" => (
            Arrangement::Bistatic,
            vec![at(1.0, 1.0), at(size - 1.0, size - 1.0)],
        ),
        other => {
            return Err(Error::InvalidConfig(vec![format!(
                "unknown layout {other:?}; expected one of {}",
                LAYOUTS.join(", ")
            )]))
        }
    };
    Ok(AnchorLayout {
        arrangement,
        anchors,
        room: Bounds::new(Vec3::new(0.0, 0.0, HEIGHT), Vec3::new(size, size, HEIGHT)),
        resolution,
        tag_height: HEIGHT,
        flash_radius: default_flash(),
    })
}

pub const LAYOUTS: [&str; 4] = [
    "monostatic-center",
    "bistatic-center",
    "monostatic-corner",
    "bistatic-corners",
];

/// Row-major grid (y outer, x inner) of required integration times in seconds.
/// Unreachable cells hold `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMap {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<f64>,
}

impl CoverageMap {
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.xs.len() + ix]
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "x,y,seconds")?;
        for (iy, y) in self.ys.iter().enumerate() {
            for (ix, x) in self.xs.iter().enumerate() {
                writeln!(w, "{x:.4},{y:.4},{:.6e}", self.at(ix, iy))?;
            }
        }
        Ok(())
    }

    /// Plain matrix, one grid row per line, for image-style plotting.
    pub fn write_grid<W: Write>(&self, w: &mut W) -> Result<()> {
        for iy in 0..self.ys.len() {
            let row: Vec<String> = (0..self.xs.len())
                .map(|ix| format!("{:.6e}", self.at(ix, iy)))
                .collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

fn axis(lo: f64, hi: f64, res: f64) -> Vec<f64> {
    let n = ((hi - lo) / res - 1e-9).ceil().max(1.0) as usize;
    let step = (hi - lo) / n as f64;
    (0..n).map(|i| lo + (i as f64 + 0.5) * step).collect()
}

pub fn integration_time_map(layout: &AnchorLayout, budget: &LinkBudget) -> Result<CoverageMap> {
    let bad = layout.validate();
    if !bad.is_empty() {
        return Err(Error::InvalidConfig(bad));
    }
    let law = IntegrationLaw::from_budget(budget)?;
    let xs = axis(layout.room.min.x, layout.room.max.x, layout.resolution);
    let ys = axis(layout.room.min.y, layout.room.max.y, layout.resolution);
    let mut values = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let cell = Vec3::new(x, y, layout.tag_height);
            let mut best = f64::INFINITY;
            match layout.arrangement {
                Arrangement::Monostatic => {
                    for a in &layout.anchors {
                        let d = a.distance(cell);
                        if d < layout.flash_radius {
                            continue;
                        }
                        let r = d.max(MIN_DISTANCE);
                        best = best.min(law.time(r, r));
                    }
                }
                Arrangement::Bistatic => {
                    for (i, t) in layout.anchors.iter().enumerate() {
                        for (j, r) in layout.anchors.iter().enumerate() {
                            if i == j || t.distance(*r) == 0.0 {
                                continue;
                            }
                            let r1 = t.distance(cell).max(MIN_DISTANCE);
                            let r2 = cell.distance(*r).max(MIN_DISTANCE);
                            best = best.min(law.time(r1, r2));
                        }
                    }
                }
            }
            values.push(best);
        }
    }
    Ok(CoverageMap { xs, ys, values })
}

/// Empirical CDF: one `(value, fraction of cells <= value)` step per distinct value.
pub fn coverage_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    out
}

/// Smallest value whose CDF reaches `q`.
pub fn cdf_quantile(cdf: &[(f64, f64)], q: f64) -> f64 {
    cdf.iter()
        .find(|&&(_, f)| f >= q - 1e-12)
        .map_or(f64::NAN, |&(v, _)| v)
}

pub fn write_cdf_csv<W: Write>(w: &mut W, cdf: &[(f64, f64)]) -> Result<()> {
    writeln!(w, "seconds,fraction")?;
    for (v, f) in cdf {
        writeln!(w, "{v:.6e},{f:.6}")?;
    }
    Ok(())
}
