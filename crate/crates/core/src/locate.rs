//! Tag position from TDoA measurements by least squares over ellipsoid residuals.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::channel::Anchor;
use crate::error::{Error, Result};
use crate::geometry::{Bounds, Vec3, SPEED_OF_LIGHT};
use crate::ranging::TdoaMeasurement;

/// Distance from a focus inside which its gradient term is dropped.
const FOCUS_GUARD: f64 = 1e-3;

/// Residual margin (m) within which competing solutions count as equally good
/// fits and the room bounds decide between them.
const RESIDUAL_TIE_M: f64 = 0.05;

/// Transmit and receive foci per anchor id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorGeometry {
    foci: BTreeMap<u32, (Vec3, Vec3)>,
}

impl AnchorGeometry {
    /// `split` keeps separate transmit and receive antenna positions; otherwise
    /// both collapse onto the anchor's reference point.
    pub fn from_anchors(anchors: &[Anchor], split: bool) -> Self {
        let foci = anchors
            .iter()
            .map(|a| {
                let f = if split {
                    (a.tx_position(), a.rx_position())
                } else {
                    (a.position, a.position)
                };
                (a.id, f)
            })
            .collect();
        Self { foci }
    }

    pub fn insert(&mut self, id: u32, tx: Vec3, rx: Vec3) {
        self.foci.insert(id, (tx, rx));
    }

    fn pair(&self, m: &TdoaMeasurement) -> Result<(Vec3, Vec3)> {
        let t = self
            .foci
            .get(&m.tx_anchor)
            .ok_or(Error::UnknownAnchor(m.tx_anchor))?
            .0;
        let r = self
            .foci
            .get(&m.rx_anchor)
            .ok_or(Error::UnknownAnchor(m.rx_anchor))?
            .1;
        Ok((t, r))
    }
}

/// `(|T - p| + |p - R|) - (|T - R| + c * tdoa)`, zero on the measurement's ellipsoid.
pub fn ellipsoid_residual(p: Vec3, m: &TdoaMeasurement, geom: &AnchorGeometry) -> Result<f64> {
    let (t, r) = geom.pair(m)?;
    Ok(t.distance(p) + p.distance(r) - (t.distance(r) + SPEED_OF_LIGHT * m.tdoa))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub position: Vec3,
    pub residual_rms: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            gradient_tol: 1e-9,
            step_tol: 1e-10,
        }
    }
}

struct Problem {
    pairs: Vec<(Vec3, Vec3, f64)>,
}

impl Problem {
    fn cost(&self, p: Vec3) -> f64 {
        self.pairs
            .iter()
            .map(|&(t, r, len)| {
                let e = t.distance(p) + p.distance(r) - len;
                e * e
            })
            .sum()
    }

    fn gradient(&self, p: Vec3) -> Vec3 {
        let unit = |from: Vec3| {
            let d = p - from;
            let n = d.norm();
            if n < FOCUS_GUARD {
                Vec3::ZERO
            } else {
                d * (1.0 / n)
            }
        };
        self.pairs.iter().fold(Vec3::ZERO, |g, &(t, r, len)| {
            let e = t.distance(p) + p.distance(r) - len;
            g + (unit(t) + unit(r)) * (2.0 * e)
        })
    }

    fn rms(&self, p: Vec3) -> f64 {
        (self.cost(p) / self.pairs.len() as f64).sqrt()
    }

    /// Gradient descent with Barzilai-Borwein trial steps and Armijo backtracking.
    fn descend(&self, start: Vec3, opts: &SolverOptions) -> PositionEstimate {
        let mut p = start;
        let mut f = self.cost(p);
        let mut g = self.gradient(p);
        let mut alpha = 0.1;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < opts.max_iterations {
            let gn = g.norm();
            if gn < opts.gradient_tol {
                converged = true;
                break;
            }
            iterations += 1;
            let mut step = alpha;
            let mut accepted = None;
            for _ in 0..60 {
                let q = p - g * step;
                let fq = self.cost(q);
                if fq <= f - 1e-4 * step * gn * gn {
                    accepted = Some((q, fq));
                    break;
                }
                step *= 0.5;
            }
            let Some((q, fq)) = accepted else {
                // No decrease is representable: we are at the floating-point floor.
                converged = true;
                break;
            };
            let gq = self.gradient(q);
            let s = q - p;
            let y = gq - g;
            let moved = s.norm();
            p = q;
            f = fq;
            g = gq;
            if moved < opts.step_tol {
                converged = true;
                break;
            }
            let sy = s.dot(y);
            alpha = if sy > 0.0 {
                (s.dot(s) / sy).clamp(1e-8, 1e3)
            } else {
                2.0 * step
            };
        }
        PositionEstimate {
            position: p,
            residual_rms: self.rms(p),
            iterations,
            converged,
        }
    }
}

/// Deterministic multi-start points over the room: the 2 x 2 x 2 lattice at the
/// quarter points of each axis.
pub fn start_points(bounds: &Bounds) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(8);
    for &u in &[0.25, 0.75] {
        for &v in &[0.25, 0.75] {
            for &w in &[0.25, 0.75] {
                pts.push(bounds.lerp(u, v, w));
            }
        }
    }
    pts
}

/// Minimizes the summed squared ellipsoid residuals from `init` (if given) and
/// eight starts spread over `bounds`. Ellipsoid intersections come in mirror
/// pairs, so among fits within a few centimeters of the best residual the
/// one closest to the room is returned.
pub fn solve_position(
    measurements: &[TdoaMeasurement],
    geom: &AnchorGeometry,
    bounds: &Bounds,
    init: Option<Vec3>,
    opts: &SolverOptions,
) -> Result<PositionEstimate> {
    let usable: Vec<&TdoaMeasurement> =
        measurements.iter().filter(|m| m.tdoa.is_finite()).collect();
    if usable.len() < 3 {
        return Err(Error::Underdetermined {
            needed: 3,
            got: usable.len(),
        });
    }
    let pairs = usable
        .iter()
        .map(|m| {
            let (t, r) = geom.pair(m)?;
            Ok((t, r, t.distance(r) + SPEED_OF_LIGHT * m.tdoa))
        })
        .collect::<Result<Vec<_>>>()?;
    let problem = Problem { pairs };
    let mut starts: Vec<Vec3> = init.into_iter().collect();
    starts.extend(start_points(bounds));
    let runs: Vec<PositionEstimate> = starts.iter().map(|&s| problem.descend(s, opts)).collect();
    let best_rms = runs
        .iter()
        .map(|r| r.residual_rms)
        .fold(f64::INFINITY, f64::min);
    let tolerance = best_rms + RESIDUAL_TIE_M;
    // Among solutions that fit about as well as the best one, the one nearest
    // the room wins; then the lower residual; then the earliest start.
    let pick = runs
        .iter()
        .filter(|r| r.residual_rms <= tolerance)
        .fold(None, |best: Option<&PositionEstimate>, r| match best {
            Some(b) => {
                let (db, dr) = (
                    bounds.outside_distance(b.position),
                    bounds.outside_distance(r.position),
                );
                if dr < db || (dr == db && r.residual_rms < b.residual_rms) {
                    Some(r)
                } else {
                    Some(b)
                }
            }
            None => Some(r),
        })
        .copied();
    Ok(pick.expect("at least one start"))
}

pub fn write_positions_csv<W: Write>(w: &mut W, rows: &[PositionEstimate]) -> Result<()> {
    writeln!(w, "x,y,z,residual_m,converged")?;
    for p in rows {
        writeln!(
            w,
            "{:.6},{:.6},{:.6},{:.6e},{}",
            p.position.x, p.position.y, p.position.z, p.residual_rms, p.converged
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchors() -> Vec<Anchor> {
        vec![
            Anchor::new(1, Vec3::new(0.2, 0.2, 2.2)),
            Anchor::new(2, Vec3::new(4.3, 0.3, 2.2)),
            Anchor::new(3, Vec3::new(2.3, 2.8, 2.2)),
        ]
    }

    fn room() -> Bounds {
        Bounds::new(Vec3::ZERO, Vec3::new(4.5, 3.0, 2.3))
    }

    fn exact(p: Vec3, geom: &AnchorGeometry) -> Vec<TdoaMeasurement> {
        [(1, 2), (1, 3), (2, 3)]
            .iter()
            .map(|&(t, r)| {
                let zero = TdoaMeasurement::from_tdoa(t, r, 0.0);
                let excess = ellipsoid_residual(p, &zero, geom).unwrap();
                TdoaMeasurement::from_tdoa(t, r, excess / SPEED_OF_LIGHT)
            })
            .collect()
    }

    #[test]
    fn residual_vanishes_at_the_truth() {
        let geom = AnchorGeometry::from_anchors(&anchors(), false);
        for p in [Vec3::new(1.0, 1.0, 1.0), Vec3::new(3.9, 2.5, 0.2)] {
            for m in exact(p, &geom) {
                assert!(ellipsoid_residual(p, &m, &geom).unwrap().abs() < 1e-12);
            }
        }
    }

    /// Cost minimum over a 1 cm lattice: first coarse over the room, then a
    /// fine pass around the best coarse cell.
    fn grid_oracle(ms: &[TdoaMeasurement], geom: &AnchorGeometry, b: &Bounds) -> Vec3 {
        let cost = |p: Vec3| {
            ms.iter()
                .map(|m| ellipsoid_residual(p, m, geom).unwrap().powi(2))
                .sum::<f64>()
        };
        let scan = |lo: Vec3, hi: Vec3, step: f64| {
            let n = |a: f64, b: f64| ((b - a) / step).round() as i64;
            let mut best = (f64::INFINITY, lo);
            for i in 0..=n(lo.x, hi.x) {
                for j in 0..=n(lo.y, hi.y) {
                    for k in 0..=n(lo.z, hi.z) {
                        let p = Vec3::new(
                            lo.x + i as f64 * step,
                            lo.y + j as f64 * step,
                            lo.z + k as f64 * step,
                        );
                        let c = cost(p);
                        if c < best.0 {
                            best = (c, p);
                        }
                    }
                }
            }
            best.1
        };
        let c = scan(b.min, b.max, 0.05);
        let d = Vec3::new(0.1, 0.1, 0.1);
        scan(c - d, c + d, 0.01)
    }

    #[test]
    fn solver_agrees_with_grid_oracle() {
        let geom = AnchorGeometry::from_anchors(&anchors(), false);
        for p in [
            Vec3::new(1.0, 1.0, 0.8),
            Vec3::new(3.3, 2.1, 1.3),
            Vec3::new(2.2, 0.6, 0.3),
        ] {
            let ms = exact(p, &geom);
            let est = solve_position(&ms, &geom, &room(), None, &SolverOptions::default()).unwrap();
            let oracle = grid_oracle(&ms, &geom, &room());
            assert!(
                est.position.distance(oracle) <= 0.01 + 1e-9,
                "{:?} vs {:?}",
                est.position,
                oracle
            );
            assert!(est.position.distance(p) < 1e-3);
            assert!(est.converged && est.residual_rms < 1e-6);
        }
    }

    #[test]
    fn split_antennas_are_distinct_foci() {
        let mut a = anchors();
        for x in &mut a {
            x.tx_antenna_offset = Vec3::new(-0.36, 0.0, 0.0);
            x.rx_antenna_offset = Vec3::new(0.36, 0.0, 0.0);
        }
        let split = AnchorGeometry::from_anchors(&a, true);
        let p = Vec3::new(2.0, 1.2, 1.0);
        let ms = exact(p, &split);
        let est = solve_position(&ms, &split, &room(), None, &SolverOptions::default()).unwrap();
        assert!(est.position.distance(p) < 1e-3);
        let point = AnchorGeometry::from_anchors(&a, false);
        let off = solve_position(&ms, &point, &room(), None, &SolverOptions::default()).unwrap();
        assert!(off.position.distance(p) > 0.01);
    }

    #[test]
    fn too_few_measurements_or_unknown_anchors_fail() {
        let geom = AnchorGeometry::from_anchors(&anchors(), false);
        let ms = exact(Vec3::new(1.0, 1.0, 1.0), &geom);
        assert!(matches!(
            solve_position(&ms[..2], &geom, &room(), None, &SolverOptions::default()),
            Err(Error::Underdetermined { needed: 3, got: 2 })
        ));
        let stray = vec![TdoaMeasurement::from_tdoa(1, 9, 1e-9); 3];
        assert!(matches!(
            solve_position(&stray, &geom, &room(), None, &SolverOptions::default()),
            Err(Error::UnknownAnchor(9))
        ));
    }

    #[test]
    fn positions_table_has_expected_header() {
        let mut buf = Vec::new();
        let p = PositionEstimate {
            position: Vec3::new(1.0, 2.0, 3.0),
            residual_rms: 0.0,
            iterations: 3,
            converged: true,
        };
        write_positions_csv(&mut buf, &[p]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,z,residual_m,converged\n1.000000,2.000000,3.000000,"));
    }
}
