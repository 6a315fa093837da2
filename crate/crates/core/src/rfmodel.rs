//! Closed-form link budget for a bistatic backscatter tag.
//!
//! Powers are carried in dBm and densities in dBm/MHz. As in the usual
//! back-of-envelope analysis, the received density is compared directly with
//! the integrated thermal noise power in dBm; no bandwidth conversion is applied.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Thermal noise floor integrated over one second (dBm).
pub const THERMAL_NOISE_DBM: f64 = -174.0;

/// Maximum permissible UWB transmit density (dBm/MHz).
pub const MAX_UWB_DENSITY_DBM_MHZ: f64 = -41.3;

/// CIR SNR needed for reliable threshold-based leading-edge detection (dB).
pub const DETECTION_SNR_DB: f64 = 26.0;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// Coherent gain from stitching `n_bins` frequency bins into a CIR.
pub fn coherent_gain_db(n_bins: usize) -> f64 {
    linear_to_db(n_bins as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkBudget {
    /// Transmit power density (dBm/MHz).
    pub p_t: f64,
    pub g_t: f64,
    pub g_r: f64,
    /// Tag antenna gain toward the transmitter (dBi).
    pub g_bt: f64,
    /// Tag antenna gain toward the receiver (dBi).
    pub g_br: f64,
    /// Wavelength (m).
    pub lambda: f64,
    /// Transmitter to tag distance (m).
    pub r1: f64,
    /// Tag to receiver distance (m).
    pub r2: f64,
    /// Tag reflection loss, twice the switch insertion loss (dB).
    pub l_b: f64,
    /// Receiver noise figure (dB).
    pub eta_r: f64,
    /// Coherent CFR to CIR stitching gain (dB).
    pub g_cfr_cir: f64,
    /// Required CIR SNR (dB).
    pub snr_target: f64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            p_t: MAX_UWB_DENSITY_DBM_MHZ,
            g_t: 0.0,
            g_r: 0.0,
            g_bt: 0.0,
            g_br: 0.0,
            lambda: 0.075,
            r1: 5.0,
            r2: 5.0,
            l_b: 1.0,
            eta_r: 10.0,
            g_cfr_cir: coherent_gain_db(980),
            snr_target: DETECTION_SNR_DB,
        }
    }
}

impl LinkBudget {
    pub fn with_distances(mut self, r1: f64, r2: f64) -> Self {
        self.r1 = r1;
        self.r2 = r2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.r1 > 0.0) {
            bad.push(format!("r1 must be positive, got {}", self.r1));
        }
        if !(self.r2 > 0.0) {
            bad.push(format!("r2 must be positive, got {}", self.r2));
        }
        if !(self.lambda > 0.0) {
            bad.push(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.l_b >= 0.0) {
            bad.push(format!("l_b must be non-negative, got {}", self.l_b));
        }
        if !(self.eta_r >= 0.0) {
            bad.push(format!("eta_r must be non-negative, got {}", self.eta_r));
        }
        if !(self.snr_target > 0.0) {
            bad.push(format!(
                "snr_target must be positive, got {}",
                self.snr_target
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            domain(bad.join("; "))
        }
    }

    /// One-way free-space term `20 log10(lambda / (4 pi r))` in dB.
    pub fn free_space_term(&self, r: f64) -> f64 {
        20.0 * (self.lambda / (4.0 * std::f64::consts::PI * r)).log10()
    }

    /// Minimum integration time for arbitrary distances, keeping every other
    /// term of this budget.
    pub fn min_integration_time(&self, r1: f64, r2: f64) -> Result<f64> {
        if !(r1 > 0.0 && r2 > 0.0) {
            return domain(format!("distances must be positive, got ({r1}, {r2})"));
        }
        let law = IntegrationLaw::from_budget(self)?;
        Ok(law.time(r1, r2))
    }
}

/// Received backscatter density (dBm/MHz).
pub fn backscatter_rx_power(b: &LinkBudget) -> Result<f64> {
    b.validate()?;
    Ok(
        b.p_t + b.g_t + b.g_bt + b.g_br + b.g_r + b.free_space_term(b.r1) + b.free_space_term(b.r2)
            - b.l_b,
    )
}

/// Thermal noise power after integrating for `t` seconds (dBm).
pub fn thermal_noise_power(t: f64) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return domain(format!("integration time must be positive, got {t}"));
    }
    Ok(THERMAL_NOISE_DBM + 10.0 * (1.0 / t).log10())
}

/// Noise floor the integration must reach to resolve the tag (dBm).
pub fn required_noise_floor(b: &LinkBudget) -> Result<f64> {
    Ok(backscatter_rx_power(b)? - b.eta_r + b.g_cfr_cir - b.snr_target)
}

/// Integration time at which thermal noise drops to `floor_dbm`.
pub fn integration_time_for_noise(floor_dbm: f64) -> f64 {
    10f64.powf(-(floor_dbm - THERMAL_NOISE_DBM) / 10.0)
}

/// Minimum integration time with the default (typical indoor) budget.
pub fn min_integration_time(r1: f64, r2: f64) -> Result<f64> {
    LinkBudget::default().min_integration_time(r1, r2)
}

/// Closed form `t = 10^exponent * (r1 r2)^2`, with the exponent composed
/// from a budget instead of hard-coded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationLaw {
    pub log10_coeff: f64,
}

impl IntegrationLaw {
    pub fn from_budget(b: &LinkBudget) -> Result<Self> {
        let unit = b.with_distances(1.0, 1.0);
        let floor = required_noise_floor(&unit)?;
        Ok(Self {
            log10_coeff: -(floor - THERMAL_NOISE_DBM) / 10.0,
        })
    }

    pub fn time(&self, r1: f64, r2: f64) -> f64 {
        let rr = r1 * r2;
        10f64.powf(self.log10_coeff) * rr * rr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_example() -> LinkBudget {
        LinkBudget {
            g_cfr_cir: 30.0,
            ..LinkBudget::default()
        }
    }

    #[test]
    fn received_density_at_five_meters() {
        let p = backscatter_rx_power(&paper_example()).unwrap();
        assert!((p - -159.0).abs() <= 0.5, "{p}");
    }

    #[test]
    fn received_power_is_symmetric() {
        let b = paper_example().with_distances(2.0, 7.5);
        let s = b.with_distances(7.5, 2.0);
        assert_eq!(
            backscatter_rx_power(&b).unwrap(),
            backscatter_rx_power(&s).unwrap()
        );
    }

    #[test]
    fn received_power_at_one_meter_matches_linear_route() {
        // Independent route: product of linear factors, one log at the end.
        let b = paper_example().with_distances(1.0, 1.0);
        let fs = b.lambda / (4.0 * std::f64::consts::PI);
        let lin = 10f64.powf(-41.3 / 10.0) * (fs * fs) * (fs * fs) / 10f64.powf(0.1);
        let expect = 10.0 * lin.log10();
        let got = backscatter_rx_power(&b).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn thermal_noise_reference_points() {
        for (t, want) in [(1e-3, -144.0), (0.1, -164.0), (1.0, -174.0)] {
            let got = thermal_noise_power(t).unwrap();
            assert!((got - want).abs() <= 0.5, "t={t}: {got}");
        }
        // One minute and one hour land at -191.78 and -209.56 dBm; the commonly
        // quoted -191 / -209 are those values truncated toward zero.
        for (t, quoted) in [(60.0, -191.0), (3600.0, -209.0)] {
            let got = thermal_noise_power(t).unwrap();
            assert_eq!(got.trunc(), quoted, "t={t}: {got}");
        }
        let d = thermal_noise_power(1.0).unwrap() - thermal_noise_power(10.0).unwrap();
        assert!((d - 10.0).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_inputs_are_rejected() {
        assert!(thermal_noise_power(0.0).is_err());
        assert!(thermal_noise_power(-1.0).is_err());
        assert!(backscatter_rx_power(&paper_example().with_distances(0.0, 5.0)).is_err());
        assert!(backscatter_rx_power(&LinkBudget {
            lambda: 0.0,
            ..paper_example()
        })
        .is_err());
        assert!(min_integration_time(-1.0, 2.0).is_err());
    }

    #[test]
    fn required_floor_worked_example() {
        let p = required_noise_floor(&paper_example()).unwrap();
        assert!((p - -165.0).abs() <= 0.5, "{p}");
    }

    #[test]
    fn required_floor_with_zero_margins_is_received_power() {
        let b = LinkBudget {
            eta_r: 0.0,
            g_cfr_cir: 0.0,
            snr_target: 1e-300,
            ..paper_example()
        };
        let diff = required_noise_floor(&b).unwrap() - backscatter_rx_power(&b).unwrap();
        assert!(diff.abs() < 1e-12);
    }

    #[test]
    fn required_floor_composition_at_three_meters() {
        let b = LinkBudget {
            eta_r: 12.0,
            g_cfr_cir: 10.0 * 980f64.log10(),
            snr_target: 26.0,
            ..LinkBudget::default()
        }
        .with_distances(3.0, 3.0);
        let fs = b.lambda / (4.0 * std::f64::consts::PI * 3.0);
        let rx = 10.0 * (10f64.powf(-41.3 / 10.0) * fs.powi(4) / 10f64.powf(0.1)).log10();
        let expect = rx - 12.0 + 10.0 * 980f64.log10() - 26.0;
        assert!((required_noise_floor(&b).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn closed_form_exponent_matches_rounded_constant() {
        let law = IntegrationLaw::from_budget(&paper_example()).unwrap();
        assert!(
            (law.log10_coeff - -3.6734).abs() < 1e-3,
            "{}",
            law.log10_coeff
        );
    }

    #[test]
    fn five_meter_integration_time() {
        let t = min_integration_time(5.0, 5.0).unwrap();
        assert!((t - 0.13).abs() / 0.13 <= 0.05, "{t}");
    }

    #[test]
    fn doubling_one_distance_quadruples_time() {
        let a = min_integration_time(3.0, 7.0).unwrap();
        let b = min_integration_time(6.0, 7.0).unwrap();
        assert!((b / a - 4.0).abs() < 1e-12);
    }

    fn invert_by_bisection(floor: f64) -> f64 {
        // Solve thermal_noise_power(t) = floor on a log axis.
        let (mut lo, mut hi) = (-12.0f64, 12.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if thermal_noise_power(10f64.powf(mid)).unwrap() > floor {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        10f64.powf(0.5 * (lo + hi))
    }

    #[test]
    fn fifteen_meters_matches_numeric_inversion() {
        let b = LinkBudget::default().with_distances(15.0, 15.0);
        let oracle = invert_by_bisection(required_noise_floor(&b).unwrap());
        let t = min_integration_time(15.0, 15.0).unwrap();
        assert!((t - oracle).abs() / oracle < 0.01);
    }

    #[test]
    fn grid_agrees_with_inversion() {
        for i in 0..10 {
            for j in 0..10 {
                let r1 = 1.0 + 29.0 * i as f64 / 9.0;
                let r2 = 1.0 + 29.0 * j as f64 / 9.0;
                let b = LinkBudget::default().with_distances(r1, r2);
                let oracle = invert_by_bisection(required_noise_floor(&b).unwrap());
                let t = min_integration_time(r1, r2).unwrap();
                assert!((t - oracle).abs() / oracle < 0.01, "({r1},{r2})");
            }
        }
    }

    #[test]
    fn more_transmit_power_shortens_integration() {
        let base = LinkBudget::default();
        for x in [0.5, 3.0, 10.0] {
            let hot = LinkBudget {
                p_t: base.p_t + x,
                ..base
            };
            let ratio = base.min_integration_time(4.0, 9.0).unwrap()
                / hot.min_integration_time(4.0, 9.0).unwrap();
            assert!((ratio - 10f64.powf(x / 10.0)).abs() / ratio < 1e-12);
        }
    }
}
