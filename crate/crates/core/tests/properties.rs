use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slocal::channel::{synthesize_cfr, Anchor, PlacedTag, Reflector, Scene};
use slocal::coverage::coverage_cdf;
use slocal::locate::{
    ellipsoid_residual, solve_position, start_points, AnchorGeometry, SolverOptions,
};
use slocal::ranging::{estimate_tdoa, estimate_toa, TdoaMeasurement};
use slocal::recovery::{
    average_recording, cfr_to_cir, integrate_band, integrate_recording, search_tag, stitch_to_cir,
    SearchParams, TagSignalHypothesis,
};
use slocal::rfmodel::{backscatter_rx_power, thermal_noise_power, LinkBudget};
use slocal::sweep::{capture_sweep, Calibration, CaptureOptions, SweepPlan};
use slocal::waveform::{gold_code, pn_sequence, TagConfig, TagWaveform};
use slocal::{Bounds, Vec3, SPEED_OF_LIGHT};
use std::f64::consts::TAU;

fn quiet_scene(tag: Option<(TagConfig, Vec3)>) -> Scene {
    let mut s = Scene::new(vec![
        Anchor::new(1, Vec3::new(0.0, 0.0, 1.0)),
        Anchor::new(2, Vec3::new(4.0, 0.0, 1.0)),
    ]);
    s.reflectors.push(Reflector {
        position: Vec3::new(2.0, 3.0, 2.0),
        reflection_gain: -3.0,
    });
    if let Some((config, position)) = tag {
        s.tags.push(PlacedTag {
            config,
            position,
            excess_loss_db: 0.0,
        });
    }
    s.thermal_noise = false;
    s
}

fn excess_delay(s: &Scene, tag: Vec3) -> f64 {
    let (t, r) = (s.anchors[0].position, s.anchors[1].position);
    (t.distance(tag) + tag.distance(r) - t.distance(r)) / SPEED_OF_LIGHT
}

/// Tag and direct CIRs of a recording, integrating against the exact tag hypothesis.
fn recover(
    rec: &slocal::sweep::SweepRecording,
    hyp: &TagSignalHypothesis,
    t_int: Option<f64>,
) -> TdoaMeasurement {
    let cal = Calibration::identity(&rec.plan);
    let tag = stitch_to_cir(&integrate_recording(rec, hyp, t_int).unwrap(), &cal, 10).unwrap();
    let direct = stitch_to_cir(&average_recording(rec, t_int).unwrap(), &cal, 10).unwrap();
    estimate_tdoa(1, 2, &direct, &tag, 0.3).unwrap()
}

proptest! {
    #[test]
    fn received_power_is_symmetric_and_decreasing(r1 in 0.5f64..40.0, r2 in 0.5f64..40.0, k in 1.01f64..3.0) {
        let b = |a: f64, c: f64| backscatter_rx_power(&LinkBudget::default().with_distances(a, c)).unwrap();
        prop_assert!((b(r1, r2) - b(r2, r1)).abs() < 1e-9);
        prop_assert!(b(r1 * k, r2) < b(r1, r2));
        prop_assert!(b(r1, r2 * k) < b(r1, r2));
    }

    #[test]
    fn thermal_noise_scales_with_time(t in 1e-4f64..1e4, a in 1e-3f64..1e3) {
        let lhs = thermal_noise_power(a * t).unwrap();
        let rhs = thermal_noise_power(t).unwrap() - 10.0 * a.log10();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn transmit_power_trades_against_integration(r1 in 1.0f64..30.0, r2 in 1.0f64..30.0, x in -10.0f64..10.0) {
        let base = LinkBudget::default();
        let louder = LinkBudget { p_t: base.p_t + x, ..base };
        let ratio = base.min_integration_time(r1, r2).unwrap() / louder.min_integration_time(r1, r2).unwrap();
        prop_assert!((ratio / 10f64.powf(x / 10.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn coded_waveforms_are_zero_mean(bits in 3u32..8, seed in 1u32..7, cpc in 1u32..6, ppm in -500.0f64..500.0, t0 in 0.0f64..1.0) {
        let cfg = TagConfig { code: pn_sequence(bits, seed).unwrap(), cycles_per_chip: cpc, freq_offset_ppm: ppm, time_offset: t0, ..TagConfig::default() };
        let w = TagWaveform::new(&cfg, 2.0 * cfg.code_period() + 1.0);
        let mean = w.average(0.3, 0.3 + cfg.code_period());
        prop_assert!(mean.abs() < 1e-9, "mean {}", mean);
    }

    #[test]
    fn jitter_free_tags_are_periodic(ppm in -500.0f64..500.0, t in 0.0f64..5.0, seed_a in 0u64..1000, seed_b in 0u64..1000) {
        let cfg = TagConfig { code: gold_code(6, 2).unwrap(), freq_offset_ppm: ppm, seed: seed_a, ..TagConfig::default() };
        let period = cfg.code.len() as f64 * cfg.cycles_per_chip as f64 / (cfg.f_mod * (1.0 + ppm * 1e-6));
        let w = TagWaveform::new(&cfg, t + 3.0 * period);
        // Stay clear of transitions, where rounding in t + period decides the side.
        let phase = (cfg.true_frequency() * t * 2.0).fract();
        prop_assume!(phase > 1e-6 && phase < 1.0 - 1e-6);
        prop_assert_eq!(w.state(t), w.state(t + period));
        let other = TagWaveform::new(&TagConfig { seed: seed_b, ..cfg.clone() }, t + 1.0);
        prop_assert_eq!(w.state(t), other.state(t));
    }

    #[test]
    fn cdf_is_monotone_and_complete(values in prop::collection::vec(prop_oneof![0.0f64..100.0, Just(f64::INFINITY)], 1..200)) {
        let cdf = coverage_cdf(&values);
        prop_assert!(cdf.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
        prop_assert!((cdf.last().unwrap().1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn toa_is_scale_invariant(k in 1e-6f64..1e6, delay in 10.0f64..300.0) {
        let n = 980;
        let spacing = 1.25e6;
        let cfr: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(1.0, -TAU * i as f64 * spacing * delay * 1e-9)).collect();
        let cir = cfr_to_cir(&cfr, spacing, 10).unwrap();
        let mut scaled = cir.clone();
        scaled.samples.iter_mut().for_each(|v| *v *= k);
        prop_assert_eq!(estimate_toa(&cir, 0.3).unwrap().time, estimate_toa(&scaled, 0.3).unwrap().time);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solver_is_permutation_invariant_and_exact(x in 0.3f64..4.2, y in 0.3f64..2.7, z in 0.2f64..1.8, rot in 0usize..3) {
        let anchors = [Vec3::new(0.2, 0.2, 2.2), Vec3::new(4.3, 0.3, 2.2), Vec3::new(2.3, 2.8, 2.2)];
        let mut geom = AnchorGeometry::default();
        for (i, a) in anchors.iter().enumerate() {
            geom.insert(i as u32 + 1, *a + Vec3::new(-0.05, 0.0, 0.0), *a + Vec3::new(0.05, 0.0, 0.0));
        }
        let truth = Vec3::new(x, y, z);
        let mut ms: Vec<TdoaMeasurement> = [(1, 2), (1, 3), (2, 3)]
            .iter()
            .map(|&(t, r)| {
                let zero = TdoaMeasurement::from_tdoa(t, r, 0.0);
                let excess = ellipsoid_residual(truth, &zero, &geom).unwrap();
                TdoaMeasurement::from_tdoa(t, r, excess / SPEED_OF_LIGHT)
            })
            .collect();
        let bounds = Bounds::new(Vec3::ZERO, Vec3::new(4.5, 3.0, 2.3));
        let opts = SolverOptions::default();
        let a = solve_position(&ms, &geom, &bounds, None, &opts).unwrap();
        ms.rotate_left(rot);
        let b = solve_position(&ms, &geom, &bounds, None, &opts).unwrap();
        prop_assert!(a.position.distance(b.position) < 1e-3);
        if a.converged {
            prop_assert!(a.residual_rms < 1e-6, "rms {}", a.residual_rms);
        }
        for s in start_points(&bounds) {
            let rms = (ms.iter().map(|m| ellipsoid_residual(s, m, &geom).unwrap().powi(2)).sum::<f64>() / 3.0).sqrt();
            prop_assert!(a.residual_rms <= rms);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn static_paths_are_annihilated(f in 250.0f64..262.0, phi in 0.0f64..std::f64::consts::PI, offset in 0usize..126, seed in 0u64..1000) {
        let s = quiet_scene(None);
        let plan = SweepPlan { n_bands: 1, dwell: 0.7, ..SweepPlan::default() };
        let rec = capture_sweep(&s, 1, 2, &plan, seed, &CaptureOptions::default()).unwrap();
        let stat = rec.bands[0].mean();
        let hyp = TagSignalHypothesis {
            code: slocal::recovery::CodeSpec { chips: gold_code(6, 1).unwrap(), cycles_per_chip: 1 },
            code_offset: offset,
            ..TagSignalHypothesis::plain(f, phi)
        };
        let out = integrate_band(&rec.bands[0], &hyp, None, plan.snapshot_rate).unwrap();
        for (o, st) in out.iter().zip(&stat) {
            prop_assert!(o.norm() < 1e-9 * st.norm());
        }
    }

    #[test]
    fn search_argmax_ignores_amplitude_scale(k in prop_oneof![1e-4f64..1e-1, 1e1f64..1e4], seed in 0u64..100) {
        let cfg = TagConfig { freq_offset_ppm: -30.0, time_offset: 0.011, ..TagConfig::default() };
        let mut s = quiet_scene(Some((cfg, Vec3::new(1.5, 1.2, 1.0))));
        s.thermal_noise = true;
        let plan = SweepPlan { n_bands: 3, dwell: 1.0, ..SweepPlan::default() };
        let rec = capture_sweep(&s, 1, 2, &plan, seed, &CaptureOptions::default()).unwrap();
        let params = SearchParams { span_ppm: 60.0, n_phases: 4, ..SearchParams::default() };
        let a = search_tag(&rec, &params).unwrap().best;
        let b = search_tag(&rec.scaled(k), &params).unwrap().best;
        prop_assert_eq!((a.offset_ppm, a.phi0, a.code_offset), (b.offset_ppm, b.phi0, b.code_offset));
    }

    #[test]
    fn noiseless_cfr_repeats_with_the_tag_period(t in 0.0f64..3.0, band in 0usize..49, ppm in -200.0f64..200.0) {
        let cfg = TagConfig { code: gold_code(6, 0).unwrap(), cycles_per_chip: 1, freq_offset_ppm: ppm, ..TagConfig::default() };
        let period = cfg.code_period();
        let phase = (cfg.true_frequency() * t * 2.0).fract();
        prop_assume!(phase > 1e-6 && phase < 1.0 - 1e-6);
        let s = quiet_scene(Some((cfg, Vec3::new(1.0, 2.0, 0.5))));
        let plan = SweepPlan::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = synthesize_cfr(&s, 1, 2, &plan, band, t, &mut rng).unwrap();
        let b = synthesize_cfr(&s, 1, 2, &plan, band, t + period, &mut rng).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).norm() <= 1e-12 * x.norm());
        }
    }
}

#[test]
fn doubling_transmit_distance_halves_tag_amplitude() {
    let tag = |x: f64| {
        let mut s = Scene::new(vec![
            Anchor::new(1, Vec3::new(-x, 0.0, 0.0)),
            Anchor::new(2, Vec3::new(0.0, 3.0, 0.0)),
        ]);
        s.tags.push(PlacedTag {
            config: TagConfig::default(),
            position: Vec3::ZERO,
            excess_loss_db: 0.0,
        });
        s.tag_power(&s.anchors[0], &s.anchors[1], &s.tags[0])
            .unwrap()
    };
    assert!((tag(2.0) - tag(4.0) - 20.0 * 2f64.log10()).abs() < 1e-9);
}

#[test]
fn noise_is_uncorrelated_across_sub_bins() {
    let mut s = quiet_scene(None);
    s.thermal_noise = true;
    s.reflectors.clear();
    s.anchors[1].position = Vec3::new(400.0, 0.0, 1.0);
    let plan = SweepPlan {
        n_bands: 1,
        dwell: 8.08,
        ..SweepPlan::default()
    };
    let rec = capture_sweep(&s, 1, 2, &plan, 5, &CaptureOptions::default()).unwrap();
    let band = &rec.bands[0];
    assert!(band.len() >= 10_000);
    let centered: Vec<Vec<Complex64>> = (0..plan.sub_bins_per_band)
        .map(|k| {
            let v = band.bin_series(k);
            let m = v.iter().sum::<Complex64>() / v.len() as f64;
            v.into_iter().map(|x| x - m).collect()
        })
        .collect();
    for a in 0..centered.len() {
        for b in a + 1..centered.len() {
            let (x, y) = (&centered[a], &centered[b]);
            let num: Complex64 = x.iter().zip(y).map(|(p, q)| p * q.conj()).sum();
            let den = (x.iter().map(|p| p.norm_sqr()).sum::<f64>()
                * y.iter().map(|q| q.norm_sqr()).sum::<f64>())
            .sqrt();
            assert!(
                num.norm() / den < 0.05,
                "bins {a},{b}: {}",
                num.norm() / den
            );
        }
    }
}

#[test]
fn noiseless_tdoa_matches_geometry_on_a_grid() {
    let plan = SweepPlan {
        dwell: 0.3,
        ..SweepPlan::default()
    };
    let cfg = TagConfig {
        freq_offset_ppm: 70.0,
        time_offset: 0.0137,
        ..TagConfig::default()
    };
    let hyp = TagSignalHypothesis::matching(&cfg);
    let mut worst: f64 = 0.0;
    for ix in 0..5 {
        for iy in 0..5 {
            for iz in 0..2 {
                let pos = Vec3::new(
                    0.4 + 0.8 * ix as f64,
                    0.5 + 0.8 * iy as f64,
                    0.4 + 1.2 * iz as f64,
                );
                let s = quiet_scene(Some((cfg.clone(), pos)));
                let rec = capture_sweep(&s, 1, 2, &plan, 9, &CaptureOptions::default()).unwrap();
                let m = recover(&rec, &hyp, None);
                let step = 1.0 / (10.0 * plan.total_bandwidth());
                let err = (m.tdoa - excess_delay(&s, pos)).abs();
                assert!(err <= step, "{pos:?}: error {err:e} s vs step {step:e} s");
                worst = worst.max(err);
            }
        }
    }
    println!(
        "worst noiseless tdoa error {:.3} mm",
        worst * SPEED_OF_LIGHT * 1e3
    );
}

#[test]
fn longer_integration_never_worsens_median_tdoa_error() {
    let cfg = TagConfig {
        freq_offset_ppm: -45.0,
        time_offset: 0.2,
        ..TagConfig::default()
    };
    let hyp = TagSignalHypothesis::matching(&cfg);
    let pos = Vec3::new(2.5, 3.0, 1.0);
    let mut s = quiet_scene(Some((cfg, pos)));
    s.thermal_noise = true;
    s.budget.eta_r = 32.0;
    let truth = excess_delay(&s, pos);
    let plan = SweepPlan {
        dwell: 1.68,
        ..SweepPlan::default()
    };
    let spans = [0.1, 0.4, 1.6];
    let mut errors = vec![Vec::new(); spans.len()];
    for seed in 0..20 {
        let rec = capture_sweep(&s, 1, 2, &plan, 100 + seed, &CaptureOptions::default()).unwrap();
        for (i, &t) in spans.iter().enumerate() {
            errors[i].push((recover(&rec, &hyp, Some(t)).tdoa - truth).abs() * SPEED_OF_LIGHT);
        }
    }
    let medians: Vec<f64> = errors
        .iter_mut()
        .map(|e| {
            e.sort_by(f64::total_cmp);
            0.5 * (e[9] + e[10])
        })
        .collect();
    println!("median tdoa error (m) at {spans:?} s: {medians:?}");
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
}

#[test]
fn snr_rises_then_collapses_as_frequency_error_reaches_half_a_cycle() {
    // 2.17 ppm of 256 Hz slips half a cycle over the 900 s recording. Against a
    // square wave the windowed amplitude falls linearly with the slip, so the
    // SNR peaks near a sixth of a cycle and vanishes at half a cycle.
    let cfg = TagConfig {
        freq_offset_ppm: 0.5 / 900.0 / 256.0 * 1e6,
        ..TagConfig::default()
    };
    let mut s = quiet_scene(Some((cfg.clone(), Vec3::new(2.0, 4.0, 1.0))));
    s.thermal_noise = true;
    // Keeps the peak below the sidelobe-limited ceiling of a 20-bin CIR.
    s.budget.eta_r = 20.0;
    let plan = SweepPlan {
        n_bands: 1,
        dwell: 900.08,
        snapshot_rate: 625.0,
        ..SweepPlan::default()
    };
    let hyp = TagSignalHypothesis {
        f_cand: cfg.f_mod,
        offset_ppm: 0.0,
        ..TagSignalHypothesis::matching(&cfg)
    };
    let cal = Calibration::identity(&plan);
    let spans = [50.0, 300.0, 750.0, 900.0];
    let seeds = 3;
    let mut snr = vec![0.0; spans.len()];
    for seed in 0..seeds {
        let rec = capture_sweep(&s, 1, 2, &plan, 77 + seed, &CaptureOptions::default()).unwrap();
        for (acc, &t) in snr.iter_mut().zip(&spans) {
            let bands =
                vec![integrate_band(&rec.bands[0], &hyp, Some(t), plan.snapshot_rate).unwrap()];
            *acc += stitch_to_cir(&bands, &cal, 10).unwrap().snr / seeds as f64;
        }
    }
    println!("mean snr (dB) at {spans:?} s: {snr:?}");
    assert!(snr[1] > snr[0], "{snr:?}");
    assert!(snr[2] < snr[1] && snr[3] < snr[2], "{snr:?}");
    assert!(snr[1] - snr[3] >= 10.0, "{snr:?}");
}

#[test]
fn capture_is_reproducible_from_plan_and_seed() {
    let cfg = TagConfig {
        jitter_ppm: 300.0,
        seed: 4,
        ..TagConfig::default()
    };
    let mut s = quiet_scene(Some((cfg, Vec3::new(1.0, 1.0, 1.0))));
    s.thermal_noise = true;
    let plan = SweepPlan {
        n_bands: 4,
        dwell: 0.4,
        ..SweepPlan::default()
    };
    let opts = CaptureOptions {
        inject_clock_ambiguity: true,
        ..CaptureOptions::default()
    };
    let a = capture_sweep(&s, 1, 2, &plan, 11, &opts).unwrap();
    let b = capture_sweep(&s, 1, 2, &plan, 11, &opts).unwrap();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_to(&mut x).unwrap();
    b.write_to(&mut y).unwrap();
    assert_eq!(x, y);
    assert_eq!(a.bands[0].len(), plan.snapshots_per_band());
    assert!(a
        .bands
        .iter()
        .all(|band| band.times.windows(2).all(|w| w[1] > w[0])));
}
