use proptest::prelude::*;

use spillover_did::did::{self, DidSpec, Estimand};
use spillover_did::exposure::{compute_exposure, ExposureSpec, TreatedSet};
use spillover_did::montecarlo::{
    Assignment, DgpConfig, Scale, Simulator, StaggeredConfig, StaggeredSimulator,
};
use spillover_did::spatial::grid_points;
use spillover_did::staggered::{two_stage, EventWindow, MenuBlock};

fn small(periods: i64, start: i64, seed: u64) -> DgpConfig {
    DgpConfig {
        points: grid_points(12, 15, 10.0),
        n_periods: periods,
        treat_start: start,
        p_treated: 0.05,
        assignment: Assignment::Uniform,
        control_spillover: Scale::Fixed(-0.8),
        treated_spillover: Scale::Fixed(0.4),
        ..DgpConfig::grid_default(ExposureSpec::WithinIndicator { dbar: 45.0 }, seed)
    }
}

fn tau(fit: &spillover_did::regression::RegressionFit) -> f64 {
    fit.coef("tau").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mean_differences_equal_twfe(seed in 0u64..1000, periods in 2i64..7) {
        let start = 1 + periods / 2;
        let sim = Simulator::new(small(periods, start, seed)).unwrap();
        let sp = sim.generate(0).unwrap();
        let means = did::did_means(&sp.panel).unwrap();
        let fit = did::estimate(&sp.panel, None, &DidSpec::new(Estimand::Classic), None).unwrap();
        prop_assert!((means - tau(&fit)).abs() < 1e-10);
    }

    #[test]
    fn rings_spanning_radius_match_indicator(seed in 0u64..1000) {
        let sim = Simulator::new(small(2, 2, seed)).unwrap();
        let sp = sim.generate(0).unwrap();
        let rings = compute_exposure(
            &sp.panel,
            sim.geometry(),
            &ExposureSpec::Rings { cuts: vec![0.0, 20.0, 30.0, 45.0] },
            TreatedSet::Contemporaneous,
        ).unwrap();
        let a = did::estimate(&sp.panel, Some(&rings), &DidSpec::new(Estimand::TotalRings), None);
        let b = did::estimate(&sp.panel, Some(&sp.exposure), &DidSpec::new(Estimand::Total), None);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert!((tau(&a) - tau(&b)).abs() < 1e-10),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn two_period_two_stage_matches_twfe(seed in 0u64..1000) {
        let sim = Simulator::new(small(2, 2, seed)).unwrap();
        let sp = sim.generate(0).unwrap();
        let Ok(b) = did::estimate(&sp.panel, Some(&sp.exposure), &DidSpec::new(Estimand::Total), None)
        else { return Ok(()) };
        let a = two_stage(
            &sp.panel,
            &sp.exposure,
            EventWindow::default(),
            &[MenuBlock::Total, MenuBlock::SpilloverControl],
        ).unwrap();
        prop_assert!((a.fit.coef("tau_total").unwrap() - tau(&b)).abs() < 1e-10);
    }

    #[test]
    fn oracle_total_is_direct_plus_treated_spillover(seed in 0u64..1000) {
        let sim = Simulator::new(small(4, 3, seed)).unwrap();
        let o = sim.generate(1).unwrap().oracle;
        prop_assert!((o.tau_total - o.tau_direct - o.tau_spill1).abs() < 1e-12);
        prop_assert!((o.tau_switch(0.0) - o.tau_direct).abs() < 1e-12);
    }
}

#[test]
fn two_stage_recovers_dynamic_effects_without_noise() {
    let config = StaggeredConfig {
        points: grid_points(10, 10, 10.0),
        n_periods: 12,
        start_range: (4, 8),
        p_treated: 0.2,
        lambda_sd: 0.0,
        eps_sd: 0.0,
        ..StaggeredConfig::grid_default(8)
    };
    let sim = StaggeredSimulator::new(config.clone()).unwrap();
    let (panel, exposure) = sim.generate(0).unwrap();
    let fit = two_stage(
        &panel,
        &exposure,
        EventWindow::default(),
        &[
            MenuBlock::TotalEventStudy { pre_periods: true },
            MenuBlock::SpilloverControl,
        ],
    )
    .unwrap();
    for (t, b) in fit.fit.terms.iter().zip(&fit.fit.coefficients) {
        let want = match (t.group.as_str(), t.relative_time) {
            ("treatment", Some(k)) => config.true_effect(k),
            ("pre_trend", _) => 0.0,
            ("spillover_control", _) => config.spill_control,
            _ => continue,
        };
        assert!((b - want).abs() < 1e-8, "{}: {b} vs {want}", t.name);
    }
}

#[test]
fn total_estimator_is_exact_without_noise() {
    let config = DgpConfig {
        lambda_sd: 0.0,
        eps_sd: 0.0,
        ..small(6, 4, 3)
    };
    let sp = Simulator::new(config).unwrap().generate(0).unwrap();
    let fit = did::estimate(&sp.panel, Some(&sp.exposure), &DidSpec::new(Estimand::Direct), None)
        .unwrap();
    assert!((tau(&fit) - 2.0).abs() < 1e-9);
    assert!((fit.coef("gamma0").unwrap() + 0.8).abs() < 1e-9);
    assert!((fit.coef("gamma1").unwrap() - 0.4).abs() < 1e-9);
}

