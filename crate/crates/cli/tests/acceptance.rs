//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use spillover_did::did::{self, DidSpec, Estimand};
use spillover_did::exposure::{compute_exposure, ExposureSpec, TreatedSet};
use spillover_did::montecarlo::{
    oracle_configs, oracle_decomposition_check, run_grid, Assignment, DgpConfig, GridSpec,
    Scale, SimulationReport, Simulator, StaggeredConfig, StaggeredSimulator,
};
use spillover_did::panel::{first_difference, PanelDataset, Record};
use spillover_did::regression::{Kernel, VcovSpec};
use spillover_did::spatial::grid_points;
use spillover_did::staggered::{estimate_staggered, two_stage, EventWindow, MenuBlock};

const GRID_SEED: u64 = 2024;
const GRID_SIMS: usize = 500;

type Check = Box<dyn FnOnce(&Grid) -> Verdict>;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn main() {
    let criteria: Vec<(&str, Check)> = vec![
        ("TWFE bias equals the normalized control spillover", Box::new(twfe_bias)),
        ("superset specifications are unbiased", Box::new(superset_unbiased)),
        ("too-narrow indicator leaves partial bias", Box::new(too_narrow)),
        ("spillover prediction ordering", Box::new(mspe_ordering)),
        ("decomposition oracle", Box::new(|_| oracle())),
        ("exact algebraic identities", Box::new(|_| identities())),
        ("inference degenerations", Box::new(|_| inference())),
        ("staggered event-study recovery", Box::new(|_| staggered())),
        ("command-line golden outputs", Box::new(|_| golden())),
    ];
    let grid = Grid::run();
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let v = check(&grid);
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} {name}: {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

struct Grid {
    report: SimulationReport,
    elapsed: Duration,
}

impl Grid {
    fn run() -> Self {
        let base = DgpConfig::grid_default(ExposureSpec::WithinIndicator { dbar: 40.0 }, GRID_SEED);
        let start = Instant::now();
        let report = run_grid(&base, &GridSpec::standard(), GRID_SIMS).expect("grid runs");
        Self {
            report,
            elapsed: start.elapsed(),
        }
    }

    fn cell(&self, dgp: &str, spec: &str) -> &spillover_did::montecarlo::GridCell {
        self.report.cell(dgp, spec).expect("cell present")
    }

    fn dgps(&self) -> Vec<&str> {
        self.report.dgps.iter().map(|d| d.key.as_str()).collect()
    }
}

fn twfe_bias(g: &Grid) -> Verdict {
    let mut worst: f64 = 0.0;
    for d in g.dgps() {
        worst = worst.max((g.cell(d, "twfe").bias - 0.263).abs());
    }
    let fast = g.elapsed <= Duration::from_secs(600);
    Verdict::new(
        worst <= 0.02 && fast,
        format!(
            "max |bias - 0.263| = {worst:.4} over {} columns, {GRID_SIMS} replications in {:.1}s",
            g.dgps().len(),
            g.elapsed.as_secs_f64()
        ),
    )
}

const WITHIN_80: [&str; 5] = ["within_40", "within_80", "within_40_add", "within_80_add", "decay"];

fn superset_unbiased(g: &Grid) -> Verdict {
    let mut worst = f64::NEG_INFINITY;
    let mut at = String::new();
    for spec in ["within_80", "rings_5"] {
        for d in WITHIN_80 {
            let c = g.cell(d, spec);
            let ratio = c.bias.abs() / c.mc_se;
            if ratio > worst {
                worst = ratio;
                at = format!("{spec} on {d}: bias {:.4}, MC-SE {:.4}", c.bias, c.mc_se);
            }
        }
    }
    Verdict::new(worst <= 2.0, format!("max |bias|/MC-SE = {worst:.2} ({at})"))
}

fn too_narrow(g: &Grid) -> Verdict {
    let c = g.cell("within_80", "within_40");
    let twfe = g.cell("within_80", "twfe").bias;
    Verdict::new(
        c.bias > 5.0 * c.mc_se && c.bias < twfe,
        format!(
            "bias {:.4} vs 5 x MC-SE {:.4} and TWFE bias {twfe:.4}",
            c.bias,
            5.0 * c.mc_se
        ),
    )
}

fn mspe_ordering(g: &Grid) -> Verdict {
    let specs: Vec<&str> = g.report.specs.iter().map(|s| s.key.as_str()).collect();
    let share = |d: &str, s: &str| g.cell(d, s).mspe.unwrap_or(f64::NEG_INFINITY);
    let mut problems = Vec::new();
    let mut diag_min = f64::INFINITY;
    for d in g.dgps() {
        let own = share(d, d);
        diag_min = diag_min.min(own);
        if own < 0.95 || specs.iter().any(|s| *s != d && share(d, s) > own) {
            problems.push(format!("{d}: correct spec {own:.3} not maximal or below 0.95"));
        }
    }
    // Non-additive rings reaching the true outer radius, per non-additive DGP.
    let wide = [
        ("within_40", vec!["rings_3", "rings_5"]),
        ("within_80", vec!["rings_5"]),
        ("decay", vec!["rings_5"]),
    ];
    let mut margin = f64::INFINITY;
    for (d, rings) in wide {
        let best_other = specs
            .iter()
            .filter(|s| **s != d && !rings.contains(s))
            .map(|s| share(d, s))
            .fold(f64::NEG_INFINITY, f64::max);
        for r in rings {
            let m = share(d, r) - best_other;
            margin = margin.min(m);
            if m <= 0.0 {
                problems.push(format!("{d}: {r} {:.3} vs best other {best_other:.3}", share(d, r)));
            }
        }
    }
    Verdict::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("diagonal min {diag_min:.3}; smallest rings margin {margin:.3}")
        } else {
            problems.join("; ")
        },
    )
}

fn oracle() -> Verdict {
    let mut rows = 0;
    let mut fails = Vec::new();
    let mut worst: f64 = 0.0;
    for (label, config) in oracle_configs(7) {
        let r = oracle_decomposition_check(&config, &label, 300).expect("oracle runs");
        for row in &r.rows {
            rows += 1;
            worst = worst.max(row.mean_diff.abs() / row.mc_se);
            if !row.pass {
                fails.push(format!("{label}/{}: diff {:.4} MC-SE {:.4}", row.estimator, row.mean_diff, row.mc_se));
            }
        }
        if r.rows.iter().all(|row| row.estimator != "classic") {
            fails.push(format!("{label}: classic estimator never identified"));
        }
    }
    Verdict::new(
        fails.is_empty(),
        if fails.is_empty() {
            format!("{rows} estimator/target pairs over 5 DGPs, max |diff|/MC-SE {worst:.2}")
        } else {
            fails.join("; ")
        },
    )
}

fn two_period(seed: u64) -> (spillover_did::montecarlo::SimPanel, Simulator) {
    let config = DgpConfig {
        points: grid_points(15, 20, 10.0),
        n_periods: 2,
        treat_start: 2,
        p_treated: 0.04,
        assignment: Assignment::Uniform,
        control_spillover: Scale::Fixed(-0.7),
        treated_spillover: Scale::Fixed(0.3),
        ..DgpConfig::grid_default(ExposureSpec::WithinIndicator { dbar: 45.0 }, seed)
    };
    let sim = Simulator::new(config).unwrap();
    (sim.generate(0).unwrap(), sim)
}

/// Unbalanced copy of a panel: each observation after the first period is
/// dropped with probability about 0.1 (deterministic in the unit and time).
fn unbalance(panel: &PanelDataset) -> PanelDataset {
    let records = panel
        .observations()
        .iter()
        .filter(|o| o.time == 1 || !(o.unit * 31 + o.time as usize * 17).is_multiple_of(10))
        .map(|o| Record {
            unit: panel.units()[o.unit].clone(),
            time: o.time,
            outcome: o.outcome,
            treated: o.treated,
            covariates: vec![],
        })
        .collect();
    PanelDataset::from_records(records, vec![]).unwrap()
}

/// `tau` and `gamma0` by least squares on explicit unit and time dummies.
fn dummy_total(panel: &PanelDataset, s: &[bool]) -> [f64; 2] {
    let obs = panel.observations();
    let nu = panel.n_units();
    let nt = panel.periods().len();
    let p = 2 + nu + nt - 1;
    let mut x = DMatrix::zeros(obs.len(), p);
    for (r, o) in obs.iter().enumerate() {
        let d = if o.treated { 1.0 } else { 0.0 };
        x[(r, 0)] = d;
        x[(r, 1)] = (1.0 - d) * if s[r] { 1.0 } else { 0.0 };
        x[(r, 2 + o.unit)] = 1.0;
        let t = panel.periods().binary_search(&o.time).unwrap();
        if t > 0 {
            x[(r, 2 + nu + t - 1)] = 1.0;
        }
    }
    let y = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.outcome));
    let beta = (x.transpose() * &x).lu().solve(&(x.transpose() * y)).unwrap();
    [beta[0], beta[1]]
}

fn identities() -> Verdict {
    let mut rings_gap: f64 = 0.0;
    let mut stage_gap: f64 = 0.0;
    let mut means_gap: f64 = 0.0;
    let mut fwl_gap: f64 = 0.0;
    let mut used = 0;
    for seed in 0..20 {
        let (sp, sim) = two_period(seed);
        let total = did::estimate(&sp.panel, Some(&sp.exposure), &DidSpec::new(Estimand::Total), None);
        let Ok(total) = total else { continue };
        used += 1;
        let tau = total.coef("tau").unwrap();
        let rings = compute_exposure(
            &sp.panel,
            sim.geometry(),
            &ExposureSpec::Rings {
                cuts: vec![0.0, 20.0, 30.0, 45.0],
            },
            TreatedSet::Contemporaneous,
        )
        .unwrap();
        let r = did::estimate(&sp.panel, Some(&rings), &DidSpec::new(Estimand::TotalRings), None)
            .unwrap();
        rings_gap = rings_gap.max((r.coef("tau").unwrap() - tau).abs());
        let ts = two_stage(
            &sp.panel,
            &sp.exposure,
            EventWindow::default(),
            &[MenuBlock::Total, MenuBlock::SpilloverControl],
        )
        .unwrap();
        stage_gap = stage_gap.max((ts.fit.coef("tau_total").unwrap() - tau).abs());

        // Multi-period panels for the mean-difference and dummy-variable checks.
        let config = DgpConfig {
            n_periods: 6,
            treat_start: 4,
            ..sim.config().clone()
        };
        let multi = Simulator::new(config.clone()).unwrap().generate(1).unwrap();
        let classic = did::estimate(&multi.panel, None, &DidSpec::new(Estimand::Classic), None)
            .unwrap();
        means_gap = means_gap
            .max((did::did_means(&multi.panel).unwrap() - classic.coef("tau").unwrap()).abs());
        let ub = unbalance(&multi.panel);
        let sim_ub = Simulator::new(config).unwrap();
        let e = compute_exposure(
            &ub,
            sim_ub.geometry(),
            &ExposureSpec::WithinIndicator { dbar: 45.0 },
            TreatedSet::Contemporaneous,
        )
        .unwrap();
        if let Ok(f) = did::estimate(&ub, Some(&e), &DidSpec::new(Estimand::Total), None) {
            let s: Vec<bool> = (0..e.len()).map(|r| e.s(r)).collect();
            let want = dummy_total(&ub, &s);
            for (name, w) in ["tau", "gamma0"].iter().zip(want) {
                fwl_gap = fwl_gap.max((f.coef(name).unwrap() - w).abs() / w.abs().max(1e-12));
            }
        }
    }
    let pass = used >= 10 && rings_gap <= 1e-10 && stage_gap <= 1e-10 && means_gap <= 1e-10 && fwl_gap <= 1e-8;
    Verdict::new(
        pass,
        format!(
            "{used} panels: rings {rings_gap:.1e}, two-stage {stage_gap:.1e}, means {means_gap:.1e}, dummy-variable (relative) {fwl_gap:.1e}"
        ),
    )
}

fn inference() -> Verdict {
    // Conley below the smallest distance: cross-section equals HC1, panel
    // equals clustering by unit.
    let (sp, sim) = two_period(3);
    let tiny = VcovSpec::Conley {
        cutoff: 0.5 * sim.geometry().min_pairwise_distance(),
        kernel: Kernel::Uniform,
    };
    let fd = first_difference(&sp.panel, 1, 2).unwrap();
    let cross = |v| {
        did::first_difference_regression(&sp.panel, &fd, None, &[], v, true, Some(sim.geometry()))
            .unwrap()
            .vcov
    };
    let panel_fit = |v| {
        did::estimate(&sp.panel, Some(&sp.exposure), &DidSpec::new(Estimand::Total).with_vcov(v), Some(sim.geometry()))
            .unwrap()
            .vcov
    };
    let gap = |a: Vec<Vec<f64>>, b: Vec<Vec<f64>>| {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max)
    };
    let hc_gap = gap(cross(tiny), cross(VcovSpec::Hc1));
    let cl_gap = gap(panel_fit(tiny), panel_fit(VcovSpec::ClusterByUnit));

    // Unit bootstrap against the analytic iid standard error.
    let config = DgpConfig {
        points: grid_points(25, 40, 10.0),
        n_periods: 2,
        treat_start: 2,
        assignment: Assignment::Uniform,
        control_spillover: Scale::Fixed(0.0),
        ..DgpConfig::grid_default(ExposureSpec::WithinIndicator { dbar: 1.0 }, 11)
    };
    let sp = Simulator::new(config).unwrap().generate(0).unwrap();
    let iid = did::estimate(&sp.panel, None, &DidSpec::new(Estimand::Classic), None).unwrap();
    let iid_se = iid.std_error("tau").unwrap();
    let boot = estimate_staggered(&sp.panel, &sp.exposure, EventWindow::default(), &[MenuBlock::Total], 1000, 5)
        .unwrap();
    let boot_se = boot.fit.std_error("tau_total").unwrap();
    let ratio = boot_se / iid_se;
    Verdict::new(
        hc_gap <= 1e-10 && cl_gap <= 1e-10 && (ratio - 1.0).abs() <= 0.15,
        format!(
            "Conley vs HC1 {hc_gap:.1e}, vs cluster {cl_gap:.1e}; bootstrap SE {boot_se:.4} / iid SE {iid_se:.4} = {ratio:.3} (n = {})",
            sp.panel.observations().len()
        ),
    )
}

fn staggered() -> Verdict {
    let n_sims = 200u64;
    let config = StaggeredConfig::grid_default(31);
    let sim = StaggeredSimulator::new(config.clone()).unwrap();
    let window = EventWindow {
        min: Some(-5),
        max: None,
        bin: true,
    };
    let menu = [
        MenuBlock::TotalEventStudy { pre_periods: true },
        MenuBlock::SpilloverControl,
    ];
    let fits: Vec<Vec<(String, f64)>> = (0..n_sims)
        .into_par_iter()
        .map(|r| {
            let (panel, exposure) = sim.generate(r).unwrap();
            let fit = two_stage(&panel, &exposure, window, &menu).unwrap();
            fit.fit
                .terms
                .iter()
                .zip(&fit.fit.coefficients)
                .map(|(t, &b)| (t.name.clone(), b))
                .collect()
        })
        .collect();
    let mut worst: f64 = 0.0;
    let mut at = String::new();
    let mut checked = 0;
    let mut missing = Vec::new();
    let wanted: Vec<(String, f64)> = (0..=5)
        .map(|k| (format!("tau_total[{k}]"), config.true_effect(k)))
        .chain((-5..=-1).map(|k| (format!("pi[{k}]"), 0.0)))
        .collect();
    for (name, truth) in &wanted {
        let vals: Vec<f64> = fits
            .iter()
            .filter_map(|f| f.iter().find(|t| &t.0 == name).map(|t| t.1))
            .collect();
        if vals.len() as u64 != n_sims {
            missing.push(name.clone());
            continue;
        }
        checked += 1;
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        if (mean - truth).abs() > worst {
            worst = (mean - truth).abs();
            at = format!("{name} mean {mean:.4} vs {truth}");
        }
    }
    Verdict::new(
        missing.is_empty() && worst <= 0.05,
        format!("{checked} coefficients over {n_sims} panels, max |mean - truth| {worst:.4} ({at}){}",
            if missing.is_empty() { String::new() } else { format!("; missing {}", missing.join(",")) }),
    )
}

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn golden() -> Verdict {
    let script = std::fs::read_to_string(data().join("regen_golden.sh")).unwrap();
    let mut cases = Vec::new();
    for line in script.lines().filter(|l| l.starts_with("\"$bin\"")) {
        let (cmd, rest) = line.split_once(" > \"$g/").unwrap();
        let file = rest.split('"').next().unwrap().to_string();
        let args: Vec<String> = cmd
            .split_whitespace()
            .skip(1)
            .map(|a| {
                a.replace("\"$p\"", "panel.csv")
                    .replace("\"$s\"", "staggered.csv")
                    .replace("\"$c\"", "coords.csv")
            })
            .collect();
        cases.push((file, args));
    }
    let mut bad = Vec::new();
    for (file, args) in &cases {
        let want = std::fs::read(data().join("golden").join(file)).unwrap();
        for threads in ["1", "3"] {
            let out = Command::new(env!("CARGO_BIN_EXE_spillover-did"))
                .args(args)
                .current_dir(data())
                .env("SPILLOVER_DID_THREADS", threads)
                .output()
                .unwrap();
            if !out.status.success() || out.stdout != want {
                bad.push(format!("{file} (threads {threads})"));
            }
        }
    }
    Verdict::new(
        !cases.is_empty() && bad.is_empty(),
        if bad.is_empty() {
            format!("{} outputs byte-identical to golden files across 2 runs each", cases.len())
        } else {
            format!("mismatch: {}", bad.join(", "))
        },
    )
}
