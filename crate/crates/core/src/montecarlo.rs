//! Simulated panels with known spillovers, the misspecification grid and
//! the decomposition oracle.
//!
//! Outcomes follow
//! `y_it = λ_t + μ_i + τ D_it + β_c (1−D_it) h_it + β_t D_it h_it + ε_it`
//! with `λ_t ~ N(0.2 t, 0.1²)`, `μ_i ~ N(6, 2²)`, `ε_it ~ N(0, 2²)`.
//! Replication `r` draws from ChaCha8 seeded with the config seed on stream
//! `r`; the assignment and all noise are drawn before any exposure-dependent
//! quantity, so DGPs that differ only in `h` share their random numbers.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::did::{self, DidSpec, Estimand};
use crate::error::{Error, Result};
use crate::exposure::{compute_exposures, ExposureMatrix, ExposureSpec, TreatedSet};
use crate::panel::{PanelDataset, Record};
use crate::spatial::{grid_points, Geometry, PointSet};
use crate::tidy::fixed;

/// How the treated units are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Assignment {
    /// `round(p·n)` units drawn without replacement.
    Uniform,
    /// `clusters` random seed units grown into contiguous blobs until
    /// `round(p·n)` units are treated.
    Clustered { clusters: usize },
}

/// Spillover coefficient: fixed, or rescaled each replication so the mean
/// spillover over the group (controls or treated) equals a target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Scale {
    Fixed(f64),
    MeanTarget(f64),
}

#[derive(Debug, Clone)]
pub struct DgpConfig {
    pub points: PointSet,
    /// Periods run `1..=n_periods`.
    pub n_periods: i64,
    /// First treated period (common timing).
    pub treat_start: i64,
    pub p_treated: f64,
    pub assignment: Assignment,
    pub true_exposure: ExposureSpec,
    pub control_spillover: Scale,
    pub treated_spillover: Scale,
    pub direct_effect: f64,
    pub lambda_slope: f64,
    pub lambda_sd: f64,
    pub mu_mean: f64,
    pub mu_sd: f64,
    pub eps_sd: f64,
    pub seed: u64,
}

impl DgpConfig {
    /// 40 × 25 grid at 10-mile spacing, 20 periods with treatment from
    /// period 11, 10% of units treated in one contiguous cluster, mean
    /// control spillover −0.263.
    pub fn grid_default(true_exposure: ExposureSpec, seed: u64) -> Self {
        Self {
            points: grid_points(25, 40, 10.0),
            n_periods: 20,
            treat_start: 11,
            p_treated: 0.1,
            assignment: Assignment::Clustered { clusters: 1 },
            true_exposure,
            control_spillover: Scale::MeanTarget(-0.263),
            treated_spillover: Scale::Fixed(0.0),
            direct_effect: 2.0,
            lambda_slope: 0.2,
            lambda_sd: 0.1,
            mu_mean: 6.0,
            mu_sd: 2.0,
            eps_sd: 2.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.p_treated > 0.0 && self.p_treated < 1.0) {
            return bad(format!("treated share must be in (0, 1), got {}", self.p_treated));
        }
        for (name, v) in [
            ("lambda_sd", self.lambda_sd),
            ("mu_sd", self.mu_sd),
            ("eps_sd", self.eps_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.n_periods < 2 || self.treat_start <= 1 || self.treat_start > self.n_periods {
            return bad(format!(
                "need 1 < treat_start <= n_periods, got {} and {}",
                self.treat_start, self.n_periods
            ));
        }
        if self.points.len() < 2 {
            return bad("need at least two units".into());
        }
        if let Assignment::Clustered { clusters } = self.assignment {
            if clusters == 0 {
                return bad("clustered assignment needs at least one cluster".into());
            }
        }
        self.true_exposure.validate()?;
        if self.true_exposure.dim() != 1 {
            return bad("the true exposure must be scalar".into());
        }
        Ok(())
    }
}

/// Population effects implied by the DGP for the realized assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectOracle {
    pub tau_direct: f64,
    /// Mean spillover on control units.
    pub tau_spill0: f64,
    /// Mean spillover on treated units.
    pub tau_spill1: f64,
    pub tau_total: f64,
    pub beta_control: f64,
    pub beta_treated: f64,
}

impl EffectOracle {
    /// `E[Y(1, h) − Y(0, h)]`.
    pub fn tau_switch(&self, h: f64) -> f64 {
        self.tau_direct + (self.beta_treated - self.beta_control) * h
    }

    /// What the classic two-group comparison converges to.
    pub fn classic_limit(&self) -> f64 {
        self.tau_direct + self.tau_spill1 - self.tau_spill0
    }
}

/// One simulated panel with its true exposure and effects.
#[derive(Debug, Clone)]
pub struct SimPanel {
    pub panel: PanelDataset,
    pub exposure: ExposureMatrix,
    pub oracle: EffectOracle,
    pub treated: Vec<bool>,
}

/// Draws shared by every DGP in a replication.
struct BaseDraw {
    treated: Vec<bool>,
    /// Outcome without treatment or spillover, unit-major.
    y0: Vec<f64>,
    panel: PanelDataset,
}

/// Reusable generator for one geometry and parameter set.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: DgpConfig,
    geometry: Geometry,
    adjacency: Vec<Vec<usize>>,
}

impl Simulator {
    pub fn new(config: DgpConfig) -> Result<Self> {
        config.validate()?;
        let geometry = Geometry::from_points(config.points.clone(), 20.0);
        let n = geometry.len();
        let mut nn = 0.0f64;
        for i in 0..n {
            let mut best = f64::INFINITY;
            for j in 0..n {
                if i != j {
                    best = best.min(geometry.distance_idx(i, j));
                }
            }
            nn = nn.max(best);
        }
        let reach = nn * 1.01;
        let adjacency = (0..n)
            .map(|i| {
                let mut v: Vec<usize> = geometry
                    .within_inclusive(i, reach)
                    .into_iter()
                    .map(|(j, _)| j)
                    .collect();
                v.sort_unstable();
                v
            })
            .collect();
        Ok(Self {
            config,
            geometry,
            adjacency,
        })
    }

    pub fn config(&self) -> &DgpConfig {
        &self.config
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    fn rng(&self, replication: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(replication);
        rng
    }

    fn assign(&self, rng: &mut ChaCha8Rng) -> Vec<bool> {
        let n = self.geometry.len();
        let m = ((self.config.p_treated * n as f64).round() as usize).clamp(1, n - 1);
        let mut treated = vec![false; n];
        match self.config.assignment {
            Assignment::Uniform => {
                for i in sample(rng, n, m) {
                    treated[i] = true;
                }
            }
            Assignment::Clustered { clusters } => {
                let mut count = 0;
                let mut frontier = Vec::new();
                let mut queued = vec![false; n];
                let add = |i: usize,
                               treated: &mut Vec<bool>,
                               frontier: &mut Vec<usize>,
                               queued: &mut Vec<bool>| {
                    treated[i] = true;
                    for &j in &self.adjacency[i] {
                        if !treated[j] && !queued[j] {
                            queued[j] = true;
                            frontier.push(j);
                        }
                    }
                };
                for s in sample(rng, n, clusters.min(m)) {
                    add(s, &mut treated, &mut frontier, &mut queued);
                    count += 1;
                }
                while count < m {
                    let next = loop {
                        if frontier.is_empty() {
                            let free: Vec<usize> = (0..n).filter(|&i| !treated[i]).collect();
                            break free[rng.random_range(0..free.len())];
                        }
                        let k = rng.random_range(0..frontier.len());
                        let c = frontier.swap_remove(k);
                        if !treated[c] {
                            break c;
                        }
                    };
                    add(next, &mut treated, &mut frontier, &mut queued);
                    count += 1;
                }
            }
        }
        treated
    }

    fn draw_base(&self, replication: u64) -> Result<BaseDraw> {
        let c = &self.config;
        let mut rng = self.rng(replication);
        let treated = self.assign(&mut rng);
        let n = treated.len();
        let t_n = c.n_periods as usize;
        let normal = |m: f64, s: f64| Normal::new(m, s).map_err(|e| Error::InvalidConfig(e.to_string()));
        let mut lambda = Vec::with_capacity(t_n);
        for t in 1..=c.n_periods {
            lambda.push(normal(c.lambda_slope * t as f64, c.lambda_sd)?.sample(&mut rng));
        }
        let mu_d = normal(c.mu_mean, c.mu_sd)?;
        let mu: Vec<f64> = (0..n).map(|_| mu_d.sample(&mut rng)).collect();
        let eps_d = normal(0.0, c.eps_sd)?;
        let mut y0 = Vec::with_capacity(n * t_n);
        let mut records = Vec::with_capacity(n * t_n);
        let ids = self.geometry.ids();
        for i in 0..n {
            for t in 1..=c.n_periods {
                let y = lambda[(t - 1) as usize] + mu[i] + eps_d.sample(&mut rng);
                y0.push(y);
                records.push(Record {
                    unit: ids[i].clone(),
                    time: t,
                    outcome: y,
                    treated: treated[i] && t >= c.treat_start,
                    covariates: Vec::new(),
                });
            }
        }
        let panel = PanelDataset::from_records(records, Vec::new())?;
        Ok(BaseDraw { treated, y0, panel })
    }

    /// Adds treatment and spillover effects given the true exposure.
    fn realize(&self, base: &BaseDraw, h_true: &ExposureMatrix) -> Result<SimPanel> {
        let c = &self.config;
        let t_n = c.n_periods as usize;
        let post_row = |i: usize| i * t_n + t_n - 1;
        let n = base.treated.len();
        let mean_h = |want: bool| -> f64 {
            let (s, k) = (0..n)
                .filter(|&i| base.treated[i] == want)
                .fold((0.0, 0usize), |(s, k), i| (s + h_true.h(post_row(i))[0], k + 1));
            if k == 0 {
                0.0
            } else {
                s / k as f64
            }
        };
        let resolve = |scale: Scale, m: f64, group: &str| -> Result<f64> {
            match scale {
                Scale::Fixed(b) => Ok(b),
                Scale::MeanTarget(0.0) => Ok(0.0),
                Scale::MeanTarget(target) => {
                    if m > 0.0 {
                        Ok(target / m)
                    } else {
                        Err(Error::DegenerateGeometry(format!(
                            "no {group} unit is exposed under {}",
                            c.true_exposure.label()
                        )))
                    }
                }
            }
        };
        let (m0, m1) = (mean_h(false), mean_h(true));
        let beta_c = resolve(c.control_spillover, m0, "control")?;
        let beta_t = resolve(c.treated_spillover, m1, "treated")?;
        let mut k = 0;
        let panel = base.panel.with_outcomes(|o| {
            let h = h_true.h(k)[0];
            let y = base.y0[k]
                + if o.treated {
                    c.direct_effect + beta_t * h
                } else {
                    beta_c * h
                };
            k += 1;
            y
        });
        let oracle = EffectOracle {
            tau_direct: c.direct_effect,
            tau_spill0: beta_c * m0,
            tau_spill1: beta_t * m1,
            tau_total: c.direct_effect + beta_t * m1,
            beta_control: beta_c,
            beta_treated: beta_t,
        };
        Ok(SimPanel {
            panel,
            exposure: h_true.clone(),
            oracle,
            treated: base.treated.clone(),
        })
    }

    /// Panel, true exposure and oracle for one replication.
    pub fn generate(&self, replication: u64) -> Result<SimPanel> {
        let base = self.draw_base(replication)?;
        let h = compute_exposures(
            &base.panel,
            &self.geometry,
            std::slice::from_ref(&self.config.true_exposure),
            TreatedSet::Contemporaneous,
        )?
        .pop()
        .expect("one spec");
        self.realize(&base, &h)
    }
}

/// `1 − Σ(true − predicted)² / Σ true²` over control units.
pub fn mspe_share(truth: &[f64], predicted: &[f64]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::InvalidConfig(format!(
            "{} true values but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let den: f64 = truth.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let num: f64 = truth
        .iter()
        .zip(predicted)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(1.0 - num / den)
}

/// A named exposure mapping (a DGP column or an estimator row).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedSpec {
    pub key: String,
    pub label: String,
    /// `None` is plain two-way fixed effects.
    pub exposure: Option<ExposureSpec>,
}

impl NamedSpec {
    pub fn new(key: &str, label: &str, exposure: Option<ExposureSpec>) -> Self {
        Self {
            key: key.into(),
            label: label.into(),
            exposure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    pub dgps: Vec<NamedSpec>,
    pub specs: Vec<NamedSpec>,
    /// `false`: `tau` with `(1−D)h̃` terms; `true`: also `D·h̃`.
    pub with_treated_terms: bool,
}

fn within(d: f64) -> ExposureSpec {
    ExposureSpec::WithinIndicator { dbar: d }
}

impl GridSpec {
    /// Six DGPs by ten estimator rows.
    pub fn standard() -> Self {
        let w40 = within(40.0);
        let w80 = within(80.0);
        let w40a = ExposureSpec::WithinCount { dbar: 40.0 };
        let w80a = ExposureSpec::WithinCount { dbar: 80.0 };
        let decay = ExposureSpec::Decay {
            alpha: 0.02,
            cutoff: 80.0,
        };
        let decay_a = ExposureSpec::DecayCount { alpha: 0.02 };
        let five = vec![0.0, 20.0, 30.0, 40.0, 60.0, 80.0];
        let dgps = vec![
            NamedSpec::new("within_40", "Within 40mi.", Some(w40.clone())),
            NamedSpec::new("within_80", "Within 80mi.", Some(w80.clone())),
            NamedSpec::new("within_40_add", "Within 40mi. (Additive)", Some(w40a.clone())),
            NamedSpec::new("within_80_add", "Within 80mi. (Additive)", Some(w80a.clone())),
            NamedSpec::new("decay", "Decay", Some(decay.clone())),
            NamedSpec::new("decay_add", "Decay (Additive)", Some(decay_a.clone())),
        ];
        let mut specs = vec![NamedSpec::new("twfe", "TWFE (No Spillovers)", None)];
        specs.extend(dgps.iter().cloned());
        specs.push(NamedSpec::new(
            "rings_3",
            "Rings (0-20, 20-30, 30-40)",
            Some(ExposureSpec::Rings {
                cuts: vec![0.0, 20.0, 30.0, 40.0],
            }),
        ));
        specs.push(NamedSpec::new(
            "rings_5",
            "Rings (0-20, 20-30, 30-40, 40-60, 60-80)",
            Some(ExposureSpec::Rings { cuts: five.clone() }),
        ));
        specs.push(NamedSpec::new(
            "rings_5_add",
            "Rings (0-20, 20-30, 30-40, 40-60, 60-80) (Additive)",
            Some(ExposureSpec::RingsAdditive { cuts: five }),
        ));
        Self {
            dgps,
            specs,
            with_treated_terms: false,
        }
    }
}

/// Aggregated results for one (DGP, estimator) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub dgp: String,
    pub spec: String,
    pub bias: f64,
    pub mse: f64,
    /// Standard error of the mean bias across replications.
    pub mc_se: f64,
    /// Mean spillover-prediction share; `None` when never defined.
    pub mspe: Option<f64>,
    pub n_ok: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub n_sims: usize,
    pub dgps: Vec<NamedSpec>,
    pub specs: Vec<NamedSpec>,
    pub cells: Vec<GridCell>,
}

#[derive(Clone, Copy, Default)]
struct CellDraw {
    err: Option<f64>,
    mspe: Option<f64>,
}

impl SimulationReport {
    pub fn cell(&self, dgp: &str, spec: &str) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.dgp == dgp && c.spec == spec)
    }

    /// Tidy rows: `dgp, spec, bias, mse, mc_se, mspe, n_ok, failures, n_sims, seed`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "dgp", "spec", "bias", "mse", "mc_se", "mspe", "n_ok", "failures", "n_sims", "seed",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.dgp.clone(),
                c.spec.clone(),
                fixed(c.bias),
                fixed(c.mse),
                fixed(c.mc_se),
                c.mspe.map(fixed).unwrap_or_else(|| "NA".into()),
                c.n_ok.to_string(),
                c.failures.to_string(),
                self.n_sims.to_string(),
                self.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text tables: bias with MSE in brackets, then MSPE shares.
    pub fn format_tables(&self) -> String {
        let width = self.specs.iter().map(|s| s.label.len()).max().unwrap_or(10) + 2;
        let mut out = String::new();
        let header = |out: &mut String, title: &str| {
            let _ = writeln!(out, "{title}");
            let _ = write!(out, "{:width$}", "");
            for d in &self.dgps {
                let _ = write!(out, "{:>16}", d.key);
            }
            out.push('\n');
        };
        header(&mut out, "Mean bias [MSE]");
        for s in &self.specs {
            let _ = write!(out, "{:width$}", s.label);
            for d in &self.dgps {
                let cell = self.cell(&d.key, &s.key).expect("full grid");
                let _ = write!(out, "{:>16}", format!("{:.3} [{:.3}]", cell.bias, cell.mse));
            }
            out.push('\n');
        }
        out.push('\n');
        header(&mut out, "Share of spillovers predicted");
        for s in &self.specs {
            let _ = write!(out, "{:width$}", s.label);
            for d in &self.dgps {
                let cell = self.cell(&d.key, &s.key).expect("full grid");
                let text = cell
                    .mspe
                    .map(|m| format!("{:.1}%", 100.0 * m))
                    .unwrap_or_else(|| "n/a".into());
                let _ = write!(out, "{text:>16}");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every estimator row against every DGP column for `n_sims`
/// replications. The assignment and noise are shared across columns within
/// a replication. Failed fits are counted, never fatal.
pub fn run_grid(base: &DgpConfig, grid: &GridSpec, n_sims: usize) -> Result<SimulationReport> {
    if n_sims == 0 {
        return Err(Error::InvalidConfig("n_sims must be at least 1".into()));
    }
    if grid.dgps.iter().any(|d| d.exposure.is_none()) {
        return Err(Error::InvalidConfig("every DGP needs an exposure mapping".into()));
    }
    let sim = Simulator::new(base.clone())?;
    let mut union: Vec<ExposureSpec> = Vec::new();
    for s in grid.dgps.iter().chain(&grid.specs) {
        if let Some(e) = &s.exposure {
            e.validate()?;
            if !union.contains(e) {
                union.push(e.clone());
            }
        }
    }
    let find = |e: &ExposureSpec| union.iter().position(|u| u == e).expect("in union");
    let nd = grid.dgps.len();
    let ns = grid.specs.len();
    let t_n = base.n_periods as usize;

    let per_rep: Vec<Vec<CellDraw>> = (0..n_sims as u64)
        .into_par_iter()
        .map(|r| {
            let mut draws = vec![CellDraw::default(); nd * ns];
            let Ok(base_draw) = sim.draw_base(r) else {
                return draws;
            };
            let Ok(exposures) = compute_exposures(
                &base_draw.panel,
                sim.geometry(),
                &union,
                TreatedSet::Contemporaneous,
            ) else {
                return draws;
            };
            for (di, dgp) in grid.dgps.iter().enumerate() {
                let h_true = &exposures[find(dgp.exposure.as_ref().expect("checked"))];
                let mut dgp_sim = sim.clone();
                dgp_sim.config.true_exposure = dgp.exposure.clone().expect("checked");
                let Ok(sp) = dgp_sim.realize(&base_draw, h_true) else {
                    continue;
                };
                let target = if grid.with_treated_terms {
                    sp.oracle.tau_direct
                } else {
                    sp.oracle.tau_total
                };
                let controls: Vec<usize> = (0..sp.treated.len()).filter(|&i| !sp.treated[i]).collect();
                let truth: Vec<f64> = controls
                    .iter()
                    .map(|&i| sp.oracle.beta_control * h_true.h(i * t_n + t_n - 1)[0])
                    .collect();
                for (si, spec) in grid.specs.iter().enumerate() {
                    let cell = &mut draws[di * ns + si];
                    let (estimand, exposure) = match &spec.exposure {
                        None => (Estimand::Classic, None),
                        Some(e) => (
                            if grid.with_treated_terms {
                                Estimand::DirectExposure
                            } else {
                                Estimand::TotalExposure
                            },
                            Some(&exposures[find(e)]),
                        ),
                    };
                    let Ok(fit) = did::estimate(&sp.panel, exposure, &DidSpec::new(estimand), None)
                    else {
                        continue;
                    };
                    cell.err = fit.coef("tau").map(|t| t - target);
                    let predicted: Vec<f64> = controls
                        .iter()
                        .map(|&i| {
                            let Some(e) = exposure else { return 0.0 };
                            let row = i * t_n + t_n - 1;
                            fit.terms
                                .iter()
                                .zip(&fit.coefficients)
                                .filter(|(t, _)| t.group == "spillover_control")
                                .map(|(t, b)| {
                                    let k = component_of(&t.name, e.component_names());
                                    b * e.h(row)[k]
                                })
                                .sum()
                        })
                        .collect();
                    cell.mspe = mspe_share(&truth, &predicted).ok();
                }
            }
            draws
        })
        .collect();

    let mut cells = Vec::with_capacity(nd * ns);
    for (di, dgp) in grid.dgps.iter().enumerate() {
        for (si, spec) in grid.specs.iter().enumerate() {
            let errs: Vec<f64> = per_rep.iter().filter_map(|d| d[di * ns + si].err).collect();
            let shares: Vec<f64> = per_rep.iter().filter_map(|d| d[di * ns + si].mspe).collect();
            let n = errs.len();
            let (bias, mse, mc_se) = if n == 0 {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                let m = errs.iter().sum::<f64>() / n as f64;
                let mse = errs.iter().map(|e| e * e).sum::<f64>() / n as f64;
                let se = if n > 1 {
                    (errs.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                        / (n as f64).sqrt()
                } else {
                    f64::NAN
                };
                (m, mse, se)
            };
            cells.push(GridCell {
                dgp: dgp.key.clone(),
                spec: spec.key.clone(),
                bias,
                mse,
                mc_se,
                mspe: (!shares.is_empty()).then(|| shares.iter().sum::<f64>() / shares.len() as f64),
                n_ok: n,
                failures: n_sims - n,
            });
        }
    }
    Ok(SimulationReport {
        seed: base.seed,
        n_sims,
        dgps: grid.dgps.clone(),
        specs: grid.specs.clone(),
        cells,
    })
}

/// Index of the exposure component behind a `beta_control[_name]` term.
fn component_of(term: &str, names: &[String]) -> usize {
    if names.len() == 1 {
        return 0;
    }
    names
        .iter()
        .position(|n| term.ends_with(n.as_str()))
        .expect("term built from component names")
}

/// One estimator checked against its oracle target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub estimator: String,
    pub target: String,
    pub mean_estimate: f64,
    pub mean_target: f64,
    pub mean_diff: f64,
    pub mc_se: f64,
    pub n_ok: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub label: String,
    pub n_sims: usize,
    pub rows: Vec<OracleRow>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

fn oracle_row(estimator: &str, target: &str, pairs: &[(f64, f64)]) -> Option<OracleRow> {
    let n = pairs.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let diffs: Vec<f64> = pairs.iter().map(|(e, t)| e - t).collect();
    let md = diffs.iter().sum::<f64>() / nf;
    let sd = (diffs.iter().map(|d| (d - md).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let mc_se = sd / nf.sqrt();
    Some(OracleRow {
        estimator: estimator.into(),
        target: target.into(),
        mean_estimate: pairs.iter().map(|p| p.0).sum::<f64>() / nf,
        mean_target: pairs.iter().map(|p| p.1).sum::<f64>() / nf,
        mean_diff: md,
        mc_se,
        n_ok: n,
        pass: md.abs() <= 3.0 * mc_se + 1e-12,
    })
}

/// Compares the classic two-group DiD with `τ_direct + τ_spill(1) −
/// τ_spill(0)`, the total-effect estimator (using the true `S`) with
/// `τ_total`, and the direct-effect estimator with `τ_direct`. Estimators
/// that are not identified in a replication (no unexposed units) are skipped
/// for that replication; rows with fewer than two usable replications are
/// omitted.
pub fn oracle_decomposition_check(
    config: &DgpConfig,
    label: &str,
    n_sims: usize,
) -> Result<OracleReport> {
    let sim = Simulator::new(config.clone())?;
    type Triple = (Option<(f64, f64)>, Option<(f64, f64)>, Option<(f64, f64)>);
    let draws: Vec<Triple> = (0..n_sims as u64)
        .into_par_iter()
        .map(|r| {
            let Ok(sp) = sim.generate(r) else {
                return (None, None, None);
            };
            let o = sp.oracle;
            let classic = did::did_means(&sp.panel).ok().map(|e| (e, o.classic_limit()));
            let fit = |estimand| {
                did::estimate(&sp.panel, Some(&sp.exposure), &DidSpec::new(estimand), None)
                    .ok()
                    .and_then(|f| f.coef("tau"))
            };
            let total = fit(Estimand::Total).map(|e| (e, o.tau_total));
            let direct = fit(Estimand::Direct).map(|e| (e, o.tau_direct));
            (classic, total, direct)
        })
        .collect();
    let collect = |f: fn(&Triple) -> Option<(f64, f64)>| -> Vec<(f64, f64)> {
        draws.iter().filter_map(f).collect()
    };
    let rows = [
        oracle_row(
            "classic",
            "tau_direct + tau_spill1 - tau_spill0",
            &collect(|t| t.0),
        ),
        oracle_row("total", "tau_total", &collect(|t| t.1)),
        oracle_row("direct", "tau_direct", &collect(|t| t.2)),
    ]
    .into_iter()
    .flatten()
    .collect();
    Ok(OracleReport {
        label: label.into(),
        n_sims,
        rows,
    })
}

/// Five decomposition checks on the default grid with 3% of units treated
/// uniformly at random: control spillovers only, none, control and treated
/// spillovers, treated-only additive spillovers, and additive decay on both
/// groups.
pub fn oracle_configs(seed: u64) -> Vec<(String, DgpConfig)> {
    let base = |spec: ExposureSpec, control: Scale, treated: Scale| DgpConfig {
        p_treated: 0.03,
        assignment: Assignment::Uniform,
        control_spillover: control,
        treated_spillover: treated,
        ..DgpConfig::grid_default(spec, seed)
    };
    vec![
        (
            "within_40_control".into(),
            base(within(40.0), Scale::MeanTarget(-0.263), Scale::Fixed(0.0)),
        ),
        (
            "no_spillover".into(),
            base(within(40.0), Scale::Fixed(0.0), Scale::Fixed(0.0)),
        ),
        (
            "within_40_both".into(),
            base(within(40.0), Scale::MeanTarget(-1.0), Scale::MeanTarget(0.5)),
        ),
        (
            "count_40_treated_only".into(),
            base(
                ExposureSpec::WithinCount { dbar: 40.0 },
                Scale::Fixed(0.0),
                Scale::MeanTarget(0.5),
            ),
        ),
        (
            "decay_additive_both".into(),
            base(
                ExposureSpec::DecayCount { alpha: 0.02 },
                Scale::MeanTarget(-0.263),
                Scale::MeanTarget(0.3),
            ),
        ),
    ]
}

/// Staggered-adoption DGP: unit `i` starts treatment at a period drawn
/// uniformly from `start_range`; the effect is `a + b·K_it`; untreated units
/// within `dbar` (inclusive) of a currently treated unit shift by
/// `spill_control`.
#[derive(Debug, Clone)]
pub struct StaggeredConfig {
    pub points: PointSet,
    pub n_periods: i64,
    pub start_range: (i64, i64),
    pub p_treated: f64,
    pub dbar: f64,
    pub effect_intercept: f64,
    pub effect_slope: f64,
    pub spill_control: f64,
    pub lambda_slope: f64,
    pub lambda_sd: f64,
    pub mu_mean: f64,
    pub mu_sd: f64,
    pub eps_sd: f64,
    pub seed: u64,
}

impl StaggeredConfig {
    /// 1000 grid units, 20 periods, starts in 6..=15, `τ = 0.5(K+1)`,
    /// control spillover −0.3 within 25 miles.
    pub fn grid_default(seed: u64) -> Self {
        Self {
            points: grid_points(25, 40, 10.0),
            n_periods: 20,
            start_range: (6, 15),
            p_treated: 0.1,
            dbar: 25.0,
            effect_intercept: 0.5,
            effect_slope: 0.5,
            spill_control: -0.3,
            lambda_slope: 0.2,
            lambda_sd: 0.1,
            mu_mean: 6.0,
            mu_sd: 2.0,
            eps_sd: 2.0,
            seed,
        }
    }

    pub fn true_effect(&self, k: i64) -> f64 {
        self.effect_intercept + self.effect_slope * k as f64
    }
}

/// Generator for [`StaggeredConfig`].
#[derive(Debug, Clone)]
pub struct StaggeredSimulator {
    config: StaggeredConfig,
    geometry: Geometry,
}

impl StaggeredSimulator {
    pub fn new(config: StaggeredConfig) -> Result<Self> {
        if !(config.p_treated > 0.0 && config.p_treated < 1.0) {
            return Err(Error::InvalidConfig("treated share must be in (0, 1)".into()));
        }
        let (lo, hi) = config.start_range;
        if lo < 1 || hi < lo || hi > config.n_periods {
            return Err(Error::InvalidConfig(format!(
                "start range {lo}..={hi} outside periods 1..={}",
                config.n_periods
            )));
        }
        if !(config.dbar > 0.0) {
            return Err(Error::InvalidConfig("dbar must be positive".into()));
        }
        let geometry = Geometry::from_points(config.points.clone(), config.dbar.max(1.0));
        Ok(Self { config, geometry })
    }

    pub fn exposure_spec(&self) -> ExposureSpec {
        within(self.config.dbar)
    }

    pub fn generate(&self, replication: u64) -> Result<(PanelDataset, ExposureMatrix)> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(replication);
        let n = self.geometry.len();
        let m = ((c.p_treated * n as f64).round() as usize).clamp(1, n - 1);
        let mut start = vec![None; n];
        for i in sample(&mut rng, n, m) {
            start[i] = Some(rng.random_range(c.start_range.0..=c.start_range.1));
        }
        let normal = |m: f64, s: f64| Normal::new(m, s).map_err(|e| Error::InvalidConfig(e.to_string()));
        let mut lambda = Vec::new();
        for t in 1..=c.n_periods {
            lambda.push(normal(c.lambda_slope * t as f64, c.lambda_sd)?.sample(&mut rng));
        }
        let mu_d = normal(c.mu_mean, c.mu_sd)?;
        let mu: Vec<f64> = (0..n).map(|_| mu_d.sample(&mut rng)).collect();
        let eps_d = normal(0.0, c.eps_sd)?;
        let ids = self.geometry.ids();
        let mut records = Vec::with_capacity(n * c.n_periods as usize);
        for i in 0..n {
            for t in 1..=c.n_periods {
                records.push(Record {
                    unit: ids[i].clone(),
                    time: t,
                    outcome: lambda[(t - 1) as usize] + mu[i] + eps_d.sample(&mut rng),
                    treated: start[i].is_some_and(|s| t >= s),
                    covariates: Vec::new(),
                });
            }
        }
        let base = PanelDataset::from_records(records, Vec::new())?;
        let exposure = crate::exposure::compute_exposure(
            &base,
            &self.geometry,
            &self.exposure_spec(),
            TreatedSet::Contemporaneous,
        )?;
        let mut row = 0;
        let panel = base.with_outcomes(|o| {
            let shift = match base.treat_start(o.unit) {
                Some(s) if o.treated => c.effect_intercept + c.effect_slope * (o.time - s) as f64,
                _ if exposure.s(row) => c.spill_control,
                _ => 0.0,
            };
            row += 1;
            o.outcome + shift
        });
        Ok((panel, exposure))
    }
}
