//! Two-stage imputation estimator for staggered adoption with spillovers.
//!
//! Stage 1 fits unit and time effects on clean observations (untreated and
//! unexposed). Stage 2 regresses the residualized outcome
//! `Ỹ = Y − μ̂_i − λ̂_t` on treatment and spillover dummies, with no constant.
//! Inference is a cluster bootstrap over whole unit histories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exposure::{spillover_event_time, ExposureMatrix, ExposureValue};
use crate::panel::{PanelDataset, Record};
use crate::regression::{
    connected_components, fit_fixed_effects, ols_fit, DesignMatrix, FitOptions,
    FixedEffectEstimates, FixedEffects, RegressionFit, Term, VcovSpec,
};

/// Event-time window; `None` bounds default to the observed support.
/// With `bin`, relative times beyond a bound are folded into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EventWindow {
    pub min: Option<i64>,
    pub max: Option<i64>,
    pub bin: bool,
}

/// Relative-time bookkeeping for every observation.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStudyFrame {
    /// `K_it = t − treatment start` for ever-treated units (after binning).
    pub treat_k: Vec<Option<i64>>,
    /// Periods since the unit first had `S = 1` (after binning).
    pub spill_k: Vec<Option<i64>>,
    pub window: (i64, i64),
}

impl EventStudyFrame {
    pub fn new(panel: &PanelDataset, exposure: &ExposureMatrix, window: EventWindow) -> Self {
        let raw_k: Vec<Option<i64>> = panel
            .observations()
            .iter()
            .map(|o| panel.treat_start(o.unit).map(|s| o.time - s))
            .collect();
        let raw_s = spillover_event_time(panel, exposure).relative_time;
        let support = raw_k.iter().chain(&raw_s).flatten();
        let lo = window
            .min
            .unwrap_or_else(|| support.clone().copied().min().unwrap_or(0));
        let hi = window.max.unwrap_or_else(|| support.copied().max().unwrap_or(0));
        let fold = |k: Option<i64>| -> Option<i64> {
            let k = k?;
            if window.bin {
                Some(k.clamp(lo, hi))
            } else if k < lo || k > hi {
                None
            } else {
                Some(k)
            }
        };
        Self {
            treat_k: raw_k.into_iter().map(fold).collect(),
            spill_k: raw_s.into_iter().map(fold).collect(),
            window: (lo, hi),
        }
    }
}

/// Blocks of second-stage regressors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MenuBlock {
    /// `D_it`.
    Total,
    /// `D^k_it`; optionally `1{K_it = k}` for clean pre-treatment periods.
    TotalEventStudy { pre_periods: bool },
    /// `D_it (1 − S_it)`.
    Direct,
    /// `D^k_it (1 − S_it)`.
    DirectEventStudy,
    /// `S_it (1 − D_it)`.
    SpilloverControl,
    /// `S^k_it (1 − D_it)`.
    SpilloverControlEventStudy,
    /// `h_k (1 − D_it)` for each ring component.
    SpilloverControlRings,
    /// `S_it D_it`. Optional block with no event-study counterpart.
    SpilloverTreated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirstStage {
    #[serde(skip)]
    pub fixed_effects: FixedEffectEstimates,
    /// Residualized outcome per observation; `None` where `μ_i + λ_t` is
    /// not identified from clean observations.
    pub y_tilde: Vec<Option<f64>>,
    pub n_clean: usize,
    /// Untreated observations excluded from stage 1 because `S = 1`.
    pub dropped_exposed: usize,
    /// `(unit, time)` of observations that cannot be imputed.
    pub non_imputable: Vec<(String, i64)>,
}

/// Stage 1: unit and time effects from observations with `D = 0, S = 0`.
pub fn first_stage(panel: &PanelDataset, exposure: &ExposureMatrix) -> Result<FirstStage> {
    let obs = panel.observations();
    let n_units = panel.n_units();
    let n_times = panel.periods().len();
    let time_idx: Vec<usize> = obs
        .iter()
        .map(|o| panel.periods().binary_search(&o.time).expect("listed period"))
        .collect();
    let clean: Vec<usize> = (0..obs.len())
        .filter(|&r| !obs[r].treated && !exposure.s(r))
        .collect();
    if clean.is_empty() {
        return Err(Error::EmptyFirstStage);
    }
    let dropped_exposed = (0..obs.len())
        .filter(|&r| !obs[r].treated && exposure.s(r))
        .count();
    let unit: Vec<usize> = clean.iter().map(|&r| obs[r].unit).collect();
    let time: Vec<usize> = clean.iter().map(|&r| time_idx[r]).collect();
    let y: Vec<f64> = clean.iter().map(|&r| obs[r].outcome).collect();
    let fe = fit_fixed_effects(&unit, &time, n_units, n_times, &y, FixedEffects::UnitAndTime)?;
    let comp = connected_components(&unit, &time, n_units, n_times);
    let mut y_tilde = Vec::with_capacity(obs.len());
    let mut non_imputable = Vec::new();
    for (r, o) in obs.iter().enumerate() {
        let t = time_idx[r];
        let mu = fe.unit[o.unit];
        let la = fe.time[t];
        if mu.is_finite() && la.is_finite() && comp[o.unit] == comp[n_units + t] {
            y_tilde.push(Some(o.outcome - mu - la));
        } else {
            y_tilde.push(None);
            non_imputable.push((panel.units()[o.unit].clone(), o.time));
        }
    }
    Ok(FirstStage {
        fixed_effects: fe,
        y_tilde,
        n_clean: clean.len(),
        dropped_exposed,
        non_imputable,
    })
}

fn menu_columns(
    panel: &PanelDataset,
    exposure: &ExposureMatrix,
    frame: &EventStudyFrame,
    menu: &[MenuBlock],
    rows: &[usize],
) -> Result<Vec<(Term, Vec<f64>)>> {
    let obs = panel.observations();
    let d = |r: usize| if obs[r].treated { 1.0 } else { 0.0 };
    let s = |r: usize| if exposure.s(r) { 1.0 } else { 0.0 };
    let (lo, hi) = frame.window;
    let column = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { rows.iter().map(|&r| f(r)).collect() };
    let mut cols = Vec::new();
    for block in menu {
        match *block {
            MenuBlock::Total => cols.push((Term::new("tau_total", "treatment"), column(&d))),
            MenuBlock::TotalEventStudy { pre_periods } => {
                if pre_periods {
                    for k in lo..0 {
                        let f = |r: usize| {
                            let hit = frame.treat_k[r] == Some(k) && !obs[r].treated;
                            if hit && !exposure.s(r) { 1.0 } else { 0.0 }
                        };
                        cols.push((Term::new(format!("pi[{k}]"), "pre_trend").at(k), column(&f)));
                    }
                }
                for k in lo.max(0)..=hi {
                    let f = |r: usize| {
                        if obs[r].treated && frame.treat_k[r] == Some(k) { 1.0 } else { 0.0 }
                    };
                    cols.push((Term::new(format!("tau_total[{k}]"), "treatment").at(k), column(&f)));
                }
            }
            MenuBlock::Direct => cols.push((
                Term::new("tau_direct", "treatment"),
                column(&|r| d(r) * (1.0 - s(r))),
            )),
            MenuBlock::DirectEventStudy => {
                for k in lo.max(0)..=hi {
                    let f = |r: usize| {
                        let hit = obs[r].treated && frame.treat_k[r] == Some(k);
                        if hit && !exposure.s(r) { 1.0 } else { 0.0 }
                    };
                    cols.push((Term::new(format!("tau_direct[{k}]"), "treatment").at(k), column(&f)));
                }
            }
            MenuBlock::SpilloverControl => cols.push((
                Term::new("spill_control", "spillover_control"),
                column(&|r| s(r) * (1.0 - d(r))),
            )),
            MenuBlock::SpilloverControlEventStudy => {
                for k in lo.max(0)..=hi {
                    let f = |r: usize| {
                        let hit = !obs[r].treated && exposure.s(r) && frame.spill_k[r] == Some(k);
                        if hit { 1.0 } else { 0.0 }
                    };
                    cols.push((
                        Term::new(format!("spill_control[{k}]"), "spillover_control").at(k),
                        column(&f),
                    ));
                }
            }
            MenuBlock::SpilloverControlRings => {
                if !exposure.spec().is_rings() {
                    return Err(Error::InvalidSpec(
                        "ring spillover block needs a rings exposure specification".into(),
                    ));
                }
                for (k, name) in exposure.component_names().iter().enumerate() {
                    cols.push((
                        Term::new(format!("spill_control_{name}"), "spillover_control"),
                        column(&|r| exposure.h(r)[k] * (1.0 - d(r))),
                    ));
                }
            }
            MenuBlock::SpilloverTreated => cols.push((
                Term::new("spill_treated", "spillover_treated"),
                column(&|r| s(r) * d(r)),
            )),
        }
    }
    Ok(cols)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub replications: usize,
    pub failed: usize,
    pub seed: u64,
    pub vcov: Vec<Vec<f64>>,
    /// 2.5% and 97.5% percentiles per term.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoStageFit {
    pub fit: RegressionFit,
    pub first_stage: FirstStage,
    pub window: (i64, i64),
    pub bootstrap: Option<BootstrapSummary>,
}

/// Stage 2: OLS of `Ỹ` on the selected dummies over imputable rows.
///
/// Dummies with no observations are dropped with a warning. The covariance
/// stored here clusters by unit but ignores stage-1 estimation error; use
/// [`bootstrap_vcov`] for inference.
pub fn second_stage(
    panel: &PanelDataset,
    exposure: &ExposureMatrix,
    first: FirstStage,
    frame: &EventStudyFrame,
    menu: &[MenuBlock],
) -> Result<TwoStageFit> {
    if menu.is_empty() {
        return Err(Error::InvalidSpec("second-stage menu is empty".into()));
    }
    let rows: Vec<usize> = (0..first.y_tilde.len())
        .filter(|&r| first.y_tilde[r].is_some())
        .collect();
    let columns = menu_columns(panel, exposure, frame, menu, &rows)?;
    let mut warnings = Vec::new();
    let columns: Vec<(Term, Vec<f64>)> = columns
        .into_iter()
        .filter(|(t, c)| {
            let keep = c.iter().any(|&v| v != 0.0);
            if !keep {
                warnings.push(format!("term `{}` has no observations; dropped", t.name));
            }
            keep
        })
        .collect();
    if columns.is_empty() {
        return Err(Error::InvalidSpec("every second-stage term is empty".into()));
    }
    let obs = panel.observations();
    let unit: Vec<usize> = rows.iter().map(|&r| obs[r].unit).collect();
    let y: Vec<f64> = rows
        .iter()
        .map(|&r| first.y_tilde[r].expect("filtered"))
        .collect();
    let design = DesignMatrix::from_columns(unit, vec![0; rows.len()], columns, y)?;
    let opts = FitOptions {
        fixed_effects: FixedEffects::None,
        vcov: VcovSpec::ClusterByUnit,
        small_sample: true,
        keep_fixed_effects: false,
    };
    let mut fit = ols_fit(&design, &opts, None)?;
    fit.warnings.extend(warnings);
    if !first.non_imputable.is_empty() {
        fit.warnings.push(format!(
            "{} observations have no clean comparison and were excluded",
            first.non_imputable.len()
        ));
    }
    fit.notes
        .push("effects are relative to imputed outcomes without treatment or exposure".into());
    Ok(TwoStageFit {
        fit,
        first_stage: first,
        window: frame.window,
        bootstrap: None,
    })
}

/// Both stages in one call.
pub fn two_stage(
    panel: &PanelDataset,
    exposure: &ExposureMatrix,
    window: EventWindow,
    menu: &[MenuBlock],
) -> Result<TwoStageFit> {
    let first = first_stage(panel, exposure)?;
    let frame = EventStudyFrame::new(panel, exposure, window);
    second_stage(panel, exposure, first, &frame, menu)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One cluster-bootstrap draw: resampled unit histories with their
/// exposure rows; duplicates get fresh ids.
fn resample(
    panel: &PanelDataset,
    exposure: &ExposureMatrix,
    rng: &mut ChaCha8Rng,
) -> Result<(PanelDataset, ExposureMatrix)> {
    let n = panel.n_units();
    let mut records = Vec::with_capacity(panel.observations().len());
    let mut values: Vec<ExposureValue> = Vec::with_capacity(panel.observations().len());
    for draw in 0..n {
        let u = rng.random_range(0..n);
        let id = format!("{}#{draw}", panel.units()[u]);
        for o in panel.unit_observations(u) {
            let row = panel.obs_index(u, o.time).expect("observed");
            records.push(Record {
                unit: id.clone(),
                time: o.time,
                outcome: o.outcome,
                treated: o.treated,
                covariates: o.covariates.clone(),
            });
            values.push(exposure.value(row));
        }
    }
    let p = PanelDataset::from_records(records, panel.covariate_names().to_vec())?;
    Ok((p, ExposureMatrix::from_values(exposure.spec(), &values)))
}

/// Cluster bootstrap of the two-stage estimator. Replication `r` draws from
/// ChaCha8 seeded with `seed` on stream `r`, so results do not depend on
/// the thread count.
pub fn bootstrap_vcov(
    panel: &PanelDataset,
    exposure: &ExposureMatrix,
    window: EventWindow,
    menu: &[MenuBlock],
    terms: &[Term],
    replications: usize,
    seed: u64,
) -> Result<BootstrapSummary> {
    if replications < 2 {
        return Err(Error::InvalidSpec(
            "bootstrap needs at least two replications".into(),
        ));
    }
    let draws: Vec<Option<Vec<f64>>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let (p, e) = resample(panel, exposure, &mut rng).ok()?;
            let fit = two_stage(&p, &e, window, menu).ok()?;
            terms.iter().map(|t| fit.fit.coef(&t.name)).collect()
        })
        .collect();
    let ok: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    let failed = replications - ok.len();
    if failed * 10 > replications || ok.len() < 2 {
        return Err(Error::TooManyFailures {
            failed,
            total: replications,
        });
    }
    let k = terms.len();
    let m = ok.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| ok.iter().map(|b| b[j]).sum::<f64>() / m).collect();
    let mut vcov = vec![vec![0.0; k]; k];
    for b in &ok {
        for i in 0..k {
            for j in 0..k {
                vcov[i][j] += (b[i] - mean[i]) * (b[j] - mean[j]);
            }
        }
    }
    vcov.iter_mut()
        .flatten()
        .for_each(|v| *v /= m - 1.0);
    let (mut lower, mut upper) = (Vec::with_capacity(k), Vec::with_capacity(k));
    for j in 0..k {
        let mut col: Vec<f64> = ok.iter().map(|b| b[j]).collect();
        col.sort_by(f64::total_cmp);
        lower.push(percentile(&col, 0.025));
        upper.push(percentile(&col, 0.975));
    }
    Ok(BootstrapSummary {
        replications,
        failed,
        seed,
        vcov,
        lower,
        upper,
    })
}

/// Runs both stages and, when `replications > 0`, replaces the covariance
/// with the bootstrap one.
pub fn estimate_staggered(
    panel: &PanelDataset,
    exposure: &ExposureMatrix,
    window: EventWindow,
    menu: &[MenuBlock],
    replications: usize,
    seed: u64,
) -> Result<TwoStageFit> {
    let mut fit = two_stage(panel, exposure, window, menu)?;
    if replications > 0 {
        let boot = bootstrap_vcov(
            panel,
            exposure,
            window,
            menu,
            &fit.fit.terms,
            replications,
            seed,
        )?;
        fit.fit.vcov = boot.vcov.clone();
        fit.bootstrap = Some(boot);
    } else {
        fit.fit.notes.push(
            "standard errors cluster by unit but ignore first-stage estimation error".into(),
        );
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exposure::ExposureSpec;

    fn null_exposure(n: usize) -> ExposureMatrix {
        let spec = ExposureSpec::WithinIndicator { dbar: 1.0 };
        let v = spec.evaluate(&[]);
        ExposureMatrix::from_values(&spec, &vec![v; n])
    }

    fn staggered_panel() -> PanelDataset {
        let mut recs = Vec::new();
        let starts = [Some(2), Some(3), None, None, Some(1)];
        for (u, s) in starts.iter().enumerate() {
            for t in 0..5 {
                let treated = s.is_some_and(|s| t >= s);
                let y = u as f64 + 0.5 * t as f64 + if treated { 2.0 } else { 0.0 };
                recs.push(Record {
                    unit: format!("u{u}"),
                    time: t,
                    outcome: y,
                    treated,
                    covariates: vec![],
                });
            }
        }
        PanelDataset::from_records(recs, vec![]).unwrap()
    }

    #[test]
    fn constant_effect_recovered_exactly_without_noise() {
        let p = staggered_panel();
        let e = null_exposure(p.observations().len());
        let fit = two_stage(
            &p,
            &e,
            EventWindow::default(),
            &[MenuBlock::TotalEventStudy { pre_periods: true }],
        )
        .unwrap();
        for (t, b) in fit.fit.terms.iter().zip(&fit.fit.coefficients) {
            let want = if t.group == "pre_trend" { 0.0 } else { 2.0 };
            assert!((b - want).abs() < 1e-9, "{} = {b}", t.name);
        }
    }

    #[test]
    fn always_treated_unit_not_imputable() {
        let mut recs = Vec::new();
        for (u, start) in [(0, Some(0)), (1, None), (2, Some(1))] {
            for t in 0..3 {
                recs.push(Record {
                    unit: format!("u{u}"),
                    time: t,
                    outcome: t as f64,
                    treated: start.is_some_and(|s: i64| t >= s),
                    covariates: vec![],
                });
            }
        }
        let p = PanelDataset::from_records(recs, vec![]).unwrap();
        let e = null_exposure(p.observations().len());
        let first = first_stage(&p, &e).unwrap();
        let flagged: Vec<&str> = first.non_imputable.iter().map(|(u, _)| u.as_str()).collect();
        assert_eq!(flagged, vec!["u0", "u0", "u0"]);
    }

    #[test]
    fn binning_folds_tails() {
        let p = staggered_panel();
        let e = null_exposure(p.observations().len());
        let frame = EventStudyFrame::new(
            &p,
            &e,
            EventWindow {
                min: Some(-1),
                max: Some(1),
                bin: true,
            },
        );
        assert!(frame.treat_k.iter().flatten().all(|&k| (-1..=1).contains(&k)));
        let unbinned = EventStudyFrame::new(
            &p,
            &e,
            EventWindow {
                min: Some(-1),
                max: Some(1),
                bin: false,
            },
        );
        assert!(unbinned.treat_k.iter().any(Option::is_none));
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let p = staggered_panel();
        let e = null_exposure(p.observations().len());
        let menu = [MenuBlock::Total];
        let fit = two_stage(&p, &e, EventWindow::default(), &menu).unwrap();
        let a = bootstrap_vcov(&p, &e, EventWindow::default(), &menu, &fit.fit.terms, 2, 7);
        let b = bootstrap_vcov(&p, &e, EventWindow::default(), &menu, &fit.fit.terms, 2, 7);
        match (a, b) {
            (Ok(a), Ok(b)) => assert_eq!(a, b),
            (Err(a), Err(b)) => assert_eq!(a.to_string(), b.to_string()),
            _ => panic!("bootstrap outcome differs between runs"),
        }
    }
}
