//! Two-period (or common-timing) difference-in-differences estimators.
//!
//! All panel estimators are two-way fixed-effects regressions on the full
//! panel. Spillover regressors are zero in periods with no treated units, so
//! exposed controls only differ from clean controls after treatment starts.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exposure::{ExposureMatrix, ExposureSpec};
use crate::panel::{FirstDifferenceView, PanelDataset, Record};
use crate::regression::{
    ols_fit, DesignMatrix, FitOptions, FixedEffects, Locations, RegressionFit, Term, VcovSpec,
};
use crate::spatial::Geometry;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Estimand {
    /// `Y ~ D` with unit and time effects.
    Classic,
    /// Adds `(1−D)·S`; `tau` compares treated units with unexposed controls.
    Total,
    /// Adds `(1−D)·S` and `D·S`; `tau` is the effect on unexposed treated units.
    Direct,
    /// `(1−D)·ring_k` terms in place of `(1−D)·S`.
    TotalRings,
    /// Ring terms for both controls and treated units.
    DirectRings,
    /// `(1−D)·h` for each exposure component.
    TotalExposure,
    /// `(1−D)·h` and `D·h`.
    DirectExposure,
    /// DiD among units whose exposure is within `tol` of `h_star`.
    Switching { h_star: f64, tol: Option<f64> },
}

impl Estimand {
    pub fn label(&self) -> &'static str {
        match self {
            Estimand::Classic => "classic",
            Estimand::Total => "total",
            Estimand::Direct => "direct",
            Estimand::TotalRings => "total_rings",
            Estimand::DirectRings => "direct_rings",
            Estimand::TotalExposure => "total_exposure",
            Estimand::DirectExposure => "direct_exposure",
            Estimand::Switching { .. } => "switching",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DidSpec {
    pub estimand: Estimand,
    pub vcov: VcovSpec,
    pub covariates: Vec<String>,
    pub small_sample: bool,
}

impl DidSpec {
    pub fn new(estimand: Estimand) -> Self {
        Self {
            estimand,
            vcov: VcovSpec::Iid,
            covariates: Vec::new(),
            small_sample: true,
        }
    }

    pub fn with_vcov(mut self, vcov: VcovSpec) -> Self {
        self.vcov = vcov;
        self
    }
}

/// First period in which any unit is treated.
fn first_treated_period(panel: &PanelDataset) -> Option<i64> {
    panel
        .observations()
        .iter()
        .filter(|o| o.treated)
        .map(|o| o.time)
        .min()
}

/// Mean change among treated units minus mean change among controls.
///
/// With more than two periods, treatment must start at a common date and
/// each unit's change is the post-window mean minus the pre-window mean.
pub fn did_means(panel: &PanelDataset) -> Result<f64> {
    let periods = panel.periods();
    let (first, last) = match (periods.first(), periods.last()) {
        (Some(&a), Some(&b)) if a < b => (a, b),
        _ => {
            return Err(Error::InvalidSpec(
                "need at least two periods".into(),
            ))
        }
    };
    let start = match panel.common_start() {
        Some(s) => s,
        None if first_treated_period(panel).is_none() => return Err(Error::EmptyGroup("treated")),
        None => {
            return Err(Error::InvalidSpec(
                "treatment does not start at a common date".into(),
            ))
        }
    };
    if start <= first {
        return Err(Error::InvalidSpec(
            "treatment starts in the first period; no pre-period".into(),
        ));
    }
    let fd = crate::panel::first_difference_averaged(panel, (first, start - 1), (start, last))?;
    let (mut st, mut nt, mut sc, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for r in &fd.rows {
        if panel.ever_treated(r.unit) {
            st += r.delta_outcome;
            nt += 1;
        } else {
            sc += r.delta_outcome;
            nc += 1;
        }
    }
    if nt == 0 {
        return Err(Error::EmptyGroup("treated"));
    }
    if nc == 0 {
        return Err(Error::EmptyGroup("control"));
    }
    Ok(st / nt as f64 - sc / nc as f64)
}

fn locations_for<'a>(
    vcov: &VcovSpec,
    geometry: Option<&'a Geometry>,
    units: &[String],
    positions: &'a mut Vec<usize>,
) -> Result<Option<Locations<'a>>> {
    if !matches!(vcov, VcovSpec::Conley { .. }) {
        return Ok(None);
    }
    let geometry = geometry.ok_or(Error::ConleyWithoutCoordinates)?;
    *positions = geometry.positions_of(units)?;
    Ok(Some(Locations {
        geometry,
        positions,
    }))
}

fn covariate_columns(
    panel: &PanelDataset,
    names: &[String],
    rows: &[usize],
) -> Result<Vec<(Term, Vec<f64>)>> {
    names
        .iter()
        .map(|name| {
            let j = panel
                .covariate_index(name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))?;
            let col = rows
                .iter()
                .map(|&r| panel.observations()[r].covariates[j])
                .collect();
            Ok((Term::new(format!("beta_{name}"), "covariate"), col))
        })
        .collect()
}

/// Removes all-zero spillover columns, recording a warning for each.
pub(crate) fn drop_empty(
    columns: Vec<(Term, Vec<f64>)>,
    warnings: &mut Vec<String>,
) -> Vec<(Term, Vec<f64>)> {
    columns
        .into_iter()
        .filter(|(t, c)| {
            let keep = t.group == "treatment"
                || t.group == "covariate"
                || t.group == "constant"
                || c.iter().any(|&v| v != 0.0);
            if !keep {
                warnings.push(format!("term `{}` has no observations; dropped", t.name));
            }
            keep
        })
        .collect()
}

fn spillover_columns(
    estimand: &Estimand,
    exposure: &ExposureMatrix,
    rows: &[usize],
    d: &[f64],
) -> Result<Vec<(Term, Vec<f64>)>> {
    let mut cols = Vec::new();
    let s: Vec<f64> = rows
        .iter()
        .map(|&r| if exposure.s(r) { 1.0 } else { 0.0 })
        .collect();
    let comp = |k: usize| -> Vec<f64> { rows.iter().map(|&r| exposure.h(r)[k]).collect() };
    let scalar = exposure.dim() == 1;
    let names = exposure.component_names();
    let times = |a: &[f64], b: &[f64], control: bool| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(&x, &dd)| if control { x * (1.0 - dd) } else { x * dd })
            .collect()
    };
    match estimand {
        Estimand::Total | Estimand::Direct => {
            cols.push((Term::new("gamma0", "spillover_control"), times(&s, d, true)));
            if *estimand == Estimand::Direct {
                cols.push((Term::new("gamma1", "spillover_treated"), times(&s, d, false)));
            }
        }
        Estimand::TotalRings | Estimand::DirectRings => {
            if !exposure.spec().is_rings() {
                return Err(Error::InvalidSpec(
                    "rings estimands need a rings exposure specification".into(),
                ));
            }
            for (k, name) in names.iter().enumerate() {
                let h = comp(k);
                cols.push((
                    Term::new(format!("delta_{name}"), "spillover_control"),
                    times(&h, d, true),
                ));
            }
            if *estimand == Estimand::DirectRings {
                for (k, name) in names.iter().enumerate() {
                    let h = comp(k);
                    cols.push((
                        Term::new(format!("delta_treated_{name}"), "spillover_treated"),
                        times(&h, d, false),
                    ));
                }
            }
        }
        Estimand::TotalExposure | Estimand::DirectExposure => {
            let label = |base: &str, name: &str| {
                if scalar {
                    base.to_string()
                } else {
                    format!("{base}_{name}")
                }
            };
            for (k, name) in names.iter().enumerate() {
                cols.push((
                    Term::new(label("beta_control", name), "spillover_control"),
                    times(&comp(k), d, true),
                ));
            }
            if *estimand == Estimand::DirectExposure {
                for (k, name) in names.iter().enumerate() {
                    cols.push((
                        Term::new(label("beta_treated", name), "spillover_treated"),
                        times(&comp(k), d, false),
                    ));
                }
            }
        }
        Estimand::Classic | Estimand::Switching { .. } => {}
    }
    Ok(cols)
}

fn check_support(
    panel: &PanelDataset,
    exposure: &ExposureMatrix,
    estimand: &Estimand,
) -> Result<()> {
    let needs_controls = matches!(
        estimand,
        Estimand::Total | Estimand::Direct | Estimand::TotalRings | Estimand::DirectRings
    );
    let needs_treated = matches!(estimand, Estimand::Direct | Estimand::DirectRings);
    let Some(start) = first_treated_period(panel) else {
        return Err(Error::EmptyGroup("treated"));
    };
    let obs = panel.observations();
    let post = |r: usize| obs[r].time >= start;
    if needs_controls
        && !(0..obs.len()).any(|r| post(r) && !panel.ever_treated(obs[r].unit) && !exposure.s(r))
    {
        return Err(Error::NoUnexposedControls);
    }
    if needs_treated && !(0..obs.len()).any(|r| obs[r].treated && !exposure.s(r)) {
        return Err(Error::NoUnexposedTreated);
    }
    Ok(())
}

/// Two-way fixed-effects estimate of the chosen estimand.
pub fn estimate(
    panel: &PanelDataset,
    exposure: Option<&ExposureMatrix>,
    spec: &DidSpec,
    geometry: Option<&Geometry>,
) -> Result<RegressionFit> {
    if let Estimand::Switching { h_star, tol } = spec.estimand {
        let exposure = exposure.ok_or_else(|| {
            Error::InvalidSpec("switching estimand needs an exposure specification".into())
        })?;
        return estimate_switching(panel, exposure, h_star, tol, spec, geometry)
            .map(|s| s.fit);
    }
    let obs = panel.observations();
    if let Some(e) = exposure {
        if e.len() != obs.len() {
            return Err(Error::InvalidSpec(format!(
                "exposure has {} rows for {} observations",
                e.len(),
                obs.len()
            )));
        }
    }
    if !panel.observations().iter().any(|o| o.treated) {
        return Err(Error::EmptyGroup("treated"));
    }
    if (0..panel.n_units()).all(|u| panel.ever_treated(u)) {
        return Err(Error::EmptyGroup("control"));
    }
    let rows: Vec<usize> = (0..obs.len()).collect();
    let d: Vec<f64> = obs.iter().map(|o| if o.treated { 1.0 } else { 0.0 }).collect();
    let mut columns = vec![(Term::new("tau", "treatment"), d.clone())];
    let mut warnings = Vec::new();
    if spec.estimand != Estimand::Classic {
        let exposure = exposure.ok_or_else(|| {
            Error::InvalidSpec(format!(
                "estimand `{}` needs an exposure specification",
                spec.estimand.label()
            ))
        })?;
        check_support(panel, exposure, &spec.estimand)?;
        let spill = spillover_columns(&spec.estimand, exposure, &rows, &d)?;
        columns.extend(drop_empty(spill, &mut warnings));
    }
    columns.extend(covariate_columns(panel, &spec.covariates, &rows)?);

    let unit: Vec<usize> = obs.iter().map(|o| o.unit).collect();
    let time: Vec<usize> = obs
        .iter()
        .map(|o| panel.periods().binary_search(&o.time).expect("listed period"))
        .collect();
    let y: Vec<f64> = obs.iter().map(|o| o.outcome).collect();
    let design = DesignMatrix::from_columns(unit, time, columns, y)?;
    let mut positions = Vec::new();
    let loc = locations_for(&spec.vcov, geometry, panel.units(), &mut positions)?;
    let opts = FitOptions {
        fixed_effects: FixedEffects::UnitAndTime,
        vcov: spec.vcov,
        small_sample: spec.small_sample,
        keep_fixed_effects: false,
    };
    let mut fit = ols_fit(&design, &opts, loc)?;
    fit.warnings.extend(warnings);
    match spec.estimand {
        Estimand::Total | Estimand::TotalRings | Estimand::TotalExposure => fit.notes.push(
            "tau is the total effect on treated units, measured against unexposed controls".into(),
        ),
        Estimand::Direct | Estimand::DirectRings | Estimand::DirectExposure => fit.notes.push(
            "tau is the direct effect among unexposed treated units; it equals the population \
             direct effect only if that effect does not vary with exposure"
                .into(),
        ),
        _ => {}
    }
    Ok(fit)
}

/// Default matching tolerance: zero for discrete exposures, 5% of the
/// standard deviation of final-period exposure for continuous ones.
pub fn default_switching_tol(panel: &PanelDataset, exposure: &ExposureMatrix) -> f64 {
    match exposure.spec() {
        ExposureSpec::Decay { .. } | ExposureSpec::DecayCount { .. } => {
            let h = final_exposure(panel, exposure);
            let n = h.len() as f64;
            if n < 2.0 {
                return 0.0;
            }
            let m = h.iter().sum::<f64>() / n;
            let var = h.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            0.05 * var.sqrt()
        }
        _ => 0.0,
    }
}

fn final_exposure(panel: &PanelDataset, exposure: &ExposureMatrix) -> Vec<f64> {
    (0..panel.n_units())
        .filter_map(|u| {
            let range = panel.unit_observations(u);
            let last = range.last()?;
            let row = panel.obs_index(u, last.time)?;
            Some(exposure.h(row)[0])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchingFit {
    pub fit: RegressionFit,
    pub h_star: f64,
    pub tol: f64,
    pub n_treated: usize,
    pub n_control: usize,
}

/// Classic DiD restricted to units whose final-period exposure lies within
/// `tol` of `h_star`. Only scalar exposures are supported.
pub fn estimate_switching(
    panel: &PanelDataset,
    exposure: &ExposureMatrix,
    h_star: f64,
    tol: Option<f64>,
    spec: &DidSpec,
    geometry: Option<&Geometry>,
) -> Result<SwitchingFit> {
    if exposure.dim() != 1 {
        return Err(Error::InvalidSpec(
            "switching estimation needs a scalar exposure".into(),
        ));
    }
    let tol = tol.unwrap_or_else(|| default_switching_tol(panel, exposure));
    if !(tol >= 0.0) {
        return Err(Error::InvalidSpec(format!("tolerance must be non-negative, got {tol}")));
    }
    let mut keep = Vec::new();
    let (mut nt, mut nc) = (0, 0);
    for u in 0..panel.n_units() {
        let Some(last) = panel.unit_observations(u).last() else {
            continue;
        };
        let row = panel.obs_index(u, last.time).expect("observed");
        if (exposure.h(row)[0] - h_star).abs() <= tol {
            keep.push(u);
            if panel.ever_treated(u) {
                nt += 1;
            } else {
                nc += 1;
            }
        }
    }
    if nt == 0 {
        return Err(Error::EmptySubsample {
            arm: "treated",
            h_star,
            tol,
        });
    }
    if nc == 0 {
        return Err(Error::EmptySubsample {
            arm: "control",
            h_star,
            tol,
        });
    }
    let records: Vec<Record> = keep
        .iter()
        .flat_map(|&u| {
            panel.unit_observations(u).iter().map(move |o| Record {
                unit: panel.units()[u].clone(),
                time: o.time,
                outcome: o.outcome,
                treated: o.treated,
                covariates: o.covariates.clone(),
            })
        })
        .collect();
    let sub = PanelDataset::from_records(records, panel.covariate_names().to_vec())?;
    let classic = DidSpec {
        estimand: Estimand::Classic,
        ..spec.clone()
    };
    let mut fit = estimate(&sub, None, &classic, geometry)?;
    fit.notes.push(format!(
        "switching effect at exposure {h_star} (tolerance {tol}); {nt} treated and {nc} control units"
    ));
    Ok(SwitchingFit {
        fit,
        h_star,
        tol,
        n_treated: nt,
        n_control: nc,
    })
}

/// Cross-sectional regression of the outcome change on a constant, the
/// treatment dummy, control ring dummies (from end-period exposure) and
/// base-period covariates.
pub fn first_difference_regression(
    panel: &PanelDataset,
    fd: &FirstDifferenceView,
    rings: Option<&ExposureMatrix>,
    covariates: &[String],
    vcov: VcovSpec,
    small_sample: bool,
    geometry: Option<&Geometry>,
) -> Result<RegressionFit> {
    let n = fd.rows.len();
    let d: Vec<f64> = fd
        .rows
        .iter()
        .map(|r| if r.treated { 1.0 } else { 0.0 })
        .collect();
    let mut columns = vec![
        (Term::new("alpha", "constant"), vec![1.0; n]),
        (Term::new("tau", "treatment"), d.clone()),
    ];
    let mut warnings = Vec::new();
    if let Some(e) = rings {
        if !e.spec().is_rings() {
            return Err(Error::InvalidSpec(
                "first-difference spillover terms need a rings exposure specification".into(),
            ));
        }
        let rows: Vec<usize> = fd
            .rows
            .iter()
            .map(|r| {
                panel
                    .unit_observations(r.unit)
                    .iter()
                    .rev()
                    .find(|o| o.time <= fd.end_period)
                    .and_then(|o| panel.obs_index(r.unit, o.time))
                    .expect("first-difference rows have observations")
            })
            .collect();
        let spill = spillover_columns(&Estimand::TotalRings, e, &rows, &d)?;
        columns.extend(drop_empty(spill, &mut warnings));
    }
    for name in covariates {
        let j = fd
            .covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))?;
        columns.push((
            Term::new(format!("beta_{name}"), "covariate"),
            fd.rows.iter().map(|r| r.baseline_covariates[j]).collect(),
        ));
    }
    let unit: Vec<usize> = fd.rows.iter().map(|r| r.unit).collect();
    let y: Vec<f64> = fd.rows.iter().map(|r| r.delta_outcome).collect();
    let design = DesignMatrix::from_columns(unit, vec![0; n], columns, y)?;
    let mut positions = Vec::new();
    let loc = locations_for(&vcov, geometry, panel.units(), &mut positions)?;
    let opts = FitOptions {
        fixed_effects: FixedEffects::None,
        vcov,
        small_sample,
        keep_fixed_effects: false,
    };
    let mut fit = ols_fit(&design, &opts, loc)?;
    fit.warnings.extend(warnings);
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::first_difference;

    fn two_period(rows: &[(&str, f64, f64, bool)]) -> PanelDataset {
        let mut recs = Vec::new();
        for &(u, y0, y1, d) in rows {
            recs.push(Record {
                unit: u.into(),
                time: 0,
                outcome: y0,
                treated: false,
                covariates: vec![],
            });
            recs.push(Record {
                unit: u.into(),
                time: 1,
                outcome: y1,
                treated: d,
                covariates: vec![],
            });
        }
        PanelDataset::from_records(recs, vec![]).unwrap()
    }

    #[test]
    fn means_example() {
        let p = two_period(&[("a", 1.0, 5.0, true), ("b", 1.0, 2.0, false)]);
        assert_eq!(did_means(&p).unwrap(), 3.0);
    }

    #[test]
    fn identical_trends_give_zero() {
        let p = two_period(&[
            ("a", 1.0, 3.0, true),
            ("b", 4.0, 6.0, false),
            ("c", 0.0, 2.0, false),
        ]);
        assert!(did_means(&p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn empty_group_reported() {
        let p = two_period(&[("a", 1.0, 3.0, false), ("b", 4.0, 6.0, false)]);
        assert!(matches!(did_means(&p), Err(Error::EmptyGroup("treated"))));
    }

    #[test]
    fn regression_matches_means() {
        let p = two_period(&[
            ("a", 1.0, 5.0, true),
            ("b", 1.0, 2.0, false),
            ("c", 2.0, 2.5, false),
            ("d", 0.0, 4.0, true),
        ]);
        let fit = estimate(&p, None, &DidSpec::new(Estimand::Classic), None).unwrap();
        assert!((fit.coef("tau").unwrap() - did_means(&p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn first_difference_without_rings_is_classic() {
        let p = two_period(&[
            ("a", 1.0, 5.0, true),
            ("b", 1.0, 2.0, false),
            ("c", 2.0, 2.5, false),
        ]);
        let fd = first_difference(&p, 0, 1).unwrap();
        let fit =
            first_difference_regression(&p, &fd, None, &[], VcovSpec::Iid, true, None).unwrap();
        assert!((fit.coef("tau").unwrap() - did_means(&p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn exposure_required_for_total() {
        let p = two_period(&[("a", 1.0, 5.0, true), ("b", 1.0, 2.0, false)]);
        assert!(matches!(
            estimate(&p, None, &DidSpec::new(Estimand::Total), None),
            Err(Error::InvalidSpec(_))
        ));
    }
}
