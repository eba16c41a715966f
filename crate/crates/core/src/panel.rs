//! Unit × period panels.
//!
//! Treatment is stored per observation as an absorbing on/off flag `D_it`.
//! Input may carry either a 0/1 indicator per row or a per-unit adoption
//! period; both normalise to the same representation.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// How treatment is encoded in the input table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreatmentColumn {
    /// 0/1 treatment-on indicator for each row.
    Indicator(String),
    /// First treated period of the unit, repeated on each row. Empty, `NA`
    /// or `.` marks a never-treated unit.
    StartPeriod(String),
}

/// Column-name mapping for [`load_panel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelSchema {
    pub unit: String,
    pub time: String,
    pub outcome: String,
    pub treatment: TreatmentColumn,
    pub covariates: Vec<String>,
    pub delimiter: u8,
}

impl Default for PanelSchema {
    fn default() -> Self {
        Self {
            unit: "unit".into(),
            time: "time".into(),
            outcome: "outcome".into(),
            treatment: TreatmentColumn::Indicator("treated".into()),
            covariates: Vec::new(),
            delimiter: b',',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Index into [`PanelDataset::units`].
    pub unit: usize,
    pub time: i64,
    pub outcome: f64,
    pub treated: bool,
    pub covariates: Vec<f64>,
}

/// An input row that was not retained, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    pub line: u64,
    pub unit: String,
    pub time: Option<i64>,
    pub reason: String,
}

/// A row handed to [`PanelDataset::from_records`].
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub unit: String,
    pub time: i64,
    pub outcome: f64,
    pub treated: bool,
    pub covariates: Vec<f64>,
}

/// Validated panel. Observations are sorted by unit (order of first
/// appearance) and then by time.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    units: Vec<String>,
    periods: Vec<i64>,
    obs: Vec<Observation>,
    covariate_names: Vec<String>,
    treat_start: Vec<Option<i64>>,
    unit_obs: Vec<std::ops::Range<usize>>,
    rejected: Vec<RejectedRow>,
}

impl PanelDataset {
    /// Builds a panel from rows, enforcing unique `(unit, time)` keys,
    /// finite values and absorbing treatment.
    pub fn from_records(records: Vec<Record>, covariate_names: Vec<String>) -> Result<Self> {
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let mut units = Vec::new();
        let mut obs = Vec::with_capacity(records.len());
        for r in records {
            if !r.outcome.is_finite() {
                return Err(Error::InvalidDesign(format!(
                    "non-finite outcome for unit `{}` at time {}",
                    r.unit, r.time
                )));
            }
            if r.covariates.len() != covariate_names.len() {
                return Err(Error::InvalidDesign(format!(
                    "unit `{}` at time {}: expected {} covariates, got {}",
                    r.unit,
                    r.time,
                    covariate_names.len(),
                    r.covariates.len()
                )));
            }
            let idx = *lookup.entry(r.unit.clone()).or_insert_with(|| {
                units.push(r.unit.clone());
                units.len() - 1
            });
            obs.push(Observation {
                unit: idx,
                time: r.time,
                outcome: r.outcome,
                treated: r.treated,
                covariates: r.covariates,
            });
        }
        Self::assemble(units, obs, covariate_names, Vec::new())
    }

    fn assemble(
        units: Vec<String>,
        mut obs: Vec<Observation>,
        covariate_names: Vec<String>,
        rejected: Vec<RejectedRow>,
    ) -> Result<Self> {
        obs.sort_by_key(|o| (o.unit, o.time));
        for w in obs.windows(2) {
            if w[0].unit == w[1].unit && w[0].time == w[1].time {
                return Err(Error::DuplicateKey {
                    unit: units[w[0].unit].clone(),
                    time: w[0].time,
                });
            }
        }
        let mut treat_start = vec![None; units.len()];
        let mut unit_obs = vec![0..0; units.len()];
        let mut start = 0;
        while start < obs.len() {
            let u = obs[start].unit;
            let mut end = start;
            while end < obs.len() && obs[end].unit == u {
                let o = &obs[end];
                if o.treated {
                    treat_start[u].get_or_insert(o.time);
                } else if treat_start[u].is_some() {
                    return Err(Error::NonAbsorbingTreatment {
                        unit: units[u].clone(),
                        time: o.time,
                    });
                }
                end += 1;
            }
            unit_obs[u] = start..end;
            start = end;
        }
        let mut periods: Vec<i64> = obs.iter().map(|o| o.time).collect();
        periods.sort_unstable();
        periods.dedup();
        Ok(Self {
            units,
            periods,
            obs,
            covariate_names,
            treat_start,
            unit_obs,
            rejected,
        })
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// Sorted distinct periods.
    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn rejected(&self) -> &[RejectedRow] {
        &self.rejected
    }

    /// First period in which the unit is treated, if ever.
    pub fn treat_start(&self, unit: usize) -> Option<i64> {
        self.treat_start[unit]
    }

    pub fn ever_treated(&self, unit: usize) -> bool {
        self.treat_start[unit].is_some()
    }

    /// Observations of one unit, sorted by time.
    pub fn unit_observations(&self, unit: usize) -> &[Observation] {
        &self.obs[self.unit_obs[unit].clone()]
    }

    pub fn unit_index(&self, id: &str) -> Option<usize> {
        self.units.iter().position(|u| u == id)
    }

    /// Index into [`observations`](Self::observations) of `(unit, time)`.
    pub fn obs_index(&self, unit: usize, time: i64) -> Option<usize> {
        let range = self.unit_obs[unit].clone();
        let start = range.start;
        self.obs[range]
            .binary_search_by_key(&time, |o| o.time)
            .ok()
            .map(|k| start + k)
    }

    /// Index of a covariate by name.
    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Common adoption period when every ever-treated unit starts at the same
    /// time; `None` for staggered panels or panels without treatment.
    pub fn common_start(&self) -> Option<i64> {
        let mut starts = self.treat_start.iter().flatten();
        let first = *starts.next()?;
        starts.all(|&s| s == first).then_some(first)
    }

    /// Same panel with outcomes replaced; `f` sees each observation in order.
    pub fn with_outcomes(&self, mut f: impl FnMut(&Observation) -> f64) -> Self {
        let mut out = self.clone();
        for o in &mut out.obs {
            o.outcome = f(o);
        }
        out
    }
}

/// Parses a decimal number: optional sign, digits with an optional point,
/// optional exponent. Rejects `inf`, `nan`, hex and locale separators.
pub fn parse_decimal(raw: &str) -> Option<f64> {
    let s = raw.trim();
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let mut digits = 0;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
        digits += 1;
    }
    if i < b.len() && b[i] == b'.' {
        i += 1;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
            digits += 1;
        }
    }
    if digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return None;
        }
    }
    if i != b.len() {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn is_missing(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "na" | "." | "NaN" | "nan")
}

fn parse_integer(s: &str) -> Option<i64> {
    let t = s.trim();
    t.parse::<i64>().ok().or_else(|| {
        // Accept "1940.0"-style periods produced by spreadsheets.
        parse_decimal(t).filter(|v| v.fract() == 0.0 && v.abs() < 9e15).map(|v| v as i64)
    })
}

/// Reads a delimiter-separated panel with a header row.
///
/// Rows with a missing outcome or covariate are not retained; each is listed
/// in [`PanelDataset::rejected`].
pub fn load_panel<R: Read>(source: R, schema: &PanelSchema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let unit_c = col(&schema.unit)?;
    let time_c = col(&schema.time)?;
    let outcome_c = col(&schema.outcome)?;
    let (treat_c, by_start) = match &schema.treatment {
        TreatmentColumn::Indicator(n) => (col(n)?, false),
        TreatmentColumn::StartPeriod(n) => (col(n)?, true),
    };
    let cov_c = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;

    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut units = Vec::new();
    let mut obs = Vec::new();
    let mut rejected = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |c: usize| rec.get(c).unwrap_or("");
        let unit = field(unit_c).to_string();
        if unit.is_empty() {
            return Err(Error::InvalidDesign(format!("line {line}: empty unit id")));
        }
        let time = parse_integer(field(time_c)).ok_or_else(|| Error::InvalidNumber {
            line,
            column: schema.time.clone(),
            value: field(time_c).to_string(),
        })?;

        let number = |c: usize, name: &str| -> Result<Option<f64>> {
            let raw = field(c);
            if is_missing(raw) {
                return Ok(None);
            }
            parse_decimal(raw)
                .map(Some)
                .ok_or_else(|| Error::InvalidNumber {
                    line,
                    column: name.to_string(),
                    value: raw.to_string(),
                })
        };

        let treated = if by_start {
            let raw = field(treat_c);
            if is_missing(raw) {
                false
            } else {
                let start = parse_integer(raw).ok_or_else(|| Error::InvalidNumber {
                    line,
                    column: match &schema.treatment {
                        TreatmentColumn::StartPeriod(n) | TreatmentColumn::Indicator(n) => n.clone(),
                    },
                    value: raw.to_string(),
                })?;
                time >= start
            }
        } else {
            let name = match &schema.treatment {
                TreatmentColumn::Indicator(n) | TreatmentColumn::StartPeriod(n) => n,
            };
            match number(treat_c, name)? {
                Some(v) if v == 0.0 => false,
                Some(v) if v == 1.0 => true,
                _ => {
                    return Err(Error::InvalidNumber {
                        line,
                        column: name.clone(),
                        value: field(treat_c).to_string(),
                    })
                }
            }
        };

        let Some(outcome) = number(outcome_c, &schema.outcome)? else {
            rejected.push(RejectedRow {
                line,
                unit,
                time: Some(time),
                reason: format!("missing outcome `{}`", schema.outcome),
            });
            continue;
        };
        let mut covariates = Vec::with_capacity(cov_c.len());
        let mut missing_cov = None;
        for (&c, name) in cov_c.iter().zip(&schema.covariates) {
            match number(c, name)? {
                Some(v) => covariates.push(v),
                None => {
                    missing_cov = Some(name.clone());
                    break;
                }
            }
        }
        if let Some(name) = missing_cov {
            rejected.push(RejectedRow {
                line,
                unit,
                time: Some(time),
                reason: format!("missing covariate `{name}`"),
            });
            continue;
        }

        let idx = *lookup.entry(unit.clone()).or_insert_with(|| {
            units.push(unit.clone());
            units.len() - 1
        });
        obs.push(Observation {
            unit: idx,
            time,
            outcome,
            treated,
            covariates,
        });
    }
    PanelDataset::assemble(units, obs, schema.covariates.clone(), rejected)
}

/// Writes the panel in the format [`load_panel`] reads with
/// [`PanelSchema::default`] (plus the panel's covariate columns).
pub fn write_panel<W: Write>(panel: &PanelDataset, sink: W) -> Result<PanelSchema> {
    let schema = PanelSchema {
        covariates: panel.covariate_names.clone(),
        ..PanelSchema::default()
    };
    let mut w = csv::WriterBuilder::new()
        .delimiter(schema.delimiter)
        .from_writer(sink);
    let mut header = vec![
        schema.unit.clone(),
        schema.time.clone(),
        schema.outcome.clone(),
        "treated".to_string(),
    ];
    header.extend(panel.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for o in &panel.obs {
        let mut row = vec![
            panel.units[o.unit].clone(),
            o.time.to_string(),
            o.outcome.to_string(),
            if o.treated { "1" } else { "0" }.to_string(),
        ];
        row.extend(o.covariates.iter().map(|c| c.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(schema)
}

/// Whether every unit appears in every period, plus per-period unit counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceReport {
    pub balanced: bool,
    pub counts: BTreeMap<i64, usize>,
}

pub fn validate_balance(panel: &PanelDataset) -> BalanceReport {
    let mut counts: BTreeMap<i64, usize> = panel.periods.iter().map(|&t| (t, 0)).collect();
    for o in &panel.obs {
        *counts.entry(o.time).or_default() += 1;
    }
    let n = panel.n_units();
    BalanceReport {
        balanced: counts.values().all(|&c| c == n),
        counts,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstDifferenceRow {
    pub unit: usize,
    pub delta_outcome: f64,
    pub baseline_covariates: Vec<f64>,
    pub treated: bool,
}

/// One row per unit: change in outcome between a base and an end window.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstDifferenceView {
    pub rows: Vec<FirstDifferenceRow>,
    pub covariate_names: Vec<String>,
    /// Units lacking an observation in the base or end window.
    pub dropped_units: Vec<String>,
    pub base_period: i64,
    pub end_period: i64,
}

/// `Y_end − Y_base` per unit, covariates from the base period, treatment
/// status from the end period.
pub fn first_difference(
    panel: &PanelDataset,
    base_period: i64,
    end_period: i64,
) -> Result<FirstDifferenceView> {
    first_difference_averaged(panel, (base_period, base_period), (end_period, end_period))
}

/// First difference of window averages: mean outcome over `post` minus mean
/// over `pre` (inclusive bounds). Covariates come from the unit's earliest
/// observation inside `pre`; treatment status from its latest inside `post`.
pub fn first_difference_averaged(
    panel: &PanelDataset,
    pre: (i64, i64),
    post: (i64, i64),
) -> Result<FirstDifferenceView> {
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for u in 0..panel.n_units() {
        let mut pre_sum = 0.0;
        let mut pre_n = 0usize;
        let mut post_sum = 0.0;
        let mut post_n = 0usize;
        let mut base_cov: Option<&[f64]> = None;
        let mut treated = false;
        for o in panel.unit_observations(u) {
            if o.time >= pre.0 && o.time <= pre.1 {
                pre_sum += o.outcome;
                pre_n += 1;
                base_cov.get_or_insert(&o.covariates);
            }
            if o.time >= post.0 && o.time <= post.1 {
                post_sum += o.outcome;
                post_n += 1;
                treated = o.treated;
            }
        }
        match (pre_n, post_n, base_cov) {
            (p, q, Some(cov)) if p > 0 && q > 0 => rows.push(FirstDifferenceRow {
                unit: u,
                delta_outcome: post_sum / post_n as f64 - pre_sum / pre_n as f64,
                baseline_covariates: cov.to_vec(),
                treated,
            }),
            _ => dropped.push(panel.units[u].clone()),
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyResult {
            base: pre.0,
            end: post.1,
        });
    }
    Ok(FirstDifferenceView {
        rows,
        covariate_names: panel.covariate_names.clone(),
        dropped_units: dropped,
        base_period: pre.0,
        end_period: post.1,
    })
}
