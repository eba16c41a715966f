//! Exposure mappings: how much of the treatment vector reaches each unit.
//!
//! Every variant excludes the unit itself (`j != i`), so treated units also
//! receive exposure from *other* treated units. Within-distance variants use a
//! strict `d < d̄`; ring intervals are `(c_{k-1}, c_k]` and the spillover
//! indicator `S` is `nearest ≤ outer radius`.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::spatial::Geometry;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ExposureSpec {
    /// `1{any treated j != i with d(i,j) < d̄}`.
    WithinIndicator { dbar: f64 },
    /// Number of treated `j != i` with `d(i,j) < d̄`.
    WithinCount { dbar: f64 },
    /// `max_j D_j exp(-α d(i,j)) 1{d(i,j) < cutoff}`.
    Decay { alpha: f64, cutoff: f64 },
    /// `Σ_{j != i} D_j exp(-α d(i,j))` over all treated units.
    DecayCount { alpha: f64 },
    /// Dummies for the ring containing the nearest treated unit.
    Rings { cuts: Vec<f64> },
    /// Number of treated units in each ring.
    RingsAdditive { cuts: Vec<f64> },
}

/// Exposure of one unit in one period.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureValue {
    pub h: Vec<f64>,
    pub s: bool,
    pub ring: Option<usize>,
    /// Distance to the nearest other treated unit when it lies within the
    /// spec's outer radius, otherwise `+inf`.
    pub nearest: f64,
}

fn fmt_num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

impl ExposureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidExposureSpec(m));
        match self {
            ExposureSpec::WithinIndicator { dbar } | ExposureSpec::WithinCount { dbar } => {
                if !(dbar.is_finite() && *dbar > 0.0) {
                    return bad(format!("distance threshold must be positive, got {dbar}"));
                }
            }
            ExposureSpec::Decay { alpha, cutoff } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return bad(format!("decay rate must be positive, got {alpha}"));
                }
                if !(cutoff.is_finite() && *cutoff > 0.0) {
                    return bad(format!("decay cutoff must be positive, got {cutoff}"));
                }
            }
            ExposureSpec::DecayCount { alpha } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return bad(format!("decay rate must be positive, got {alpha}"));
                }
            }
            ExposureSpec::Rings { cuts } | ExposureSpec::RingsAdditive { cuts } => {
                if cuts.len() < 2 {
                    return bad("rings need at least two cut points".into());
                }
                if !(cuts[0].is_finite() && cuts[0] >= 0.0) {
                    return bad(format!("first cut must be non-negative, got {}", cuts[0]));
                }
                if cuts.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
                    return bad(format!("cuts must be strictly increasing and finite: {cuts:?}"));
                }
            }
        }
        Ok(())
    }

    /// Radius inside which `S = 1` (inclusive); infinite for `DecayCount`.
    pub fn outer_radius(&self) -> f64 {
        match self {
            ExposureSpec::WithinIndicator { dbar } | ExposureSpec::WithinCount { dbar } => *dbar,
            ExposureSpec::Decay { cutoff, .. } => *cutoff,
            ExposureSpec::DecayCount { .. } => f64::INFINITY,
            ExposureSpec::Rings { cuts } | ExposureSpec::RingsAdditive { cuts } => {
                *cuts.last().expect("validated cuts")
            }
        }
    }

    pub fn is_additive(&self) -> bool {
        matches!(
            self,
            ExposureSpec::WithinCount { .. }
                | ExposureSpec::DecayCount { .. }
                | ExposureSpec::RingsAdditive { .. }
        )
    }

    pub fn is_rings(&self) -> bool {
        matches!(
            self,
            ExposureSpec::Rings { .. } | ExposureSpec::RingsAdditive { .. }
        )
    }

    pub fn cuts(&self) -> Option<&[f64]> {
        match self {
            ExposureSpec::Rings { cuts } | ExposureSpec::RingsAdditive { cuts } => Some(cuts),
            _ => None,
        }
    }

    /// Number of components of `h`.
    pub fn dim(&self) -> usize {
        self.cuts().map_or(1, |c| c.len() - 1)
    }

    /// Short machine-friendly label, e.g. `within_40` or `rings_0_20_30_40`.
    pub fn label(&self) -> String {
        match self {
            ExposureSpec::WithinIndicator { dbar } => format!("within_{}", fmt_num(*dbar)),
            ExposureSpec::WithinCount { dbar } => format!("within_count_{}", fmt_num(*dbar)),
            ExposureSpec::Decay { alpha, cutoff } => {
                format!("decay_{}_{}", fmt_num(*alpha), fmt_num(*cutoff))
            }
            ExposureSpec::DecayCount { alpha } => format!("decay_count_{}", fmt_num(*alpha)),
            ExposureSpec::Rings { cuts } | ExposureSpec::RingsAdditive { cuts } => {
                let body: Vec<String> = cuts.iter().map(|c| fmt_num(*c)).collect();
                let kind = if self.is_additive() { "rings_additive" } else { "rings" };
                format!("{kind}_{}", body.join("_"))
            }
        }
    }

    /// Names of the `h` components: ring intervals like `(20,30]`, or the
    /// label for scalar exposures.
    pub fn component_names(&self) -> Vec<String> {
        match self.cuts() {
            Some(cuts) => cuts
                .windows(2)
                .map(|w| format!("({},{}]", fmt_num(w[0]), fmt_num(w[1])))
                .collect(),
            None => vec![self.label()],
        }
    }

    fn ring_of(cuts: &[f64], d: f64) -> Option<usize> {
        if d > *cuts.last()? {
            return None;
        }
        if d == 0.0 && cuts[0] == 0.0 {
            return Some(0);
        }
        cuts.windows(2).position(|w| d > w[0] && d <= w[1])
    }

    /// Exposure from the distances to treated units other than `i`.
    ///
    /// `dists` must contain at least every treated unit within
    /// [`outer_radius`](Self::outer_radius) (inclusive); extra, farther
    /// entries are ignored except by `DecayCount`, which needs all of them.
    pub fn evaluate(&self, dists: &[f64]) -> ExposureValue {
        let outer = self.outer_radius();
        let nearest = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let s = nearest.is_finite() && nearest <= outer;
        let nearest = if s { nearest } else { f64::INFINITY };
        let (h, ring) = match self {
            ExposureSpec::WithinIndicator { dbar } => {
                (vec![if nearest < *dbar { 1.0 } else { 0.0 }], None)
            }
            ExposureSpec::WithinCount { dbar } => {
                (vec![dists.iter().filter(|&&d| d < *dbar).count() as f64], None)
            }
            ExposureSpec::Decay { alpha, cutoff } => {
                let v = if nearest < *cutoff {
                    (-alpha * nearest).exp()
                } else {
                    0.0
                };
                (vec![v], None)
            }
            ExposureSpec::DecayCount { alpha } => {
                (vec![dists.iter().map(|d| (-alpha * d).exp()).sum()], None)
            }
            ExposureSpec::Rings { cuts } => {
                let ring = Self::ring_of(cuts, nearest);
                let mut h = vec![0.0; cuts.len() - 1];
                if let Some(k) = ring {
                    h[k] = 1.0;
                }
                (h, ring)
            }
            ExposureSpec::RingsAdditive { cuts } => {
                let mut h = vec![0.0; cuts.len() - 1];
                for &d in dists {
                    if let Some(k) = Self::ring_of(cuts, d) {
                        h[k] += 1.0;
                    }
                }
                (h, Self::ring_of(cuts, nearest))
            }
        };
        ExposureValue {
            h,
            s,
            ring,
            nearest,
        }
    }
}

/// Which units count as treated when computing period-`t` exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TreatedSet {
    /// `{j : D_jt = 1}`.
    #[default]
    Contemporaneous,
    /// Every unit treated at some point in the panel.
    EverTreated,
}

/// Exposure for every panel observation, aligned with
/// [`PanelDataset::observations`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureMatrix {
    spec: ExposureSpec,
    names: Vec<String>,
    dim: usize,
    h: Vec<f64>,
    s: Vec<bool>,
    ring: Vec<Option<usize>>,
    nearest: Vec<f64>,
}

impl ExposureMatrix {
    pub fn spec(&self) -> &ExposureSpec {
        &self.spec
    }

    pub fn component_names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn h(&self, row: usize) -> &[f64] {
        &self.h[row * self.dim..(row + 1) * self.dim]
    }

    pub fn s(&self, row: usize) -> bool {
        self.s[row]
    }

    pub fn ring(&self, row: usize) -> Option<usize> {
        self.ring[row]
    }

    pub fn nearest(&self, row: usize) -> f64 {
        self.nearest[row]
    }

    pub fn value(&self, row: usize) -> ExposureValue {
        ExposureValue {
            h: self.h(row).to_vec(),
            s: self.s(row),
            ring: self.ring(row),
            nearest: self.nearest(row),
        }
    }

    fn with_capacity(spec: &ExposureSpec, n: usize) -> Self {
        let dim = spec.dim();
        Self {
            spec: spec.clone(),
            names: spec.component_names(),
            dim,
            h: Vec::with_capacity(n * dim),
            s: Vec::with_capacity(n),
            ring: Vec::with_capacity(n),
            nearest: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, v: &ExposureValue) {
        self.h.extend_from_slice(&v.h);
        self.s.push(v.s);
        self.ring.push(v.ring);
        self.nearest.push(v.nearest);
    }

    /// Builds a matrix from per-observation values (used by simulations that
    /// already know the exposure).
    pub fn from_values(spec: &ExposureSpec, values: &[ExposureValue]) -> Self {
        let mut m = Self::with_capacity(spec, values.len());
        for v in values {
            m.push(v);
        }
        m
    }

    /// Writes `unit, time, h…, S, ring, nearest` rows for auditing.
    pub fn write_csv<W: Write>(&self, panel: &PanelDataset, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["unit".to_string(), "time".to_string()];
        if self.dim == 1 {
            header.push("h".into());
        } else {
            header.extend(self.names.iter().map(|n| format!("h_{n}")));
        }
        header.extend(["S".to_string(), "ring".to_string(), "nearest".to_string()]);
        w.write_record(&header)?;
        for (row, o) in panel.observations().iter().enumerate() {
            let mut rec = vec![panel.units()[o.unit].clone(), o.time.to_string()];
            rec.extend(self.h(row).iter().map(|v| format!("{v:.10}")));
            rec.push(if self.s(row) { "1" } else { "0" }.into());
            rec.push(self.ring(row).map(|k| self.names[k].clone()).unwrap_or_default());
            let d = self.nearest(row);
            rec.push(if d.is_finite() { format!("{d:.10}") } else { String::new() });
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exposure of every observation under `spec`.
pub fn compute_exposure(
    panel: &PanelDataset,
    geometry: &Geometry,
    spec: &ExposureSpec,
    treated_set: TreatedSet,
) -> Result<ExposureMatrix> {
    let mut out = compute_exposures(panel, geometry, std::slice::from_ref(spec), treated_set)?;
    Ok(out.pop().expect("one spec in, one matrix out"))
}

/// Exposure under several specs, sharing one pass of distance queries.
pub fn compute_exposures(
    panel: &PanelDataset,
    geometry: &Geometry,
    specs: &[ExposureSpec],
    treated_set: TreatedSet,
) -> Result<Vec<ExposureMatrix>> {
    for s in specs {
        s.validate()?;
    }
    let pos = geometry.positions_of(panel.units())?;
    let radius = specs
        .iter()
        .map(ExposureSpec::outer_radius)
        .fold(0.0, f64::max);
    let n_obs = panel.observations().len();
    let mut out: Vec<ExposureMatrix> = specs
        .iter()
        .map(|s| ExposureMatrix::with_capacity(s, n_obs))
        .collect();

    // Geometry position -> is treated in the current period.
    let mut mask = vec![false; geometry.len()];
    let mut current: Option<Vec<usize>> = None;
    // Per period: unit -> values under each spec (only for units observed).
    let mut cache: Vec<Option<Vec<ExposureValue>>> = vec![None; panel.n_units()];

    let treated_at = |t: i64| -> Vec<usize> {
        (0..panel.n_units())
            .filter(|&u| match (treated_set, panel.treat_start(u)) {
                (_, None) => false,
                (TreatedSet::Contemporaneous, Some(s)) => s <= t,
                (TreatedSet::EverTreated, Some(_)) => true,
            })
            .collect()
    };

    // Observations are sorted by unit; walk period by period instead.
    let mut by_period: Vec<Vec<usize>> = vec![Vec::new(); panel.periods().len()];
    for (row, o) in panel.observations().iter().enumerate() {
        let k = panel
            .periods()
            .binary_search(&o.time)
            .expect("period listed");
        by_period[k].push(row);
    }
    let mut values: Vec<Option<Vec<ExposureValue>>> = vec![None; n_obs];
    let mut dists = Vec::new();
    for (k, &t) in panel.periods().iter().enumerate() {
        let treated = treated_at(t);
        if current.as_ref() != Some(&treated) {
            mask.iter_mut().for_each(|m| *m = false);
            for &u in &treated {
                mask[pos[u]] = true;
            }
            cache.iter_mut().for_each(|c| *c = None);
            current = Some(treated);
        }
        let treated_units = current.as_ref().expect("set above");
        for &row in &by_period[k] {
            let u = panel.observations()[row].unit;
            if cache[u].is_none() {
                dists.clear();
                let pi = pos[u];
                if !radius.is_finite() || treated_units.len() <= 64 {
                    for &v in treated_units {
                        let pj = pos[v];
                        if pj != pi {
                            let d = geometry.distance_idx(pi, pj);
                            if d <= radius {
                                dists.push(d);
                            }
                        }
                    }
                } else {
                    dists.extend(
                        geometry
                            .within_inclusive(pi, radius)
                            .into_iter()
                            .filter(|&(j, _)| mask[j])
                            .map(|(_, d)| d),
                    );
                }
                cache[u] = Some(specs.iter().map(|s| s.evaluate(&dists)).collect());
            }
            values[row] = cache[u].clone();
        }
    }
    for v in values {
        let v = v.expect("every observation visited");
        for (m, val) in out.iter_mut().zip(&v) {
            m.push(val);
        }
    }
    Ok(out)
}

/// Per-unit timing of first exposure (`S = 1`) and per-observation relative
/// time `k = t − first exposed period`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpilloverTiming {
    pub first_exposed: Vec<Option<i64>>,
    /// Aligned with panel observations; `None` for never-exposed units.
    pub relative_time: Vec<Option<i64>>,
}

pub fn spillover_event_time(panel: &PanelDataset, exposure: &ExposureMatrix) -> SpilloverTiming {
    let mut first = vec![None; panel.n_units()];
    for (row, o) in panel.observations().iter().enumerate() {
        if exposure.s(row) {
            let f: &mut Option<i64> = &mut first[o.unit];
            *f = Some(f.map_or(o.time, |x: i64| x.min(o.time)));
        }
    }
    let relative_time = panel
        .observations()
        .iter()
        .map(|o| first[o.unit].map(|f| o.time - f))
        .collect();
    SpilloverTiming {
        first_exposed: first,
        relative_time,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Record;
    use crate::spatial::{Metric, PointSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn within_indicator_example() {
        let v = ExposureSpec::WithinIndicator { dbar: 40.0 }.evaluate(&[30.0, 55.0]);
        assert_eq!(v.h, vec![1.0]);
        assert!(v.s);
        let edge = ExposureSpec::WithinIndicator { dbar: 40.0 }.evaluate(&[40.0]);
        assert_eq!(edge.h, vec![0.0]);
        assert!(edge.s, "S uses the inclusive convention");
    }

    #[test]
    fn decay_cutoff_is_strict() {
        let spec = ExposureSpec::Decay {
            alpha: 0.02,
            cutoff: 80.0,
        };
        assert_eq!(spec.evaluate(&[80.0]).h, vec![0.0]);
        let v = spec.evaluate(&[79.0]).h[0];
        assert!((v - (-1.58f64).exp()).abs() < 1e-15);
        assert!((v - 0.2060).abs() < 5e-5);
        // max, not sum
        assert_eq!(spec.evaluate(&[79.0, 10.0]).h[0], (-0.2f64).exp());
    }

    #[test]
    fn decay_count_sums() {
        let v = ExposureSpec::DecayCount { alpha: 0.02 }.evaluate(&[10.0, 200.0]);
        assert!((v.h[0] - ((-0.2f64).exp() + (-4.0f64).exp())).abs() < 1e-15);
        assert!(v.s);
        let none = ExposureSpec::DecayCount { alpha: 0.02 }.evaluate(&[]);
        assert_eq!(none.h, vec![0.0]);
        assert!(!none.s);
    }

    #[test]
    fn rings_example() {
        let spec = ExposureSpec::Rings {
            cuts: vec![0.0, 20.0, 30.0, 40.0],
        };
        let v = spec.evaluate(&[25.0, 35.0]);
        assert_eq!(v.h, vec![0.0, 1.0, 0.0]);
        assert_eq!(v.ring, Some(1));
        assert!(v.s);
        assert_eq!(spec.component_names(), vec!["(0,20]", "(20,30]", "(30,40]"]);
        let add = ExposureSpec::RingsAdditive {
            cuts: vec![0.0, 20.0, 30.0, 40.0],
        };
        assert_eq!(add.evaluate(&[25.0, 30.0, 35.0, 41.0]).h, vec![0.0, 2.0, 1.0]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ExposureSpec::WithinIndicator { dbar: 0.0 }.validate().is_err());
        assert!(ExposureSpec::Rings { cuts: vec![0.0, 20.0, 20.0] }.validate().is_err());
        assert!(ExposureSpec::Rings { cuts: vec![-1.0, 20.0] }.validate().is_err());
        assert!(ExposureSpec::DecayCount { alpha: -0.1 }.validate().is_err());
    }

    fn line_panel() -> (PanelDataset, Geometry) {
        // Units on a line at 0, 30, 55, 100 miles; unit a treated in period 1.
        let xs = [0.0, 30.0, 55.0, 100.0];
        let ids: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let pts = PointSet::new(
            ids.clone(),
            xs.iter().map(|&x| [x, 0.0]).collect(),
            Metric::Planar,
        )
        .unwrap();
        let mut recs = Vec::new();
        for id in &ids {
            for t in 0..2 {
                recs.push(Record {
                    unit: id.clone(),
                    time: t,
                    outcome: 0.0,
                    treated: id == "a" && t == 1,
                    covariates: vec![],
                });
            }
        }
        (
            PanelDataset::from_records(recs, vec![]).unwrap(),
            Geometry::from_points(pts, 40.0),
        )
    }

    #[test]
    fn period_without_treatment_has_zero_exposure() {
        let (panel, geo) = line_panel();
        let m = compute_exposure(
            &panel,
            &geo,
            &ExposureSpec::WithinIndicator { dbar: 40.0 },
            TreatedSet::Contemporaneous,
        )
        .unwrap();
        for (row, o) in panel.observations().iter().enumerate() {
            if o.time == 0 {
                assert_eq!(m.h(row), &[0.0]);
                assert!(!m.s(row));
            }
        }
        let row_b1 = panel.obs_index(1, 1).unwrap();
        assert_eq!(m.h(row_b1), &[1.0]);
        // a is treated but has no other treated unit nearby.
        let row_a1 = panel.obs_index(0, 1).unwrap();
        assert_eq!(m.h(row_a1), &[0.0]);
        assert!(!m.s(row_a1));
    }

    #[test]
    fn missing_coordinates_reported() {
        let (panel, _) = line_panel();
        let pts = PointSet::new(vec!["a".into()], vec![[0.0, 0.0]], Metric::Planar).unwrap();
        let geo = Geometry::from_points(pts, 10.0);
        let r = compute_exposure(
            &panel,
            &geo,
            &ExposureSpec::WithinIndicator { dbar: 40.0 },
            TreatedSet::Contemporaneous,
        );
        assert!(matches!(r, Err(Error::MissingCoordinates(u)) if u == "b"));
    }

    #[test]
    fn spillover_event_time_examples() {
        let spec = ExposureSpec::WithinIndicator { dbar: 40.0 };
        let vals: Vec<ExposureValue> = [[].as_slice(), &[], &[10.0], &[10.0]]
            .iter()
            .map(|d| spec.evaluate(d))
            .chain([[].as_slice(); 4].iter().map(|d| spec.evaluate(d)))
            .chain([[5.0].as_slice(); 4].iter().map(|d| spec.evaluate(d)))
            .collect();
        let mut recs = Vec::new();
        for u in ["x", "y", "z"] {
            for t in 0..4 {
                recs.push(Record {
                    unit: u.into(),
                    time: t,
                    outcome: 0.0,
                    treated: false,
                    covariates: vec![],
                });
            }
        }
        let panel = PanelDataset::from_records(recs, vec![]).unwrap();
        let m = ExposureMatrix::from_values(&spec, &vals);
        let timing = spillover_event_time(&panel, &m);
        assert_eq!(
            &timing.relative_time[0..4],
            &[Some(-2), Some(-1), Some(0), Some(1)]
        );
        assert!(timing.relative_time[4..8].iter().all(Option::is_none));
        assert_eq!(timing.relative_time[8], Some(0));
    }

    fn random_dists(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(0..8);
        (0..n).map(|_| rng.random_range(0.0..120.0)).collect()
    }

    proptest! {
        #[test]
        fn ring_sum_equals_within_indicator_s(seed in any::<u64>(), dbar in 10.0f64..100.0) {
            let d = random_dists(seed);
            let rings = ExposureSpec::Rings { cuts: vec![0.0, dbar / 4.0, dbar / 2.0, dbar] }.evaluate(&d);
            let within = ExposureSpec::WithinIndicator { dbar }.evaluate(&d);
            let sum: f64 = rings.h.iter().sum();
            prop_assert!(sum == 0.0 || sum == 1.0);
            prop_assert_eq!(sum == 1.0, within.s);
        }

        #[test]
        fn count_dominates_indicator(seed in any::<u64>(), dbar in 10.0f64..100.0) {
            let d = random_dists(seed);
            let c = ExposureSpec::WithinCount { dbar }.evaluate(&d).h[0];
            let i = ExposureSpec::WithinIndicator { dbar }.evaluate(&d).h[0];
            prop_assert!(c >= i);
            prop_assert_eq!(c == 0.0, i == 0.0);
        }

        #[test]
        fn additive_variants_monotone(seed in any::<u64>(), extra in 0.0f64..150.0) {
            let d = random_dists(seed);
            let mut more = d.clone();
            more.push(extra);
            for spec in [
                ExposureSpec::WithinCount { dbar: 40.0 },
                ExposureSpec::DecayCount { alpha: 0.02 },
                ExposureSpec::RingsAdditive { cuts: vec![0.0, 20.0, 40.0, 80.0] },
            ] {
                let a = spec.evaluate(&d).h;
                let b = spec.evaluate(&more).h;
                prop_assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
            }
        }

        #[test]
        fn decay_strictly_decreasing(a in 0.0f64..79.0, gap in 0.01f64..1.0) {
            let spec = ExposureSpec::Decay { alpha: 0.02, cutoff: 80.0 };
            let near = spec.evaluate(&[a]).h[0];
            let far = spec.evaluate(&[(a + gap).min(79.999)]).h[0];
            prop_assert!(far < near);
        }
    }

    #[test]
    fn shared_pass_matches_single_spec() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 120;
        let ids: Vec<String> = (0..n).map(|k| format!("u{k}")).collect();
        let pts = PointSet::new(
            ids.clone(),
            (0..n)
                .map(|_| [rng.random_range(0.0..300.0), rng.random_range(0.0..300.0)])
                .collect(),
            Metric::Planar,
        )
        .unwrap();
        let mut recs = Vec::new();
        for (k, id) in ids.iter().enumerate() {
            let start = if k % 4 == 0 { Some(2 + (k % 3) as i64) } else { None };
            for t in 0..6 {
                recs.push(Record {
                    unit: id.clone(),
                    time: t,
                    outcome: 0.0,
                    treated: start.is_some_and(|s| t >= s),
                    covariates: vec![],
                });
            }
        }
        let panel = PanelDataset::from_records(recs, vec![]).unwrap();
        let geo = Geometry::from_points(pts, 40.0);
        let specs = vec![
            ExposureSpec::WithinIndicator { dbar: 40.0 },
            ExposureSpec::RingsAdditive { cuts: vec![0.0, 20.0, 60.0] },
            ExposureSpec::DecayCount { alpha: 0.02 },
        ];
        let joint = compute_exposures(&panel, &geo, &specs, TreatedSet::Contemporaneous).unwrap();
        for (spec, m) in specs.iter().zip(&joint) {
            let single = compute_exposure(&panel, &geo, spec, TreatedSet::Contemporaneous).unwrap();
            assert_eq!(&single.h, &m.h);
            assert_eq!(&single.s, &m.s);
        }
    }
}
