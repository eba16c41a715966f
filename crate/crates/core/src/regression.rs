//! Least squares with absorbed fixed effects and several covariance
//! estimators.
//!
//! Fixed effects are removed by alternating projections; coefficients come
//! from a column-pivoted Householder QR of the demeaned design, so the normal
//! equations are never formed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spatial::Geometry;

const DEMEAN_TOL: f64 = 1e-13;
const MAX_DEMEAN_ITER: usize = 10_000;
const RANK_TOL: f64 = 1e-10;

/// Regressor metadata carried through to output tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Term {
    pub name: String,
    pub group: String,
    pub relative_time: Option<i64>,
}

impl Term {
    pub fn new(name: impl Into<String>, group: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            group: group.into(),
            relative_time: None,
        }
    }

    pub fn at(mut self, k: i64) -> Self {
        self.relative_time = Some(k);
        self
    }
}

/// Rows keyed by (unit, time) index, named regressors and a response.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    unit: Vec<usize>,
    time: Vec<usize>,
    n_units: usize,
    n_times: usize,
    terms: Vec<Term>,
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl DesignMatrix {
    /// `unit[r]` and `time[r]` are dense level indices for row `r`.
    pub fn new(
        unit: Vec<usize>,
        time: Vec<usize>,
        terms: Vec<Term>,
        x: DMatrix<f64>,
        y: DVector<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if unit.len() != n || time.len() != n || x.nrows() != n {
            return Err(Error::InvalidDesign(format!(
                "row count mismatch: y {n}, x {}, unit {}, time {}",
                x.nrows(),
                unit.len(),
                time.len()
            )));
        }
        if terms.len() != x.ncols() {
            return Err(Error::InvalidDesign(format!(
                "{} names for {} columns",
                terms.len(),
                x.ncols()
            )));
        }
        if let Some(r) = (0..n).find(|&r| !y[r].is_finite()) {
            return Err(Error::InvalidDesign(format!("non-finite response in row {r}")));
        }
        for (j, t) in terms.iter().enumerate() {
            if x.column(j).iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDesign(format!("non-finite value in `{}`", t.name)));
            }
        }
        let n_units = unit.iter().max().map_or(0, |m| m + 1);
        let n_times = time.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            unit,
            time,
            n_units,
            n_times,
            terms,
            x,
            y,
        })
    }

    /// Builds the design from named columns.
    pub fn from_columns(
        unit: Vec<usize>,
        time: Vec<usize>,
        columns: Vec<(Term, Vec<f64>)>,
        y: Vec<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if let Some((t, _)) = columns.iter().find(|(_, c)| c.len() != n) {
            return Err(Error::InvalidDesign(format!(
                "column `{}` has the wrong length",
                t.name
            )));
        }
        let k = columns.len();
        let mut x = DMatrix::zeros(n, k);
        let mut terms = Vec::with_capacity(k);
        for (j, (t, c)) in columns.into_iter().enumerate() {
            x.set_column(j, &DVector::from_vec(c));
            terms.push(t);
        }
        Self::new(unit, time, terms, x, DVector::from_vec(y))
    }

    pub fn nrows(&self) -> usize {
        self.y.len()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn unit_keys(&self) -> &[usize] {
        &self.unit
    }

    pub fn time_keys(&self) -> &[usize] {
        &self.time
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Self {
        Self {
            unit: self.unit.clone(),
            time: self.time.clone(),
            n_units: self.n_units,
            n_times: self.n_times,
            terms: keep.iter().map(|&j| self.terms[j].clone()).collect(),
            x: self.x.select_columns(keep),
            y: self.y.clone(),
        }
    }

    /// Keeps only the listed rows; level indices are preserved.
    pub fn select_rows(&self, keep: &[usize]) -> Self {
        Self {
            unit: keep.iter().map(|&r| self.unit[r]).collect(),
            time: keep.iter().map(|&r| self.time[r]).collect(),
            n_units: self.n_units,
            n_times: self.n_times,
            terms: self.terms.clone(),
            x: self.x.select_rows(keep),
            y: DVector::from_iterator(keep.len(), keep.iter().map(|&r| self.y[r])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum FixedEffects {
    None,
    Unit,
    Time,
    #[default]
    UnitAndTime,
}

struct Groups<'a> {
    unit: &'a [usize],
    time: &'a [usize],
    unit_n: Vec<f64>,
    time_n: Vec<f64>,
}

impl<'a> Groups<'a> {
    fn new(unit: &'a [usize], time: &'a [usize], n_units: usize, n_times: usize) -> Self {
        let mut unit_n = vec![0.0; n_units];
        let mut time_n = vec![0.0; n_times];
        for (&u, &t) in unit.iter().zip(time) {
            unit_n[u] += 1.0;
            time_n[t] += 1.0;
        }
        Self {
            unit,
            time,
            unit_n,
            time_n,
        }
    }

    fn means(keys: &[usize], counts: &[f64], v: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; counts.len()];
        for (&g, &x) in keys.iter().zip(v) {
            m[g] += x;
        }
        for (s, &c) in m.iter_mut().zip(counts) {
            if c > 0.0 {
                *s /= c;
            }
        }
        m
    }

    fn sweep(keys: &[usize], counts: &[f64], v: &mut [f64]) -> f64 {
        let m = Self::means(keys, counts, v);
        for (&g, x) in keys.iter().zip(v.iter_mut()) {
            *x -= m[g];
        }
        m.iter().fold(0.0, |a, b| a.max(b.abs()))
    }

    fn demean(&self, fe: FixedEffects, v: &mut [f64]) -> Result<()> {
        match fe {
            FixedEffects::None => Ok(()),
            FixedEffects::Unit => {
                Self::sweep(self.unit, &self.unit_n, v);
                Ok(())
            }
            FixedEffects::Time => {
                Self::sweep(self.time, &self.time_n, v);
                Ok(())
            }
            FixedEffects::UnitAndTime => {
                let scale = v.iter().fold(1.0f64, |a, b| a.max(b.abs()));
                let tol = DEMEAN_TOL * scale;
                let mut residual = f64::INFINITY;
                for _ in 0..MAX_DEMEAN_ITER {
                    Self::sweep(self.unit, &self.unit_n, v);
                    Self::sweep(self.time, &self.time_n, v);
                    residual = Self::means(self.unit, &self.unit_n, v)
                        .iter()
                        .fold(0.0, |a, b| a.max(b.abs()));
                    if residual < tol {
                        return Ok(());
                    }
                }
                Err(Error::NonConvergence {
                    iterations: MAX_DEMEAN_ITER,
                    residual,
                })
            }
        }
    }

    /// Degrees of freedom used by the fixed effects.
    fn dof(&self, fe: FixedEffects) -> usize {
        let present = |c: &[f64]| c.iter().filter(|&&x| x > 0.0).count();
        match fe {
            FixedEffects::None => 0,
            FixedEffects::Unit => present(&self.unit_n),
            FixedEffects::Time => present(&self.time_n),
            FixedEffects::UnitAndTime => {
                let nu = self.unit_n.len();
                let comps = connected_components(self.unit, self.time, nu, self.time_n.len());
                let mut roots: Vec<usize> = self.unit.iter().map(|&u| comps[u]).collect();
                roots.sort_unstable();
                roots.dedup();
                present(&self.unit_n) + present(&self.time_n) - roots.len()
            }
        }
    }
}

/// Component label for every unit (`0..n_units`) and time (`n_units..`)
/// node of the bipartite graph with an edge per observation.
pub fn connected_components(
    unit: &[usize],
    time: &[usize],
    n_units: usize,
    n_times: usize,
) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n_units + n_times).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (&u, &t) in unit.iter().zip(time) {
        let a = find(&mut parent, u);
        let b = find(&mut parent, n_units + t);
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    (0..parent.len()).map(|x| find(&mut parent, x)).collect()
}

/// Demeaned design plus the degrees of freedom the fixed effects consumed.
#[derive(Debug, Clone)]
pub struct Absorbed {
    pub design: DesignMatrix,
    pub fixed_effects: FixedEffects,
    pub absorbed_dof: usize,
}

/// Sweeps the requested fixed effects out of every column and the response.
pub fn absorb_fixed_effects(design: &DesignMatrix, fe: FixedEffects) -> Result<Absorbed> {
    let groups = Groups::new(&design.unit, &design.time, design.n_units, design.n_times);
    let mut out = design.clone();
    for j in 0..out.x.ncols() {
        let mut col = out.x.column_mut(j);
        groups.demean(fe, col.as_mut_slice())?;
    }
    groups.demean(fe, out.y.as_mut_slice())?;
    Ok(Absorbed {
        design: out,
        fixed_effects: fe,
        absorbed_dof: groups.dof(fe),
    })
}

/// Estimated unit and time effects. Levels with no observations are `NaN`.
/// When both are present, the first observed period's effect is zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedEffectEstimates {
    pub unit: Vec<f64>,
    pub time: Vec<f64>,
}

impl FixedEffectEstimates {
    pub fn fitted(&self, unit: usize, time: usize) -> f64 {
        self.unit.get(unit).copied().unwrap_or(0.0) + self.time.get(time).copied().unwrap_or(0.0)
    }
}

/// Solves `r ≈ μ_unit + λ_time` in least squares by alternating means.
pub fn fit_fixed_effects(
    unit: &[usize],
    time: &[usize],
    n_units: usize,
    n_times: usize,
    r: &[f64],
    fe: FixedEffects,
) -> Result<FixedEffectEstimates> {
    let g = Groups::new(unit, time, n_units, n_times);
    let nan_missing = |v: &mut Vec<f64>, n: &[f64]| {
        for (x, &c) in v.iter_mut().zip(n) {
            if c == 0.0 {
                *x = f64::NAN;
            }
        }
    };
    let mut mu = vec![0.0; n_units];
    let mut lambda = vec![0.0; n_times];
    match fe {
        FixedEffects::None => {
            mu.clear();
            lambda.clear();
        }
        FixedEffects::Unit => {
            mu = Groups::means(unit, &g.unit_n, r);
            lambda.clear();
        }
        FixedEffects::Time => {
            mu.clear();
            lambda = Groups::means(time, &g.time_n, r);
        }
        FixedEffects::UnitAndTime => {
            let scale = r.iter().fold(1.0f64, |a, b| a.max(b.abs()));
            let mut work = vec![0.0; r.len()];
            let mut converged = false;
            let mut residual = f64::INFINITY;
            for _ in 0..MAX_DEMEAN_ITER {
                for (k, w) in work.iter_mut().enumerate() {
                    *w = r[k] - lambda[time[k]];
                }
                mu = Groups::means(unit, &g.unit_n, &work);
                for (k, w) in work.iter_mut().enumerate() {
                    *w = r[k] - mu[unit[k]];
                }
                lambda = Groups::means(time, &g.time_n, &work);
                for (k, w) in work.iter_mut().enumerate() {
                    *w = r[k] - mu[unit[k]] - lambda[time[k]];
                }
                residual = Groups::means(unit, &g.unit_n, &work)
                    .iter()
                    .fold(0.0, |a, b| a.max(b.abs()));
                if residual < DEMEAN_TOL * scale {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::NonConvergence {
                    iterations: MAX_DEMEAN_ITER,
                    residual,
                });
            }
            if let Some(t0) = g.time_n.iter().position(|&c| c > 0.0) {
                let shift = lambda[t0];
                lambda.iter_mut().for_each(|l| *l -= shift);
                mu.iter_mut().for_each(|m| *m += shift);
            }
        }
    }
    nan_missing(&mut mu, &g.unit_n);
    nan_missing(&mut lambda, &g.time_n);
    Ok(FixedEffectEstimates { unit: mu, time: lambda })
}

/// Column-pivoted Householder QR (largest remaining column norm first).
struct PivotedQr {
    /// Householder vectors, one per eliminated column.
    vs: Vec<Vec<f64>>,
    r: DMatrix<f64>,
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    fn factor(x: &DMatrix<f64>) -> Self {
        let (n, k) = x.shape();
        let mut a = x.clone();
        let mut perm: Vec<usize> = (0..k).collect();
        let max_norm = (0..k).map(|j| x.column(j).norm()).fold(0.0, f64::max);
        let tol = RANK_TOL * max_norm.max(f64::MIN_POSITIVE);
        let steps = n.min(k);
        let mut vs = Vec::with_capacity(steps);
        let mut rank = 0;
        for i in 0..steps {
            let (best, best_norm) = (i..k)
                .map(|j| (j, a.view((i, j), (n - i, 1)).norm()))
                .fold((i, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
            if best_norm <= tol {
                break;
            }
            if best != i {
                a.swap_columns(i, best);
                perm.swap(i, best);
            }
            let mut v: Vec<f64> = a.view((i, i), (n - i, 1)).iter().copied().collect();
            let alpha = if v[0] >= 0.0 { -best_norm } else { best_norm };
            v[0] -= alpha;
            let vv: f64 = v.iter().map(|z| z * z).sum();
            if vv > 0.0 {
                for j in i..k {
                    let dot: f64 = (0..n - i).map(|r| v[r] * a[(i + r, j)]).sum();
                    let f = 2.0 * dot / vv;
                    for r in 0..n - i {
                        a[(i + r, j)] -= f * v[r];
                    }
                }
            }
            a[(i, i)] = alpha;
            vs.push(v);
            rank += 1;
        }
        let mut r = DMatrix::zeros(rank, k);
        for i in 0..rank {
            for j in i..k {
                r[(i, j)] = a[(i, j)];
            }
        }
        Self { vs, r, perm, rank }
    }

    fn apply_qt(&self, y: &mut [f64]) {
        for (i, v) in self.vs.iter().enumerate() {
            let vv: f64 = v.iter().map(|z| z * z).sum();
            if vv == 0.0 {
                continue;
            }
            let dot: f64 = v.iter().zip(&y[i..]).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vv;
            for (yy, vk) in y[i..].iter_mut().zip(v) {
                *yy -= f * vk;
            }
        }
    }

    /// Coefficients in original column order (full rank only).
    fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        let k = self.r.ncols();
        let mut qty: Vec<f64> = y.iter().copied().collect();
        self.apply_qt(&mut qty);
        let rhs = DVector::from_row_slice(&qty[..k]);
        let z = self
            .r
            .solve_upper_triangular(&rhs)
            .expect("full-rank R has a non-zero diagonal");
        let mut beta = DVector::zeros(k);
        for (pos, &orig) in self.perm.iter().enumerate() {
            beta[orig] = z[pos];
        }
        beta
    }

    /// `(X'X)^{-1}` in original column order.
    fn unscaled_cov(&self) -> DMatrix<f64> {
        let k = self.r.ncols();
        let rinv = self
            .r
            .solve_upper_triangular(&DMatrix::identity(k, k))
            .expect("full-rank R has a non-zero diagonal");
        let inner = &rinv * rinv.transpose();
        let mut out = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                out[(self.perm[a], self.perm[b])] = inner[(a, b)];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Kernel {
    Uniform,
    Bartlett,
}

impl Kernel {
    /// Weight at distance `d`; zero at or beyond the cutoff.
    pub fn weight(self, d: f64, cutoff: f64) -> f64 {
        if d >= cutoff {
            return 0.0;
        }
        match self {
            Kernel::Uniform => 1.0,
            Kernel::Bartlett => 1.0 - d / cutoff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum VcovSpec {
    Iid,
    Hc1,
    ClusterByUnit,
    /// Same-period cross-unit weights `k(d)` for `d < cutoff` plus weight 1
    /// for every pair of periods within a unit.
    Conley { cutoff: f64, kernel: Kernel },
}

impl VcovSpec {
    pub fn validate(&self) -> Result<()> {
        if let VcovSpec::Conley { cutoff, .. } = self {
            if !(cutoff.is_finite() && *cutoff > 0.0) {
                return Err(Error::InvalidDesign(format!(
                    "conley cutoff must be positive, got {cutoff}"
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            VcovSpec::Iid => "iid".into(),
            VcovSpec::Hc1 => "hc1".into(),
            VcovSpec::ClusterByUnit => "cluster".into(),
            VcovSpec::Conley { cutoff, kernel } => format!(
                "conley_{}_{}",
                cutoff,
                match kernel {
                    Kernel::Uniform => "uniform",
                    Kernel::Bartlett => "bartlett",
                }
            ),
        }
    }
}

/// Unit locations for Conley weights: `positions[u]` is the geometry index
/// of design unit level `u`.
#[derive(Debug, Clone, Copy)]
pub struct Locations<'a> {
    pub geometry: &'a Geometry,
    pub positions: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub fixed_effects: FixedEffects,
    pub vcov: VcovSpec,
    /// Multiply the covariance by `n / (n − k)`, `k` counting absorbed
    /// fixed effects. Off gives HC0-style scaling.
    pub small_sample: bool,
    pub keep_fixed_effects: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            fixed_effects: FixedEffects::UnitAndTime,
            vcov: VcovSpec::Iid,
            small_sample: true,
            keep_fixed_effects: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionFit {
    pub terms: Vec<Term>,
    pub coefficients: Vec<f64>,
    pub vcov: Vec<Vec<f64>>,
    #[serde(skip)]
    pub residuals: Vec<f64>,
    pub n: usize,
    /// Residual degrees of freedom `n − k − absorbed`.
    pub dof: usize,
    pub absorbed_dof: usize,
    pub vcov_spec: VcovSpec,
    /// Whether negative eigenvalues of the covariance were floored.
    pub clipped: bool,
    #[serde(skip)]
    pub fixed_effects: Option<FixedEffectEstimates>,
    pub warnings: Vec<String>,
    /// How to read the estimates (e.g. which population `tau` refers to).
    pub notes: Vec<String>,
}

impl RegressionFit {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.name == name)
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|j| self.coefficients[j])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|j| self.vcov[j][j].max(0.0).sqrt())
    }

    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.terms.len())
            .map(|j| self.vcov[j][j].max(0.0).sqrt())
            .collect()
    }
}

/// Floors negative eigenvalues at zero. Returns the input untouched (and
/// `false`) when no eigenvalue is meaningfully negative.
pub fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if m.nrows() == 0 {
        return (m.clone(), false);
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if eig.eigenvalues.iter().all(|&l| l >= -1e-12 * top) {
        return (m.clone(), false);
    }
    let floored = eig.eigenvalues.map(|l| l.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    ((&out + out.transpose()) * 0.5, true)
}

/// Least squares of `y` on `X` after absorbing the requested fixed effects.
pub fn ols_fit(
    design: &DesignMatrix,
    opts: &FitOptions,
    locations: Option<Locations<'_>>,
) -> Result<RegressionFit> {
    opts.vcov.validate()?;
    if matches!(opts.vcov, VcovSpec::Conley { .. }) && locations.is_none() {
        return Err(Error::ConleyWithoutCoordinates);
    }
    let absorbed = absorb_fixed_effects(design, opts.fixed_effects)?;
    let xd = &absorbed.design.x;
    let yd = &absorbed.design.y;
    let n = design.nrows();
    let k = xd.ncols();

    let qr = PivotedQr::factor(xd);
    if qr.rank < k {
        let names = qr.perm[qr.rank..]
            .iter()
            .map(|&j| design.terms[j].name.clone())
            .collect();
        return Err(Error::RankDeficient(names));
    }
    let k_total = k + absorbed.absorbed_dof;
    if n <= k_total {
        return Err(Error::InvalidDesign(format!(
            "{n} observations for {k_total} parameters"
        )));
    }
    let beta = if k > 0 { qr.solve(yd) } else { DVector::zeros(0) };
    let resid: DVector<f64> = yd - xd * &beta;
    let bread = if k > 0 {
        qr.unscaled_cov()
    } else {
        DMatrix::zeros(0, 0)
    };
    let scale = if opts.small_sample {
        n as f64 / (n - k_total) as f64
    } else {
        1.0
    };

    let mut clipped = false;
    let vcov = match opts.vcov {
        VcovSpec::Iid => {
            let s2 = resid.norm_squared() / n as f64;
            &bread * (s2 * scale)
        }
        _ => {
            let scores = score_rows(xd, &resid);
            let meat = match opts.vcov {
                VcovSpec::Hc1 => scores.transpose() * &scores,
                VcovSpec::ClusterByUnit => cluster_meat(&scores, &design.unit, design.n_units),
                VcovSpec::Conley { cutoff, kernel } => conley_meat(
                    &scores,
                    design,
                    locations.expect("checked above"),
                    cutoff,
                    kernel,
                )?,
                VcovSpec::Iid => unreachable!(),
            };
            let v = &bread * meat * &bread * scale;
            let v = (&v + v.transpose()) * 0.5;
            if matches!(
                opts.vcov,
                VcovSpec::Conley {
                    kernel: Kernel::Uniform,
                    ..
                }
            ) {
                let (c, flag) = clip_psd(&v);
                clipped = flag;
                c
            } else {
                v
            }
        }
    };

    let fixed_effects = if opts.keep_fixed_effects && opts.fixed_effects != FixedEffects::None {
        let raw: DVector<f64> = &design.y - &design.x * &beta;
        Some(fit_fixed_effects(
            &design.unit,
            &design.time,
            design.n_units,
            design.n_times,
            raw.as_slice(),
            opts.fixed_effects,
        )?)
    } else {
        None
    };

    let mut warnings = Vec::new();
    if clipped {
        warnings.push("covariance had negative eigenvalues; floored at zero".into());
    }
    Ok(RegressionFit {
        terms: design.terms.clone(),
        coefficients: beta.iter().copied().collect(),
        vcov: (0..k)
            .map(|a| (0..k).map(|b| vcov[(a, b)]).collect())
            .collect(),
        residuals: resid.iter().copied().collect(),
        n,
        dof: n - k_total,
        absorbed_dof: absorbed.absorbed_dof,
        vcov_spec: opts.vcov,
        clipped,
        fixed_effects,
        warnings,
        notes: Vec::new(),
    })
}

fn score_rows(x: &DMatrix<f64>, e: &DVector<f64>) -> DMatrix<f64> {
    let mut s = x.clone();
    for (r, &er) in e.iter().enumerate() {
        s.row_mut(r).scale_mut(er);
    }
    s
}

fn cluster_meat(scores: &DMatrix<f64>, unit: &[usize], n_units: usize) -> DMatrix<f64> {
    let k = scores.ncols();
    let mut sums = DMatrix::<f64>::zeros(n_units, k);
    for (r, &u) in unit.iter().enumerate() {
        for j in 0..k {
            sums[(u, j)] += scores[(r, j)];
        }
    }
    sums.transpose() * sums
}

fn conley_meat(
    scores: &DMatrix<f64>,
    design: &DesignMatrix,
    loc: Locations<'_>,
    cutoff: f64,
    kernel: Kernel,
) -> Result<DMatrix<f64>> {
    if loc.positions.len() < design.n_units {
        return Err(Error::InvalidDesign(format!(
            "{} unit locations for {} unit levels",
            loc.positions.len(),
            design.n_units
        )));
    }
    let k = scores.ncols();
    let mut meat = cluster_meat(scores, &design.unit, design.n_units);
    let mut unit_at = vec![usize::MAX; loc.geometry.len()];
    for (u, &p) in loc.positions.iter().enumerate().take(design.n_units) {
        unit_at[p] = u;
    }
    let mut by_time: Vec<Vec<usize>> = vec![Vec::new(); design.n_times];
    for (r, &t) in design.time.iter().enumerate() {
        by_time[t].push(r);
    }
    let mut row_of = vec![usize::MAX; design.n_units];
    let mut neighbours: Vec<Vec<(usize, f64)>> = vec![Vec::new(); design.n_units];
    let mut have: Vec<bool> = vec![false; design.n_units];
    for rows in &by_time {
        for &r in rows {
            row_of[design.unit[r]] = r;
        }
        for &a in rows {
            let u = design.unit[a];
            if !have[u] {
                neighbours[u] = loc
                    .geometry
                    .within_inclusive(loc.positions[u], cutoff)
                    .into_iter()
                    .filter(|&(p, d)| d < cutoff && unit_at[p] != usize::MAX)
                    .map(|(p, d)| (unit_at[p], kernel.weight(d, cutoff)))
                    .collect();
                have[u] = true;
            }
            for &(v, w) in &neighbours[u] {
                let b = row_of[v];
                if b == usize::MAX || v == u || w == 0.0 {
                    continue;
                }
                for i in 0..k {
                    let si = scores[(a, i)] * w;
                    for j in 0..k {
                        meat[(i, j)] += si * scores[(b, j)];
                    }
                }
            }
        }
        for &r in rows {
            row_of[design.unit[r]] = usize::MAX;
        }
    }
    Ok(meat)
}
