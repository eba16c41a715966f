use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spillover_did::regression::{
    clip_psd, ols_fit, DesignMatrix, FitOptions, FixedEffects, Kernel, Locations, Term, VcovSpec,
};
use spillover_did::spatial::{Geometry, Metric, PointSet};

/// Random unbalanced panel with two regressors. Every unit keeps at least
/// two periods and period 0 is always present.
fn panel(seed: u64, n_units: usize, n_times: usize) -> DesignMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut unit, mut time, mut x1, mut x2, mut y) = (vec![], vec![], vec![], vec![], vec![]);
    let alpha: Vec<f64> = (0..n_units).map(|_| rng.random_range(-3.0..3.0)).collect();
    let lambda: Vec<f64> = (0..n_times).map(|_| rng.random_range(-1.0..1.0)).collect();
    for u in 0..n_units {
        for t in 0..n_times {
            if t >= 2 && rng.random_bool(0.2) {
                continue;
            }
            let a: f64 = rng.random_range(-1.0..1.0) + 0.3 * alpha[u];
            let b: f64 = rng.random_range(-1.0..1.0) + 0.2 * lambda[t];
            unit.push(u);
            time.push(t);
            x1.push(a);
            x2.push(b);
            y.push(1.5 * a - 0.7 * b + alpha[u] + lambda[t] + rng.random_range(-1.0..1.0));
        }
    }
    DesignMatrix::from_columns(
        unit,
        time,
        vec![(Term::new("x1", "covariate"), x1), (Term::new("x2", "covariate"), x2)],
        y,
    )
    .unwrap()
}

/// Least squares with explicit unit and time dummies, solved by SVD.
fn dummy_ols(d: &DesignMatrix) -> (DVector<f64>, DMatrix<f64>) {
    let n = d.nrows();
    let nu = d.unit_keys().iter().max().unwrap() + 1;
    let nt = d.time_keys().iter().max().unwrap() + 1;
    let k = d.x().ncols();
    let p = k + nu + nt - 1;
    let mut x = DMatrix::zeros(n, p);
    for r in 0..n {
        for j in 0..k {
            x[(r, j)] = d.x()[(r, j)];
        }
        x[(r, k + d.unit_keys()[r])] = 1.0;
        let t = d.time_keys()[r];
        if t > 0 {
            x[(r, k + nu + t - 1)] = 1.0;
        }
    }
    let xtx = x.transpose() * &x;
    let inv = xtx.clone().try_inverse().unwrap();
    let beta = &inv * x.transpose() * d.y();
    let e = d.y() - &x * &beta;
    let s2 = e.dot(&e) / (n - p) as f64;
    (beta.rows(0, k).into_owned(), inv.view((0, 0), (k, k)) * s2)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn absorbed_fit_matches_dummy_variables() {
    for seed in 0..5 {
        let d = panel(seed, 30, 6);
        let fit = ols_fit(&d, &FitOptions::default(), None).unwrap();
        let (beta, v) = dummy_ols(&d);
        for j in 0..2 {
            assert!(rel(fit.coefficients[j], beta[j]) < 1e-8, "seed {seed}");
            for l in 0..2 {
                assert!(rel(fit.vcov[j][l], v[(j, l)]) < 1e-8, "seed {seed}");
            }
        }
    }
}

#[test]
fn rescaling_outcome_rescales_estimates() {
    let d = panel(11, 20, 5);
    let c = 3.25;
    let scaled = DesignMatrix::new(
        d.unit_keys().to_vec(),
        d.time_keys().to_vec(),
        d.terms().to_vec(),
        d.x().clone(),
        d.y() * c,
    )
    .unwrap();
    for vcov in [VcovSpec::Iid, VcovSpec::Hc1, VcovSpec::ClusterByUnit] {
        let opts = FitOptions {
            vcov,
            ..FitOptions::default()
        };
        let a = ols_fit(&d, &opts, None).unwrap();
        let b = ols_fit(&scaled, &opts, None).unwrap();
        for j in 0..2 {
            assert!(rel(b.coefficients[j], c * a.coefficients[j]) < 1e-10);
            assert!(rel(b.vcov[j][j], c * c * a.vcov[j][j]) < 1e-10);
        }
    }
}

#[test]
fn cluster_with_singleton_units_equals_hc1() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 50;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| 1.0 + 2.0 * v + v.abs() * rng.random_range(-1.0..1.0))
        .collect();
    let d = DesignMatrix::from_columns(
        (0..n).collect(),
        vec![0; n],
        vec![
            (Term::new("const", "constant"), vec![1.0; n]),
            (Term::new("x", "covariate"), x),
        ],
        y,
    )
    .unwrap();
    let fit = |vcov| {
        ols_fit(
            &d,
            &FitOptions {
                fixed_effects: FixedEffects::None,
                vcov,
                ..FitOptions::default()
            },
            None,
        )
        .unwrap()
    };
    let a = fit(VcovSpec::Hc1);
    let b = fit(VcovSpec::ClusterByUnit);
    for j in 0..2 {
        for l in 0..2 {
            assert!((a.vcov[j][l] - b.vcov[j][l]).abs() < 1e-12 * a.vcov[j][j].abs());
        }
    }
}

fn min_max_eigen(v: &[Vec<f64>]) -> (f64, f64) {
    let k = v.len();
    let m = DMatrix::from_fn(k, k, |i, j| v[i][j]);
    let e = SymmetricEigen::new(m).eigenvalues;
    (e.min(), e.iter().fold(0.0f64, |a, b| a.max(b.abs())))
}

fn conley_case(seed: u64, kernel: Kernel, cutoff: f64) -> (Vec<Vec<f64>>, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu = 40;
    let ids: Vec<String> = (0..nu).map(|i| format!("u{i}")).collect();
    let coords: Vec<[f64; 2]> = (0..nu)
        .map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)])
        .collect();
    let geo = Geometry::from_points(PointSet::new(ids, coords, Metric::Planar).unwrap(), 20.0);
    let positions: Vec<usize> = (0..nu).collect();
    let d = panel(seed, nu, 4);
    let opts = FitOptions {
        vcov: VcovSpec::Conley { cutoff, kernel },
        ..FitOptions::default()
    };
    let fit = ols_fit(
        &d,
        &opts,
        Some(Locations {
            geometry: &geo,
            positions: &positions,
        }),
    )
    .unwrap();
    (fit.vcov, fit.clipped)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bartlett_conley_is_psd(seed in 0u64..10_000, cutoff in 5.0f64..80.0) {
        let (v, clipped) = conley_case(seed, Kernel::Bartlett, cutoff);
        prop_assert!(!clipped);
        let (lo, top) = min_max_eigen(&v);
        prop_assert!(lo >= -1e-10 * top, "min eigenvalue {lo}, max {top}");
    }

    #[test]
    fn uniform_conley_is_psd_after_clipping(seed in 0u64..10_000, cutoff in 5.0f64..80.0) {
        let (v, _) = conley_case(seed, Kernel::Uniform, cutoff);
        let (lo, top) = min_max_eigen(&v);
        prop_assert!(lo >= -1e-10 * top);
    }

    #[test]
    fn clipping_is_the_nearest_psd_matrix(vals in prop::collection::vec(-5.0f64..5.0, 9)) {
        let a = DMatrix::from_row_slice(3, 3, &vals);
        let a = (&a + a.transpose()) * 0.5;
        let (p, flagged) = clip_psd(&a);
        let e = SymmetricEigen::new(p.clone()).eigenvalues;
        let scale = a.abs().max().max(1.0);
        prop_assert!(e.min() >= -1e-10 * scale);
        // Optimality of the Frobenius projection: A − P is negative
        // semidefinite and orthogonal to P.
        let r = &a - &p;
        let er = SymmetricEigen::new(r.clone()).eigenvalues;
        prop_assert!(er.max() <= 1e-10 * scale);
        prop_assert!((&p * &r).abs().max() <= 1e-9 * scale * scale);
        let a_psd = SymmetricEigen::new(a.clone()).eigenvalues.min() >= -1e-12 * scale;
        if a_psd {
            prop_assert!(!flagged);
            prop_assert_eq!(p, a);
        } else {
            prop_assert!(flagged);
        }
    }
}
