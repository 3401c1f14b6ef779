use proptest::prelude::*;

use stdegrade_core::fit::{log_likelihood, ResidualSeries};
use stdegrade_core::forward::simulate;
use stdegrade_core::kernel::{convolve, discretize, kernel_spec};
use stdegrade_core::lifetime::run_passage_study;
use stdegrade_core::rng::seeded;
use stdegrade_core::st_cov::{st_covariance, StCovQuery};
use stdegrade_core::validate::{empirical_semivariogram, theoretical_semivariogram, VariogramBins};
use stdegrade_core::{
    BoundaryMode, CovFamily, CovariateSeries, Field2, FieldSeries, ForwardOptions, ModelParams, PropagationParams,
    SpatialCovModel, SpatialGrid, TimeAxis,
};

fn family_strategy() -> impl Strategy<Value = CovFamily> {
    prop_oneof![Just(CovFamily::Exponential), Just(CovFamily::Gaussian), Just(CovFamily::Matern)]
}

fn spatial_model(family: CovFamily, sill: f64, range: f64) -> SpatialCovModel {
    match family {
        CovFamily::Exponential => SpatialCovModel::exponential(sill, range),
        CovFamily::Gaussian => SpatialCovModel::gaussian(sill, range),
        CovFamily::Matern => SpatialCovModel::matern(sill, range, 1.5),
    }
    .unwrap()
}

fn params(lambda: f64, v: (f64, f64), rho: (f64, f64), spat: SpatialCovModel, beta: Vec<f64>) -> ModelParams {
    ModelParams::new(PropagationParams::new(lambda, v, rho.0, rho.1).unwrap(), spat, beta).unwrap()
}

fn small_problem(seed: u64) -> (ModelParams, FieldSeries, CovariateSeries) {
    let grid = SpatialGrid::new(6, 5).unwrap();
    let times = TimeAxis::new(5, 1.0, 0.0).unwrap();
    let cov = CovariateSeries::from_fn(grid, times, 1, |t, _, r, c| 1.0 + 0.2 * ((r + c + t) as f64).sin()).unwrap();
    let p = params(0.2, (0.3, 0.1), (0.5, 0.3), SpatialCovModel::gaussian(0.05, 1.5).unwrap(), vec![0.7]);
    let y = simulate(&p, &cov, &Field2::zeros(6, 5), &mut seeded(seed), &ForwardOptions::default()).unwrap();
    (p, y, cov)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn robust_variogram_ignores_per_slice_offsets(
        values in prop::collection::vec(-3.0f64..3.0, 4 * 16),
        offsets in prop::collection::vec(-10.0f64..10.0, 4),
    ) {
        let grid = SpatialGrid::new(4, 4).unwrap();
        let times = TimeAxis::new(4, 1.0, 0.0).unwrap();
        let shifted: Vec<f64> = values.iter().enumerate().map(|(i, v)| v + offsets[i / 16]).collect();
        let bins = VariogramBins::default();
        let a = empirical_semivariogram(&ResidualSeries::new(FieldSeries::new(grid, times, values).unwrap()).unwrap(), &bins).unwrap();
        let b = empirical_semivariogram(&ResidualSeries::new(FieldSeries::new(grid, times, shifted).unwrap()).unwrap(), &bins).unwrap();
        prop_assert_eq!(a.bins.len(), b.bins.len());
        for (x, y) in a.bins.iter().zip(&b.bins) {
            prop_assert!((x.gamma - y.gamma).abs() <= 1e-9 * (1.0 + x.gamma));
            prop_assert_eq!(x.pairs, y.pairs);
        }
    }

    #[test]
    fn theoretical_variogram_rises_to_the_sill(
        family in family_strategy(),
        sill in 0.01f64..2.0,
        range in 0.5f64..8.0,
        scale in 0.5f64..3.0,
    ) {
        let m = spatial_model(family, sill, range);
        let d: Vec<f64> = (0..60).map(|i| i as f64 * 0.5).collect();
        let v = theoretical_semivariogram(&m, scale, &d).unwrap();
        prop_assert!(v.bins[0].gamma.abs() <= 1e-12);
        for w in v.bins.windows(2) {
            prop_assert!(w[1].gamma >= w[0].gamma - 1e-12);
        }
        prop_assert!(v.bins.last().unwrap().gamma <= sill * scale * (1.0 + 1e-9));
    }

    #[test]
    fn covariance_is_symmetric_in_space_at_lag_zero(
        dx in -4.0f64..4.0,
        dy in -4.0f64..4.0,
        vx in -0.5f64..0.5,
        vy in -0.5f64..0.5,
    ) {
        let p = params(0.3, (vx, vy), (0.8, 0.4), SpatialCovModel::gaussian(0.02, 3.0).unwrap(), vec![]);
        let a = st_covariance(&p, &StCovQuery::new((dx, dy), 0, 1.0)).unwrap();
        let b = st_covariance(&p, &StCovQuery::new((-dx, -dy), 0, 1.0)).unwrap();
        let var = st_covariance(&p, &StCovQuery::new((0.0, 0.0), 0, 1.0)).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * var);
        prop_assert!(a.abs() <= var * (1.0 + 1e-10));
    }

    #[test]
    fn kernel_mass_is_the_decay_factor(
        lambda in 0.0f64..1.0,
        vx in -1.0f64..1.0,
        vy in -1.0f64..1.0,
        rho1 in 0.3f64..2.0,
        rho2 in 0.3f64..2.0,
    ) {
        let prop = PropagationParams::new(lambda, (vx, vy), rho1, rho2).unwrap();
        let k = discretize(&kernel_spec(&prop, 1.0).unwrap(), 1.0, 6.0).unwrap();
        prop_assert!((k.tap_sum() * k.weight() - (-lambda).exp()).abs() <= 1e-6);
    }

    #[test]
    fn convolution_is_linear(
        a in prop::collection::vec(-1.0f64..1.0, 100),
        b in prop::collection::vec(-1.0f64..1.0, 100),
        s in -3.0f64..3.0,
    ) {
        let prop = PropagationParams::new(0.1, (0.4, -0.2), 0.7, 0.5).unwrap();
        let k = discretize(&kernel_spec(&prop, 1.0).unwrap(), 1.0, 4.0).unwrap();
        let fa = Field2::from_vec(10, 10, a).unwrap();
        let fb = Field2::from_vec(10, 10, b).unwrap();
        let mut combo = fa.clone();
        combo.axpy(s, &fb);
        let lhs = convolve(&combo, &k, BoundaryMode::ZeroPad);
        let mut rhs = convolve(&fa, &k, BoundaryMode::ZeroPad);
        rhs.axpy(s, &convolve(&fb, &k, BoundaryMode::ZeroPad));
        for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn field_csv_round_trips_exactly(values in prop::collection::vec(-1e6f64..1e6, 3 * 12)) {
        let grid = SpatialGrid::new(4, 3).unwrap();
        let times = TimeAxis::new(3, 0.5, 2.0).unwrap();
        let y = FieldSeries::new(grid, times, values).unwrap();
        let mut buf = Vec::new();
        y.write_csv(&mut buf).unwrap();
        let back = FieldSeries::read_csv(buf.as_slice(), 1.0).unwrap();
        prop_assert_eq!(back.values(), y.values());
        prop_assert_eq!(back.times(), y.times());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn likelihood_is_invariant_to_covariate_rescaling(seed in 0u64..1000, c in 0.1f64..10.0) {
        let (p, y, cov) = small_problem(seed);
        let a = log_likelihood(&p, &y, &cov, &ForwardOptions::default()).unwrap();
        let mut q = p.clone();
        q.beta = p.beta.iter().map(|b| b / c).collect();
        let b = log_likelihood(&q, &y, &cov.scaled(c).unwrap(), &ForwardOptions::default()).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
    }

    #[test]
    fn passage_map_is_a_distribution_and_times_respect_the_window(seed in 0u64..1000, scale in 1.05f64..1.6) {
        let (p, y, _) = small_problem(seed);
        let initial = y.slice(y.n_times() - 1);
        let grid = *y.grid();
        let future = CovariateSeries::constant(grid, TimeAxis::new(31, 1.0, 4.0).unwrap(), 1.0).unwrap();
        let threshold = scale * initial.max().max(0.1);
        let s = run_passage_study(&p, &future, &initial, threshold, 34.0, 30, seed, &ForwardOptions::default()).unwrap();
        for x in &s.samples {
            prop_assert!(x.fpt > 4.0 && x.fpt <= 34.0);
            prop_assert_eq!(x.censored, x.fpl.is_none());
        }
        let total: f64 = s.fpl_probability.iter().sum();
        if s.censoring_rate < 1.0 {
            prop_assert!((total - 1.0).abs() <= 1e-12);
        } else {
            prop_assert_eq!(total, 0.0);
        }
    }
}

#[test]
fn passage_times_grow_with_the_threshold() {
    let (p, y, _) = small_problem(7);
    let initial = y.slice(y.n_times() - 1);
    let future = CovariateSeries::constant(*y.grid(), TimeAxis::new(41, 1.0, 4.0).unwrap(), 1.0).unwrap();
    let base = initial.max();
    let key = |censored: bool, t: f64| if censored { f64::INFINITY } else { t };
    let mut previous: Option<Vec<f64>> = None;
    for f in [1.1, 1.3, 1.6, 2.0] {
        let s = run_passage_study(&p, &future, &initial, f * base, 44.0, 40, 11, &ForwardOptions::default()).unwrap();
        let times: Vec<f64> = s.samples.iter().map(|x| key(x.censored, x.fpt)).collect();
        if let Some(prev) = &previous {
            assert!(prev.iter().zip(&times).all(|(a, b)| a <= b));
        }
        previous = Some(times);
    }
}
