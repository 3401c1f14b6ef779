use stdegrade_core::fit::{irwgls_fit, log_likelihood, mle_fit, read_fit_csv, write_fit_csv, FitOptions};
use stdegrade_core::rng::seeded;
use stdegrade_core::study::{simulate_study, study_params};
use stdegrade_core::validate::{family_selection_report, SelectionOptions};
use stdegrade_core::{CovFamily, ForwardOptions};

#[test]
fn mle_beats_the_truth_and_round_trips_through_csv() {
    let truth = study_params(CovFamily::Gaussian);
    let (y, cov) = simulate_study(&truth, 11, 8, &mut seeded(21)).unwrap();
    let fit = mle_fit(&y, &cov, CovFamily::Gaussian, None, &FitOptions::default()).unwrap();
    let at_truth = log_likelihood(&truth, &y, &cov, &ForwardOptions::default()).unwrap();
    assert!(fit.loglik >= at_truth - 1e-6);
    assert!(fit.std_errors.iter().all(|s| s.is_finite() && *s > 0.0));
    assert!((fit.estimates[0] - 0.1).abs() < 0.05);

    let mut buf = Vec::new();
    write_fit_csv(&fit, &mut buf).unwrap();
    let (family, params) = read_fit_csv(buf.as_slice()).unwrap();
    assert_eq!(family, CovFamily::Gaussian);
    let again = log_likelihood(&params, &y, &cov, &ForwardOptions::default()).unwrap();
    assert!((again - fit.loglik).abs() <= 1e-6 * fit.loglik.abs());
}

#[test]
fn irwgls_with_known_propagation_recovers_the_regression() {
    let truth = study_params(CovFamily::Gaussian);
    let (y, cov) = simulate_study(&truth, 9, 6, &mut seeded(4)).unwrap();
    let fit = irwgls_fit(&y, &cov, CovFamily::Gaussian, &truth.prop, &FitOptions::default()).unwrap();
    let beta = *fit.params.beta.first().unwrap();
    assert!((beta - 1.0).abs() < 0.1, "beta {beta}");
    assert!(fit.params.spat.sill() > 0.0);
}

#[test]
fn selection_over_one_family_is_trivial() {
    let truth = study_params(CovFamily::Gaussian);
    let (y, cov) = simulate_study(&truth, 9, 6, &mut seeded(5)).unwrap();
    let opts = SelectionOptions { n_boot: 50, ..Default::default() };
    let report = family_selection_report(&y, &cov, &[CovFamily::Gaussian], &opts).unwrap();
    assert_eq!(report.entries.len(), 1);
    assert_eq!(report.best(), Some(CovFamily::Gaussian));
    let mut text = Vec::new();
    report.write_text(&mut text).unwrap();
    assert!(String::from_utf8(text).unwrap().contains("gaussian"));
}
