"""Smoke test for the stdegrade Python extension.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`.
"""

import math
import os
import tempfile

import stdegrade


def main():
    truth = stdegrade.ModelParams.study("gaussian")
    assert truth.family == "gaussian" and truth.beta == [1.0]

    field, cov = stdegrade.simulate_study(truth, 9, 6, seed=3)
    assert field.shape == (6, 9, 9)
    again, _ = stdegrade.simulate_study(truth, 9, 6, seed=3)
    assert field.values() == again.values()

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "field.csv")
        field.write_csv(path)
        assert stdegrade.FieldSeries.read_csv(path).values() == field.values()

    ll = stdegrade.log_likelihood(truth, field, cov)
    assert math.isfinite(ll)

    fit = stdegrade.mle_fit(field, cov, "gaussian")
    assert fit.names[0] == "lambda" and len(fit.estimates) == 8
    assert fit.loglik >= ll - 1e-6
    print(fit.report())

    c0 = stdegrade.st_covariance(truth, (0.0, 0.0), 0)
    c1 = stdegrade.st_covariance(truth, (3.0, 0.0), 0)
    assert c0 > c1 > 0.0

    emp, theory = stdegrade.semivariograms(fit.params, field, cov)
    assert len(emp) == len(theory) > 0

    future = stdegrade.CovariateSeries.study(9, 9, 31, t0=5.0)
    study = stdegrade.passage_study(truth, future, field, threshold=4.0, horizon=35.0, runs=20, seed=1)
    assert len(study.fpt) == 20 and 0.0 <= study.censoring_rate <= 1.0

    err, passed = stdegrade.verify_pde()
    assert passed and err < 1e-4

    try:
        stdegrade.ModelParams(-1.0, (0.0, 0.0), (1.0, 1.0), "gaussian", [0.01, 5.0], [1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("negative decay rate was accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
