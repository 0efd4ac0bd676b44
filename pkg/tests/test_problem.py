import numpy as np
import pytest
from pydantic import ValidationError

from otpbase.oproblem import (
    CountingOracle,
    Newsvendor,
    NewsvendorSpec,
    normal_cdf,
    normal_quantile,
)
from otpbase.oschemas import RngStream
from otpbase.outils import DegenerateDistributionError, InvalidInputError, NumericFailureError


@pytest.mark.parametrize(
    "alpha, expected",
    [
        (0.5, 0.0),
        (0.75, 0.6744897501960817),
        (0.975, 1.959963984540054),
        (0.01, -2.3263478740408408),
    ],
)
def test_normal_quantile(alpha: float, expected: float):
    z = normal_quantile(alpha)
    assert z == pytest.approx(expected, abs=1e-12)
    assert normal_cdf(z) == pytest.approx(alpha, abs=1e-14)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
def test_normal_quantile_rejects_levels(alpha: float):
    with pytest.raises(InvalidInputError):
        normal_quantile(alpha)


def test_default_spec():
    spec = NewsvendorSpec()
    assert spec.q == 5 and spec.d == 2
    assert spec.factor_weights.shape == (5, 2)
    np.testing.assert_allclose(spec.idiosyncratic_means, [0.0, 0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(spec.critical_ratio, 0.75)
    np.testing.assert_array_equal(spec.covariate_hi, [3.0, 3.0])
    assert np.all(spec.decision_hi >= 1.0)


def test_spec_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        NewsvendorSpec.model_validate({"q": 2, "colour": "red"})


@pytest.mark.parametrize(
    "data",
    [
        {"q": 2, "d": 1, "factor_weights": [[1.0, 1.0]]},
        {"q": 2, "shortage_cost": [1.0, 2.0, 3.0]},
        {"overage_cost": -1.0},
        {"d": 1, "covariate_lo": 3.0, "covariate_hi": 0.0},
    ],
)
def test_spec_validation(data: dict):
    with pytest.raises(ValidationError):
        NewsvendorSpec.model_validate(data)


def test_heterogeneous_costs():
    spec = NewsvendorSpec(q=2, d=1, shortage_cost=[3.0, 1.0], overage_cost=1.0)
    np.testing.assert_allclose(spec.critical_ratio, [0.75, 0.5])
    theta = Newsvendor(spec).optimal_solution(np.array([2.0]))
    mean, _ = Newsvendor(spec).demand_moments(np.array([2.0]))
    assert theta[0] > mean[0]
    assert theta[1] == pytest.approx(mean[1], abs=1e-12)


def test_closed_form_cost():
    problem = Newsvendor(NewsvendorSpec(q=1, d=1, idiosyncratic_means=[0.0]))
    x = np.array([2.0])
    assert problem.expected_cost(np.array([2.0]), x) == pytest.approx(0.9575, abs=5e-5)
    star = problem.optimal_solution(x)
    assert problem.expected_cost(star, x) == pytest.approx(0.7627, abs=5e-5)


@pytest.mark.parametrize("d", [1, 2, 10])
def test_optimum_has_zero_gradient(d: int, rng: np.random.Generator):
    problem = Newsvendor(NewsvendorSpec(d=d))
    lo, hi = problem.covariate_bounds
    for x in lo + (hi - lo) * rng.random((50, d)):
        star = problem.optimal_solution(x)
        assert np.linalg.norm(problem.cost_gradient(star, x)) < 1e-8


@pytest.mark.parametrize("d", [1, 2, 10])
def test_optimum_beats_random_perturbations(d: int, rng: np.random.Generator):
    problem = Newsvendor(NewsvendorSpec(d=d))
    lo, hi = problem.covariate_bounds
    for x in lo + (hi - lo) * rng.uniform(0.05, 1.0, (5, d)):
        star = problem.optimal_solution(x)
        best = problem.expected_cost(star, x)
        perturbed = star + rng.normal(0.0, 0.5, (100, problem.decision_dim))
        assert all(problem.expected_cost(p, x) >= best - 1e-12 for p in perturbed)


def test_cost_is_convex_along_lines(newsvendor: Newsvendor, rng: np.random.Generator):
    x = np.array([1.2, 2.1])
    star = newsvendor.optimal_solution(x)
    direction = rng.normal(size=newsvendor.decision_dim)
    ts = np.linspace(-2.0, 2.0, 41)
    costs = np.array([newsvendor.expected_cost(star + t * direction, x) for t in ts])
    assert np.all(costs[:-2] - 2 * costs[1:-1] + costs[2:] >= -1e-8)


def test_stochastic_gradient_values(newsvendor: Newsvendor):
    rng = RngStream(seed=3)
    x = np.array([1.0, 2.0])
    theta = newsvendor.optimal_solution(x)
    for _ in range(20):
        g = newsvendor.stochastic_gradient(theta, x, rng)
        assert set(np.unique(g)) <= {-3.0, 1.0}


def test_stochastic_gradient_is_unbiased(newsvendor: Newsvendor):
    rng = RngStream(seed=11, stream_id=2)
    x = np.array([1.5, 0.5])
    theta = newsvendor.optimal_solution(x) - 0.2
    draws = np.vstack([newsvendor.stochastic_gradient(theta, x, rng) for _ in range(100_000)])
    standard_error = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
    assert np.all(standard_error > 0.0)
    deviation = np.abs(draws.mean(axis=0) - newsvendor.cost_gradient(theta, x))
    assert np.all(deviation <= 4.0 * standard_error), deviation / standard_error


def test_demand_stream_is_reproducible(newsvendor: Newsvendor):
    x = np.array([1.0, 1.0])
    a = [newsvendor.sample_demand(x, RngStream(seed=5, stream_id=9)) for _ in range(2)]
    np.testing.assert_array_equal(a[0], a[1])
    b = newsvendor.sample_demand(x, RngStream(seed=5, stream_id=10))
    assert not np.array_equal(a[0], b)


def test_zero_noise_cost_is_degenerate(noiseless: Newsvendor):
    with pytest.raises(DegenerateDistributionError) as info:
        noiseless.expected_cost(np.array([1.0]), np.array([2.0]))
    assert isinstance(info.value, NumericFailureError)
    np.testing.assert_allclose(noiseless.optimal_solution(np.array([2.0])), [2.0])


def test_covariate_checks(newsvendor: Newsvendor):
    with pytest.raises(InvalidInputError):
        newsvendor.check_covariate([1.0, 2.0, 3.0])
    with pytest.raises(InvalidInputError):
        newsvendor.check_covariate([1.0, 3.5])
    np.testing.assert_array_equal(newsvendor.check_covariate([0.0, 3.0]), [0.0, 3.0])


def test_counting_oracle(newsvendor: Newsvendor):
    counter = CountingOracle(newsvendor)
    assert counter.problem is newsvendor
    assert counter.covariate_dim == 2
    rng = RngStream(seed=1)
    x = np.array([1.0, 1.0])
    for _ in range(7):
        counter.stochastic_gradient(newsvendor.optimal_solution(x), x, rng)
    assert counter.calls == 7
    counter.reset()
    assert counter.calls == 0
