import math

import numpy as np
import pytest

from otpbase.odesign import CovariateDesign, farthest_point_design
from otpbase.oeval import empirical_rate
from otpbase.oproblem import CountingOracle, Newsvendor, NewsvendorSpec, SimulationProblem
from otpbase.oschemas import RngStream, derive_stream
from otpbase.osgd import (
    PrSgdConfig,
    batch_solve,
    default_gamma0,
    estimate_bias_variance,
    project,
    solve,
    step_size,
)
from otpbase.outils import InvalidInputError, NumericFailureError


class FlakyProblem(SimulationProblem):
    """Scalar quadratic whose oracle returns NaN on a chosen call."""

    def __init__(self, fail_at: int) -> None:
        self.fail_at = fail_at
        self.calls = 0

    @property
    def covariate_dim(self) -> int:
        return 1

    @property
    def decision_dim(self) -> int:
        return 1

    @property
    def covariate_bounds(self):
        return np.zeros(1), np.ones(1)

    @property
    def decision_bounds(self):
        return np.zeros(1), np.ones(1)

    def stochastic_gradient(self, theta, x, rng):
        self.calls += 1
        if self.calls == self.fail_at:
            return np.array([np.nan])
        return theta - x


@pytest.mark.parametrize(
    "theta, expected",
    [
        ([1.0, 2.0], [1.0, 2.0]),
        ([-1.0, 5.0], [0.0, 3.0]),
        ([3.0, 0.0], [3.0, 0.0]),
    ],
)
def test_project(theta, expected):
    np.testing.assert_array_equal(project(theta, np.zeros(2), np.full(2, 3.0)), expected)


def test_project_is_idempotent(rng: np.random.Generator):
    lo, hi = np.zeros(4), np.full(4, 2.0)
    for theta in rng.normal(1.0, 3.0, (100, 4)):
        once = project(theta, lo, hi)
        np.testing.assert_array_equal(project(once, lo, hi), once)


@pytest.mark.parametrize("d, expected", [(1, 0.8), (2, 0.8), (10, 4.0), (50, 4.0)])
def test_default_gamma0(d: int, expected: float):
    assert default_gamma0(d) == pytest.approx(expected)


def test_default_gamma0_interpolates():
    values = [default_gamma0(d) for d in range(2, 11)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_step_size():
    assert step_size(0.8, 1) == pytest.approx(0.8 * math.log(2) / 2)
    assert step_size(2.0, 99) == pytest.approx(2.0 * math.log(100) / 100)


def test_noiseless_dynamics(noiseless: Newsvendor):
    config = PrSgdConfig(T=2000, gamma0=0.8, theta0_policy="fixed", theta0=[1.0])
    result = solve(noiseless, [2.0], config, RngStream(seed=0))
    assert abs(result.final_iterate[0] - 2.0) < 0.05


def test_zero_iterations_return_start(newsvendor: Newsvendor):
    config = PrSgdConfig(T=0, gamma0=0.8, theta0_policy="fixed", theta0=np.full(5, 2.5))
    result = solve(newsvendor, [1.0, 1.0], config, RngStream(seed=0))
    np.testing.assert_array_equal(result.theta_bar, np.full(5, 2.5))


def test_default_start_is_lower_corner(newsvendor: Newsvendor):
    lo, hi = newsvendor.decision_bounds
    result = solve(newsvendor, [1.0, 1.0], PrSgdConfig(T=0, gamma0=0.8), RngStream(seed=0))
    np.testing.assert_array_equal(result.theta_bar, lo)
    centered = PrSgdConfig(T=0, gamma0=0.8, theta0_policy="box_center")
    result = solve(newsvendor, [1.0, 1.0], centered, RngStream(seed=0))
    np.testing.assert_allclose(result.theta_bar, 0.5 * (lo + hi))


@pytest.mark.parametrize("d, gamma0, limit", [(2, 0.8, 0.05), (10, 4.0, 0.05)])
def test_averaged_start_stays_close(d: int, gamma0: float, limit: float):
    problem = Newsvendor(NewsvendorSpec(d=d))
    x = np.full(d, 1.5)
    config = PrSgdConfig(T=100, gamma0=gamma0)
    gaps = []
    for r in range(20):
        theta = solve(problem, x, config, RngStream(seed=r)).theta_bar
        optimum = problem.expected_cost(problem.optimal_solution(x), x)
        gaps.append(problem.expected_cost(theta, x) / optimum - 1.0)
    assert np.mean(gaps) < limit


def test_solve_is_deterministic(newsvendor: Newsvendor):
    config = PrSgdConfig(T=200, gamma0=0.8)
    a = solve(newsvendor, [1.0, 2.0], config, RngStream(seed=3, stream_id=4))
    b = solve(newsvendor, [1.0, 2.0], config, RngStream(seed=3, stream_id=4))
    np.testing.assert_array_equal(a.theta_bar, b.theta_bar)
    assert (a.seed, a.stream_id) == (3, 4)


def test_trace_is_feasible_and_averages(newsvendor: Newsvendor):
    config = PrSgdConfig(T=300, gamma0=0.8, record_trace=True)
    result = solve(newsvendor, [2.5, 0.5], config, RngStream(seed=9))
    lo, hi = newsvendor.decision_bounds
    assert result.trace.shape == (301, 5)
    assert np.all((result.trace >= lo) & (result.trace <= hi))
    np.testing.assert_allclose(result.trace.mean(axis=0), result.theta_bar, rtol=1e-12)
    np.testing.assert_array_equal(result.trace[-1], result.final_iterate)


def test_non_finite_gradient():
    config = PrSgdConfig(T=10, gamma0=0.5)
    with pytest.raises(NumericFailureError) as info:
        solve(FlakyProblem(fail_at=4), [0.5], config, RngStream(seed=0))
    assert info.value.iteration == 4


def test_batch_failure_carries_covariate():
    design = CovariateDesign(
        points=[[0.1], [0.5], [0.9]],
        domain_lo=[0.0],
        domain_hi=[1.0],
        kind="grid",
        fill_distance_estimate=0.2,
        separation_distance=0.2,
    )
    with pytest.raises(NumericFailureError) as info:
        batch_solve(FlakyProblem(fail_at=13), design, PrSgdConfig(T=5, gamma0=0.5), master_seed=0)
    assert info.value.covariate == 2
    assert info.value.iteration == 3
    assert "covariate=2" in info.value.detail


def test_singleton_batch_matches_solve(newsvendor: Newsvendor):
    design = farthest_point_design(0.0, 3.0, 1, 10, RngStream(seed=1), d=2)
    config = PrSgdConfig(T=100, gamma0=0.8)
    batch = batch_solve(newsvendor, design, config, master_seed=42)
    single = solve(newsvendor, design.points[0], config, derive_stream(42, 0))
    np.testing.assert_array_equal(batch.solutions[0].theta_bar, single.theta_bar)


def test_batch_is_schedule_independent(newsvendor: Newsvendor, random_design: CovariateDesign):
    config = PrSgdConfig(T=50, gamma0=0.8)
    serial = batch_solve(newsvendor, random_design, config, master_seed=5, workers=1)
    parallel = batch_solve(newsvendor, random_design, config, master_seed=5, workers=8)
    np.testing.assert_array_equal(serial.theta_bars, parallel.theta_bars)
    for a, b in zip(serial.solutions, parallel.solutions):
        assert a.stream_id == b.stream_id


def test_batch_call_accounting(newsvendor: Newsvendor, random_design: CovariateDesign):
    counter = CountingOracle(newsvendor)
    data = batch_solve(counter, random_design, PrSgdConfig(T=25, gamma0=0.8), 0, workers=4)
    assert counter.calls == random_design.n * 25 == data.simulation_calls
    for i, sol in enumerate(data.solutions):
        np.testing.assert_array_equal(sol.x, random_design.points[i])


@pytest.mark.parametrize("label_mode", ["exact", "classical"])
def test_label_modes_skip_the_oracle(
    label_mode: str, newsvendor: Newsvendor, random_design: CovariateDesign
):
    counter = CountingOracle(newsvendor)
    data = batch_solve(
        counter,
        random_design,
        PrSgdConfig(T=400, gamma0=0.8),
        0,
        label_mode=label_mode,
    )
    assert counter.calls == 0 and data.simulation_calls == 0
    exact = np.vstack([newsvendor.optimal_solution(x) for x in random_design.points])
    if label_mode == "exact":
        np.testing.assert_array_equal(data.theta_bars, exact)
    else:
        assert 0.0 < np.abs(data.theta_bars - exact).max() < 1.0


def test_warm_start(newsvendor: Newsvendor, random_design: CovariateDesign):
    config = PrSgdConfig(T=30, gamma0=0.8, theta0_policy="warm_start")
    a = batch_solve(newsvendor, random_design, config, 2, workers=4)
    b = batch_solve(newsvendor, random_design, config, 2, workers=1)
    np.testing.assert_array_equal(a.theta_bars, b.theta_bars)


def test_fixed_policy_needs_start():
    with pytest.raises(ValueError):
        PrSgdConfig(T=10, gamma0=0.8, theta0_policy="fixed")


def test_solution_set_alignment(newsvendor: Newsvendor, random_design: CovariateDesign):
    data = batch_solve(newsvendor, random_design, PrSgdConfig(T=5, gamma0=0.8), 0)
    with pytest.raises(ValueError):
        type(data)(
            design=data.design,
            solutions=data.solutions[::-1],
            config=data.config,
            master_seed=0,
        )
    with pytest.raises(InvalidInputError):
        data.with_labels(np.zeros((3, 5)))


def test_noiseless_variance(noiseless: Newsvendor):
    bias, variance = estimate_bias_variance(noiseless, [2.0], PrSgdConfig(T=200, gamma0=0.8), 5, 0)
    assert variance.max() <= 1e-20
    assert np.all(np.isfinite(bias))


@pytest.mark.slow
def test_variance_scaling():
    problem = Newsvendor(NewsvendorSpec(d=1))
    Ts = [100, 400, 1600]
    results = [
        estimate_bias_variance(problem, [2.0], PrSgdConfig(T=T, gamma0=0.8), 2000, 17, workers=4)
        for T in Ts
    ]
    variances = [float(np.mean(v)) for _, v in results]
    rate = empirical_rate(Ts, variances)
    assert -1.3 <= rate.slope <= -0.7
    assert np.abs(results[-1][0]).mean() < np.abs(results[0][0]).mean()
