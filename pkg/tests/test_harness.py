import functools

import numpy as np
import orjson
import pytest

from otpbase.oharness import (
    ExperimentConfig,
    ExperimentReport,
    allocation_table,
    emit_csv,
    emit_sweep_csv,
    emit_table_csv,
    load_config,
    load_design,
    load_model,
    pilot_select_T,
    rate_from_sweep_csv,
    run_otp_experiment,
    save_design,
    save_model,
    sweep_budget,
)
from otpbase.oproblem import Newsvendor, NewsvendorSpec
from otpbase.osgd import PrSgdConfig, batch_solve
from otpbase.osmooth import BasisSpec, SmootherSpec, fit
from otpbase.outils import (
    InfeasibleBudgetError,
    InvalidInputError,
    ParseError,
    ThresholdUnreachableError,
    VersionError,
)

SINGLE_PRODUCT = NewsvendorSpec(q=1, d=1, idiosyncratic_means=[0.0])
LINEAR = SmootherSpec(kind="lr", basis=BasisSpec(kind="polynomial", degree=1))


@pytest.fixture
def small_config():
    return ExperimentConfig(technique="knn", Gamma=400, replications=2, n_test=10, master_seed=11)


def test_call_accounting(small_config: ExperimentConfig):
    report = run_otp_experiment(small_config)
    assert report.simulation_calls == small_config.replications * report.plan.n * report.plan.T
    assert len(report.replications) == 2
    assert all(r.n == report.plan.n for r in report.replications)
    assert report.grand_min <= report.grand_mean <= report.grand_max


def test_experiment_is_reproducible(small_config: ExperimentConfig):
    a = run_otp_experiment(small_config, workers=1)
    b = run_otp_experiment(small_config, workers=8)
    assert a.reproducible() == b.reproducible()
    c = run_otp_experiment(small_config.model_copy(update={"master_seed": 12}))
    assert c.grand_mean != a.grand_mean


def test_exact_labels_with_matching_basis():
    config = ExperimentConfig(
        problem=SINGLE_PRODUCT,
        technique="lr",
        smoother=LINEAR,
        Gamma=2000,
        replications=2,
        n_test=20,
        label_mode="exact",
    )
    report = run_otp_experiment(config)
    assert report.grand_mean <= 1e-8
    assert report.offline_mean == 0.0
    assert report.simulation_calls == 0


def test_unfittable_plan_is_infeasible():
    config = ExperimentConfig(technique="lr", allocation="fixed_T", T_bar=4096, Gamma=4096, replications=1)
    with pytest.raises(InfeasibleBudgetError) as info:
        run_otp_experiment(config)
    assert info.value.exit_code == 3


def test_config_rejects_mismatched_smoother():
    with pytest.raises(ValueError):
        ExperimentConfig(technique="knn", smoother=LINEAR, Gamma=400)


def test_knn_experiment_uses_upper_split():
    report = run_otp_experiment(ExperimentConfig(technique="knn", Gamma=4000, replications=1, n_test=5))
    assert (report.plan.T, report.plan.n, report.plan.split) == (63, 63, "upper")
    midpoint = ExperimentConfig(technique="knn", Gamma=4000, replications=1, n_test=5, split="midpoint")
    assert run_otp_experiment(midpoint).plan.T == 22


def test_default_lr_basis_in_one_dimension():
    config = ExperimentConfig(problem=NewsvendorSpec(d=1), technique="lr", Gamma=4000, replications=2, n_test=20)
    report = run_otp_experiment(config)
    assert report.plan.basis_size == 2
    assert np.isfinite(report.grand_mean) and report.grand_mean >= 0.0


def test_allocation_table_marks_infeasible_cells():
    config = ExperimentConfig(technique="lr", Gamma=250, replications=1, n_test=5)
    rows = allocation_table(config, [250], T_bar=100)
    by_rule = {row.rule: row for row in rows}
    assert list(by_rule) == ["opt", "T_bar", "0.5T_bar", "1.5T_bar"]
    assert by_rule["T_bar"].grand_mean_gap is None
    assert by_rule["1.5T_bar"].grand_mean_gap is None
    assert (by_rule["0.5T_bar"].n, by_rule["0.5T_bar"].T) == (5, 50)
    assert by_rule["0.5T_bar"].grand_mean_gap is not None


def test_table_csv_leaves_infeasible_blank(tmp_path):
    config = ExperimentConfig(technique="lr", Gamma=250, replications=1, n_test=5)
    path = tmp_path / "table.csv"
    emit_table_csv(allocation_table(config, [250], T_bar=100), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "technique,gamma,rule,n,T,grand_mean_gap"
    assert lines[2] == "lr,250,T_bar,,,"


def test_pilot_unreachable():
    problem = Newsvendor()
    with pytest.raises(ThresholdUnreachableError) as info:
        pilot_select_T(problem, 0.8, [1, 2], gap_threshold=1e-9, n_pilot=8, replications=2)
    assert set(info.value.achieved) == {1, 2}
    assert info.value.exit_code == 4


@pytest.mark.parametrize("candidates", [[], [10, 5], [5, 5]])
def test_pilot_rejects_candidates(candidates):
    with pytest.raises(InvalidInputError):
        pilot_select_T(Newsvendor(), 0.8, candidates)


def test_pilot_selects_first_passing_T():
    result = pilot_select_T(Newsvendor(), 0.8, [50, 400], gap_threshold=0.5, n_pilot=8, replications=2)
    assert result.selected_T == list(result.achieved)[-1]
    assert result.achieved[result.selected_T] < 0.5


@pytest.mark.parametrize(
    "spec, tolerance",
    [(SmootherSpec(kind="knn", k=3), 1e-10), (SmootherSpec(kind="krr", lam=1e-3), 1e-8)],
)
def test_model_round_trip(spec: SmootherSpec, tolerance: float, newsvendor, random_design, rng, tmp_path):
    data = batch_solve(newsvendor, random_design, PrSgdConfig(T=30, gamma0=0.8), 4)
    fitted = fit(spec, data, newsvendor.decision_bounds)
    path = tmp_path / "model.json"
    save_model(fitted, path)
    restored = load_model(path)
    xs = 3.0 * rng.random((25, 2))
    np.testing.assert_allclose(restored.predict_many(xs), fitted.predict_many(xs), atol=tolerance)


def test_design_round_trip(random_design, tmp_path):
    path = tmp_path / "design.json"
    save_design(random_design, path)
    np.testing.assert_array_equal(load_design(path).points, random_design.points)


def test_truncated_artifact(random_design, tmp_path):
    path = tmp_path / "design.json"
    save_design(random_design, path)
    path.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(ParseError):
        load_design(path)


def test_wrong_version_and_kind(random_design, tmp_path):
    path = tmp_path / "design.json"
    save_design(random_design, path)
    document = orjson.loads(path.read_bytes())
    path.write_bytes(orjson.dumps({**document, "format_version": 2}))
    with pytest.raises(VersionError):
        load_design(path)
    path.write_bytes(orjson.dumps({**document, "kind": "solution_map"}))
    with pytest.raises(ParseError):
        load_design(path)


def test_load_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_bytes(orjson.dumps({"technique": "ks", "Gamma": 1000, "replications": 3}))
    config = load_config(path, master_seed=5, replications=None)
    assert (config.technique, config.Gamma, config.replications, config.master_seed) == ("ks", 1000, 3, 5)
    path.write_bytes(orjson.dumps({"technique": "ks", "Gamma": 1000, "budget": 3}))
    with pytest.raises(ValueError):
        load_config(path)
    path.write_text("{ not json")
    with pytest.raises(InvalidInputError):
        load_config(path)


def test_emit_csv(small_config: ExperimentConfig, tmp_path):
    report = run_otp_experiment(small_config)
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_csv(report, first)
    emit_csv(run_otp_experiment(small_config, workers=8), second)
    lines = first.read_text().splitlines()
    assert lines[0] == "technique,rule,gamma,n,T,hyper,replication,stat,value"
    assert len(lines) == 1 + small_config.replications * 4 + 2
    assert [line.split(",")[6:8] for line in lines[-2:]] == [["", "grand_mean"], ["", "offline_mean"]]
    assert first.read_bytes() == second.read_bytes()
    emit_csv(report, first, include_offline=False)
    assert first.read_text().splitlines()[-1].split(",")[7] == "grand_mean"


def test_sweep_rate_round_trip(tmp_path):
    config = ExperimentConfig(technique="knn", Gamma=200, replications=2, n_test=10)
    result = sweep_budget(config, [200, 800, 3200])
    assert [r.plan.Gamma for r in result.reports] == [200, 800, 3200]
    path = tmp_path / "sweep.csv"
    emit_sweep_csv(result, path)
    refit, stored = rate_from_sweep_csv(path)
    assert refit.slope == pytest.approx(stored["slope"], abs=1e-4)
    assert stored["r2"] == pytest.approx(result.rate.r_squared, abs=1e-5)


@pytest.mark.parametrize("gammas", [[200, 800], [800, 200, 3200]])
def test_sweep_rejects_budgets(gammas):
    with pytest.raises(InvalidInputError):
        sweep_budget(ExperimentConfig(technique="knn", Gamma=200, replications=1), gammas)


@functools.lru_cache(maxsize=None)
def benchmark_report(technique: str, d: int, gamma: int) -> ExperimentReport:
    config = ExperimentConfig(problem=NewsvendorSpec(d=d), technique=technique, Gamma=gamma, replications=20)
    return run_otp_experiment(config, workers=8)


@pytest.mark.slow
@pytest.mark.parametrize(
    "technique, d, gamma, lo, hi",
    [
        ("knn", 2, 4000, 0.025, 0.10),
        ("krr", 2, 4000, 0.0, 0.01),
        ("lr", 10, 30000, 0.0, 0.01),
        ("krr", 10, 30000, 0.0, 0.005),
    ],
)
def test_benchmark_scale_gaps(technique: str, d: int, gamma: int, lo: float, hi: float):
    report = benchmark_report(technique, d, gamma)
    assert lo <= report.grand_mean <= hi, report.plan.summary()


@pytest.mark.slow
@pytest.mark.parametrize("d, gamma", [(2, 4000), (10, 30000)])
def test_benchmark_ordering(d: int, gamma: int):
    means = {t: benchmark_report(t, d, gamma).grand_mean for t in ("knn", "ks", "lr", "krr")}
    assert means["krr"] <= means["lr"] <= min(means["knn"], means["ks"]), means


@pytest.mark.slow
@pytest.mark.parametrize("technique", ["krr", "lr"])
def test_online_matches_offline(technique: str):
    report = benchmark_report(technique, 2, 4000)
    assert report.online_offline_ratio <= 1.1


@pytest.mark.slow
@pytest.mark.parametrize("technique, lo, hi", [("krr", -1.3, -0.6), ("lr", -1.3, -0.6), ("knn", -0.75, -0.25)])
def test_budget_sweep_rates(technique: str, lo: float, hi: float):
    config = ExperimentConfig(technique=technique, Gamma=512, replications=20)
    result = sweep_budget(config, [2**p for p in range(9, 15)], workers=4)
    assert lo <= result.rate.slope <= hi


@pytest.mark.slow
@pytest.mark.parametrize("d, gamma0, lo, hi", [(2, 0.8, 0.012, 0.025), (10, 4.0, 0.014, 0.027)])
def test_benchmark_pilot(d: int, gamma0: float, lo: float, hi: float):
    result = pilot_select_T(Newsvendor(NewsvendorSpec(d=d)), gamma0, [100], gap_threshold=0.5, workers=4)
    assert lo <= result.achieved[100] <= hi
