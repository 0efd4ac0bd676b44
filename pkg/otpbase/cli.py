import csv
import os
from pathlib import Path
from typing import Any, Optional

import click
import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from .oalloc import allocate, fixed_T_plan, validate_plan
from .oconst import (
    DEFAULT_GAP_THRESHOLD,
    DEFAULT_N_TEST,
    DEFAULT_PILOT_COVARIATES,
    DEFAULT_POOL_FACTOR,
    DEFAULT_REPLICATIONS,
    DEFAULT_T_BAR,
    DEFAULT_TEST_MARGIN,
    ENV_SEED,
    ENV_WORKERS,
    EXIT_INVALID_CONFIG,
    FULL_SCALE_REPLICATIONS,
)
from .odesign import build_design, farthest_point_design, grid_design, sample_interior
from .oeval import gap_records, summarize
from .oharness import (
    ExperimentConfig,
    allocation_table,
    emit_csv,
    emit_sweep_csv,
    emit_table_csv,
    load_design,
    load_model,
    load_solutions,
    pilot_select_T,
    run_otp_experiment,
    save_design,
    save_model,
    save_solutions,
    sweep_budget,
)
from .oproblem import Newsvendor, NewsvendorSpec
from .oschemas import derive_stream, read_document, stream_key, write_artifact
from .osgd import PrSgdConfig, batch_solve, default_gamma0
from .osmooth import SmootherSpec, fit
from .outils import InvalidInputError, OtpError, ParseError, set_level

TECHNIQUES = click.Choice(["knn", "ks", "lr", "krr"])
U64 = click.IntRange(0, 2**64 - 1)


class OtpGroup(click.Group):
    """Maps library errors onto the documented exit codes."""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except OtpError as e:
            click.echo(f"error: {e.detail}", err=True)
            ctx.exit(e.exit_code)
        except ValidationError as e:
            click.echo(f"error: invalid config: {e}", err=True)
            ctx.exit(EXIT_INVALID_CONFIG)


def _ints(text: str) -> list[int]:
    try:
        return [int(float(v)) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise InvalidInputError(f"expected a comma-separated list of integers, got {text!r}") from e


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise InvalidInputError(f"expected comma-separated numbers, got {text!r}") from e


def _fmt_row(values: Any) -> str:
    return ",".join(format(float(v), ".6g") for v in np.atleast_1d(values))


class Session:
    """Global flags plus the optional config document."""

    def __init__(
        self,
        config: Optional[Path],
        seed: Optional[int],
        workers: Optional[int],
        as_json: bool,
        out: Optional[Path],
        paper_scale: bool,
    ) -> None:
        self.document: dict[str, Any] = {}
        if config is not None:
            try:
                document = read_document(config)
            except ParseError as e:
                raise InvalidInputError(f"invalid config: {e.detail}") from e
            if not isinstance(document, dict):
                raise InvalidInputError(f"{config}: config must be a JSON object")
            self.document = document
        self.seed = seed
        self.workers = workers if workers is not None else int(os.environ.get(ENV_WORKERS, "1"))
        self.as_json = as_json
        self.out = out
        self.paper_scale = paper_scale

    @property
    def master_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        if "master_seed" in self.document:
            return int(self.document["master_seed"])
        return int(os.environ.get(ENV_SEED, "0"))

    def problem(self, d: Optional[int] = None, q: Optional[int] = None) -> NewsvendorSpec:
        data = dict(self.document.get("problem") or {})
        if d is not None:
            data["d"] = d
        if q is not None:
            data["q"] = q
        return NewsvendorSpec.model_validate(data)

    def experiment(self, **fields: Any) -> ExperimentConfig:
        data = dict(self.document)
        problem = fields.pop("problem", None)
        data.update({k: v for k, v in fields.items() if v is not None})
        if problem is not None:
            data["problem"] = problem
        data["master_seed"] = self.master_seed
        if self.paper_scale:
            data["replications"] = FULL_SCALE_REPLICATIONS
        return ExperimentConfig.model_validate(data)

    def emit(self, model: BaseModel, text: str) -> None:
        click.echo(model.model_dump_json() if self.as_json else text)


pass_session = click.make_pass_decorator(Session)


@click.group(cls=OtpGroup)
@click.option("--config", type=click.Path(path_type=Path), help="ExperimentConfig JSON document.")
@click.option("--seed", type=U64, default=None, help="Master seed (overrides config and OTP_SEED).")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Worker threads.")
@click.option("--json", "as_json", is_flag=True, help="Print JSON instead of text.")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output artifact path.")
@click.option("--paper-scale", is_flag=True, help=f"Use {FULL_SCALE_REPLICATIONS} replications.")
@click.option("--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def cli(
    ctx: click.Context,
    config: Optional[Path],
    seed: Optional[int],
    workers: Optional[int],
    as_json: bool,
    out: Optional[Path],
    paper_scale: bool,
    verbose: bool,
) -> None:
    """Optimize-then-predict contextual simulation optimization."""
    load_dotenv()
    if verbose:
        set_level("DEBUG")
    ctx.obj = Session(config, seed, workers, as_json, out, paper_scale)


@cli.command("allocate")
@click.option("--technique", type=TECHNIQUES, required=True)
@click.option("--gamma", type=int, required=True, help="Total simulation budget.")
@click.option("--d", type=int, default=None, help="Covariate dimension.")
@click.option("--m", type=float, default=None, help="Smoothness (krr); omit for infinite.")
@click.option("--T-bar", "T_bar", type=int, default=None, help="Use the fixed-T rule.")
@click.option("--setting", type=click.Choice(["otp", "cr"]), default="otp")
@click.option(
    "--split",
    type=click.Choice(["midpoint", "upper"]),
    default="midpoint",
    help="kNN/KS T convention: interval midpoint or just below its upper end.",
)
@pass_session
def allocate_cmd(
    session: Session,
    technique: str,
    gamma: int,
    d: Optional[int],
    m: Optional[float],
    T_bar: Optional[int],
    setting: str,
    split: str,
) -> None:
    """Print the budget split for a technique."""
    dim = d if d is not None else session.problem().d
    if T_bar is None:
        plan = allocate(technique, gamma, dim, m, split=split)  # type: ignore[arg-type]
    else:
        plan = fixed_T_plan(technique, gamma, T_bar, dim, m)  # type: ignore[arg-type]
    findings = validate_plan(plan, setting)  # type: ignore[arg-type]
    if session.out is not None:
        write_artifact(session.out, "plan", plan)
    lines = [plan.summary()] + [f"{f.level}: {f.message}" for f in findings]
    session.emit(plan, "\n".join(lines))


@cli.command("design")
@click.option("--kind", type=click.Choice(["grid", "farthest_point"]), default="farthest_point")
@click.option("--n", type=int, default=None, help="Design size (farthest_point).")
@click.option("--per-axis", type=int, default=None, help="Points per axis (grid).")
@click.option("--d", type=int, default=None)
@click.option("--pool-factor", type=int, default=DEFAULT_POOL_FACTOR)
@pass_session
def design_cmd(
    session: Session,
    kind: str,
    n: Optional[int],
    per_axis: Optional[int],
    d: Optional[int],
    pool_factor: int,
) -> None:
    """Build a covariate design over the problem's covariate box."""
    problem = Newsvendor(session.problem(d=d))
    lo, hi = problem.covariate_bounds
    rng = derive_stream(session.master_seed, "design")
    if kind == "grid":
        if per_axis is not None:
            design = grid_design(lo, hi, per_axis, problem.covariate_dim)
        elif n is not None:
            design = build_design("grid", lo, hi, n, rng, problem.covariate_dim)
        else:
            raise InvalidInputError("grid designs need --per-axis or --n")
    else:
        if n is None:
            raise InvalidInputError("farthest_point designs need --n")
        design = farthest_point_design(lo, hi, n, pool_factor * n, rng, d=problem.covariate_dim)
    if session.out is not None:
        save_design(design, session.out)
    text = (
        f"{design.kind} n={design.n} d={design.d} "
        f"fill={design.fill_distance_estimate:.6g} "
        f"separation={design.separation_distance:.6g} "
        f"ratio={design.quasi_uniformity:.4g}"
    )
    session.emit(design, text)


@cli.command("offline")
@click.option("--design", "design_path", type=click.Path(path_type=Path), required=True)
@click.option("--T", "T", type=int, required=True, help="PR-SGD iterations per covariate.")
@click.option("--gamma0", type=float, default=None)
@click.option("--q", type=int, default=None, help="Number of products.")
@click.option("--label-mode", type=click.Choice(["prsgd", "exact", "classical"]), default="prsgd")
@pass_session
def offline_cmd(
    session: Session,
    design_path: Path,
    T: int,
    gamma0: Optional[float],
    q: Optional[int],
    label_mode: str,
) -> None:
    """Run PR-SGD at every design point and save the solutions."""
    design = load_design(design_path)
    problem = Newsvendor(session.problem(d=design.d, q=q))
    config = PrSgdConfig(T=T, gamma0=gamma0 or default_gamma0(design.d))
    data = batch_solve(
        problem,
        design,
        config,
        stream_key(session.master_seed, "offline"),
        workers=session.workers,
        label_mode=label_mode,  # type: ignore[arg-type]
    )
    if session.out is not None:
        save_solutions(data, session.out)
    offline = summarize(gap_records(problem, data.theta_bars, design.points))
    session.emit(
        offline,
        f"solved n={design.n} T={T} calls={data.simulation_calls} "
        f"offline mean gap={offline.mean:.6g}",
    )


@cli.command("fit")
@click.option("--data", "data_path", type=click.Path(path_type=Path), required=True)
@click.option("--technique", type=TECHNIQUES, required=True)
@click.option("--k", type=int, default=None)
@click.option("--h", type=float, default=None)
@click.option("--lam", type=float, default=None)
@click.option("--no-project", is_flag=True, help="Do not clamp predictions onto the box.")
@pass_session
def fit_cmd(
    session: Session,
    data_path: Path,
    technique: str,
    k: Optional[int],
    h: Optional[float],
    lam: Optional[float],
    no_project: bool,
) -> None:
    """Fit a smoother to saved solutions and save the model."""
    data = load_solutions(data_path)
    q = int(data.theta_bars.shape[1])
    problem = Newsvendor(session.problem(d=data.design.d, q=q))
    spec = SmootherSpec(kind=technique, k=k, h=h, lam=lam, project=not no_project)  # type: ignore[arg-type]
    fitted = fit(spec, data, problem.decision_bounds)
    if session.out is not None:
        save_model(fitted, session.out)
    session.emit(fitted.spec, f"fitted {technique} on n={fitted.n} points")


def _read_covariates(xs: tuple[str, ...], csv_path: Optional[Path]) -> np.ndarray:
    rows = [_floats(x) for x in xs]
    if csv_path is not None:
        try:
            with csv_path.open(newline="", encoding="utf-8") as stream:
                rows.extend([float(v) for v in row] for row in csv.reader(stream) if row)
        except ValueError as e:
            raise InvalidInputError(f"{csv_path}: {e}") from e
    if not rows:
        raise InvalidInputError("no covariates given; use --x or --csv")
    if len({len(r) for r in rows}) != 1:
        raise InvalidInputError("covariates have mixed dimensions")
    return np.array(rows, dtype=np.float64)


@cli.command("predict")
@click.option("--model", "model_path", type=click.Path(path_type=Path), required=True)
@click.option("--x", "xs", multiple=True, help="Comma-separated covariate, repeatable.")
@click.option("--csv", "csv_path", type=click.Path(path_type=Path), default=None)
@pass_session
def predict_cmd(
    session: Session, model_path: Path, xs: tuple[str, ...], csv_path: Optional[Path]
) -> None:
    """Predict decisions for new covariates with a saved model."""
    fitted = load_model(model_path)
    points = _read_covariates(xs, csv_path)
    if points.shape[1] != fitted.design.d:
        raise InvalidInputError(
            f"covariates have dimension {points.shape[1]}, model expects {fitted.design.d}"
        )
    preds = fitted.predict_many(points)
    if session.as_json:
        click.echo(str(preds.tolist()).replace(" ", ""))
    else:
        for row in preds:
            click.echo(_fmt_row(row))


@cli.command("evaluate")
@click.option("--model", "model_path", type=click.Path(path_type=Path), required=True)
@click.option("--n-test", type=int, default=DEFAULT_N_TEST)
@click.option("--margin", type=float, default=DEFAULT_TEST_MARGIN)
@pass_session
def evaluate_cmd(session: Session, model_path: Path, n_test: int, margin: float) -> None:
    """Relative optimality gaps of a saved model on interior test covariates."""
    fitted = load_model(model_path)
    problem = Newsvendor(session.problem(d=fitted.design.d, q=fitted.q))
    lo, hi = problem.covariate_bounds
    xs = sample_interior(lo, hi, n_test, derive_stream(session.master_seed, "evaluate"), margin)
    summary = summarize(gap_records(problem, fitted.predict_many(xs), xs))
    session.emit(
        summary,
        f"mean={summary.mean:.6g} sd={summary.sd:.6g} "
        f"min={summary.min:.6g} max={summary.max:.6g} count={summary.count}",
    )


@cli.command("experiment")
@click.option("--technique", type=TECHNIQUES, default=None)
@click.option("--gamma", type=int, default=None)
@click.option("--d", type=int, default=None)
@click.option("--q", type=int, default=None)
@click.option("--T-bar", "T_bar", type=int, default=None, help="Use the fixed-T rule.")
@click.option("--replications", type=int, default=None)
@pass_session
def experiment_cmd(
    session: Session,
    technique: Optional[str],
    gamma: Optional[int],
    d: Optional[int],
    q: Optional[int],
    T_bar: Optional[int],
    replications: Optional[int],
) -> None:
    """Run the full offline/online pipeline and report relative gaps."""
    config = session.experiment(
        technique=technique,
        Gamma=gamma,
        problem=_problem_override(session, d, q),
        allocation="fixed_T" if T_bar is not None else None,
        T_bar=T_bar,
        replications=replications,
    )
    report = run_otp_experiment(config, session.workers)
    if session.out is not None:
        emit_csv(report, session.out)
    session.emit(
        report,
        f"{report.plan.summary()}\n"
        f"grand mean gap={report.grand_mean:.6g} sd={report.grand_sd:.6g} "
        f"offline={report.offline_mean:.6g} calls={report.simulation_calls} "
        f"({report.wall_clock_seconds:.1f}s)",
    )


def _problem_override(session: Session, d: Optional[int], q: Optional[int]) -> Optional[dict[str, Any]]:
    if d is None and q is None:
        return None
    return session.problem(d=d, q=q).model_dump(mode="json")


@cli.command("sweep")
@click.option("--gammas", required=True, help="Comma-separated increasing budgets.")
@click.option("--technique", type=TECHNIQUES, default=None)
@click.option("--d", type=int, default=None)
@click.option("--q", type=int, default=None)
@pass_session
def sweep_cmd(
    session: Session, gammas: str, technique: Optional[str], d: Optional[int], q: Optional[int]
) -> None:
    """Sweep the budget on a fixed test set and fit the log-log rate."""
    budgets = _ints(gammas)
    config = session.experiment(
        technique=technique, Gamma=budgets[0] if budgets else None, problem=_problem_override(session, d, q)
    )
    result = sweep_budget(config, budgets, session.workers)
    if session.out is not None:
        emit_sweep_csv(result, session.out)
    lines = [f"Gamma={r.plan.Gamma} gap={r.grand_mean:.6g}" for r in result.reports]
    lines.append(f"slope={result.rate.slope:.6g} r2={result.rate.r_squared:.6g}")
    session.emit(result.rate, "\n".join(lines))


@cli.command("pilot")
@click.option("--candidates", default=str(DEFAULT_T_BAR), help="Comma-separated increasing T values.")
@click.option("--threshold", type=float, default=DEFAULT_GAP_THRESHOLD)
@click.option("--n-pilot", type=int, default=DEFAULT_PILOT_COVARIATES)
@click.option("--replications", type=int, default=DEFAULT_REPLICATIONS)
@click.option("--gamma0", type=float, default=None)
@click.option("--d", type=int, default=None)
@click.option("--q", type=int, default=None)
@pass_session
def pilot_cmd(
    session: Session,
    candidates: str,
    threshold: float,
    n_pilot: int,
    replications: int,
    gamma0: Optional[float],
    d: Optional[int],
    q: Optional[int],
) -> None:
    """Select the benchmark T by a pilot run of plain PR-SGD."""
    problem = Newsvendor(session.problem(d=d, q=q))
    result = pilot_select_T(
        problem,
        gamma0 or default_gamma0(problem.covariate_dim),
        _ints(candidates),
        threshold,
        n_pilot,
        FULL_SCALE_REPLICATIONS if session.paper_scale else replications,
        session.master_seed,
        workers=session.workers,
    )
    lines = [f"T={t} gap={g:.6g}" for t, g in result.achieved.items()]
    lines.append(f"selected T={result.selected_T}")
    session.emit(result, "\n".join(lines))


@cli.command("table")
@click.option("--gammas", required=True, help="Comma-separated budgets.")
@click.option("--T-bar", "T_bar", type=int, default=DEFAULT_T_BAR)
@click.option("--technique", type=TECHNIQUES, default=None)
@click.option("--d", type=int, default=None)
@click.option("--q", type=int, default=None)
@pass_session
def table_cmd(
    session: Session,
    gammas: str,
    T_bar: int,
    technique: Optional[str],
    d: Optional[int],
    q: Optional[int],
) -> None:
    """Compare the optimal rule with fixed T at several budgets."""
    budgets = _ints(gammas)
    if not budgets:
        raise InvalidInputError("--gammas is empty")
    config = session.experiment(
        technique=technique, Gamma=budgets[0], problem=_problem_override(session, d, q)
    )
    rows = allocation_table(config, budgets, T_bar, session.workers)
    if session.out is not None:
        emit_table_csv(rows, session.out)
    if session.as_json:
        click.echo("[" + ",".join(r.model_dump_json() for r in rows) + "]")
        return
    for r in rows:
        gap = "-" if r.grand_mean_gap is None else f"{r.grand_mean_gap:.6g}"
        click.echo(f"{r.technique} Gamma={r.gamma} {r.rule}: n={r.n or '-'} T={r.T or '-'} gap={gap}")


def main() -> None:
    cli(prog_name="otpbase")
