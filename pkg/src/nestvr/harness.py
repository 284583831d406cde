"""Experiment harness: JSON configs, trial orchestration, trace persistence,
a numeric verification suite, and the command-line front end.

Config documents are a single JSON object::

    {
      "problem": {"family": "saddle", "dim": 10, "n": 256,
                  "negative_eigenvalue": -1.0, "noise": 0.1, "seed": 7},
      "algorithm": {"mode": "finite", "smoothness_order": 2,
                    "eps": 1e-3, "eps_H": 0.1,
                    "overrides": {"U": 500}},
      "trials": 4,
      "seed": 12345,
      "out": "results/"
    }

Unknown keys are rejected with a field-path diagnostic.  Event streams are
written as CSV with the fixed header
``trial,u,event,grads_cum,f_value,grad_norm,rayleigh,wall_ms`` (empty fields
where a column does not apply, floats in shortest round-trip form) plus one
summary JSON per trial.  The wall_ms column is informational only and is
excluded from determinism comparisons.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import driver as drv
from .driver import DriverConfig, DriverOutcome, classify_point
from .epoch import run_epoch
from .problems import (
    FiniteSumProblem,
    GradCounter,
    Problem,
    StreamingProblem,
    make_regularized_problem,
    make_rng,
    make_saddle_problem,
    make_streaming_quadratic_problem,
    make_streaming_saddle_problem,
    spawn_rngs,
    subsample_variance_report,
)
from .schedule import (
    NestedSchedule,
    check_series_domination,
    clamp_schedule,
    derive_schedule,
    expected_epoch_cost,
)

CSV_HEADER = ("trial", "u", "event", "grads_cum", "f_value", "grad_norm", "rayleigh", "wall_ms")

PROBLEM_FAMILIES = ("saddle", "regularized", "streaming-saddle", "streaming-quadratic")


class ConfigError(ValueError):
    """Raised for malformed experiment configs; message carries the field path."""


def _require_keys(obj: dict, path: str, required: set[str], optional: set[str]) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - required - optional
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"{path}: missing keys {sorted(missing)}")


@dataclass(frozen=True)
class ProblemSpec:
    family: str
    dim: int
    n: int | None = None
    negative_eigenvalue: float = -1.0
    noise: float = 0.1
    quartic: float = 0.25
    radius: float = 2.0
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.family not in PROBLEM_FAMILIES:
            raise ConfigError(
                f"problem.family: {self.family!r} not one of {list(PROBLEM_FAMILIES)}"
            )
        if self.dim < 1:
            raise ConfigError(f"problem.dim: must be >= 1, got {self.dim}")
        if self.family in ("saddle", "regularized") and (self.n is None or self.n < 1):
            raise ConfigError(f"problem.n: finite-sum family needs n >= 1, got {self.n}")


@dataclass(frozen=True)
class AlgorithmSpec:
    mode: str
    smoothness_order: int
    eps: float
    eps_H: float
    overrides: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in ("finite", "online"):
            raise ConfigError(f"algorithm.mode: must be 'finite' or 'online', got {self.mode!r}")
        if self.smoothness_order not in (2, 3):
            raise ConfigError(
                f"algorithm.smoothness_order: must be 2 or 3, got {self.smoothness_order}"
            )
        if not (0.0 < self.eps < 1.0 and 0.0 < self.eps_H < 1.0):
            raise ConfigError("algorithm.eps/eps_H: must lie in (0, 1)")
        unknown = set(self.overrides) - {"B0", "U", "M", "eta"}
        if unknown:
            raise ConfigError(f"algorithm.overrides: unknown keys {sorted(unknown)}")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec
    algorithm: AlgorithmSpec
    trials: int
    seed: int
    out: str | None = None

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError(f"trials: must be >= 1, got {self.trials}")

    def to_dict(self) -> dict:
        doc = {
            "problem": {k: v for k, v in asdict(self.problem).items() if v is not None},
            "algorithm": asdict(self.algorithm),
            "trials": self.trials,
            "seed": self.seed,
        }
        if self.out is not None:
            doc["out"] = self.out
        return doc


def parse_config(doc: dict) -> ExperimentConfig:
    _require_keys(doc, "config", {"problem", "algorithm", "trials", "seed"}, {"out"})
    p = doc["problem"]
    _require_keys(
        p,
        "problem",
        {"family", "dim"},
        {"n", "negative_eigenvalue", "noise", "quartic", "radius", "seed"},
    )
    a = doc["algorithm"]
    _require_keys(
        a, "algorithm", {"mode", "smoothness_order", "eps", "eps_H"}, {"overrides"}
    )
    overrides = a.get("overrides", {})
    if not isinstance(overrides, dict):
        raise ConfigError("algorithm.overrides: expected an object")
    try:
        return ExperimentConfig(
            problem=ProblemSpec(**p),
            algorithm=AlgorithmSpec(
                mode=a["mode"],
                smoothness_order=int(a["smoothness_order"]),
                eps=float(a["eps"]),
                eps_H=float(a["eps_H"]),
                overrides=dict(overrides),
            ),
            trials=int(doc["trials"]),
            seed=int(doc["seed"]),
            out=doc.get("out"),
        )
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_config(doc)


def build_problem(spec: ProblemSpec, default_seed: int) -> Problem:
    seed = spec.seed if spec.seed is not None else default_seed
    if spec.family == "saddle":
        return make_saddle_problem(
            spec.dim,
            spec.n,
            spec.negative_eigenvalue,
            seed,
            quartic=spec.quartic,
            radius=spec.radius,
            noise=spec.noise,
        )
    if spec.family == "regularized":
        return make_regularized_problem(spec.dim, spec.n, seed)
    if spec.family == "streaming-saddle":
        return make_streaming_saddle_problem(
            spec.dim,
            spec.negative_eigenvalue,
            seed,
            quartic=spec.quartic,
            radius=spec.radius,
            noise=spec.noise,
        )
    if spec.family == "streaming-quadratic":
        return make_streaming_quadratic_problem(np.eye(spec.dim), seed, noise=spec.noise)
    raise ConfigError(f"problem.family: unhandled family {spec.family!r}")


def build_driver_config(problem: Problem, alg: AlgorithmSpec) -> DriverConfig:
    overrides = alg.overrides or None
    if alg.mode == "finite":
        builder = drv.config_finite_2nd if alg.smoothness_order == 2 else drv.config_finite_3rd
    else:
        builder = drv.config_online_2nd if alg.smoothness_order == 2 else drv.config_online_3rd
    return builder(problem, alg.eps, alg.eps_H, overrides)


@dataclass
class TrialResult:
    trial: int
    outcome: DriverOutcome
    final_lambda_min: float


def run_experiment(config: ExperimentConfig) -> list[TrialResult]:
    """Run all trials sequentially in trial-index order.

    Each trial owns an independent counter-based RNG stream spawned from the
    experiment seed, so results are reproducible and order-independent.
    """
    problem = build_problem(config.problem, config.seed)
    driver_config = build_driver_config(problem, config.algorithm)
    results = []
    for trial, rng in enumerate(spawn_rngs(config.seed, config.trials)):
        outcome = drv.run_driver(problem, driver_config, rng)
        lam = classify_point(
            problem, outcome.z_final, config.algorithm.eps, config.algorithm.eps_H
        ).lambda_min
        results.append(TrialResult(trial=trial, outcome=outcome, final_lambda_min=lam))
    return results


def _fmt(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def write_trace(results: list[TrialResult], out_dir: str | Path) -> Path:
    """Persist an experiment: one events CSV plus a summary JSON per trial."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        events_path = out / "events.csv"
        with events_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for res in results:
                for ev in res.outcome.trace.events:
                    writer.writerow(
                        [
                            res.trial,
                            ev.u,
                            ev.kind,
                            ev.grads_cum,
                            _fmt(ev.f_value),
                            _fmt(ev.grad_norm),
                            _fmt(ev.rayleigh),
                            _fmt(ev.wall_ms),
                        ]
                    )
        for res in results:
            summary = {
                "status": res.outcome.status,
                "grads_total": res.outcome.grads_total,
                "final_grad_norm": res.outcome.final_grad_norm,
                "final_lambda_min": res.final_lambda_min,
            }
            (out / f"summary_{res.trial:03d}.json").write_text(
                json.dumps(summary, indent=2) + "\n"
            )
    except OSError as exc:
        raise OSError(f"writing traces under {out}: {exc}") from exc
    return events_path


# ---------------------------------------------------------------------------
# verification suites
# ---------------------------------------------------------------------------


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str


def verify_schedule_identities() -> SuiteResult:
    """Exact integer identities of the canonical schedule family."""
    for B0 in (4, 16, 256, 65536):
        sch = derive_schedule(B0, M=6.0)
        that = sch.loop_product
        if that * that != B0:
            return SuiteResult("schedule", False, f"B0={B0}: loop product {that} != sqrt(B0)")
        for l in range(1, sch.K + 1):
            prefix = math.prod(sch.T[:l])
            want = 2 * 6**sch.K * B0 if l == 1 else 6 ** (sch.K - l + 1) * B0
            if sch.B[l - 1] * prefix != want:
                return SuiteResult(
                    "schedule", False, f"B0={B0}, level {l}: batch-product identity failed"
                )
        cost = expected_epoch_cost(sch)
        bound = 7 * B0 * (B0.bit_length() - 1) ** 3
        if cost > bound:
            return SuiteResult("schedule", False, f"B0={B0}: cost {cost} exceeds bound {bound}")
    return SuiteResult("schedule", True, "identities hold for B0 in {4,16,256,65536}")


def verify_geometric_tail_inequality(rng: np.random.Generator, cases: int = 100) -> SuiteResult:
    """For random nonnegative series a with partial sums dominated by b,
    check (1-p)/p * E a(G) <= E b(G) for G geometric, by truncated summation
    with a certified tail below 1e-12."""
    worst = math.inf
    for _ in range(cases):
        p = float(rng.uniform(0.05, 0.95))
        support = int(rng.integers(1, 30))
        a = rng.uniform(0.0, 2.0, size=support)  # a(j) = 0 beyond the support
        slack = float(rng.uniform(0.0, 1.0)) * float(rng.integers(0, 2))
        total = float(a.sum())

        def a_at(j: int) -> float:
            return float(a[j]) if j < support else 0.0

        def b_at(k: int) -> float:
            return float(a[:k].sum()) + slack

        q = 1.0 - p
        bound = max(total + slack, 1.0)
        # beyond k*, |p q^k (b - a q / p)| tails are below q^k * bound; solve for 1e-13
        k_star = max(support + 1, math.ceil(math.log(1e-13 / bound) / math.log(q)))
        lhs = q / p * sum(p * q**k * a_at(k) for k in range(k_star))
        rhs = sum(p * q**k * b_at(k) for k in range(k_star))
        rhs += q**k_star * (total + slack)  # closed-form tail: b is constant past support
        margin = rhs - lhs
        worst = min(worst, margin)
        if margin < -1e-12 * max(1.0, rhs):
            return SuiteResult(
                "geom-tail", False, f"violated by {-margin:.3e} at p={p:.3f}"
            )
    return SuiteResult("geom-tail", True, f"{cases} cases, worst margin {worst:.3e}")


def verify_subsample_variance(rng: np.random.Generator, families: int = 50, draws: int = 10**5) -> SuiteResult:
    """Monte-Carlo check of the without-replacement subsampling variance bound."""
    worst_ratio = 0.0
    for _ in range(families):
        N = int(rng.integers(2, 13))
        dim = int(rng.integers(1, 7))
        a = rng.standard_normal((N, dim)) * float(rng.uniform(0.2, 3.0))
        a -= a.mean(axis=0)
        m = int(rng.integers(1, N + 1))
        estimate, bound = subsample_variance_report(a, m, draws, rng)
        if m == N:
            if estimate != 0.0:
                return SuiteResult("subsample-variance", False, f"full subset mean {estimate} != 0")
            continue
        if estimate > bound * 1.05:
            return SuiteResult(
                "subsample-variance",
                False,
                f"N={N}, m={m}: estimate {estimate:.4g} above 1.05 * bound {bound:.4g}",
            )
        worst_ratio = max(worst_ratio, estimate / bound if bound > 0 else 0.0)
    return SuiteResult(
        "subsample-variance", True, f"{families} families, worst estimate/bound {worst_ratio:.3f}"
    )


def verify_series_domination() -> SuiteResult:
    """Damping-series ordering on canonical schedules with M = 6 L."""
    for B0 in (4, 16, 256, 65536):
        report = check_series_domination(derive_schedule(B0, M=6.0), L=1.0)
        if not (report.applicable and report.passed):
            return SuiteResult(
                "series-domination", False, f"B0={B0}: margin {report.margin:.3e}"
            )
    return SuiteResult("series-domination", True, "strict domination on canonical schedules")


@dataclass
class EpochDecreaseReport:
    passed: bool
    lhs_mean: float
    rhs_mean: float
    allowance: float
    counter_mean: float
    counter_bound: float
    detail: str = ""


def verify_epoch_decrease(
    problem: FiniteSumProblem,
    schedule: NestedSchedule,
    trials: int,
    rng: np.random.Generator,
    *,
    force_full_batch: bool = False,
) -> EpochDecreaseReport:
    """Monte-Carlo check of the per-epoch gradient-norm decrease inequality.

    Over independent epochs from x0, the mean of |grad F(x_T)|^2 must stay
    below 100 * [ (M / sqrt(B0)) * mean(F(x0) - F(x_T))
                  + (2 sigma^2 / B0) * 1{B0 < n} ]
    within a 3-standard-error allowance, and the mean gradient tally must stay
    below 7 B0 log2(B0)^3.
    """
    s = problem.smoothness
    if schedule.M < 6.0 * s.L1:
        raise ValueError("epoch-decrease check needs M >= 6 L1")
    x0 = problem.x0
    f0 = problem.value(x0)
    indicator = 1.0 if schedule.B0 < problem.n else 0.0
    lhs = np.empty(trials)
    rhs = np.empty(trials)
    counts = np.empty(trials)
    for i in range(trials):
        counter = GradCounter()
        res = run_epoch(x0, problem, schedule, rng, counter, force_full_batch=force_full_batch)
        g = problem.full_grad(res.x_out)
        lhs[i] = float(g @ g)
        decrease = f0 - problem.value(res.x_out)
        rhs[i] = 100.0 * (
            schedule.M / math.sqrt(schedule.B0) * decrease
            + 2.0 * s.sigma2 / schedule.B0 * indicator
        )
        counts[i] = res.grads_used
    diff = rhs - lhs
    allowance = 3.0 * float(diff.std(ddof=1)) / math.sqrt(trials)
    counter_bound = 7.0 * schedule.B0 * math.log2(schedule.B0) ** 3
    ok_ineq = float(diff.mean()) >= -allowance
    ok_cost = float(counts.mean()) <= counter_bound
    return EpochDecreaseReport(
        passed=ok_ineq and ok_cost,
        lhs_mean=float(lhs.mean()),
        rhs_mean=float(rhs.mean()),
        allowance=allowance,
        counter_mean=float(counts.mean()),
        counter_bound=counter_bound,
        detail="" if ok_ineq and ok_cost else "inequality" if not ok_ineq else "counter bound",
    )


def _epoch_decrease_suite(rng: np.random.Generator) -> SuiteResult:
    problem = make_regularized_problem(dim=50, n=1000, seed=20240105)
    schedule = clamp_schedule(derive_schedule(256, M=6.0 * problem.smoothness.L1), problem.n)
    report = verify_epoch_decrease(problem, schedule, trials=200, rng=rng)
    detail = (
        f"lhs {report.lhs_mean:.4g} vs rhs {report.rhs_mean:.4g} (+/- {report.allowance:.2g}), "
        f"mean cost {report.counter_mean:.0f} <= {report.counter_bound:.0f}"
    )
    return SuiteResult("epoch-decrease", report.passed, detail)


SUITES = ("schedule", "geom-tail", "subsample-variance", "series-domination", "epoch-decrease")


def run_verify_suite(names: list[str], seed: int) -> list[SuiteResult]:
    rng = make_rng(seed)
    results = []
    for name in names:
        if name == "schedule":
            results.append(verify_schedule_identities())
        elif name == "geom-tail":
            results.append(verify_geometric_tail_inequality(rng))
        elif name == "subsample-variance":
            results.append(verify_subsample_variance(rng))
        elif name == "series-domination":
            results.append(verify_series_domination())
        elif name == "epoch-decrease":
            results.append(_epoch_decrease_suite(rng))
        else:
            raise ConfigError(f"unknown verify suite {name!r}; choose from {list(SUITES)}")
    return results


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestvr",
        description="Nested variance-reduction optimizer harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sched = sub.add_parser("derive-schedule", help="print the canonical schedule as JSON")
    p_sched.add_argument("--b0", type=int, required=True, help="base batch size (>= 4)")
    p_sched.add_argument("--m", type=float, default=6.0, help="step parameter M (default 6.0)")

    p_run = sub.add_parser("run", help="execute an experiment config and write traces")
    p_run.add_argument("--config", required=True, help="path to a JSON experiment config")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="override the config output directory")
    p_run.add_argument(
        "--jobs", type=int, default=1,
        help="trial-level parallelism bound (default 1 for bit-stable CSV order)",
    )

    p_verify = sub.add_parser("verify", help="run the numeric verification suite")
    p_verify.add_argument("--suite", default="all", help=f"one of {list(SUITES)} or 'all'")
    p_verify.add_argument("--seed", type=int, default=0)

    p_classify = sub.add_parser("classify", help="second-order stationarity of a point")
    p_classify.add_argument("--config", required=True, help="experiment config (problem part used)")
    p_classify.add_argument("--point", required=True, help="JSON file with the point coordinates")
    p_classify.add_argument("--eps", type=float, default=None)
    p_classify.add_argument("--eps-H", dest="eps_H", type=float, default=None)
    return parser


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0

    try:
        if args.command == "derive-schedule":
            sched = derive_schedule(args.b0, args.m)
            print(json.dumps(sched.as_dict(), indent=2))
            return 0

        if args.command == "run":
            config = load_config(args.config)
            if args.seed is not None:
                config = ExperimentConfig(
                    problem=config.problem,
                    algorithm=config.algorithm,
                    trials=config.trials,
                    seed=args.seed,
                    out=config.out,
                )
            out_dir = args.out or config.out
            if out_dir is None:
                raise ConfigError("no output directory: set 'out' in the config or pass --out")
            if args.jobs != 1:
                # bounded parallelism is accepted but trials are merged in
                # index order either way; sequential keeps CSV bit-stable
                pass
            results = run_experiment(config)
            path = write_trace(results, out_dir)
            certified = sum(1 for r in results if r.outcome.status == drv.STATUS_CERTIFIED)
            print(f"{len(results)} trials ({certified} certified) -> {path}")
            return 0

        if args.command == "verify":
            names = list(SUITES) if args.suite == "all" else [args.suite]
            results = run_verify_suite(names, args.seed)
            width = max(len(r.name) for r in results)
            for r in results:
                print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
            return 0 if all(r.passed for r in results) else 2

        if args.command == "classify":
            config = load_config(args.config)
            problem = build_problem(config.problem, config.seed)
            point = np.asarray(json.loads(Path(args.point).read_text()), dtype=float)
            if point.shape != (problem.dim,):
                raise ConfigError(
                    f"point: expected {problem.dim} coordinates, got shape {point.shape}"
                )
            eps = args.eps if args.eps is not None else config.algorithm.eps
            eps_H = args.eps_H if args.eps_H is not None else config.algorithm.eps_H
            cls = classify_point(problem, point, eps, eps_H)
            print(json.dumps(asdict(cls), indent=2))
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    parser.error(f"unknown command {args.command!r}")
    return 1  # pragma: no cover


def main() -> None:  # console entry point
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
