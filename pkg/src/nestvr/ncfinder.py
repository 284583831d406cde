"""First-order negative-curvature search.

Hessian-vector products are approximated by forward gradient differences
(H v ~ [grad F(z + q v) - grad F(z)] / q, error at most L2 q / 2 plus
sampling noise), so the search consumes only stochastic gradients.  The
finder runs shifted power iteration on shift*I - H from several random unit
starts; a candidate that drives the Rayleigh quotient below -3/4 eps_H is
re-measured with a full-batch (finite-sum) or large-batch (streaming)
certification pass and returned only when the certified estimate plus its
error budget clears -eps_H / 2.  Self-certification makes soundness of
returned directions unconditional; failure to certify within the iteration
budget yields the abstention signal (direction ``None``), indistinguishable
by contract from a genuine absence of curvature below the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .problems import (
    Array,
    FiniteSumProblem,
    GradCounter,
    Problem,
    StreamingProblem,
)

#: power steps per restart scale as POWER_BUDGET_FACTOR * (L1/eps_H) * log2(d/delta)
POWER_BUDGET_FACTOR = 8
#: break a restart after this many steps without Rayleigh improvement
STALL_WINDOW = 25
STALL_TOL_FACTOR = 0.01  # improvement threshold, in units of eps_H
#: streaming batch sizes for power steps and certification
ONLINE_POWER_BATCH_MIN = 64
ONLINE_CERT_BATCHES = 8
ONLINE_CERT_BATCH_MIN = 256


@dataclass(frozen=True)
class NCQuery:
    """Curvature query at a point: thresholds and smoothness constants."""

    z: Array
    eps_H: float
    delta: float
    L1: float
    L2: float

    def __post_init__(self) -> None:
        if not 0.0 < self.eps_H < 1.0:
            raise ValueError(f"eps_H must lie in (0, 1), got {self.eps_H}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass
class NCResult:
    """Either a unit direction of certified negative curvature, or abstention.

    ``rayleigh_estimate`` carries the certified value for a returned direction
    and the best value seen for an abstention (diagnostic only).
    """

    direction: Array | None
    rayleigh_estimate: float
    grads_used: int
    budget_exhausted: bool = False

    @property
    def is_bottom(self) -> bool:
        return self.direction is None


def rayleigh(problem: Problem, z: Array, v: Array) -> float:
    """Exact Rayleigh quotient via the verification Hessian; never charged."""
    v = np.asarray(v, dtype=float)
    nv2 = float(v @ v)
    if nv2 == 0.0:
        raise ValueError("direction must be nonzero")
    H = problem.hessian(np.asarray(z, dtype=float))
    return float(v @ H @ v) / nv2


def hvp_estimate(
    problem: Problem,
    z: Array,
    v: Array,
    q: float,
    batch: Array | int,
    rng: np.random.Generator | None = None,
    counter: GradCounter | None = None,
) -> Array:
    """Forward-difference Hessian-vector product estimate at displacement q.

    ``batch`` is an index array for finite-sum problems and a fresh-sample
    count for streaming ones (``rng`` required).  Charges ``2 |batch|``.
    """
    if not q > 0.0:
        raise ValueError(f"displacement must be positive, got {q}")
    v = np.asarray(v, dtype=float)
    if abs(float(np.linalg.norm(v)) - 1.0) > 1e-6:
        raise ValueError("direction must be unit norm")
    z = np.asarray(z, dtype=float)
    if problem.is_finite_sum:
        idx = np.asarray(batch)
        if idx.size == 0:
            raise ValueError("empty index set")
        diff = problem.batch_grad_diff(z + q * v, z, idx)
        if counter is not None:
            counter.add(2 * idx.size)
    else:
        size = int(batch)
        if size < 1:
            raise ValueError(f"batch size must be >= 1, got {size}")
        if rng is None:
            raise ValueError("streaming HVP needs a generator")
        diff = problem.sample_batch_grad_diff(z + q * v, z, size, rng)
        if counter is not None:
            counter.add(2 * size)
    return diff / q


def _displacement(query: NCQuery) -> float:
    """Keep the Taylor error L2 q / 2 at eps_H / 20, an order below threshold."""
    if query.L2 > 0.0:
        return query.eps_H / (10.0 * query.L2)
    return 1e-5 * (1.0 + float(np.linalg.norm(query.z)))


def _num_restarts(delta: float) -> int:
    return max(1, math.ceil(math.log2(1.0 / delta)))


def _power_budget(query: NCQuery, dim: int) -> int:
    ratio = max(query.L1 / query.eps_H, 1.0)
    return math.ceil(POWER_BUDGET_FACTOR * ratio * math.log2(max(dim, 2) / query.delta))


def _random_unit(dim: int, rng: np.random.Generator) -> Array:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _certify(
    problem: Problem,
    query: NCQuery,
    v: Array,
    q: float,
    rng: np.random.Generator,
    counter: GradCounter,
) -> tuple[float, float]:
    """Measured Rayleigh value of ``v`` and an error budget covering it.

    Finite-sum: one full-batch product, error = Taylor term only.  Streaming:
    several independent batches; error adds a 5-standard-error allowance from
    their spread.
    """
    taylor = 0.5 * query.L2 * q
    if problem.is_finite_sum:
        idx = np.arange(problem.n)
        w = hvp_estimate(problem, query.z, v, q, idx, counter=counter)
        val = float(v @ w)
        return val, taylor + 1e-9 * (1.0 + abs(val))
    size = max(ONLINE_CERT_BATCH_MIN, ONLINE_POWER_BATCH_MIN)
    vals = np.empty(ONLINE_CERT_BATCHES)
    for i in range(ONLINE_CERT_BATCHES):
        w = hvp_estimate(problem, query.z, v, q, size, rng=rng, counter=counter)
        vals[i] = float(v @ w)
    spread = float(vals.std(ddof=1)) / math.sqrt(ONLINE_CERT_BATCHES)
    return float(vals.mean()), taylor + 5.0 * spread + 1e-9


def _find_direction(
    problem: Problem,
    query: NCQuery,
    rng: np.random.Generator,
    counter: GradCounter,
) -> NCResult:
    start_count = counter.count
    dim = query.z.shape[0]
    q = _displacement(query)
    shift = query.L1
    budget = _power_budget(query, dim)
    candidate_bar = -0.75 * query.eps_H
    accept_bar = -0.5 * query.eps_H
    stall_tol = STALL_TOL_FACTOR * query.eps_H

    if problem.is_finite_sum:
        power_batch: Array | int = np.arange(problem.n)
    else:
        power_batch = max(ONLINE_POWER_BATCH_MIN, math.ceil(4.0 * query.L1 / query.eps_H))

    best_ray = math.inf  # across restarts, diagnostic only
    for _ in range(_num_restarts(query.delta)):
        v = _random_unit(dim, rng)
        stall = 0
        prev = math.inf
        cand_ray = math.inf
        cand_v: Array | None = None
        for _ in range(budget):
            w = hvp_estimate(problem, query.z, v, q, power_batch, rng=rng, counter=counter)
            ray = float(v @ w)
            if ray < cand_ray:
                cand_ray, cand_v = ray, v
            if cand_ray <= candidate_bar - 0.05 * query.eps_H:
                break
            if ray > prev - stall_tol:
                stall += 1
                if stall >= STALL_WINDOW:
                    break
            else:
                stall = 0
            prev = ray
            s = shift * v - w
            norm = float(np.linalg.norm(s))
            if norm == 0.0:
                break
            v = s / norm
        best_ray = min(best_ray, cand_ray)
        if cand_ray <= candidate_bar and cand_v is not None:
            cert, err = _certify(problem, query, cand_v, q, rng, counter)
            if cert + err <= accept_bar:
                direction = cand_v / np.linalg.norm(cand_v)
                return NCResult(
                    direction=direction,
                    rayleigh_estimate=cert,
                    grads_used=counter.count - start_count,
                )
    return NCResult(
        direction=None,
        rayleigh_estimate=best_ray,
        grads_used=counter.count - start_count,
        budget_exhausted=True,
    )


def find_nc_direction_finite(
    problem: FiniteSumProblem,
    query: NCQuery,
    rng: np.random.Generator,
    counter: GradCounter,
) -> NCResult:
    """Negative-curvature search against a finite-sum oracle.

    Contract: a returned direction v satisfies v' H(z) v <= -eps_H / 2 (it is
    certified before being returned); if lambda_min(H(z)) < -eps_H a direction
    is found with probability at least 1 - delta; if lambda_min >= -eps_H / 2
    abstention is returned with probability at least 1 - delta.  The band in
    between carries no contract.
    """
    if not problem.is_finite_sum:
        raise ValueError("expected a finite-sum problem")
    return _find_direction(problem, query, rng, counter)


def find_nc_direction_online(
    problem: StreamingProblem,
    query: NCQuery,
    rng: np.random.Generator,
    counter: GradCounter,
) -> NCResult:
    """Negative-curvature search against a streaming oracle; same contract."""
    if problem.is_finite_sum:
        raise ValueError("expected a streaming problem")
    return _find_direction(problem, query, rng, counter)
