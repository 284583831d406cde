"""Objective-function oracles for nested variance-reduced optimization.

Two oracle families are provided:

* :class:`FiniteSumProblem` -- an average of ``n`` component functions with a
  component-gradient oracle plus verification-only full gradient / Hessian.
* :class:`StreamingProblem` -- a stochastic-gradient oracle that draws a fresh
  sample per call (``n`` is unbounded).

All synthetic problems carry hand-coded gradients and Hessians (no autodiff)
and a :class:`SmoothnessSpec` with constants certified on a declared ball.
Stochastic-gradient work is tallied by :class:`GradCounter`: one unit per
single component-gradient (or fresh-sample) evaluation, so a two-point
correction over a batch of size ``B`` costs ``2 B`` units.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

Array = np.ndarray


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Counter-based generator (Philox) so that split streams never collide."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def spawn_rngs(seed: int | np.random.SeedSequence, k: int) -> list[np.random.Generator]:
    """Split one master seed into ``k`` independent reproducible streams."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [make_rng(child) for child in ss.spawn(k)]


class GradCounter:
    """Cumulative count of stochastic-gradient evaluations.

    Verification oracles (full gradient / Hessian used by tests) never go
    through this counter; drivers charge them explicitly where the cost model
    says so.
    """

    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0

    def add(self, units: int) -> None:
        if units < 0:
            raise ValueError(f"negative gradient charge: {units}")
        self.count += int(units)

    def __repr__(self) -> str:  # pragma: no cover
        return f"GradCounter(count={self.count})"


@dataclass(frozen=True)
class SmoothnessSpec:
    """Smoothness metadata attached to a problem.

    ``L1``: gradient Lipschitz constant, ``L2``: Hessian Lipschitz constant,
    ``L3``: third-derivative Lipschitz constant (``None`` unless the problem
    is declared third-order smooth), ``sigma2``: variance proxy bounding
    ``E |grad f_i(x) - grad F(x)|^2``, ``delta_F``: upper bound on
    ``F(x0) - inf F``.  Constants are certified only on the ball of radius
    ``radius`` around the problem's start point (``None`` means global).
    """

    L1: float
    L2: float
    sigma2: float
    delta_F: float
    L3: float | None = None
    radius: float | None = None

    def __post_init__(self) -> None:
        for name in ("L1", "L2", "sigma2", "delta_F"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"SmoothnessSpec.{name} must be positive and finite, got {v}")
        if self.L3 is not None and not (math.isfinite(self.L3) and self.L3 > 0):
            raise ValueError(f"SmoothnessSpec.L3 must be positive and finite, got {self.L3}")
        if self.radius is not None and not (math.isfinite(self.radius) and self.radius > 0):
            raise ValueError(f"SmoothnessSpec.radius must be positive and finite, got {self.radius}")


class FiniteSumProblem:
    """Average of ``n`` components, F(x) = (1/n) sum_i f_i(x).

    Subclasses implement ``value``, ``batch_grad``, ``full_grad`` and
    ``hessian``; ``batch_grad_diff`` defaults to two ``batch_grad`` calls and
    may be overridden when the component structure lets the difference be
    formed more cheaply (the result must match the generic form).
    """

    n: int
    dim: int
    x0: Array
    smoothness: SmoothnessSpec
    #: exact global minimum value when analytically known (test oracle)
    known_min_value: float | None = None

    def value(self, x: Array) -> float:
        raise NotImplementedError

    def batch_grad(self, x: Array, idx: Array) -> Array:
        """Mean of component gradients over ``idx``. Does not touch counters."""
        raise NotImplementedError

    def batch_grad_diff(self, x: Array, y: Array, idx: Array) -> Array:
        return self.batch_grad(x, idx) - self.batch_grad(y, idx)

    def component_grad(self, x: Array, i: int) -> Array:
        return self.batch_grad(x, np.asarray([i]))

    def full_grad(self, x: Array) -> Array:
        """Verification oracle: exact gradient of F."""
        raise NotImplementedError

    def hessian(self, x: Array) -> Array:
        """Verification oracle: exact (symmetric) Hessian of F."""
        raise NotImplementedError

    @property
    def is_finite_sum(self) -> bool:
        return True


class StreamingProblem:
    """Expectation objective with a fresh-sample stochastic-gradient oracle.

    The epoch engine treats an "index" as "fresh sample": without-replacement
    sampling degenerates to independent draws, and two-point corrections pair
    the same sample at both points.
    """

    dim: int
    x0: Array
    smoothness: SmoothnessSpec
    n = None
    known_min_value: float | None = None

    def value(self, x: Array) -> float:
        raise NotImplementedError

    def sample_grad(self, x: Array, rng: np.random.Generator) -> Array:
        """One stochastic gradient with a fresh sample."""
        raise NotImplementedError

    def sample_batch_grad(self, x: Array, size: int, rng: np.random.Generator) -> Array:
        """Mean of ``size`` fresh stochastic gradients."""
        raise NotImplementedError

    def sample_batch_grad_diff(self, x: Array, y: Array, size: int, rng: np.random.Generator) -> Array:
        """Mean over ``size`` fresh samples of grad F(x; xi) - grad F(y; xi)."""
        raise NotImplementedError

    def full_grad(self, x: Array) -> Array:
        raise NotImplementedError

    def hessian(self, x: Array) -> Array:
        raise NotImplementedError

    @property
    def is_finite_sum(self) -> bool:
        return False


Problem = FiniteSumProblem | StreamingProblem


def sample_indices_without_replacement(n: int, m: int, rng: np.random.Generator) -> Array:
    """Uniformly random size-``m`` subset of ``range(n)``, without replacement.

    Deterministic given the generator state.  Callers must clamp ``m`` to the
    population size first; oversized requests are rejected.
    """
    if m < 1:
        raise ValueError(f"batch size must be >= 1, got {m}")
    if m > n:
        raise ValueError(f"batch size {m} exceeds population size {n}; clamp the schedule first")
    return rng.choice(n, size=m, replace=False)


def minibatch_gradient(
    problem: FiniteSumProblem,
    points: Array | tuple[Array, Array],
    indices: Array,
    counter: GradCounter | None = None,
) -> Array:
    """Averaged component gradient (one point) or gradient difference (two).

    Charges ``|I|`` units for a single point and ``2 |I|`` for a two-point
    difference, reflecting that each component gradient is evaluated at both
    points.
    """
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("empty index set")
    if isinstance(points, tuple):
        x, y = points
        out = problem.batch_grad_diff(np.asarray(x, dtype=float), np.asarray(y, dtype=float), indices)
        if counter is not None:
            counter.add(2 * indices.size)
        return out
    out = problem.batch_grad(np.asarray(points, dtype=float), indices)
    if counter is not None:
        counter.add(indices.size)
    return out


def _zero_sum_noise(n: int, dim: int, scale: float, rng: np.random.Generator) -> Array:
    """Rows of per-component linear-noise vectors summing exactly to zero."""
    if n == 1 or scale == 0.0:
        return np.zeros((n, dim))
    c = rng.standard_normal((n, dim)) * scale
    return c - c.mean(axis=0)


class _SeparableQuarticProblem(FiniteSumProblem):
    """F(x) = 1/2 x^T diag(h) x + a * sum_j x_j^4, components differ by linear noise.

    f_i(x) = F(x) + c_i . x with sum_i c_i = 0, so the mean recovers F exactly
    and every component shares F's Hessian.  The linear noise cancels exactly
    in two-point gradient differences, which ``batch_grad_diff`` exploits.
    """

    def __init__(self, diag: Array, quartic: float, noise_rows: Array, radius: float):
        self.diag = np.asarray(diag, dtype=float)
        self.quartic = float(quartic)
        self.noise = np.asarray(noise_rows, dtype=float)
        self.n = self.noise.shape[0]
        self.dim = self.diag.size
        self.x0 = np.zeros(self.dim)

        a = self.quartic
        lam_min = float(self.diag.min())
        lam_max = float(self.diag.max())
        # Hessian eigenvalues on the ball lie in [lam_min, lam_max + 12 a R^2].
        L1 = max(abs(lam_min), abs(lam_max) + 12.0 * a * radius**2)
        L2 = 24.0 * a * radius
        L3 = 24.0 * a
        sigma2 = float(np.einsum("ij,ij->i", self.noise, self.noise).mean()) if self.n > 1 else 0.0
        # At x0 = 0 the optimal gap is the sum of the per-coordinate well depths
        # h_j^2 / (16 a) over negative-curvature coordinates.
        neg = self.diag[self.diag < 0]
        gap = float((neg**2).sum() / (16.0 * a)) if neg.size else 0.0
        self.known_min_value = -gap
        self.smoothness = SmoothnessSpec(
            L1=L1,
            L2=L2,
            L3=L3,
            sigma2=max(sigma2, 1e-12),
            delta_F=max(gap, 1e-12),
            radius=radius,
        )

    def value(self, x: Array) -> float:
        return float(0.5 * (self.diag * x * x).sum() + self.quartic * (x**4).sum())

    def _common_grad(self, x: Array) -> Array:
        return self.diag * x + 4.0 * self.quartic * x**3

    def batch_grad(self, x: Array, idx: Array) -> Array:
        return self._common_grad(x) + self.noise[idx].mean(axis=0)

    def batch_grad_diff(self, x: Array, y: Array, idx: Array) -> Array:
        # Per-component linear noise is identical at both points and drops out.
        return self._common_grad(x) - self._common_grad(y)

    def full_grad(self, x: Array) -> Array:
        return self._common_grad(x)

    def hessian(self, x: Array) -> Array:
        return np.diag(self.diag + 12.0 * self.quartic * x * x)


def make_saddle_problem(
    dim: int,
    n: int,
    negative_eigenvalue: float,
    seed: int | np.random.SeedSequence,
    *,
    quartic: float = 0.25,
    radius: float = 2.0,
    noise: float = 0.1,
) -> FiniteSumProblem:
    """Finite-sum objective with a strict saddle at the start point x0 = 0.

    F(x) = 1/2 x^T A x + a sum_j x_j^4 with A = diag(1, ..., 1, lam) and
    lam = ``negative_eigenvalue`` < 0, so grad F(0) = 0 and
    lambda_min(hess F(0)) = lam.  Global minimizers sit at
    x_last = +-sqrt(-lam / (4 a)) with value -lam^2 / (16 a).
    """
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not negative_eigenvalue < 0:
        raise ValueError(f"negative_eigenvalue must be < 0, got {negative_eigenvalue}")
    rng = make_rng(seed)
    diag = np.ones(dim)
    diag[-1] = negative_eigenvalue
    rows = _zero_sum_noise(n, dim, noise, rng)
    return _SeparableQuarticProblem(diag, quartic, rows, radius)


class _RegularizedLeastSquaresProblem(FiniteSumProblem):
    """f_i(x) = 1/2 (a_i . x - y_i)^2 + sum_j x_j^2 / (1 + x_j^2).

    The nonconvex regularizer has r''(0) = 2, |r''| <= 2 and |r'''| <= 12,
    giving global L1 = max_i |a_i|^2 + 2 and L2 = 12.
    """

    def __init__(self, A: Array, y: Array):
        self.A = np.asarray(A, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.n, self.dim = self.A.shape
        self.x0 = np.zeros(self.dim)

        row_sq = np.einsum("ij,ij->i", self.A, self.A)
        L1 = float(row_sq.max()) + 2.0
        L2 = 12.0
        sigma2 = self._max_probe_variance()
        # F >= 0 everywhere, so F(x0) bounds the optimal gap.
        delta_F = self.value(self.x0)
        self.smoothness = SmoothnessSpec(
            L1=L1, L2=L2, sigma2=max(sigma2, 1e-12), delta_F=max(delta_F, 1e-12)
        )

    def _max_probe_variance(self) -> float:
        """Exact population variance of component gradients, maximized over probes."""
        rng = make_rng(np.random.SeedSequence(entropy=0xC0FFEE, spawn_key=(self.n, self.dim)))
        probes = [self.x0] + [rng.standard_normal(self.dim) / math.sqrt(self.dim) for _ in range(10)]
        worst = 0.0
        for x in probes:
            res = self.A @ x - self.y
            per = self.A * res[:, None]
            dev = per - per.mean(axis=0)
            worst = max(worst, float(np.einsum("ij,ij->i", dev, dev).mean()))
        return worst

    @staticmethod
    def _reg_value(x: Array) -> float:
        return float((x * x / (1.0 + x * x)).sum())

    @staticmethod
    def _reg_grad(x: Array) -> Array:
        return 2.0 * x / (1.0 + x * x) ** 2

    @staticmethod
    def _reg_hess_diag(x: Array) -> Array:
        x2 = x * x
        return (2.0 - 6.0 * x2) / (1.0 + x2) ** 3

    def value(self, x: Array) -> float:
        res = self.A @ x - self.y
        return float(0.5 * (res * res).mean() + self._reg_value(x))

    def batch_grad(self, x: Array, idx: Array) -> Array:
        rows = self.A[idx]
        res = rows @ x - self.y[idx]
        return rows.T @ res / idx.size + self._reg_grad(x)

    def batch_grad_diff(self, x: Array, y: Array, idx: Array) -> Array:
        rows = self.A[idx]
        return rows.T @ (rows @ (x - y)) / idx.size + self._reg_grad(x) - self._reg_grad(y)

    def full_grad(self, x: Array) -> Array:
        res = self.A @ x - self.y
        return self.A.T @ res / self.n + self._reg_grad(x)

    def hessian(self, x: Array) -> Array:
        H = self.A.T @ self.A / self.n
        return H + np.diag(self._reg_hess_diag(x))


def make_regularized_problem(dim: int, n: int, seed: int | np.random.SeedSequence) -> FiniteSumProblem:
    """Random least-squares data with a smooth nonconvex regularizer."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    rng = make_rng(seed)
    A = rng.standard_normal((n, dim)) / math.sqrt(dim)
    y = rng.standard_normal(n)
    return _RegularizedLeastSquaresProblem(A, y)


class QuadraticProblem(FiniteSumProblem):
    """F(x) = 1/2 x^T H x + b . x with linear component noise; exact oracles.

    Constant Hessian makes finite-difference Hessian-vector products exact up
    to roundoff, which the curvature-search tests rely on.
    """

    def __init__(self, H: Array, b: Array | None, noise_rows: Array, x0: Array | None = None):
        self.H = np.asarray(H, dtype=float)
        if not np.allclose(self.H, self.H.T, atol=1e-12):
            raise ValueError("quadratic matrix must be symmetric")
        self.dim = self.H.shape[0]
        self.b = np.zeros(self.dim) if b is None else np.asarray(b, dtype=float)
        self.noise = np.asarray(noise_rows, dtype=float)
        self.n = self.noise.shape[0]
        self.x0 = np.zeros(self.dim) if x0 is None else np.asarray(x0, dtype=float)

        eigs = np.linalg.eigvalsh(self.H)
        L1 = max(float(np.abs(eigs).max()), 1e-6)
        sigma2 = float(np.einsum("ij,ij->i", self.noise, self.noise).mean()) if self.n > 1 else 0.0
        # Quadratics have no Hessian curvature; keep a tiny positive L2 so the
        # spec's positivity invariant holds while Taylor error terms stay nil.
        self.smoothness = SmoothnessSpec(
            L1=L1, L2=1e-9, sigma2=max(sigma2, 1e-12), delta_F=max(self._gap(), 1e-12)
        )

    def _gap(self) -> float:
        eigs = np.linalg.eigvalsh(self.H)
        if eigs.min() <= 1e-9 * max(float(np.abs(eigs).max()), 1.0):
            return 1.0  # unbounded below or singular; nominal gap, fixtures override budgets
        xstar = np.linalg.solve(self.H, -self.b)
        return self.value(self.x0) - self.value(xstar)

    def value(self, x: Array) -> float:
        return float(0.5 * x @ self.H @ x + self.b @ x)

    def batch_grad(self, x: Array, idx: Array) -> Array:
        return self.H @ x + self.b + self.noise[idx].mean(axis=0)

    def batch_grad_diff(self, x: Array, y: Array, idx: Array) -> Array:
        return self.H @ (x - y)

    def full_grad(self, x: Array) -> Array:
        return self.H @ x + self.b

    def hessian(self, x: Array) -> Array:
        return self.H.copy()


def make_quadratic_problem(
    H: Array,
    n: int,
    seed: int | np.random.SeedSequence,
    *,
    noise: float = 0.1,
    b: Array | None = None,
    x0: Array | None = None,
) -> QuadraticProblem:
    rng = make_rng(seed)
    H = np.asarray(H, dtype=float)
    rows = _zero_sum_noise(n, H.shape[0], noise, rng)
    return QuadraticProblem(H, b, rows, x0=x0)


class AdditiveNoiseStreamingProblem(StreamingProblem):
    """Streaming oracle grad F(x; xi) = grad F(x) + xi, xi ~ N(0, s^2 I).

    The mean of a batch of B fresh noises is N(0, s^2/B I), so batch means are
    drawn from their exact law in one shot; two-point corrections pair the same
    xi at both points, where the additive noise cancels identically.
    """

    def __init__(self, core: FiniteSumProblem, noise_std: float, rescale_sigma: bool = True):
        self.core = core
        self.noise_std = float(noise_std)
        self.dim = core.dim
        self.x0 = core.x0.copy()
        self.known_min_value = core.known_min_value
        s = core.smoothness
        sigma2 = self.dim * self.noise_std**2 if rescale_sigma else s.sigma2
        self.smoothness = SmoothnessSpec(
            L1=s.L1,
            L2=s.L2,
            L3=s.L3,
            sigma2=max(sigma2, 1e-12),
            delta_F=s.delta_F,
            radius=s.radius,
        )

    def value(self, x: Array) -> float:
        return self.core.value(x)

    def sample_grad(self, x: Array, rng: np.random.Generator) -> Array:
        return self.core.full_grad(x) + self.noise_std * rng.standard_normal(self.dim)

    def sample_batch_grad(self, x: Array, size: int, rng: np.random.Generator) -> Array:
        if size < 1:
            raise ValueError(f"batch size must be >= 1, got {size}")
        scale = self.noise_std / math.sqrt(size)
        return self.core.full_grad(x) + scale * rng.standard_normal(self.dim)

    def sample_batch_grad_diff(self, x: Array, y: Array, size: int, rng: np.random.Generator) -> Array:
        if size < 1:
            raise ValueError(f"batch size must be >= 1, got {size}")
        return self.core.full_grad(x) - self.core.full_grad(y)

    def full_grad(self, x: Array) -> Array:
        return self.core.full_grad(x)

    def hessian(self, x: Array) -> Array:
        return self.core.hessian(x)


def make_streaming_saddle_problem(
    dim: int,
    negative_eigenvalue: float,
    seed: int | np.random.SeedSequence,
    *,
    quartic: float = 0.25,
    radius: float = 2.0,
    noise: float = 0.1,
) -> StreamingProblem:
    """Streaming counterpart of :func:`make_saddle_problem`."""
    core = make_saddle_problem(
        dim, 1, negative_eigenvalue, seed, quartic=quartic, radius=radius, noise=0.0
    )
    return AdditiveNoiseStreamingProblem(core, noise)


def make_streaming_quadratic_problem(
    H: Array,
    seed: int | np.random.SeedSequence,
    *,
    noise: float = 0.1,
    x0: Array | None = None,
) -> StreamingProblem:
    core = make_quadratic_problem(H, 1, seed, noise=0.0, x0=x0)
    return AdditiveNoiseStreamingProblem(core, noise)


def subsample_variance_report(
    vectors: Array, m: int, draws: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Monte-Carlo estimate of E |mean of a random size-m subset|^2 for zero-sum rows.

    Returns ``(estimate, bound)`` where ``bound = mean_j |a_j|^2 / m`` if
    ``m < N`` and ``0`` for the full subset (the mean of all rows vanishes).
    Used by the sampling-variance verification suite.
    """
    a = np.asarray(vectors, dtype=float)
    N = a.shape[0]
    if not 1 <= m <= N:
        raise ValueError(f"subset size {m} out of range 1..{N}")
    scale = float(np.abs(a).max()) or 1.0
    if float(np.abs(a.sum(axis=0)).max()) > 1e-9 * scale * N:
        raise ValueError("rows must sum to zero")
    mean_sq = float(np.einsum("ij,ij->i", a, a).mean())
    if m == N:
        # the full subset is forced; its mean is the zero vector by the
        # zero-sum precondition, so the estimator is identically 0
        return 0.0, 0.0
    # Vectorized without-replacement draws: the first m slots of random
    # permutations, realized via argpartition of uniform keys.
    keys = rng.random((draws, N))
    subsets = np.argpartition(keys, m - 1, axis=1)[:, :m]
    means = a[subsets].mean(axis=1)
    estimate = float(np.einsum("ij,ij->i", means, means).mean())
    return estimate, mean_sq / m
