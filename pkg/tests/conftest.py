import numpy as np
import pytest

from nestvr import SmoothnessSpec, make_quadratic_problem, make_rng, make_streaming_quadratic_problem
from nestvr.problems import FiniteSumProblem


def random_symmetric_fixture(dim, lambda_min, seed, *, streaming=False, lambda_rest=(0.05, 1.0)):
    """Quadratic problem whose Hessian has a pinned smallest eigenvalue.

    The eigendecomposition is the ground-truth oracle for curvature tests:
    the constructed spectrum is returned alongside the problem.
    """
    rng = make_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eigs = np.sort(rng.uniform(*lambda_rest, size=dim))
    eigs[0] = lambda_min
    H = (Q * eigs) @ Q.T
    H = 0.5 * (H + H.T)
    if streaming:
        problem = make_streaming_quadratic_problem(H, np.random.SeedSequence((seed, 1)), noise=0.1)
    else:
        problem = make_quadratic_problem(H, 6, np.random.SeedSequence((seed, 1)), noise=0.1)
    return problem, np.sort(eigs)


class DeclaredSpecProblem(FiniteSumProblem):
    """Finite-sum shell carrying only metadata; for configuration formulas."""

    def __init__(self, n, dim, spec: SmoothnessSpec):
        self.n = n
        self.dim = dim
        self.x0 = np.zeros(dim)
        self.smoothness = spec


class DeclaredSpecStreaming:
    """Streaming shell carrying only metadata; for configuration formulas."""

    is_finite_sum = False
    n = None

    def __init__(self, dim, spec: SmoothnessSpec):
        self.dim = dim
        self.x0 = np.zeros(dim)
        self.smoothness = spec


@pytest.fixture
def rng():
    return make_rng(20240612)
