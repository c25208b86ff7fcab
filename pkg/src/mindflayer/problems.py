"""Objective oracles: a tridiagonal quadratic with Gaussian gradient noise.

``f(x) = 1/2 x'Ax - b'x`` where ``A = 1/4 tridiag(-1, 2, -1)``.  All products
with ``A`` are matrix-free, so ``d = 1000`` costs O(d) per gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "CGNotConverged",
    "HeterogeneousProblem",
    "QuadraticProblem",
    "conjugate_gradient",
    "hetero_quad_family",
    "quad_problem",
    "solve_f_inf",
    "tridiag_matvec",
]


class CGNotConverged(RuntimeError):
    pass


def tridiag_matvec(x: np.ndarray) -> np.ndarray:
    """``A @ x`` for ``A = 1/4 tridiag(-1, 2, -1)``."""
    y = 0.5 * x
    y[1:] -= 0.25 * x[:-1]
    y[:-1] -= 0.25 * x[1:]
    return y


def conjugate_gradient(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    x0: np.ndarray | None = None,
    tol: float = 1e-10,
    maxiter: int | None = None,
) -> tuple[np.ndarray, int]:
    """Solve ``Ax = b`` for symmetric positive definite ``A`` given as a matvec.

    Stops when ``||b - Ax|| <= tol``.  Raises :class:`CGNotConverged` after
    ``maxiter`` (default ``10 * len(b)``) iterations.
    """
    d = b.shape[0]
    maxiter = 10 * d if maxiter is None else maxiter
    x = np.zeros(d) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x)
    p = r.copy()
    rr = r @ r
    for it in range(maxiter + 1):
        if math.sqrt(rr) <= tol:
            # recompute the true residual; the recursive one drifts
            r = b - matvec(x)
            rr = r @ r
            if math.sqrt(rr) <= tol:
                return x, it
            p = r.copy()
        Ap = matvec(p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise CGNotConverged(f"CG residual {math.sqrt(rr):.3e} > {tol:g} after {maxiter} iterations")


@dataclass
class QuadraticProblem:
    """Noisy oracle for ``1/2 x'Ax - b'x``; each gradient coordinate gets ``N(0, noise_std^2)``."""

    b: np.ndarray
    noise_std: float = 0.0
    _f_inf: float | None = field(default=None, repr=False)

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        if self.b.ndim != 1 or self.b.shape[0] < 2:
            raise ValueError("b must be a vector with at least 2 entries")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    @property
    def smoothness(self) -> float:
        # largest eigenvalue of 1/4 tridiag(-1,2,-1): (1 + cos(pi/(d+1))) / 2
        return 0.5 * (1.0 + math.cos(math.pi / (self.dim + 1)))

    @property
    def sigma_sq(self) -> float:
        return self.noise_std**2 * self.dim

    def value(self, x: np.ndarray) -> float:
        return float(0.5 * x @ tridiag_matvec(x) - self.b @ x)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return tridiag_matvec(x) - self.b

    def stochastic_grad(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        g = self.grad(x)
        if self.noise_std > 0:
            g += self.noise_std * rng.standard_normal(self.dim)
        return g

    def stochastic_grad_sum(self, x: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
        """Sum of ``count`` independent stochastic gradients at ``x``.

        The noise terms are i.i.d. Gaussian, so their sum is drawn directly as
        ``sqrt(count) * noise_std * N(0, I)``: same law, one draw.
        """
        if count <= 0:
            return np.zeros(self.dim)
        g = count * self.grad(x)
        if self.noise_std > 0:
            g += math.sqrt(count) * self.noise_std * rng.standard_normal(self.dim)
        return g

    def minimizer(self) -> np.ndarray:
        x, _ = conjugate_gradient(tridiag_matvec, self.b)
        return x

    @property
    def f_inf(self) -> float:
        if self._f_inf is None:
            self._f_inf = solve_f_inf(self)
        return self._f_inf


def quad_problem(d: int = 1000, noise_std: float = 0.0003) -> QuadraticProblem:
    """The benchmark quadratic with ``b = -1/4 e_1``."""
    if d < 2:
        raise ValueError("d must be >= 2")
    b = np.zeros(d)
    b[0] = -0.25
    return QuadraticProblem(b=b, noise_std=noise_std)


def solve_f_inf(problem: QuadraticProblem, x0: np.ndarray | None = None, tol: float = 1e-10) -> float:
    """``min f = -1/2 b'x*`` with ``Ax* = b`` solved by CG."""
    if not np.any(problem.b):
        return 0.0
    x, _ = conjugate_gradient(tridiag_matvec, problem.b, x0=x0, tol=tol)
    return float(-0.5 * problem.b @ x)


@dataclass
class HeterogeneousProblem:
    """Average of per-worker quadratics ``f_i`` sharing ``A`` but with their own ``b_i``."""

    components: list[QuadraticProblem]
    aggregate: QuadraticProblem

    @property
    def n(self) -> int:
        return len(self.components)


def hetero_quad_family(
    d: int,
    n: int,
    shift_scale: float,
    noise_std: float,
    rng: np.random.Generator,
) -> HeterogeneousProblem:
    """``b_i = -1/4 e_1 + shift_scale * u_i`` with seeded unit vectors ``u_i``."""
    if d < 2 or n < 1:
        raise ValueError("need d >= 2 and n >= 1")
    base = quad_problem(d, noise_std).b
    u = rng.standard_normal((n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    bs = base + shift_scale * u
    components = [QuadraticProblem(b=bi, noise_std=noise_std) for bi in bs]
    aggregate = QuadraticProblem(b=bs.mean(axis=0), noise_std=noise_std)
    return HeterogeneousProblem(components=components, aggregate=aggregate)
