"""Hypergradient strategies for bi-level objectives.

Five ways to differentiate F(phi*(theta), theta) where phi* approximately
minimizes an inner loss L(phi, theta): reverse-mode differentiation of the
unrolled inner path (ITD), approximate implicit differentiation with a
Neumann series, with conjugate gradient, or with a one-shot finite
difference, plus a Lookahead slow/fast-weight baseline.

The differentiation core stays first order: Hessian-vector and
cross-derivative products are central finite differences of first
gradients. A closed-form quadratic oracle validates every strategy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .models import ParameterSet


class HypergradError(Exception):
    pass


ITD_MAX_STEPS = 20

Vector = np.ndarray
GradFn = Callable[[Vector], Vector]


def _fd_scalar_grad(f: Callable[[Vector], float], x: Vector, h_base: float = 1e-6) -> Vector:
    h = h_base * (1.0 + float(np.linalg.norm(x)))
    g = np.empty_like(x, dtype=np.float64)
    for i in range(x.size):
        bumped = x.astype(np.float64).copy()
        bumped[i] += h
        up = f(bumped)
        bumped[i] = x[i] - h
        down = f(bumped)
        g[i] = (up - down) / (2.0 * h)
    return g


@dataclass
class BilevelProblem:
    """An inner/outer loss pair over flat parameter vectors.

    ``inner_loss(phi, theta)`` and ``outer_loss(phi, theta)`` must be
    finite on finite inputs. Analytic gradient callables are optional;
    missing ones fall back to central differences of the scalar losses.
    Every gradient evaluation increments ``grad_evals`` so strategies can
    be compared on cost.
    """
    inner_loss: Callable[[Vector, Vector], float]
    outer_loss: Callable[[Vector, Vector], float]
    inner_init: Vector
    inner_steps: int
    inner_lr: float
    grad_inner_phi: Callable[[Vector, Vector], Vector] | None = None
    grad_inner_theta: Callable[[Vector, Vector], Vector] | None = None
    grad_outer_phi: Callable[[Vector, Vector], Vector] | None = None
    grad_outer_theta: Callable[[Vector, Vector], Vector] | None = None
    grad_evals: int = field(default=0, init=False)

    def reset_counter(self) -> None:
        self.grad_evals = 0

    def g_inner_phi(self, phi, theta) -> Vector:
        self.grad_evals += 1
        if self.grad_inner_phi is not None:
            return np.asarray(self.grad_inner_phi(phi, theta), dtype=np.float64)
        return _fd_scalar_grad(lambda p: self.inner_loss(p, theta), phi)

    def g_inner_theta(self, phi, theta) -> Vector:
        self.grad_evals += 1
        if self.grad_inner_theta is not None:
            return np.asarray(self.grad_inner_theta(phi, theta), dtype=np.float64)
        return _fd_scalar_grad(lambda t: self.inner_loss(phi, t), theta)

    def g_outer_phi(self, phi, theta) -> Vector:
        self.grad_evals += 1
        if self.grad_outer_phi is not None:
            return np.asarray(self.grad_outer_phi(phi, theta), dtype=np.float64)
        return _fd_scalar_grad(lambda p: self.outer_loss(p, theta), phi)

    def g_outer_theta(self, phi, theta) -> Vector:
        self.grad_evals += 1
        if self.grad_outer_theta is not None:
            return np.asarray(self.grad_outer_theta(phi, theta), dtype=np.float64)
        return _fd_scalar_grad(lambda t: self.outer_loss(phi, t), theta)

    def solve_inner(self, theta: Vector, keep_path: bool = False):
        """Plain gradient descent on the inner loss; optionally the path."""
        phi = np.asarray(self.inner_init, dtype=np.float64).copy()
        path = [phi.copy()]
        for _ in range(self.inner_steps):
            phi = phi - self.inner_lr * self.g_inner_phi(phi, theta)
            if keep_path:
                path.append(phi.copy())
        return (phi, path) if keep_path else phi


# -- strategy configuration ----------------------------------------------

@dataclass(frozen=True)
class ItdUnrolled:
    pass


@dataclass(frozen=True)
class AidNeumann:
    terms: int = 200
    eta: float = 0.5

    def __post_init__(self):
        if self.terms < 1:
            raise HypergradError(f"terms must be >= 1, got {self.terms}")
        if self.eta <= 0.0:
            raise HypergradError(f"eta must be > 0, got {self.eta}")


@dataclass(frozen=True)
class AidCg:
    iters: int = 50
    tol: float = 1e-10

    def __post_init__(self):
        if self.iters < 1:
            raise HypergradError(f"iters must be >= 1, got {self.iters}")
        if self.tol <= 0.0:
            raise HypergradError(f"tol must be > 0, got {self.tol}")


@dataclass(frozen=True)
class AidFd:
    epsilon_rel: float = 1e-3

    def __post_init__(self):
        if self.epsilon_rel <= 0.0:
            raise HypergradError(f"epsilon_rel must be > 0, got {self.epsilon_rel}")


@dataclass(frozen=True)
class LookaheadKind:
    alpha_la: float = 0.5
    sync_period: int = 5

    def __post_init__(self):
        if not 0.0 <= self.alpha_la <= 1.0:
            raise HypergradError(f"alpha_la must be in [0, 1], got {self.alpha_la}")
        if self.sync_period < 1:
            raise HypergradError(f"sync_period must be >= 1, got {self.sync_period}")


HypergradKind = ItdUnrolled | AidNeumann | AidCg | AidFd | LookaheadKind


# -- first-order curvature products --------------------------------------

def hvp(grad_fn: GradFn, phi: Vector, v: Vector) -> Vector:
    """Hessian-vector product via a central difference of gradients.

    ``grad_fn`` evaluates the gradient of the (inner) loss in phi with
    the outer parameters held fixed. The step is
    r = 1e-4 * (1 + ||phi||) / (1 + ||v||).
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        return np.zeros_like(phi, dtype=np.float64)
    r = 1e-4 * (1.0 + float(np.linalg.norm(phi))) / (1.0 + float(np.linalg.norm(v)))
    return (grad_fn(phi + r * v) - grad_fn(phi - r * v)) / (2.0 * r)


def _cross_vjp(problem: BilevelProblem, phi: Vector, theta: Vector, v: Vector) -> Vector:
    """(d^2 L / d theta d phi) . v by differencing grad_theta L along v."""
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        return np.zeros_like(theta, dtype=np.float64)
    r = 1e-4 * (1.0 + float(np.linalg.norm(phi))) / (1.0 + float(np.linalg.norm(v)))
    up = problem.g_inner_theta(phi + r * v, theta)
    down = problem.g_inner_theta(phi - r * v, theta)
    return (up - down) / (2.0 * r)


def neumann_series(apply_contraction: Callable[[Vector], Vector], v: Vector,
                   terms: int) -> Vector:
    """sum_{k=0}^{terms-1} T^k v for a contraction T applied by callable."""
    acc = v.copy()
    cur = v.copy()
    for _ in range(terms - 1):
        cur = apply_contraction(cur)
        acc = acc + cur
    return acc


def cg_solve(apply_matrix: Callable[[Vector], Vector], rhs: Vector, iters: int,
             tol: float) -> tuple[Vector, list[float]]:
    """Conjugate gradient for SPD systems; returns (solution, residual norms)."""
    x = np.zeros_like(rhs, dtype=np.float64)
    r = rhs.astype(np.float64).copy()
    p = r.copy()
    rs = float(r @ r)
    residuals = [np.sqrt(rs)]
    if residuals[0] <= tol:
        return x, residuals
    for _ in range(iters):
        ap = apply_matrix(p)
        denom = float(p @ ap)
        if not np.isfinite(denom) or denom <= 0.0:
            break
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise HypergradError("conjugate gradient produced a non-finite residual")
        residuals.append(np.sqrt(rs_new))
        if residuals[-1] <= tol:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, residuals


# -- the five strategies --------------------------------------------------

def _implicit_combine(problem: BilevelProblem, phi: Vector, theta: Vector,
                      solved: Vector) -> Vector:
    """dF/dtheta = dF/dtheta|explicit - (d^2L/dtheta dphi) . solved."""
    return problem.g_outer_theta(phi, theta) - _cross_vjp(problem, phi, theta, solved)


def hypergrad_itd(problem: BilevelProblem, theta: Vector) -> Vector:
    """Reverse-mode differentiation of the explicitly unrolled inner path."""
    if problem.inner_steps > ITD_MAX_STEPS:
        raise HypergradError(
            f"ITD unrolling is capped at {ITD_MAX_STEPS} steps, got {problem.inner_steps}")
    theta = np.asarray(theta, dtype=np.float64)
    phi_final, path = problem.solve_inner(theta, keep_path=True)
    p = problem.g_outer_phi(phi_final, theta)
    g = problem.g_outer_theta(phi_final, theta)
    lr = problem.inner_lr
    for t in range(problem.inner_steps - 1, -1, -1):
        phi_t = path[t]
        g = g - lr * _cross_vjp(problem, phi_t, theta, p)
        p = p - lr * hvp(lambda q: problem.g_inner_phi(q, theta), phi_t, p)
    return g


def hypergrad_aid_neumann(problem: BilevelProblem, terms: int, eta: float,
                          theta: Vector) -> Vector:
    """Implicit differentiation with a truncated Neumann inverse-Hessian.

    (H)^-1 v is approximated by eta * sum_k (I - eta H)^k v; the caller
    must pick eta below 1/lambda_max of the inner Hessian.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = problem.solve_inner(theta)
    v = problem.g_outer_phi(phi, theta)
    grad_fn = lambda q: problem.g_inner_phi(q, theta)
    contraction = lambda w: w - eta * hvp(grad_fn, phi, w)
    solved = eta * neumann_series(contraction, v, terms)
    return _implicit_combine(problem, phi, theta, solved)


def hypergrad_aid_cg(problem: BilevelProblem, iters: int, tol: float,
                     theta: Vector) -> Vector:
    """Implicit differentiation solving H v = grad_phi F by CG."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = problem.solve_inner(theta)
    v = problem.g_outer_phi(phi, theta)
    grad_fn = lambda q: problem.g_inner_phi(q, theta)
    solved, _ = cg_solve(lambda w: hvp(grad_fn, phi, w), v, iters, tol)
    return _implicit_combine(problem, phi, theta, solved)


def hypergrad_aid_fd(problem: BilevelProblem, epsilon_rel: float,
                     theta: Vector) -> Vector:
    """One-shot finite-difference hypergradient (no inverse-Hessian solve).

    v = grad_phi F(phi*); the cross term is the central difference of
    grad_theta L at phi* +- eps v with eps = epsilon_rel / (1 + ||v||).
    Accurate when the inner Hessian is close to the identity.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = problem.solve_inner(theta)
    v = problem.g_outer_phi(phi, theta)
    norm = float(np.linalg.norm(v))
    if not np.isfinite(norm):
        raise HypergradError("aid_fd: grad_phi F is non-finite")
    g_explicit = problem.g_outer_theta(phi, theta)
    if norm == 0.0:
        return g_explicit
    eps = epsilon_rel / (1.0 + norm)
    up = problem.g_inner_theta(phi + eps * v, theta)
    down = problem.g_inner_theta(phi - eps * v, theta)
    return g_explicit - (up - down) / (2.0 * eps)


def lookahead_update(slow: ParameterSet, fast: ParameterSet, alpha_la: float) -> ParameterSet:
    """slow <- slow + alpha_la * (fast - slow), parameter by parameter."""
    if not 0.0 <= alpha_la <= 1.0:
        raise HypergradError(f"alpha_la must be in [0, 1], got {alpha_la}")
    if slow.names() != fast.names():
        raise HypergradError("lookahead_update: parameter names differ")
    out = []
    for name, s in slow.items():
        f = fast[name]
        if s.shape != f.shape:
            raise HypergradError(f"lookahead_update: shape mismatch for {name!r}")
        out.append((name, s.data + alpha_la * (f.data - s.data)))
    return ParameterSet(out)


def compute_hypergradient(problem: BilevelProblem, kind: HypergradKind,
                          theta: Vector) -> Vector:
    """Dispatch a strategy config. Lookahead has no hypergradient; it
    reports the first-order outer gradient at the solved inner point."""
    if isinstance(kind, ItdUnrolled):
        return hypergrad_itd(problem, theta)
    if isinstance(kind, AidNeumann):
        return hypergrad_aid_neumann(problem, kind.terms, kind.eta, theta)
    if isinstance(kind, AidCg):
        return hypergrad_aid_cg(problem, kind.iters, kind.tol, theta)
    if isinstance(kind, AidFd):
        return hypergrad_aid_fd(problem, kind.epsilon_rel, theta)
    if isinstance(kind, LookaheadKind):
        phi = problem.solve_inner(np.asarray(theta, dtype=np.float64))
        return problem.g_outer_phi(phi, theta)
    raise HypergradError(f"unknown hypergradient strategy: {kind!r}")


# -- closed-form oracle ----------------------------------------------------

def quadratic_oracle(a_matrix: np.ndarray, b: np.ndarray, c: np.ndarray,
                     theta: np.ndarray) -> np.ndarray:
    """Exact hypergradient of the SPD quadratic test problem.

    For L = 0.5 (phi-theta)' A (phi-theta) + b' phi and F = 0.5 ||phi-c||^2:
    phi*(theta) = theta - A^-1 b and dF/dtheta = phi*(theta) - c, computed
    by a direct linear solve.
    """
    a_matrix = np.asarray(a_matrix, dtype=np.float64)
    if not np.allclose(a_matrix, a_matrix.T, atol=1e-12):
        raise HypergradError("quadratic_oracle: A must be symmetric")
    try:
        shift = np.linalg.solve(a_matrix, np.asarray(b, dtype=np.float64))
    except np.linalg.LinAlgError as exc:
        raise HypergradError(f"quadratic_oracle: A is singular ({exc})") from exc
    phi_star = np.asarray(theta, dtype=np.float64) - shift
    return phi_star - np.asarray(c, dtype=np.float64)


def make_quadratic_problem(a_matrix: np.ndarray, b: np.ndarray, c: np.ndarray,
                           inner_init: np.ndarray | None = None,
                           inner_steps: int = 12, inner_lr: float = 1.0) -> BilevelProblem:
    """Bilevel problem for the quadratic oracle, with analytic gradients."""
    a_matrix = np.asarray(a_matrix, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    d = b.size
    init = np.zeros(d) if inner_init is None else np.asarray(inner_init, dtype=np.float64)

    return BilevelProblem(
        inner_loss=lambda phi, theta: float(
            0.5 * (phi - theta) @ a_matrix @ (phi - theta) + b @ phi),
        outer_loss=lambda phi, theta: float(0.5 * np.sum((phi - c) ** 2)),
        inner_init=init,
        inner_steps=inner_steps,
        inner_lr=inner_lr,
        grad_inner_phi=lambda phi, theta: a_matrix @ (phi - theta) + b,
        grad_inner_theta=lambda phi, theta: -(a_matrix @ (phi - theta)),
        grad_outer_phi=lambda phi, theta: phi - c,
        grad_outer_theta=lambda phi, theta: np.zeros(d),
    )


@dataclass(frozen=True)
class QuadraticCase:
    problem: BilevelProblem
    a_matrix: np.ndarray
    b: np.ndarray
    c: np.ndarray
    theta: np.ndarray

    def oracle(self) -> np.ndarray:
        return quadratic_oracle(self.a_matrix, self.b, self.c, self.theta)


def quadratic_family(count: int = 50, max_dim: int = 16, spread: float = 0.04,
                     seed: int = 2024) -> list[QuadraticCase]:
    """Seeded SPD quadratic problems with spectrum inside [1-spread, 1+spread].

    The near-identity spectrum keeps every strategy's stated tolerance
    meaningful: the one-shot finite-difference strategy (which skips the
    inverse-Hessian solve) errs by exactly (A - I) applied to the true
    hypergradient, bounded by ``spread`` in relative terms.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        d = int(rng.integers(2, max_dim + 1))
        m = rng.normal(size=(d, d))
        sym = 0.5 * (m + m.T)
        radius = float(np.max(np.abs(np.linalg.eigvalsh(sym))))
        a_matrix = np.eye(d) + (spread / radius) * sym
        b = rng.normal(size=d)
        c = rng.normal(size=d)
        theta = rng.normal(size=d)
        problem = make_quadratic_problem(a_matrix, b, c, inner_init=rng.normal(size=d))
        cases.append(QuadraticCase(problem=problem, a_matrix=a_matrix, b=b, c=c, theta=theta))
    return cases


def spectral_safe_eta(a_matrix: np.ndarray, safety: float = 0.9) -> float:
    """eta = safety / lambda_max, the Neumann contraction requirement."""
    return safety / float(np.max(np.linalg.eigvalsh(np.asarray(a_matrix, dtype=np.float64))))


def benchmark_strategies(cases: Sequence[QuadraticCase],
                         strategies: dict[str, HypergradKind] | None = None):
    """Per-strategy error/cost rows over the oracle family.

    Returns a list of dicts with keys: strategy, problem, dim, rel_error,
    grad_evals, wall_ms.
    """
    import time

    rows = []
    for index, case in enumerate(cases):
        exact = case.oracle()
        scale = float(np.linalg.norm(exact))
        per_case = strategies or {
            "itd": ItdUnrolled(),
            "aid_neumann": AidNeumann(terms=200, eta=spectral_safe_eta(case.a_matrix)),
            "aid_cg": AidCg(iters=case.b.size, tol=1e-12),
            "aid_fd": AidFd(epsilon_rel=1e-3),
            "lookahead": LookaheadKind(),
        }
        for name, kind in per_case.items():
            case.problem.reset_counter()
            start = time.perf_counter()
            estimate = compute_hypergradient(case.problem, kind, case.theta)
            wall_ms = (time.perf_counter() - start) * 1e3
            err = float(np.linalg.norm(estimate - exact)) / max(scale, 1e-12)
            rows.append({
                "strategy": name,
                "problem": index,
                "dim": case.b.size,
                "rel_error": err,
                "grad_evals": case.problem.grad_evals,
                "wall_ms": wall_ms,
            })
    return rows
