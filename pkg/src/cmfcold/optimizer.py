"""Limited-memory BFGS with a strong Wolfe line search.

The solver works on flat float64 parameter vectors. Objectives return an
:class:`ObjectiveEvaluation` (or any ``(value, gradient)`` pair).
"""
from __future__ import annotations

import enum
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

_logger = logging.getLogger(__name__)

# Inner products are reduced over fixed-width blocks so that appending zero
# coordinates to a parameter vector never changes a single bit of the result.
_DOT_BLOCK = 2048


class ObjectiveEvaluation(NamedTuple):
    value: float
    gradient: np.ndarray


class Termination(str, enum.Enum):
    GRADIENT_TOLERANCE = "gradient_tolerance"
    RELATIVE_OBJECTIVE = "relative_objective_tolerance"
    MAX_ITERATIONS = "max_iterations"
    LINE_SEARCH_FAILURE = "line_search_failure"
    NON_FINITE = "non_finite_objective"


@dataclass(frozen=True)
class SolverConfig:
    memory_pairs: int = 10
    max_iterations: int = 800
    gradient_tolerance: float = 1e-5
    relative_objective_tolerance: float = 1e-9
    c1: float = 1e-4
    c2: float = 0.9
    max_halvings: int = 30

    def __post_init__(self):
        if self.memory_pairs < 1:
            raise ValueError("memory_pairs must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (self.gradient_tolerance > 0 and self.relative_objective_tolerance > 0):
            raise ValueError("tolerances must be positive")
        if not (0 < self.c1 < self.c2 < 1):
            raise ValueError("line search constants must satisfy 0 < c1 < c2 < 1")


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    gradient: np.ndarray
    trace: list = field(default_factory=list)
    termination: Termination = Termination.MAX_ITERATIONS
    n_iterations: int = 0
    n_evaluations: int = 0

    def __iter__(self):
        # allows ``x, trace, reason = lbfgs_minimize(...)``
        return iter((self.x, self.trace, self.termination))


class NonFiniteObjectiveError(ValueError):
    pass


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    prod = np.multiply(a, b)
    pad = (-prod.shape[0]) % _DOT_BLOCK
    if pad:
        prod = np.concatenate([prod, np.zeros(pad)])
    return math.fsum(prod.reshape(-1, _DOT_BLOCK).sum(axis=1).tolist())


def _evaluate(objective, x):
    out = objective(x)
    value, grad = out
    return float(value), np.asarray(grad, dtype=np.float64)


def _is_finite(value, grad):
    return math.isfinite(value) and bool(np.all(np.isfinite(grad)))


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolating (a, fa, da) and (b, fb, db), or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - da * db
    if rad < 0:
        return None
    d2 = math.copysign(math.sqrt(rad), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


class _LineSearch:
    def __init__(self, objective, x, f0, g0, d, config: SolverConfig):
        self.objective = objective
        self.x = x
        self.f0 = f0
        self.d = d
        self.dphi0 = _dot(g0, d)
        self.config = config
        self.n_evaluations = 0
        self.halvings = 0
        self.non_finite = False

    def _phi(self, alpha):
        self.n_evaluations += 1
        x_new = self.x + alpha * self.d
        f, g = _evaluate(self.objective, x_new)
        if not _is_finite(f, g):
            return x_new, None, None, None
        return x_new, f, g, _dot(g, self.d)

    def _armijo(self, alpha, f):
        return f <= self.f0 + self.config.c1 * alpha * self.dphi0

    def _curvature(self, dphi):
        return abs(dphi) <= -self.config.c2 * self.dphi0

    def run(self, alpha):
        """Returns (alpha, x, f, g) for an accepted step or None."""
        a_prev, f_prev, dphi_prev = 0.0, self.f0, self.dphi0
        best = None
        for i in range(50):
            x_new, f, g, dphi = self._phi(alpha)
            if f is None:
                self.halvings += 1
                if self.halvings > self.config.max_halvings:
                    self.non_finite = True
                    return best
                alpha = a_prev + 0.5 * (alpha - a_prev)
                continue
            if not self._armijo(alpha, f) or (i > 0 and f >= f_prev):
                return self._zoom(a_prev, f_prev, dphi_prev, alpha, f, dphi, best)
            best = (alpha, x_new, f, g)
            if self._curvature(dphi):
                return best
            if dphi >= 0:
                return self._zoom(alpha, f, dphi, a_prev, f_prev, dphi_prev, best)
            a_prev, f_prev, dphi_prev = alpha, f, dphi
            alpha = 2.0 * alpha
        return best

    def _zoom(self, lo, f_lo, d_lo, hi, f_hi, d_hi, best):
        for _ in range(40):
            width = hi - lo
            trial = None
            if d_hi is not None and f_hi is not None:
                trial = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            left, right = min(lo, hi), max(lo, hi)
            margin = 0.1 * abs(width)
            if trial is None or not (left + margin <= trial <= right - margin):
                trial = lo + 0.5 * width
            x_new, f, g, dphi = self._phi(trial)
            if f is None:
                self.halvings += 1
                if self.halvings > self.config.max_halvings:
                    self.non_finite = True
                    return best
                hi, f_hi, d_hi = trial, None, None
                continue
            if not self._armijo(trial, f) or f >= f_lo:
                hi, f_hi, d_hi = trial, f, dphi
            else:
                best = (trial, x_new, f, g)
                if self._curvature(dphi):
                    return best
                if dphi * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = trial, f, dphi
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        # Sufficient decrease holds for ``best`` even when curvature does not.
        return best


def lbfgs_minimize(
    objective: Callable[[np.ndarray], ObjectiveEvaluation],
    x0: Sequence[float],
    config: Optional[SolverConfig] = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> LbfgsResult:
    """Minimize a smooth function with L-BFGS.

    Parameters
    ----------
    objective : callable
        Maps a parameter vector to ``(value, gradient)``.
    x0 : array-like
        Starting point. It is copied.
    config : SolverConfig, optional
        History size, tolerances and iteration cap.
    callback : callable, optional
        Called as ``callback(iteration, value)`` after every accepted step.

    Returns
    -------
    LbfgsResult
        Final iterate, objective trace (starting with the value at ``x0``)
        and the termination reason.
    """
    config = config or SolverConfig()
    x = np.array(x0, dtype=np.float64).ravel()
    f, g = _evaluate(objective, x)
    if not _is_finite(f, g):
        raise NonFiniteObjectiveError("objective is not finite at the starting point")

    result = LbfgsResult(x=x, fun=f, gradient=g, trace=[f], n_evaluations=1)
    if np.max(np.abs(g), initial=0.0) < config.gradient_tolerance:
        result.termination = Termination.GRADIENT_TOLERANCE
        return result

    pairs: deque = deque(maxlen=config.memory_pairs)
    for it in range(1, config.max_iterations + 1):
        if pairs:
            d = -_two_loop(g, pairs)
            alpha0 = 1.0
        else:
            d = -g
            alpha0 = 1.0 / math.sqrt(_dot(g, g))
        if _dot(g, d) >= 0:
            # stale curvature information; restart from steepest descent
            pairs.clear()
            d = -g
            alpha0 = 1.0 / math.sqrt(_dot(g, g))

        search = _LineSearch(objective, x, f, g, d, config)
        step = search.run(alpha0)
        result.n_evaluations += search.n_evaluations
        if step is None:
            result.termination = (Termination.NON_FINITE if search.non_finite
                                  else Termination.LINE_SEARCH_FAILURE)
            break

        _, x_new, f_new, g_new = step
        s = x_new - x
        y = g_new - g
        sy = _dot(s, y)
        if sy > 1e-12 * _dot(y, y):
            pairs.append((s, y, 1.0 / sy))
        f_prev = f
        x, f, g = x_new, f_new, g_new
        result.trace.append(f)
        result.x, result.fun, result.gradient, result.n_iterations = x, f, g, it
        if callback is not None:
            callback(it, f)

        if np.max(np.abs(g)) < config.gradient_tolerance:
            result.termination = Termination.GRADIENT_TOLERANCE
            break
        scale = max(abs(f_prev), abs(f))
        if scale > 0 and (f_prev - f) <= config.relative_objective_tolerance * scale:
            result.termination = Termination.RELATIVE_OBJECTIVE
            break
        if search.non_finite:
            result.termination = Termination.NON_FINITE
            break
    else:
        result.termination = Termination.MAX_ITERATIONS

    _logger.debug("L-BFGS stopped after %d iterations: %s (f=%.6g)",
                  result.n_iterations, result.termination.value, result.fun)
    return result


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * _dot(s, q)
        q -= a * y
        alphas.append(a)
    s, y, _ = pairs[-1]
    q *= _dot(s, y) / _dot(y, y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * _dot(y, q)
        q += (a - b) * s
    return q


def finite_difference_gradient(
    objective_value: Callable[[np.ndarray], float],
    x: Sequence[float],
    step: float = 1e-6,
) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for j in range(x.shape[0]):
        orig = x[j]
        x[j] = orig + step
        f_plus = float(objective_value(x))
        x[j] = orig - step
        f_minus = float(objective_value(x))
        x[j] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteObjectiveError(
                f"objective is not finite around coordinate {j}")
        grad[j] = (f_plus - f_minus) / (2.0 * step)
    return grad
