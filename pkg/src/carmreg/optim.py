"""Derivative-free minimisation: Brent line search and Powell's direction-set method."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadBracket, NonFiniteObjective

GOLD = (1.0 + math.sqrt(5.0)) / 2.0
CGOLD = 0.5 * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class OptimConfig:
    """Powell settings.

    ``x_tol`` is a per-parameter absolute tolerance; it also scales the initial
    direction set so that mixed units take comparable first steps. ``line_tol``
    is the relative Brent tolerance along a line; the absolute floor is a tenth
    of ``x_tol`` along the line direction.
    ``reset_every`` restores the scaled axes every N sweeps (default: dimension).
    """

    x_tol: float | tuple[float, ...] = 1e-6
    f_rel_tol: float = 1e-6
    max_iters: int = 100
    max_evals: int = 20000
    line_tol: float = 1e-4
    bounds: tuple[tuple[float, float], ...] | None = None
    max_expansions: int = 50
    reset_every: int | None = None

    def __post_init__(self):
        xt = np.atleast_1d(np.asarray(self.x_tol, dtype=float))
        if np.any(~(xt > 0)):
            raise ValueError("x_tol must be positive")
        if not (self.f_rel_tol > 0 and self.line_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1 or self.max_evals < 1:
            raise ValueError("max_iters and max_evals must be >= 1")
        if self.bounds is not None:
            for lo, hi in self.bounds:
                if not lo < hi:
                    raise ValueError(f"bounds need lo < hi, got ({lo}, {hi})")


@dataclass
class OptimResult:
    x_min: np.ndarray
    f_min: float
    evals: int
    iters: int
    converged: bool
    message: str = ""
    trace: list[tuple[np.ndarray, float]] = field(default_factory=list)


class _BudgetExhausted(Exception):
    pass


def _brent(phi, a, b, x, fx, tol, abs_tol, max_iter=200):
    """Brent minimisation of ``phi`` on [a, b] starting from its best known point ``x``."""
    if a > b:
        a, b = b, a
    v = w = x
    fv = fw = fx
    d = e = 0.0
    for _ in range(max_iter):
        xm = 0.5 * (a + b)
        tol1 = tol * abs(x) + abs_tol
        tol2 = 2.0 * tol1
        if abs(x - xm) <= tol2 - 0.5 * (b - a):
            break
        golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            etemp = e
            e = d
            if not (abs(p) >= abs(0.5 * q * etemp) or p <= q * (a - x) or p >= q * (b - x)):
                d = p / q
                u = x + d
                if u - a < tol2 or b - u < tol2:
                    d = math.copysign(tol1, xm - x)
                golden = False
        if golden:
            e = (a - x) if x >= xm else (b - x)
            d = CGOLD * e
        u = x + d if abs(d) >= tol1 else x + math.copysign(tol1, d)
        fu = phi(u)
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return x, fx


def brent_line_min(f, bracket, tol: float = 1.48e-8, abs_tol: float = 1e-10,
                   max_iter: int = 200) -> tuple[float, float]:
    """Minimise a 1D function inside ``bracket = (a, b, c)`` with f(b) below f(a) and f(c).

    Golden-section steps with parabolic interpolation when it is safe; stops
    once the bracket is within ``tol * |x| + abs_tol`` of the estimate.
    """
    a, b, c = (float(v) for v in bracket)
    if not (a < b < c or c < b < a):
        raise BadBracket(f"bracket points must satisfy a < b < c, got ({a}, {b}, {c})")
    fa, fb, fc = f(a), f(b), f(c)
    if not (fb < fa and fb < fc):
        raise BadBracket(f"f(b)={fb} must be below f(a)={fa} and f(c)={fc}")
    return _brent(f, a, c, b, fb, tol, abs_tol, max_iter)


class _Evaluator:
    def __init__(self, f, lo, hi, max_evals):
        self.f, self.lo, self.hi, self.max_evals = f, lo, hi, max_evals
        self.evals = 0
        self.best_x = None
        self.best_f = math.inf

    def __call__(self, x):
        if self.evals >= self.max_evals:
            raise _BudgetExhausted
        x = np.clip(x, self.lo, self.hi)
        fx = float(self.f(x.copy()))
        self.evals += 1
        if not math.isfinite(fx):
            raise NonFiniteObjective(f"objective returned {fx} at {x.tolist()}")
        if fx < self.best_f:
            self.best_f, self.best_x = fx, x.copy()
        return fx


def _line_range(x, d, lo, hi):
    lam_lo, lam_hi = -math.inf, math.inf
    for xi, di, li, hi_ in zip(x, d, lo, hi):
        if di > 0:
            lam_lo = max(lam_lo, (li - xi) / di)
            lam_hi = min(lam_hi, (hi_ - xi) / di)
        elif di < 0:
            lam_lo = max(lam_lo, (hi_ - xi) / di)
            lam_hi = min(lam_hi, (li - xi) / di)
    return min(lam_lo, 0.0), max(lam_hi, 0.0)


def _bracket(phi, f0, lam_lo, lam_hi, max_expansions):
    """Golden-ratio expansion from 0 with unit first step, clamped to [lam_lo, lam_hi].

    Returns ``(a, b, c, fb)`` with ``b`` the best point and [a, c] containing it;
    ``b`` may coincide with an end when the descent runs into a bound.
    """
    clamp = lambda t: min(max(t, lam_lo), lam_hi)  # noqa: E731
    x1 = clamp(1.0)
    f1 = phi(x1) if x1 != 0.0 else f0
    if not f1 < f0:
        xm = clamp(-1.0)
        fm = phi(xm) if xm != 0.0 else f0
        if not fm < f0:
            return xm, 0.0, x1, f0
        x1, f1, sign = xm, fm, -1.0
        prev, fprev = 0.0, f0
    else:
        prev, fprev, sign = 0.0, f0, 1.0
    for _ in range(max_expansions):
        x2 = clamp(x1 + GOLD * (x1 - prev))
        if x2 == x1:
            return prev, x1, x1, f1
        f2 = phi(x2)
        if f2 >= f1:
            return prev, x1, x2, f1
        prev, fprev, x1, f1 = x1, f1, x2, f2
    return prev, x1, x1, f1


def powell_minimize(f, x0, cfg: OptimConfig | None = None) -> OptimResult:
    """Minimise ``f`` over R^n (or a box) with Powell's conjugate-direction method.

    Each sweep line-minimises along every direction; the net sweep
    displacement then replaces the direction of largest decrease when the
    standard acceptance test passes. Stops on relative f change, ``max_iters``
    sweeps, ``max_evals`` evaluations, or a sweep along the scaled coordinate
    axes that moves no parameter by more than its ``x_tol`` (a small move
    along learned directions first resets the set to the axes).
    """
    cfg = cfg or OptimConfig()
    x = np.array(x0, dtype=float).ravel()
    n = x.size
    if n < 1:
        raise ValueError("x0 must have at least one parameter")
    xtol = np.broadcast_to(np.asarray(cfg.x_tol, dtype=float), (n,)).copy()
    if cfg.bounds is not None:
        if len(cfg.bounds) != n:
            raise ValueError(f"expected {n} bounds, got {len(cfg.bounds)}")
        lo = np.array([b[0] for b in cfg.bounds], dtype=float)
        hi = np.array([b[1] for b in cfg.bounds], dtype=float)
    else:
        lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    x = np.clip(x, lo, hi)
    reset_every = cfg.reset_every or n
    ev = _Evaluator(f, lo, hi, cfg.max_evals)
    trace: list[tuple[np.ndarray, float]] = []

    def line_min(x, fx, d):
        lam_lo, lam_hi = _line_range(x, d, lo, hi)
        if lam_lo == lam_hi == 0.0:
            return x, fx
        points = {}

        def phi(t):
            p = np.clip(x + t * d, lo, hi)
            val = ev(p)
            points[t] = p
            return val

        a, b, c, fb = _bracket(phi, fx, lam_lo, lam_hi, cfg.max_expansions)
        if a != c:
            # absolute floor: a tenth of the step that moves some parameter by its x_tol
            floor = 0.1 / float(np.max(np.abs(d) / xtol))
            b, fb = _brent(phi, a, c, b, fb, cfg.line_tol, floor)
        if fb < fx:
            return points[b], fb
        return x, fx

    converged, message, iters = False, "max_iters reached", 0
    try:
        fx = ev(x)
        trace.append((x.copy(), fx))
        dirs, on_axes = np.diag(xtol), True
        for it in range(cfg.max_iters):
            x_start, f_start = x.copy(), fx
            biggest, ibig = 0.0, 0
            for i in range(n):
                f_prev = fx
                x, fx = line_min(x, fx, dirs[i])
                if f_prev - fx > biggest:
                    biggest, ibig = f_prev - fx, i
            iters = it + 1
            if 2.0 * (f_start - fx) <= cfg.f_rel_tol * (abs(f_start) + abs(fx)) + 1e-30:
                converged, message = True, "relative f change below f_rel_tol"
                trace.append((x.copy(), fx))
                break
            if np.all(np.abs(x - x_start) <= xtol):
                if on_axes:
                    converged, message = True, "parameter change below x_tol"
                    trace.append((x.copy(), fx))
                    break
                # a stall along learned directions is rechecked along the axes
                trace.append((x.copy(), fx))
                dirs, on_axes = np.diag(xtol), True
                continue
            x_ext = np.clip(2.0 * x - x_start, lo, hi)
            new_dir = x - x_start
            f_ext = ev(x_ext)
            if f_ext < f_start:
                t = (2.0 * (f_start - 2.0 * fx + f_ext) * (f_start - fx - biggest) ** 2
                     - biggest * (f_start - f_ext) ** 2)
                if t < 0.0:
                    x, fx = line_min(x, fx, new_dir)
                    dirs[ibig] = dirs[n - 1]
                    dirs[n - 1] = new_dir
                    on_axes = False
                if f_ext < fx:
                    x, fx = x_ext, f_ext
            trace.append((x.copy(), fx))
            if (it + 1) % reset_every == 0:
                dirs, on_axes = np.diag(xtol), True
    except _BudgetExhausted:
        message = "max_evals reached"
        if ev.best_x is not None and ev.best_f <= fx:
            x, fx = ev.best_x, ev.best_f
        trace.append((x.copy(), fx))
    return OptimResult(x, fx, ev.evals, iters, converged, message, trace)
