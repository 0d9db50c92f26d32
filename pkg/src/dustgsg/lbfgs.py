"""Limited-memory BFGS with a strong-Wolfe line search."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import line_search


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str
    history: list[float] = field(default_factory=list)


def _two_loop(g: np.ndarray, S: list, Y: list) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if S:
        q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def minimize_lbfgs(
    fun_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    memory: int = 10,
    gtol: float = 1e-9,
    maxiter: int = 200,
    c1: float = 1e-4,
    c2: float = 0.9,
) -> LbfgsResult:
    """Minimize f with analytic gradient; stops when max|grad| < gtol."""
    cache = {}

    def evaluate(x):
        key = x.tobytes()
        if key not in cache:
            if len(cache) > 64:
                cache.clear()
            f, g = fun_grad(x)
            cache[key] = (float(f), np.asarray(g, dtype=float))
        return cache[key]

    x = np.asarray(x0, dtype=float).copy()
    f, g = evaluate(x)
    S, Y = [], []
    history = [f]
    message = "max iterations reached"
    converged = False
    it = 0
    for it in range(maxiter):
        if np.abs(g).max() < gtol:
            converged, message = True, "gradient tolerance reached"
            break
        d = -_two_loop(g, S, Y)
        predicted = abs(d @ g)  # first-order decrease of a full quasi-Newton step
        if d @ g >= 0:
            S, Y = [], []
            d = -g
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            alpha, *_ = line_search(lambda z: evaluate(z)[0], lambda z: evaluate(z)[1], x, d, gfk=g, old_fval=f, c1=c1, c2=c2)
            if alpha is None and S:
                S, Y = [], []
                d = -g
                alpha, *_ = line_search(lambda z: evaluate(z)[0], lambda z: evaluate(z)[1], x, d, gfk=g, old_fval=f, c1=c1, c2=c2)
        if alpha is None:
            # the decrease still on offer is below the rounding error of f itself
            stalled = predicted <= 1e-12 * max(abs(f), 1e-300)
            message = "precision floor" if stalled else "line search failed"
            break
        x_new = x + alpha * d
        f_new, g_new = evaluate(x_new)
        s, y = x_new - x, g_new - g
        if y @ s > 1e-16 * (s @ s):
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        x, f, g = x_new, f_new, g_new
        history.append(f)
    else:
        it = maxiter
        if np.abs(g).max() < gtol:
            converged, message = True, "gradient tolerance reached"
    return LbfgsResult(x, f, g, it, converged, message, history)
