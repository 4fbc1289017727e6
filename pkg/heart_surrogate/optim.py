from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from heart_surrogate.errors import ConfigurationError, DivergenceError

logger = logging.getLogger(__name__)

ValueAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]
IterationHook = Callable[[int, np.ndarray, float], None]

# Returned to the quasi-Newton line search in place of a diverged evaluation so it backtracks.
DIVERGED_VALUE = 1e30


class Adam:
    def __init__(
        self,
        lr: float = 1e-2,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1:
            raise ConfigurationError(f'Invalid Adam settings lr={lr}, betas=({beta1}, {beta2})')
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: Optional[np.ndarray] = None
        self._v: Optional[np.ndarray] = None
        self._t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self._m is None or self._v is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self._t += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grad**2
        m_hat = self._m / (1.0 - self.beta1**self._t)
        v_hat = self._v / (1.0 - self.beta2**self._t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    n_iter: int
    success: bool
    message: str
    # objective value after every accepted iteration, starting with the initial point
    history: list[float] = field(default_factory=list)


def lbfgs(
    value_and_grad: ValueAndGrad,
    x0: np.ndarray,
    max_iter: int,
    memory: int = 20,
    gtol: float = 1e-10,
    ftol: float = 1e-15,
    label: str = 'lbfgs',
    on_iteration: Optional[IterationHook] = None,
) -> LbfgsResult:
    """
    Unbounded limited-memory BFGS driven by scipy's L-BFGS-B.

    The line search is scipy's own Moré-Thuente search, which accepts steps under the strong
    Wolfe conditions with its fixed constants (sufficient decrease 1e-3, curvature 0.9); `ftol`
    and `gtol` here are the stopping tolerances. A `DivergenceError` raised inside
    `value_and_grad` is reported to the line search as a huge objective value, which makes it
    shrink the step.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    cache: dict[str, tuple[np.ndarray, float]] = {}

    def objective(x: np.ndarray) -> tuple[float, np.ndarray]:
        try:
            value, grad = value_and_grad(x)
        except DivergenceError as exc:
            logger.debug('%s: diverged during line search: %s', label, exc)
            return DIVERGED_VALUE, np.zeros_like(x)
        if not np.isfinite(value) or not np.isfinite(grad).all():
            return DIVERGED_VALUE, np.zeros_like(x)
        cache['last'] = (x.copy(), float(value))
        return float(value), np.asarray(grad, dtype=np.float64)

    f0, _ = objective(x0)
    if f0 >= DIVERGED_VALUE:
        raise DivergenceError(f'{label}: objective is not finite at the starting point')
    history = [f0]

    def callback(xk: np.ndarray) -> None:
        last_x, last_f = cache['last']
        history.append(last_f if np.array_equal(last_x, xk) else objective(xk)[0])
        logger.debug('%s iter %d: %.6e', label, len(history) - 1, history[-1])
        if on_iteration is not None:
            on_iteration(len(history) - 1, xk, history[-1])

    if max_iter <= 0:
        return LbfgsResult(x0, f0, 0, True, 'no iterations requested', history)
    res = minimize(
        objective,
        x0,
        jac=True,
        method='L-BFGS-B',
        callback=callback,
        options={'maxiter': max_iter, 'maxcor': memory, 'gtol': gtol, 'ftol': ftol, 'maxls': 40},
    )
    message = res.message.decode() if isinstance(res.message, bytes) else str(res.message)
    return LbfgsResult(
        np.asarray(res.x), float(res.fun), int(res.nit), bool(res.success), message, history
    )
