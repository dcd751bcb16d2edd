"""Receding-horizon predictive control on a NARX predictor.

At every sample the controller minimizes

    J = sum_{i=n1}^{n2} (r(k+i) - yhat(k+i))^2 + rho * sum_{i=1}^{nu} du(k+i-1)^2

over the ``nu`` free moves ``U = [u(k), ..., u(k+nu-1)]`` (later moves repeat
the last free one) with a projected Levenberg-Marquardt iteration, then
applies ``u(k)``.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .narx import predict_with_jacobian

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Raised when the damped linear system cannot be solved."""

    def __init__(self, message: str, lam: float):
        super().__init__(f"{message} (lambda={lam:g})")
        self.lam = lam


@dataclass(frozen=True)
class MpcConfig:
    n1: int = 1
    n2: int = 7
    nu: int = 2
    rho: float = 0.05
    u_min: float = 0.0
    u_max: float = 4.0
    max_lm_iterations: int = 100
    lambda0: float = 1e-2
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e10
    tol: float = 1e-9

    def __post_init__(self):
        if not 1 <= self.n1 <= self.n2:
            raise ValueError(f"need 1 <= n1 <= n2, got n1={self.n1}, n2={self.n2}")
        if not 1 <= self.nu <= self.n2:
            raise ValueError(f"need 1 <= nu <= n2, got nu={self.nu}")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if not self.u_min < self.u_max:
            raise ValueError("need u_min < u_max")
        if self.max_lm_iterations < 1:
            raise ValueError("max_lm_iterations must be >= 1")
        if not (self.lambda0 > 0 and self.lambda_up > 1 and self.lambda_down > 1):
            raise ValueError("invalid damping settings")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    def check_delay(self, delay: int) -> None:
        """Horizon consistency with the model's input delay."""
        if self.nu > self.n2 - delay + 1:
            raise ValueError(f"nu={self.nu} exceeds n2 - delay + 1 = {self.n2 - delay + 1}")

    @property
    def n_costed(self) -> int:
        return self.n2 - self.n1 + 1


@dataclass
class ControlSolution:
    u_sequence: np.ndarray
    j_value: float
    iterations: int
    gradient_norm: float
    predicted_y: np.ndarray
    stop_reason: str = ""
    trace: list[tuple[int, float, float, float]] = field(default_factory=list)


def expand_controls(u_seq, n2: int) -> np.ndarray:
    """Hold the last free move to fill a length-``n2`` input sequence."""
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1)
    if not 1 <= u_seq.size <= n2:
        raise ValueError(f"need 1 <= len(u_seq) <= n2, got {u_seq.size} and {n2}")
    return u_seq[np.minimum(np.arange(n2), u_seq.size - 1)]


def expansion_matrix(nu: int, n2: int) -> np.ndarray:
    """Matrix ``E`` with ``expand_controls(U, n2) == E @ U``."""
    e = np.zeros((n2, nu))
    e[np.arange(n2), np.minimum(np.arange(n2), nu - 1)] = 1.0
    return e


def difference_matrix(nu: int) -> np.ndarray:
    """First-difference operator ``D``: ``du = D @ U - [u_prev, 0, ...]``."""
    return np.eye(nu) - np.eye(nu, k=-1)


def _increments(u_seq: np.ndarray, u_prev: float) -> np.ndarray:
    return np.diff(u_seq, prepend=u_prev)


def _reference(r, cfg: MpcConfig) -> np.ndarray:
    r = np.asarray(r, dtype=float).reshape(-1)
    if r.size == 1:
        return np.full(cfg.n_costed, float(r[0]))
    if r.size != cfg.n_costed:
        raise ValueError(f"reference needs {cfg.n_costed} entries (i = n1..n2), got {r.size}")
    return r


def _evaluate(u_seq, r, model, past_y, past_u, u_prev, cfg: MpcConfig, derivatives: bool):
    """Cost and optionally gradient / Gauss-Newton Hessian at ``u_seq``."""
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1)
    if u_seq.size != cfg.nu:
        raise ValueError(f"expected {cfg.nu} control moves, got {u_seq.size}")
    r = _reference(r, cfg)
    future = expand_controls(u_seq, cfg.n2)
    preds, jac = predict_with_jacobian(model, past_y, past_u, future, cfg.n2)
    y_hat = preds[cfg.n1 - 1 :]
    err = r - y_hat
    du = _increments(u_seq, u_prev)
    j = float(err @ err + cfg.rho * (du @ du))
    if not derivatives:
        return j, y_hat, None, None
    phi = jac[cfg.n1 - 1 :] @ expansion_matrix(cfg.nu, cfg.n2)
    d = difference_matrix(cfg.nu)
    grad = -2.0 * phi.T @ err + 2.0 * cfg.rho * d.T @ du
    hess = 2.0 * phi.T @ phi + 2.0 * cfg.rho * d.T @ d
    return j, y_hat, grad, hess


def cost(u_seq, r, model, past_y, past_u, u_prev: float, cfg: MpcConfig) -> float:
    """Tracking-plus-move-penalty cost of a candidate move sequence.

    Args:
        u_seq: Free moves ``u(k), ..., u(k+nu-1)``.
        r: Reference ``r(k+n1), ..., r(k+n2)`` or a scalar setpoint.
        model: Predictor with the rollout interface of ``NarxModel``.
        past_y: Measured outputs up to ``y(k)``.
        past_u: Applied inputs up to ``u(k-1)``.
        u_prev: Input applied at ``k-1``; the first increment is taken from it.
        cfg: Horizons and weights.
    """
    return _evaluate(u_seq, r, model, past_y, past_u, u_prev, cfg, False)[0]


def cost_gradient(u_seq, r, model, past_y, past_u, u_prev: float, cfg: MpcConfig) -> np.ndarray:
    """``-2 phi' e + 2 rho D' du`` with ``phi`` the output sensitivity to the free moves."""
    return _evaluate(u_seq, r, model, past_y, past_u, u_prev, cfg, True)[2]


def cost_hessian_gn(u_seq, r, model, past_y, past_u, u_prev: float, cfg: MpcConfig) -> np.ndarray:
    """Gauss-Newton Hessian ``2 phi' phi + 2 rho D' D`` (prediction curvature dropped)."""
    return _evaluate(u_seq, r, model, past_y, past_u, u_prev, cfg, True)[3]


def _projected_gradient_norm(u, g, lo, hi) -> float:
    return float(np.linalg.norm(u - np.clip(u - g, lo, hi)))


def solve(
    past_y,
    past_u,
    r,
    u_prev: float,
    model,
    cfg: MpcConfig,
    warm_start=None,
) -> ControlSolution:
    """Minimize the control cost by projected Levenberg-Marquardt.

    Each iteration solves ``(H + lam I) d = -G`` over the free moves and
    tries the full step projected onto ``[u_min, u_max]``.  A move sitting
    on a bound whose gradient points outward is held fixed for that
    iteration, which keeps the step from zigzagging along an active bound.  A step that lowers the cost is
    accepted and ``lam`` shrinks; otherwise ``lam`` grows and the step is
    recomputed.  Iteration ends when the projected gradient falls below
    ``cfg.tol``, after ``cfg.max_lm_iterations`` accepted steps, or when
    ``lam`` passes ``cfg.lambda_max``; the best iterate is returned.
    """
    cfg.check_delay(model.spec.delay)
    lo, hi = cfg.u_min, cfg.u_max
    if warm_start is None:
        u = np.full(cfg.nu, float(u_prev))
    else:
        u = np.asarray(warm_start, dtype=float).reshape(-1).copy()
        if u.size != cfg.nu:
            raise ValueError(f"warm start must have {cfg.nu} entries, got {u.size}")
    u = np.clip(u, lo, hi)

    j, y_hat, g, h = _evaluate(u, r, model, past_y, past_u, u_prev, cfg, True)
    lam = cfg.lambda0
    pg = _projected_gradient_norm(u, g, lo, hi)
    trace = [(0, j, lam, pg)]
    it = 0
    reason = "max iterations"
    while it < cfg.max_lm_iterations:
        if pg <= cfg.tol:
            reason = "gradient tolerance"
            break
        free = ~(((u <= lo) & (g > 0)) | ((u >= hi) & (g < 0)))
        h_free = h[np.ix_(free, free)]
        eye = np.eye(int(free.sum()))
        accepted = False
        while lam <= cfg.lambda_max:
            d = np.zeros(cfg.nu)
            try:
                d[free] = np.linalg.solve(h_free + lam * eye, -g[free])
            except np.linalg.LinAlgError as exc:
                raise SolverError("damped system is singular", lam) from exc
            if not np.all(np.isfinite(d)):
                raise SolverError("damped system gave a non-finite step", lam)
            u_new = np.clip(u + d, lo, hi)
            if np.array_equal(u_new, u):
                lam *= cfg.lambda_up
                continue
            j_new = _evaluate(u_new, r, model, past_y, past_u, u_prev, cfg, False)[0]
            if j_new < j:
                accepted = True
                break
            lam *= cfg.lambda_up
        if not accepted:
            reason = "lambda overflow"
            break
        it += 1
        lam = max(lam / cfg.lambda_down, 1e-20)
        u = u_new
        j, y_hat, g, h = _evaluate(u, r, model, past_y, past_u, u_prev, cfg, True)
        pg = _projected_gradient_norm(u, g, lo, hi)
        trace.append((it, j, lam, pg))
    return ControlSolution(
        u_sequence=u,
        j_value=j,
        iterations=it,
        gradient_norm=pg,
        predicted_y=y_hat,
        stop_reason=reason,
        trace=trace,
    )


class Controller:
    """Receding-horizon controller state: signal histories and the last solution.

    Histories are seeded with constant values ``y0`` and ``u0`` so that the
    first solve has full regressors.
    """

    def __init__(self, model, cfg: MpcConfig, y0: float, u0: float):
        cfg.check_delay(model.spec.delay)
        self.model = model
        self.cfg = cfg
        spec = model.spec
        self.past_y: deque[float] = deque([float(y0)] * spec.ny, maxlen=spec.ny)
        n_u = max(1, spec.nu + spec.delay - 2)
        self.past_u: deque[float] = deque([float(u0)] * n_u, maxlen=n_u)
        self.u_prev = float(np.clip(u0, cfg.u_min, cfg.u_max))
        self.solution: ControlSolution | None = None
        self.next_prediction = float(y0)
        self._started = False

    def warm_start(self) -> np.ndarray | None:
        if self.solution is None:
            return None
        u = self.solution.u_sequence
        return np.append(u[1:], u[-1])

    def step(self, measurement: float, r) -> float:
        """Take a new measurement, re-solve and return the input to apply now."""
        if self._started:
            self.past_y.append(float(measurement))
        else:
            # seeded history stands in for samples before the first measurement
            self.past_y = deque([float(measurement)] * len(self.past_y), maxlen=self.past_y.maxlen)
            self._started = True
        sol = solve(
            np.array(self.past_y),
            np.array(self.past_u),
            r,
            self.u_prev,
            self.model,
            self.cfg,
            warm_start=self.warm_start(),
        )
        self.solution = sol
        u_now = float(sol.u_sequence[0])
        self.next_prediction = float(
            self.model.predict_horizon(np.array(self.past_y), np.array(self.past_u), [u_now], 1)[0]
        )
        self.past_u.append(u_now)
        self.u_prev = u_now
        return u_now


def mpc_step(controller: Controller, measurement: float, r) -> float:
    """One receding-horizon step; see ``Controller.step``."""
    return controller.step(measurement, r)
