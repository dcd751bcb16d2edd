"""Continuous stirred tank reactor with two feeds and a consuming reaction.

State is the liquid level ``h`` and the product concentration ``cb``; the
manipulated input is the concentrated-feed flow ``w1``.  The diluted-feed
flow is held at ``PlantParams.w2_fixed``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class PlantError(ValueError):
    """Raised for inputs outside the domain of the reactor dynamics."""


class IntegrationError(PlantError):
    """Raised when an integrator substep leaves the admissible state space."""

    def __init__(self, message: str, substep: int):
        super().__init__(message)
        self.substep = substep


@dataclass(frozen=True)
class PlantParams:
    cb1: float = 24.9
    cb2: float = 0.1
    k1: float = 1.0
    k2: float = 1.0
    outflow_coeff: float = 0.2
    w2_fixed: float = 0.1

    def __post_init__(self):
        values = (self.cb1, self.cb2, self.k1, self.k2, self.outflow_coeff, self.w2_fixed)
        if not all(math.isfinite(v) for v in values):
            raise PlantError("plant parameters must be finite")
        if not self.cb1 > self.cb2 >= 0:
            raise PlantError(f"need cb1 > cb2 >= 0, got cb1={self.cb1}, cb2={self.cb2}")
        if self.k1 < 0 or self.k2 < 0:
            raise PlantError("rate constants must be non-negative")
        if self.outflow_coeff <= 0:
            raise PlantError("outflow_coeff must be positive")
        if self.w2_fixed < 0:
            raise PlantError("w2_fixed must be non-negative")


@dataclass(frozen=True)
class PlantState:
    h: float
    cb: float

    def __post_init__(self):
        if not (math.isfinite(self.h) and math.isfinite(self.cb)):
            raise PlantError(f"non-finite state h={self.h}, cb={self.cb}")
        if self.h <= 0:
            raise PlantError(f"liquid level must be positive, got h={self.h}")
        if self.cb < 0:
            raise PlantError(f"concentration must be non-negative, got cb={self.cb}")


@dataclass(frozen=True)
class StateDerivative:
    dh_dt: float
    dcb_dt: float


DEFAULT_PARAMS = PlantParams()


def _rates(h: float, cb: float, w1: float, p: PlantParams) -> tuple[float, float]:
    # h > 0 is the caller's responsibility
    w2 = p.w2_fixed
    dh = w1 + w2 - p.outflow_coeff * math.sqrt(h)
    dcb = (
        (p.cb1 - cb) * w1 / h
        + (p.cb2 - cb) * w2 / h
        - p.k1 * cb / (1.0 + p.k2 * cb) ** 2
    )
    return dh, dcb


def _check_flow(w1: float) -> None:
    if math.isnan(w1):
        raise PlantError("flow w1 is NaN")
    if w1 < 0:
        raise PlantError(f"flow w1 must be non-negative, got {w1}")


def derivatives(state: PlantState, w1: float, params: PlantParams = DEFAULT_PARAMS) -> StateDerivative:
    """Time derivatives of level and concentration.

    Args:
        state: Current reactor state.
        w1: Concentrated-feed flow rate, ``>= 0``.
        params: Reactor constants.

    Returns:
        The pair ``(dh/dt, dcb/dt)``.
    """
    _check_flow(w1)
    if not (state.h > 0):
        raise PlantError(f"dynamics are singular at h={state.h}")
    if math.isnan(state.cb):
        raise PlantError("concentration is NaN")
    return StateDerivative(*_rates(state.h, state.cb, w1, params))


def step(
    state: PlantState,
    w1: float,
    dt: float,
    params: PlantParams = DEFAULT_PARAMS,
) -> PlantState:
    """Advance the state by one classical RK4 step with ``w1`` held over ``dt``."""
    if not dt > 0:
        raise PlantError(f"dt must be positive, got {dt}")
    _check_flow(w1)
    h, cb = state.h, state.cb
    k1h, k1c = _rates(h, cb, w1, params)
    stages = ((0.5, 2), (0.5, 3), (1.0, 4))
    slopes = [(k1h, k1c)]
    for frac, idx in stages:
        ph, pc = slopes[-1]
        hh = h + frac * dt * ph
        if not hh > 0:
            raise IntegrationError(f"RK4 substep {idx} reached h={hh} <= 0", idx)
        slopes.append(_rates(hh, cb + frac * dt * pc, w1, params))
    (ah, ac), (bh, bc), (ch, cc), (dh_, dc) = slopes
    h_new = h + dt / 6.0 * (ah + 2.0 * bh + 2.0 * ch + dh_)
    cb_new = cb + dt / 6.0 * (ac + 2.0 * bc + 2.0 * cc + dc)
    if not h_new > 0:
        raise IntegrationError(f"RK4 update reached h={h_new} <= 0", 5)
    # tiny negative concentrations are round-off near cb=0 with no feed
    if -1e-12 < cb_new < 0:
        cb_new = 0.0
    return PlantState(h_new, cb_new)


def n_substeps(interval: float, dt: float) -> int:
    """Number of ``dt`` substeps in ``interval``; the ratio must be integral."""
    ratio = interval / dt
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise PlantError(f"interval {interval} is not a multiple of substep {dt}")
    return n


def advance(
    state: PlantState,
    w1: float,
    interval: float,
    dt: float = 0.01,
    params: PlantParams = DEFAULT_PARAMS,
) -> PlantState:
    """Integrate over ``interval`` with zero-order-hold input using RK4 substeps."""
    for _ in range(n_substeps(interval, dt)):
        state = step(state, w1, dt, params)
    return state


def steady_state(
    w1: float,
    params: PlantParams = DEFAULT_PARAMS,
    tol: float = 1e-13,
    max_iter: int = 200,
) -> PlantState:
    """Equilibrium of the reactor for a constant feed flow.

    The level follows in closed form from the outflow law; the concentration
    is found by bisection of the concentration balance on ``[0, max(cb1, cb2)]``.
    Where the reaction term admits several equilibria the bisection returns
    one of them.
    """
    _check_flow(w1)
    total = w1 + params.w2_fixed
    if not total > 0:
        raise PlantError("steady state needs a positive total inflow")
    h = (total / params.outflow_coeff) ** 2

    def residual(cb: float) -> float:
        return _rates(h, cb, w1, params)[1]

    lo, hi = 0.0, max(params.cb1, params.cb2)
    r_lo, r_hi = residual(lo), residual(hi)
    if r_lo == 0.0:
        return PlantState(h, lo)
    if r_hi == 0.0:
        return PlantState(h, hi)
    if (r_lo > 0) == (r_hi > 0):
        raise PlantError(
            f"bisection does not bracket a root: residual({lo})={r_lo:+.3e}, "
            f"residual({hi})={r_hi:+.3e}"
        )
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        r_mid = residual(mid)
        if r_mid == 0.0:
            return PlantState(h, mid)
        if (r_mid > 0) == (r_lo > 0):
            lo, r_lo = mid, r_mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return PlantState(h, 0.5 * (lo + hi))
