"""Fixed-step classic Runge-Utta (RK4) integration, differentiable end to end.

Gradients follow the discretize-then-optimize route: the solver unrolls its
steps as ordinary tensor operations on the active tape, so backward() simply
walks back through them.  Controlled equations (dH = f(H) dX) reuse the same
stepper with the field multiplied by the control derivative X'(t), evaluated
at the RK4 stage times t, t+h/2 and t+h.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Union

import numpy as np

from . import spline
from . import tensor as tc
from .errors import NumericsError, ShapeError

Field = Callable[[tc.Tensor, float], tc.Tensor]
Control = Callable[[float], Union[tc.Tensor, np.ndarray]]


@dataclass(frozen=True)
class SolveConfig:
    """Solver settings; the step must divide each integration span exactly.

    `bound` is the blowup detector: state magnitudes past it mean the
    trajectory is lost (latents on z-scored data stay O(1)), so the solver
    reports divergence while every quantity is still comfortably finite
    instead of letting overflow poison the backward pass.
    """

    step: Fraction = Fraction(1, 3)
    bound: float = 1e6

    def __post_init__(self):
        if Fraction(self.step) <= 0:
            raise ShapeError(f"solver step must be positive, got {self.step}")
        if not self.bound > 0:
            raise ShapeError(f"divergence bound must be positive, got {self.bound}")


def _step_count(t0: float, t1: float, h: float) -> int:
    span = t1 - t0
    if span <= 0:
        raise ShapeError(f"integration span [{t0}, {t1}] must be increasing")
    steps = round(span / h)
    if steps < 1 or abs(steps * h - span) > 1e-9 * max(1.0, abs(span)):
        raise ShapeError(f"step {h} does not divide span [{t0}, {t1}] exactly")
    return steps


def _eval_field(f: Field, h_state: tc.Tensor, t: float, k: int) -> tc.Tensor:
    try:
        out = f(h_state, t)
    except NumericsError as exc:
        raise NumericsError(f"field diverged at solver step {k} (t={t}): {exc}") from exc
    if not isinstance(out, tc.Tensor):
        out = tc.Tensor(out)
    if out.shape != h_state.shape:
        raise ShapeError(f"field returned shape {out.shape}, state has {h_state.shape}")
    return out


def integrate_node(f: Field, h0: tc.Tensor, t0: float, t1: float,
                   cfg: SolveConfig = SolveConfig()) -> tc.Tensor:
    """Integrate dH/dt = f(H, t) from t0 to t1 with fixed-step RK4."""
    h = float(Fraction(cfg.step))
    steps = _step_count(t0, t1, h)
    state = h0 if isinstance(h0, tc.Tensor) else tc.Tensor(h0)
    for k in range(steps):
        t = t0 + k * h
        try:
            k1 = _eval_field(f, state, t, k)
            k2 = _eval_field(f, state + k1 * (h / 2.0), t + h / 2.0, k)
            k3 = _eval_field(f, state + k2 * (h / 2.0), t + h / 2.0, k)
            k4 = _eval_field(f, state + k3 * h, t + h, k)
            state = state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
        except NumericsError as exc:
            raise NumericsError(f"integration diverged at step {k} of {steps}: {exc}") from exc
        peak = float(np.max(np.abs(state.data)))
        if peak > cfg.bound:
            raise NumericsError(
                f"integration diverged at step {k} of {steps}: state magnitude "
                f"{peak:.3g} exceeded bound {cfg.bound:g} (t={t + h})")
    return state


def integrate_ncde(f: Field, h0: tc.Tensor, xprime: Control, t0: float, t1: float,
                   cfg: SolveConfig = SolveConfig()) -> tc.Tensor:
    """Integrate the controlled equation dH = f(H, t) * X'(t) dt.

    The control derivative is data, not a learned quantity: gradients flow
    through f and h0 only.
    """

    def controlled(state: tc.Tensor, t: float) -> tc.Tensor:
        ctrl = xprime(t)
        if not isinstance(ctrl, tc.Tensor):
            ctrl = tc.Tensor(ctrl)
        return f(state, t) * ctrl

    return integrate_node(controlled, h0, t0, t1, cfg)


def control_derivative(path: spline.ControlPath) -> Control:
    """X'(t) evaluator for a fitted path, shaped (..., 1) for channel broadcast."""

    def xprime(t: float) -> np.ndarray:
        d = spline._eval_path(path, t, derivative=True, extrapolate=True)
        return np.asarray(d)[..., None]

    return xprime


def convergence_order(f: Field, h0, t0: float, t1: float, exact,
                      cfg: SolveConfig = SolveConfig()) -> float:
    """Estimate the solver's order as log2(err(h) / err(h/2)).

    `exact` is a closed-form reference for the state at t1.  Returns inf when
    both errors vanish (the field is integrated exactly).
    """
    exact = np.asarray(exact, dtype=np.float64)

    def err(step: Fraction) -> float:
        out = integrate_node(f, tc.Tensor(h0), t0, t1, SolveConfig(step))
        return float(np.max(np.abs(out.data - exact)))

    step = Fraction(cfg.step)
    e1 = err(step)
    e2 = err(step / 2)
    if e1 < 1e-15 and e2 < 1e-15:
        return math.inf
    if e2 == 0.0:
        return math.inf
    return math.log2(e1 / e2)
