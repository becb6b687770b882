"""Built-in numerical verification: gradients, spline facts, solver order.

Each check returns its worst error and a tolerance so callers can print a
report or assert.  Ops are looked up on the tensor module at call time, so
a corrupted backward rule (however it got there) is caught rather than a
stale reference being exercised.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import odesolve as od
from . import spline
from . import tensor as tc
from .model import ModelConfig, ModelParams, forward_views
from .training import huber_loss


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.tol


def _mix(t: tc.Tensor) -> tc.Tensor:
    w = tc.Tensor(np.sin(1.0 + np.arange(t.data.size)).reshape(t.shape))
    return tc.reduce_sum(t * w)


_OP_CASES = {
    "add": lambda x: _mix(tc.add(x, tc.Tensor(np.cos(np.arange(12.0)).reshape(3, 4)))),
    "sub": lambda x: _mix(tc.sub(tc.Tensor(np.cos(np.arange(12.0)).reshape(3, 4)), x)),
    "mul": lambda x: _mix(tc.mul(x, tc.Tensor(np.cos(1 + np.arange(12.0)).reshape(3, 4)))),
    "div": lambda x: _mix(tc.div(tc.Tensor(np.ones((3, 4))), tc.add(x, 3.0))),
    "matmul": lambda x: _mix(tc.matmul(x, tc.Tensor(np.sin(np.arange(12.0)).reshape(4, 3)))),
    "bmm": lambda x: _mix(tc.bmm(tc.reshape(x, (2, 3, 2)),
                                 tc.Tensor(np.cos(np.arange(12.0)).reshape(2, 2, 3)))),
    "relu": lambda x: _mix(tc.relu(x)),
    "tanh": lambda x: _mix(tc.tanh(x)),
    "softmax": lambda x: _mix(tc.softmax(x, axis=-1)),
    "transpose": lambda x: _mix(tc.transpose(x, (1, 0))),
    "reshape": lambda x: _mix(tc.reshape(x, (12,))),
    "concat": lambda x: _mix(tc.concat([x, tc.mul(x, 2.0)], axis=0)),
    "slice": lambda x: _mix(tc.slice_ranges(x, [(1, 3), (0, 2)])),
    "reduce_sum": lambda x: _mix(tc.reduce_sum(x, axis=0)),
    "reduce_mean": lambda x: _mix(tc.reduce_mean(x, axis=1)),
    "broadcast": lambda x: _mix(tc.mul(x, tc.Tensor(np.linspace(0.5, 1.5, 3).reshape(-1, 1)))),
}


def check_op_gradients(tol: float = 1e-6) -> list[CheckResult]:
    """Central-difference gradcheck of every differentiable op."""
    rng = np.random.default_rng(7)
    out = []
    for name in sorted(_OP_CASES):
        x = rng.uniform(-1.0, 1.0, size=(3, 4))
        if name == "relu":
            x = np.where(np.abs(x) < 0.05, 0.2, x)  # keep clear of the kink
        err = tc.gradcheck(_OP_CASES[name], x, h=1e-6)
        out.append(CheckResult(f"grad/{name}", err, tol))
    return out


def check_spline() -> list[CheckResult]:
    out = []
    # midpoint of the natural cubic through (0,1,0) has a closed form
    path = spline.fit_natural_cubic(np.array([0.0, 1.0, 0.0]))
    mid = float(spline.eval_path(path, 0.5))
    out.append(CheckResult("spline/midpoint", abs(mid - 0.6875), 1e-12))

    rng = np.random.default_rng(3)
    y = rng.normal(size=8)
    p = spline.fit_natural_cubic(y)
    a, b, c, d = (p.coeffs[..., j] for j in range(4))
    # natural ends: zero curvature at both boundary knots
    edge = max(abs(2.0 * c[0]), abs(2.0 * c[-1] + 6.0 * d[-1]))
    out.append(CheckResult("spline/natural_ends", float(edge), 1e-10))
    # first-derivative continuity across interior knots
    left = b[:-1] + 2.0 * c[:-1] + 3.0 * d[:-1]
    out.append(CheckResult("spline/c1_continuity", float(np.max(np.abs(left - b[1:]))), 1e-10))
    # knots are reproduced exactly
    vals = np.array([float(spline.eval_path(p, float(t))) for t in range(8)])
    out.append(CheckResult("spline/knot_interpolation", float(np.max(np.abs(vals - y))), 1e-12))
    return out


def check_solver() -> list[CheckResult]:
    out = []
    field = lambda h, t: h  # dH/dt = H, exact exp(t)
    order = od.convergence_order(field, np.array([1.0]), 0.0, 1.0, np.array([np.e]),
                                 od.SolveConfig(Fraction(1, 10)))
    out.append(CheckResult("solver/order", abs(order - 4.0), 0.3))
    final = od.integrate_node(field, tc.Tensor(np.array([1.0])), 0.0, 1.0,
                              od.SolveConfig(Fraction(1, 100)))
    out.append(CheckResult("solver/exp_value", abs(float(final.data[0]) - np.e), 1e-8))
    still = od.integrate_node(lambda h, t: h * 0.0, tc.Tensor(np.array([2.0, -1.0])),
                              0.0, 3.0, od.SolveConfig(Fraction(1, 2)))
    out.append(CheckResult("solver/zero_field",
                           float(np.max(np.abs(still.data - np.array([2.0, -1.0])))), 1e-15))
    return out


def toy_setup(seed: int = 13):
    """A 3-node model small enough to finite-difference end to end."""
    cfg = ModelConfig(n=3, l=6, l_prime=6, c=4, c_prime=2, d=1, heads=2, loops=1,
                      r=Fraction(1), r_prime=Fraction(1), step=Fraction(1))
    params = ModelParams.init(cfg, "MNDE", seed=seed)
    rng = np.random.default_rng(seed)
    # jitter every array off the init point so the zero-started field output
    # layers do not gate their upstream weights out of the check
    for p in params:
        p.value += rng.normal(0.0, 0.05, size=p.value.shape)
    t_in = np.arange(cfg.l) / cfg.l
    t_out = np.arange(cfg.l_prime) / cfg.l_prime
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(cfg.n, 1))
    window = 0.4 * np.sin(2.0 * np.pi * t_in + phase) + 0.02 * rng.standard_normal((cfg.n, cfg.l))
    target = 0.4 * np.sin(2.0 * np.pi * t_out + phase + 0.5)
    return cfg, params, window, target


def check_model_gradients(tol: float = 1e-4, params_limit: int = 0) -> list[CheckResult]:
    """End-to-end gradcheck of the training loss w.r.t. every parameter group.

    params_limit > 0 restricts to the first groups (cheap smoke mode).
    """
    cfg, params, window, target = toy_setup()
    base = {name: tc.Tensor(p.value) for name, p in params.params.items()}
    names = list(params.params)
    if params_limit > 0:
        names = names[:params_limit]
    out = []
    for name in names:
        def loss_of(leaf, _name=name):
            bound = dict(base)
            bound[_name] = leaf
            pred = forward_views(bound, cfg, params.variant, window)
            return huber_loss(pred, target[None])
        err = tc.gradcheck(loss_of, params[name].value, h=1e-5)
        out.append(CheckResult(f"model/{name}", err, tol))
    return out


def run_all(model_tol: float = 1e-4) -> list[CheckResult]:
    results = []
    results.extend(check_op_gradients())
    results.extend(check_spline())
    results.extend(check_solver())
    results.extend(check_model_gradients(tol=model_tol))
    return results
