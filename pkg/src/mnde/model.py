"""Multi-view forecasting model over neural differential equations.

A window of measurements becomes a cubic control path per location.  Three
latent states evolve along it: a per-node temporal state and a per-node
spatio-temporal state driven by the control derivative (controlled NDEs),
and a per-ordered-pair edge state under a free-running NDE.  The same stack
runs twice: the coupled module integrates over the whole window, the
decoupled module only over a short prefix span so long-range error cannot
couple back into it.  A multi-head self-attention block over raw derivative
samples yields a fifth view, and the views are fused by a softmax-gated
pairwise product.

All internal tensors carry a leading batch axis; public single-window
entry points lift to a batch of one.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

from . import odesolve as od
from . import spline
from . import tensor as tc
from .errors import ConfigError, DataError, ShapeError
from .rng import substream

CHECKPOINT_MAGIC = b"mnde-v1\n"

VARIANTS = ("CNDE1_ST", "CNDE3_ST", "CNDE3_STE", "CNDE3_STE_DNDE", "MNDE")

# variant -> (loop override, edge dynamics, decoupled module, derivative attention)
_VARIANT_FEATURES = {
    "CNDE1_ST": (1, False, False, False),
    "CNDE3_ST": (None, False, False, False),
    "CNDE3_STE": (None, True, False, False),
    "CNDE3_STE_DNDE": (None, True, True, False),
    "MNDE": (None, True, True, True),
}


def _as_fraction(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup."""

    n: int
    l: int = 12
    l_prime: int = 96
    c: int = 64
    c_prime: int = 32
    d: int = 2
    heads: int = 4
    loops: int = 3
    r: Fraction = Fraction(1, 3)
    r_prime: Fraction = Fraction(1, 3)
    step: Fraction = Fraction(1, 3)

    def __post_init__(self):
        for name in ("n", "l", "l_prime", "c", "c_prime", "d", "heads", "loops"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.l < 2:
            raise ConfigError("l must be at least 2")
        for name in ("r", "r_prime", "step"):
            object.__setattr__(self, name, _as_fraction(getattr(self, name)))
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if 3 * self.d >= self.l:
            raise ConfigError(f"decoupled span d={self.d} must satisfy d < l/3 with l={self.l}")
        if self.c_prime % self.heads or self.l_prime % self.heads:
            raise ConfigError(
                f"heads={self.heads} must divide c_prime={self.c_prime} and l_prime={self.l_prime}")
        for name in ("r", "r_prime"):
            if (Fraction(self.l) / getattr(self, name)).denominator != 1:
                raise ConfigError(f"{name}={getattr(self, name)} must divide l={self.l}")
        for span, what in ((self.l - 1, "l-1"), (self.d, "d")):
            if (Fraction(span) / self.step).denominator != 1:
                raise ConfigError(f"solver step {self.step} must divide the {what} span")

    @property
    def value_samples(self) -> int:
        return int(Fraction(self.l) / self.r)

    @property
    def deriv_samples(self) -> int:
        return int(Fraction(self.l) / self.r_prime)


def _check_variant(variant: str) -> tuple:
    if variant not in _VARIANT_FEATURES:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return _VARIANT_FEATURES[variant]


class ModelParams:
    """Ordered name -> Parameter map for one (config, variant) pair."""

    def __init__(self, cfg: ModelConfig, variant: str, params: "OrderedDict[str, tc.Parameter]"):
        _check_variant(variant)
        self.cfg = cfg
        self.variant = variant
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, variant: str, seed: int) -> "ModelParams":
        loops_override, edges, delayed, attention = _check_variant(variant)
        rng = substream(seed, "init")
        loops = loops_override or cfg.loops
        params: OrderedDict[str, tc.Parameter] = OrderedDict()

        def glorot(name, fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = tc.Parameter(name, rng.uniform(-lim, lim, size=(fan_in, fan_out)))

        def zeros(name, fan_in, fan_out):
            params[name] = tc.Parameter(name, np.zeros((fan_in, fan_out)))

        def bias(name, width):
            params[name] = tc.Parameter(name, np.zeros((1, width)))

        def near_identity(name):
            params[name] = tc.Parameter(
                name, np.eye(cfg.n) + rng.uniform(-0.01, 0.01, size=(cfg.n, cfg.n)))

        def fc(name, fan_in, fan_out, zero=False):
            (zeros if zero else glorot)(name + ".W", fan_in, fan_out)
            bias(name + ".b", fan_out)

        # Output layers of every differential-equation field start at zero, so
        # each equation opens as the identity flow and dynamics grow only as
        # training asks for them.  A full-scale random output layer puts the
        # quadratic spatio-temporal field one bad update away from finite-time
        # blowup, which no learning rate reliably survives on deep loop stacks.
        m = cfg.value_samples
        for mod in (("cnde",) if not delayed else ("cnde", "dnde")):
            fc(f"{mod}.embed.T", m, cfg.c)
            fc(f"{mod}.embed.ST", m, cfg.c)
            if edges:
                fc(f"{mod}.embed.E", 2 * m, cfg.c_prime)
            for k in range(loops):
                for layer in ("W1", "W2"):
                    glorot(f"{mod}.loop{k}.T.{layer}", cfg.c, cfg.c)
                zeros(f"{mod}.loop{k}.T.W3", cfg.c, cfg.c)
                for layer in ("b1", "b2", "b3"):
                    bias(f"{mod}.loop{k}.T.{layer}", cfg.c)
                near_identity(f"{mod}.loop{k}.S.A")
                fc(f"{mod}.loop{k}.S", cfg.c, cfg.c)
                fc(f"{mod}.loop{k}.S.Fg", cfg.c, cfg.c, zero=True)
                fc(f"{mod}.loop{k}.S.Fs", cfg.c, cfg.c, zero=True)
                if edges:
                    near_identity(f"{mod}.loop{k}.E.A")
                    fc(f"{mod}.loop{k}.E", cfg.c_prime, cfg.c_prime)
                    fc(f"{mod}.loop{k}.E.Fg", cfg.c_prime, cfg.c_prime, zero=True)
                    fc(f"{mod}.loop{k}.E.Fs", cfg.c_prime, cfg.c_prime, zero=True)
        if attention:
            ck = cfg.c_prime // cfg.heads
            lk = cfg.l_prime // cfg.heads
            md = cfg.deriv_samples
            for j in range(cfg.heads):
                fc(f"attn.head{j}.q", md, ck)
                fc(f"attn.head{j}.k", md, ck)
                fc(f"attn.head{j}.v", md, lk)
        heads_needed = ["st_c"]
        if edges:
            heads_needed.append("e_c")
        if delayed:
            heads_needed.extend(["st_d", "e_d"])
        for name in heads_needed:
            width = cfg.c if name.startswith("st") else cfg.c_prime
            fc(f"out.{name}.1", width, width)
            fc(f"out.{name}.2", width, cfg.l_prime)
        return cls(cfg, variant, params)

    def bind(self, tape: tc.Tape) -> dict[str, tc.Tensor]:
        return {name: tape.leaf(p.value) for name, p in self.params.items()}

    def constants(self) -> dict[str, tc.Tensor]:
        return {name: tc.Tensor(p.value) for name, p in self.params.items()}

    def copy(self) -> "ModelParams":
        cloned = OrderedDict(
            (name, tc.Parameter(name, p.value.copy())) for name, p in self.params.items())
        return ModelParams(self.cfg, self.variant, cloned)

    def __iter__(self):
        return iter(self.params.values())

    def __getitem__(self, name: str) -> tc.Parameter:
        return self.params[name]

    def __len__(self):
        return len(self.params)


def _bound_of(params) -> Mapping[str, tc.Tensor]:
    if isinstance(params, ModelParams):
        return params.constants()
    return params


def _fc_rows(x: tc.Tensor, P: Mapping[str, tc.Tensor], name: str) -> tc.Tensor:
    return tc.matmul(x, P[name + ".W"]) + P[name + ".b"]


def _flatten_rows(x: tc.Tensor) -> tc.Tensor:
    return tc.reshape(x, (int(np.prod(x.shape[:-1])), x.shape[-1]))


def _graph_mix(adj: tc.Tensor, h: tc.Tensor) -> tc.Tensor:
    """Contract the first node axis of h (rank >= 3, batch leading) with adj."""
    shape = h.shape
    perm = (1, 0) + tuple(range(2, len(shape)))
    swapped = tc.transpose(h, perm)  # node axis first
    flat = tc.reshape(swapped, (shape[1], int(np.prod(shape) // shape[1])))
    mixed = tc.matmul(adj, flat)
    back = tc.reshape(mixed, swapped.shape)
    return tc.transpose(back, perm)


def temporal_field(P: Mapping[str, tc.Tensor], prefix: str):
    """Three stacked FC layers with tanh between, plus an identity skip."""

    def f(h: tc.Tensor, t: float) -> tc.Tensor:
        flat = _flatten_rows(h)
        z = tc.tanh(tc.matmul(flat, P[prefix + ".W1"]) + P[prefix + ".b1"])
        z = tc.tanh(tc.matmul(z, P[prefix + ".W2"]) + P[prefix + ".b2"])
        z = tc.matmul(z, P[prefix + ".W3"]) + P[prefix + ".b3"]
        return tc.reshape(z, h.shape) + h

    return f


def spatial_field(P: Mapping[str, tc.Tensor], prefix: str):
    """Graph convolution branch plus a linear skip, each through its own FC."""

    def f(h: tc.Tensor, t: float) -> tc.Tensor:
        mixed = _graph_mix(P[prefix + ".A"], h)
        conv = tc.relu(_fc_rows(_flatten_rows(mixed), P, prefix))
        gcn = _fc_rows(conv, P, prefix + ".Fg")
        skip = _fc_rows(_flatten_rows(h), P, prefix + ".Fs")
        return tc.reshape(gcn + skip, h.shape)

    return f


def edge_field(P: Mapping[str, tc.Tensor], prefix: str):
    """Spatial-style field on pairwise edge states (batch, n, n, c')."""

    def f(h: tc.Tensor, t: float) -> tc.Tensor:
        mixed = _graph_mix(P[prefix + ".A"], h)
        conv = tc.relu(_fc_rows(_flatten_rows(mixed), P, prefix))
        gcn = _fc_rows(conv, P, prefix + ".Fg")
        skip = _fc_rows(_flatten_rows(h), P, prefix + ".Fs")
        return tc.reshape(gcn + skip, h.shape)

    return f


def embed_initial(samples: np.ndarray, P: Mapping[str, tc.Tensor], mod: str,
                  edges: bool) -> tuple:
    """Initial latent states from dense value samples of shape (B, n, m)."""
    b, n, m = samples.shape
    flat = tc.Tensor(samples.reshape(b * n, m))
    c = P[f"{mod}.embed.T.W"].shape[1]
    h_t = tc.reshape(_fc_rows(flat, P, f"{mod}.embed.T"), (b, n, c))
    h_st = tc.reshape(_fc_rows(flat, P, f"{mod}.embed.ST"), (b, n, c))
    h_e = None
    if edges:
        left = np.repeat(samples, n, axis=1)          # row i of the ordered pair
        right = np.tile(samples, (1, n, 1))           # row j of the ordered pair
        pairs = np.concatenate([left, right], axis=2).reshape(b * n * n, 2 * m)
        ce = P[f"{mod}.embed.E.W"].shape[1]
        h_e = tc.reshape(_fc_rows(tc.Tensor(pairs), P, f"{mod}.embed.E"), (b, n, n, ce))
    return h_t, h_st, h_e


def _nde_stack(P: Mapping[str, tc.Tensor], cfg: ModelConfig, mod: str, loops: int,
               edges: bool, samples: np.ndarray, xprime, t1: float,
               solve: od.SolveConfig, include_temporal: bool):
    """Run the loop-stacked differential modules over [0, t1]."""
    h_t, h_st, h_e = embed_initial(samples, P, mod, edges)
    for k in range(loops):
        prefix = f"{mod}.loop{k}"
        t_fn = temporal_field(P, f"{prefix}.T")
        s_fn = spatial_field(P, f"{prefix}.S")
        if include_temporal:
            h_t = od.integrate_ncde(t_fn, h_t, xprime, 0.0, t1, solve)

        def st_fn(h, t, s_fn=s_fn, t_fn=t_fn):
            return s_fn(h, t) * t_fn(h, t)

        h_st = od.integrate_ncde(st_fn, h_st, xprime, 0.0, t1, solve)
        if edges:
            e_fn = edge_field(P, f"{prefix}.E")
            h_e = od.integrate_node(e_fn, h_e, 0.0, t1, solve)
    return h_t, h_st, h_e


def differentiation_forward(derivs, P, cfg: ModelConfig) -> tc.Tensor:
    """Multi-head self-attention over derivative samples (B, n, l/r')."""
    if isinstance(derivs, tc.Tensor):
        arr = derivs.data
    else:
        arr = np.asarray(derivs, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    b, n, md = arr.shape
    if md != cfg.deriv_samples:
        raise ShapeError(f"derivative sample count {md} != l/r' = {cfg.deriv_samples}")
    flat = tc.Tensor(arr.reshape(b * n, md))
    ck = cfg.c_prime // cfg.heads
    lk = cfg.l_prime // cfg.heads
    scale = float(np.sqrt(ck))
    outs = []
    for j in range(cfg.heads):
        q = tc.reshape(_fc_rows(flat, P, f"attn.head{j}.q"), (b, n, ck))
        k = tc.reshape(_fc_rows(flat, P, f"attn.head{j}.k"), (b, n, ck))
        v = tc.reshape(_fc_rows(flat, P, f"attn.head{j}.v"), (b, n, lk))
        scores = tc.bmm(q, tc.transpose(k, (0, 2, 1))) * scale
        outs.append(tc.bmm(tc.softmax(scores, axis=2), v))
    return tc.concat(outs, axis=2)


def transform_to_output(state: tc.Tensor, P: Mapping[str, tc.Tensor], name: str,
                        kind: str, cfg: ModelConfig) -> tc.Tensor:
    """Map a latent state to per-node forecasts of width l'."""
    if kind == "edge":
        state = tc.reduce_mean(state, axis=1)  # average over source nodes
    b, n = state.shape[0], state.shape[1]
    z = tc.relu(_fc_rows(_flatten_rows(state), P, f"out.{name}.1"))
    z = _fc_rows(z, P, f"out.{name}.2")
    return tc.reshape(z, (b, n, cfg.l_prime))


def aggregate(views: Sequence[tc.Tensor], k: int = 5) -> tc.Tensor:
    """Softmax-gated pairwise fusion: each view is weighted by the others' gates."""
    if len(views) != k:
        raise ShapeError(f"aggregate expected {k} views, got {len(views)}")
    if k < 2:
        raise ShapeError("aggregation needs at least 2 views")
    shape = views[0].shape
    for v in views[1:]:
        if v.shape != shape:
            raise ShapeError(f"view shapes differ: {shape} vs {v.shape}")
    gates = [tc.softmax(v, axis=-1) for v in views]  # distributions over time
    total = gates[0]
    for g in gates[1:]:
        total = total + g
    out = None
    for v, g in zip(views, gates):
        term = v * (total - g)
        out = term if out is None else out + term
    return out * (1.0 / (k * (k - 1)))


def forward_views(P: Mapping[str, tc.Tensor], cfg: ModelConfig, variant: str,
                  windows: np.ndarray, include_temporal: bool = False) -> tc.Tensor:
    """Batched forward pass: (B, n, l) measurements -> (B, n, l') forecasts.

    NaN entries mark missing measurements and are bridged by the spline fit.
    """
    loops_override, edges, delayed, attention = _check_variant(variant)
    arr = np.asarray(windows, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != cfg.n or arr.shape[2] != cfg.l:
        raise ShapeError(f"windows shape {arr.shape} incompatible with (B, {cfg.n}, {cfg.l})")
    loops = loops_override or cfg.loops
    path = spline.fit_natural_cubic(arr)
    values, derivs = spline.dense_sample(path, cfg.r)
    if cfg.r_prime != cfg.r:
        derivs = spline.dense_sample(path, cfg.r_prime)[1]
    xprime = od.control_derivative(path)
    solve = od.SolveConfig(cfg.step)

    _, st_c, e_c = _nde_stack(P, cfg, "cnde", loops, edges, values, xprime,
                              float(cfg.l - 1), solve, include_temporal)
    views = [transform_to_output(st_c, P, "st_c", "node", cfg)]
    if edges:
        views.append(transform_to_output(e_c, P, "e_c", "edge", cfg))
    if delayed:
        _, st_d, e_d = _nde_stack(P, cfg, "dnde", loops, edges, values, xprime,
                                  float(cfg.d), solve, include_temporal)
        views.append(transform_to_output(st_d, P, "st_d", "node", cfg))
        views.append(transform_to_output(e_d, P, "e_d", "edge", cfg))
    if attention:
        views.append(differentiation_forward(derivs, P, cfg))
    if len(views) == 1:
        return views[0]
    return aggregate(views, k=len(views))


def variant_forward(measurements: np.ndarray, params: ModelParams,
                    variant: Optional[str] = None) -> np.ndarray:
    """Single-window inference; returns an (n, l') array."""
    variant = variant or params.variant
    if variant != params.variant:
        raise ConfigError(f"parameters were built for {params.variant}, not {variant}")
    out = forward_views(params.constants(), params.cfg, variant,
                        np.asarray(measurements, dtype=np.float64))
    return out.data[0]


def mnde_forward(measurements: np.ndarray, params: ModelParams) -> np.ndarray:
    """Full-model single-window inference (all five views)."""
    return variant_forward(measurements, params)


def cnde_forward(path: spline.ControlPath, params, cfg: ModelConfig,
                 loops: Optional[int] = None, edges: bool = True) -> tuple:
    """Coupled module on one fitted path; returns (H_T, H_ST, H_E)."""
    return _module_forward(path, params, cfg, "cnde", float(cfg.l - 1), loops, edges)


def dnde_forward(path: spline.ControlPath, params, cfg: ModelConfig,
                 loops: Optional[int] = None, edges: bool = True) -> tuple:
    """Decoupled module on one fitted path over the short span [0, d]."""
    return _module_forward(path, params, cfg, "dnde", float(cfg.d), loops, edges)


def _module_forward(path, params, cfg, mod, t1, loops, edges):
    P = _bound_of(params)
    if path.knots != cfg.l:
        raise ShapeError(f"path has {path.knots} knots, config expects l={cfg.l}")
    coeffs = path.coeffs
    squeeze = coeffs.ndim == 3
    if squeeze:
        path = spline.ControlPath(coeffs[None], path.knots)
    values = spline.dense_sample(path, cfg.r)[0]
    h_t, h_st, h_e = _nde_stack(P, cfg, mod, loops or cfg.loops, edges, values,
                                od.control_derivative(path), t1,
                                od.SolveConfig(cfg.step), include_temporal=True)
    if squeeze:
        take = lambda t: None if t is None else tc.Tensor(t.data[0])
        return take(h_t), take(h_st), take(h_e)
    return h_t, h_st, h_e


def _config_to_kv(cfg: ModelConfig, variant: str, norm_mean: float, norm_std: float) -> str:
    items = [
        ("variant", variant),
        ("n", cfg.n), ("l", cfg.l), ("l_prime", cfg.l_prime),
        ("c", cfg.c), ("c_prime", cfg.c_prime), ("d", cfg.d),
        ("h", cfg.heads), ("loops", cfg.loops),
        ("r", cfg.r), ("r_prime", cfg.r_prime), ("step", cfg.step),
        ("norm_mean", repr(float(norm_mean))), ("norm_std", repr(float(norm_std))),
    ]
    return "".join(f"{k}={v}\n" for k, v in items)


def _config_from_kv(text: str) -> tuple[ModelConfig, str, float, float]:
    kv = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        kv[key] = value
    try:
        cfg = ModelConfig(
            n=int(kv["n"]), l=int(kv["l"]), l_prime=int(kv["l_prime"]),
            c=int(kv["c"]), c_prime=int(kv["c_prime"]), d=int(kv["d"]),
            heads=int(kv["h"]), loops=int(kv["loops"]),
            r=Fraction(kv["r"]), r_prime=Fraction(kv["r_prime"]), step=Fraction(kv["step"]))
        return cfg, kv["variant"], float(kv["norm_mean"]), float(kv["norm_std"])
    except KeyError as exc:
        raise ConfigError(f"checkpoint header missing key {exc}") from exc


def save_checkpoint(fh, params: ModelParams, norm_mean: float, norm_std: float) -> None:
    """Write a deterministic flat binary archive of parameters and config."""
    header = _config_to_kv(params.cfg, params.variant, norm_mean, norm_std).encode()
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)
    names = sorted(params.params)
    fh.write(struct.pack("<I", len(names)))
    for name in names:
        value = params.params[name].value
        encoded = name.encode()
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", value.ndim))
        for dim in value.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(fh) -> tuple[ModelParams, float, float]:
    """Read an archive written by save_checkpoint."""
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise DataError("not a checkpoint file (bad format tag)")
    (header_len,) = struct.unpack("<I", fh.read(4))
    cfg, variant, norm_mean, norm_std = _config_from_kv(fh.read(header_len).decode())
    (count,) = struct.unpack("<I", fh.read(4))
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", fh.read(2))
        name = fh.read(name_len).decode()
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(size * 8), dtype="<f8").reshape(shape)
        loaded[name] = data.astype(np.float64)
    reference = ModelParams.init(cfg, variant, seed=0)
    params: OrderedDict[str, tc.Parameter] = OrderedDict()
    for name, p in reference.params.items():
        if name not in loaded:
            raise DataError(f"checkpoint is missing parameter {name}")
        if loaded[name].shape != p.value.shape:
            raise DataError(
                f"checkpoint parameter {name} has shape {loaded[name].shape}, "
                f"expected {p.value.shape}")
        params[name] = tc.Parameter(name, loaded[name])
    extra = set(loaded) - set(params)
    if extra:
        raise DataError(f"checkpoint has unexpected parameters: {sorted(extra)[:3]}")
    return ModelParams(cfg, variant, params), norm_mean, norm_std
