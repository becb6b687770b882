"""Flow datasets: canonical CSV, splitting, windowing, corruption, synthesis.

A dataset is an n x T matrix of flow rates at 5-minute intervals with NaN
marking missing measurements.  The on-disk form is CSV with one row per
interval so files diff cleanly; the in-memory form keeps locations on the
first axis to match the model.  Splits are chronological 3:1:1 and windows
never straddle a boundary.
"""
from __future__ import annotations

import os
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .rng import substream

SPLITS = ("train", "val", "test")
INTERVALS_PER_DAY = 288  # 24h at 5-minute resolution
SCENARIOS = ("none", "delay", "abrupt", "delay+abrupt")


@dataclass(frozen=True)
class FlowDataset:
    """Immutable flow-rate matrix (locations x intervals) plus metadata."""

    values: np.ndarray
    interval_minutes: int = 5

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"dataset needs a (locations, intervals) matrix, got {arr.shape}")
        if np.any(np.isinf(arr)):
            raise DataError("dataset contains infinite values; only NaN marks gaps")
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def total(self) -> int:
        return self.values.shape[1]

    def split_bounds(self) -> tuple[int, int]:
        # chronological 3:1:1; train and val round down, test takes the rest
        train = (3 * self.total) // 5
        val = self.total // 5
        return train, train + val

    def split_range(self, split: Optional[str]) -> range:
        if split is None:
            return range(0, self.total)
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        b1, b2 = self.split_bounds()
        bounds = {"train": (0, b1), "val": (b1, b2), "test": (b2, self.total)}
        return range(*bounds[split])

    def split_values(self, split: Optional[str]) -> np.ndarray:
        r = self.split_range(split)
        return self.values[:, r.start:r.stop]


@dataclass(frozen=True)
class Window:
    """One training example: l input intervals then l' target intervals."""

    input: np.ndarray   # (n, l) view
    target: np.ndarray  # (n, l') view
    origin: int         # absolute index of the first input interval


# ---------------------------------------------------------------------------
# canonical CSV


def _fmt(x: float) -> str:
    return "NaN" if np.isnan(x) else repr(float(x))


def save_flow_csv(ds: FlowDataset, dest) -> None:
    """Write the canonical form: header comments, then one row per interval."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8") as fh:
            _save(ds, fh)
    else:
        _save(ds, dest)


def _save(ds: FlowDataset, fh) -> None:
    fh.write(f"# n={ds.n}\n")
    fh.write(f"# interval_minutes={ds.interval_minutes}\n")
    cols = ds.values.T  # (T, n)
    for row in cols:
        fh.write(",".join(_fmt(v) for v in row) + "\n")


def load_flow_csv(src) -> FlowDataset:
    """Parse the canonical CSV; malformed content reports its line number."""
    if isinstance(src, (str, os.PathLike)):
        try:
            fh = open(src, "r", encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read {src}: {exc}")
        with fh:
            return _load(fh)
    return _load(src)


def _load(fh) -> FlowDataset:
    n = None
    interval_minutes = 5
    rows: list[list[float]] = []
    for lineno, raw in enumerate(fh, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if rows:
                raise DataError(f"line {lineno}: header after data rows")
            key, _, value = line[1:].strip().partition("=")
            key = key.strip()
            if key == "n":
                try:
                    n = int(value)
                except ValueError:
                    raise DataError(f"line {lineno}: n must be an integer, got {value!r}")
            elif key == "interval_minutes":
                try:
                    interval_minutes = int(value)
                except ValueError:
                    raise DataError(
                        f"line {lineno}: interval_minutes must be an integer, got {value!r}")
            else:
                raise DataError(f"line {lineno}: unknown header key {key!r}")
            continue
        fields = line.split(",")
        if n is None:
            raise DataError(f"line {lineno}: data row before the '# n=' header")
        if len(fields) != n:
            raise DataError(f"line {lineno}: expected {n} fields, got {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            bad = next(f for f in fields if not _is_float(f))
            raise DataError(f"line {lineno}: unreadable value {bad!r}")
    if n is None:
        raise DataError("empty file: missing '# n=' header")
    if not rows:
        raise DataError("no data rows")
    values = np.array(rows, dtype=np.float64).T
    if np.any(np.isinf(values)):
        raise DataError("dataset contains infinite values; only NaN marks gaps")
    return FlowDataset(values, interval_minutes)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# windowing


def make_windows(ds: FlowDataset, l: int, l_prime: int,
                 split: Optional[str] = None) -> list[Window]:
    """Stride-1 windows lying fully inside the chosen split segment."""
    if l < 2 or l_prime < 1:
        raise ConfigError(f"need l >= 2 and l' >= 1, got l={l}, l'={l_prime}")
    seg = ds.split_range(split)
    span = l + l_prime
    if len(seg) < span:
        name = split or "full series"
        raise DataError(f"{name} segment has {len(seg)} intervals; a window needs {span}")
    out = []
    for o in range(seg.start, seg.stop - span + 1):
        out.append(Window(input=ds.values[:, o:o + l],
                          target=ds.values[:, o + l:o + span],
                          origin=o))
    return out


def window_arrays(windows: Sequence[Window]) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into (N, n, l) inputs and (N, n, l') targets."""
    if not windows:
        raise DataError("no windows to stack")
    x = np.stack([w.input for w in windows])
    y = np.stack([w.target for w in windows])
    return x, y


# ---------------------------------------------------------------------------
# corruption


def _bernoulli_mask(shape, rate: float, seed: int, stream: str) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"rate must lie in [0, 1), got {rate}")
    rng = substream(seed, stream)
    return rng.random(shape) < rate


def inject_missing(ds: FlowDataset, rate: float, seed: int) -> FlowDataset:
    """Independently blank each entry with the given probability."""
    mask = _bernoulli_mask(ds.values.shape, rate, seed, "missing")
    values = ds.values.copy()
    values[mask] = np.nan
    return replace(ds, values=values)


def inject_zeros(ds: FlowDataset, rate: float, seed: int) -> FlowDataset:
    """Overwrite entries with 0.0: a real measurement, not a gap."""
    mask = _bernoulli_mask(ds.values.shape, rate, seed, "zeros")
    values = ds.values.copy()
    values[mask] = 0.0
    return replace(ds, values=values)


# ---------------------------------------------------------------------------
# synthetic generator


def synth_generate(n: int, days: int, seed: int, scenario: str = "none",
                   tau: int = 4, noise: float = 3.0) -> FlowDataset:
    """Chain-of-locations flow with a daily double peak and planted structure.

    "delay": congestion pulses start at location 0 and echo down the chain,
    arriving at location k after k*tau intervals with geometric decay.
    "abrupt": a location's flow drops 80% for one to three hours at random
    times.  "delay+abrupt" plants both.
    """
    if n < 2:
        raise ConfigError(f"chain needs n >= 2 locations, got {n}")
    if days < 1:
        raise ConfigError(f"days must be >= 1, got {days}")
    if tau < 1:
        raise ConfigError(f"tau must be >= 1, got {tau}")
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    rng = substream(seed, "synth")
    total = days * INTERVALS_PER_DAY
    tod = (np.arange(total) % INTERVALS_PER_DAY) / INTERVALS_PER_DAY

    # double-peak day: fundamental plus first harmonic, peaks am and pm;
    # night flow bottoms out near zero so the clip below stays realistic
    seasonal = (70.0 * np.sin(2.0 * np.pi * tod - 0.5 * np.pi)
                + 40.0 * np.sin(4.0 * np.pi * tod + 0.25 * np.pi))
    offsets = rng.uniform(-15.0, 15.0, size=n)
    # slow demand drift on incommensurate multi-day periods: consecutive
    # days differ in amplitude, so a forecaster has to read the current
    # level out of the window instead of memorizing one daily curve
    p1 = rng.uniform(2.5, 3.5) * INTERVALS_PER_DAY
    p2 = rng.uniform(1.2, 1.8) * INTERVALS_PER_DAY
    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    t_idx = np.arange(total)
    drift = (1.0 + 0.15 * np.sin(2.0 * np.pi * t_idx / p1 + phase[0])
             + 0.10 * np.sin(2.0 * np.pi * t_idx / p2 + phase[1]))
    values = 90.0 + seasonal[None, :] * drift[None, :] + offsets[:, None]

    if "delay" in scenario:
        # a few congestion pulses per day, echoing down the chain; kept broad
        # and moderate so z-scored control paths stay integrable
        count = max(1, int(round(days * 4)))
        starts = np.sort(rng.integers(0, total, size=count))
        amps = rng.uniform(30.0, 50.0, size=count)
        kernel_t = np.arange(-12, 13)
        kernel = np.exp(-0.5 * (kernel_t / 4.0) ** 2)
        for s, a in zip(starts, amps):
            for k in range(n):
                center = s + k * tau
                for dt, w in zip(kernel_t, kernel):
                    idx = center + dt
                    if 0 <= idx < total:
                        values[k, idx] += a * (0.93 ** k) * w

    if "abrupt" in scenario:
        # one drop event per day somewhere on the chain, lasting 1-3 hours;
        # onset and recovery ramp over 15 minutes the way real incidents do,
        # which also keeps interpolated derivatives bounded
        count = max(1, days)
        for _ in range(count):
            u = int(rng.integers(0, n))
            dur = int(rng.integers(12, 37))
            s = int(rng.integers(0, max(1, total - dur)))
            profile = np.full(dur, 0.2)
            edge = min(3, dur // 2)
            ramp = np.linspace(1.0, 0.2, edge + 2)[1:-1]
            profile[:edge] = ramp
            profile[dur - edge:] = ramp[::-1]
            values[u, s:s + dur] *= profile

    if noise > 0.0:
        values = values + rng.normal(0.0, noise, size=values.shape)
    values = np.maximum(values, 0.0)
    return FlowDataset(values)


# ---------------------------------------------------------------------------
# summary


def summarize(ds: FlowDataset) -> "OrderedDict[str, object]":
    """Stable-order dataset facts for scripting and the CLI."""
    finite = ds.values[np.isfinite(ds.values)]
    missing = 1.0 - finite.size / ds.values.size
    out: "OrderedDict[str, object]" = OrderedDict()
    out["n"] = ds.n
    out["intervals"] = ds.total
    out["interval_minutes"] = ds.interval_minutes
    out["missing_fraction"] = missing
    out["min"] = float(np.min(finite)) if finite.size else float("nan")
    out["max"] = float(np.max(finite)) if finite.size else float("nan")
    out["mean"] = float(np.mean(finite)) if finite.size else float("nan")
    return out
