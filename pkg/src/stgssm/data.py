"""Dataset container, normalization, splitting, windowing, synthetic
generation, file I/O, and scenario masks."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from . import serialize
from .tensor import ContractError, DimensionError, DomainError

MINUTES_PER_DAY = 24 * 60


@dataclass
class STGDataset:
    """Time-major observation cube with node labels and clock metadata.

    values: (T, N, d) float64, NaN-free. static_adjacency, when present,
    is an N x N non-negative prior over node interactions.
    """

    values: np.ndarray
    node_ids: list
    interval_minutes: int
    start_timestamp: datetime
    static_adjacency: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DimensionError(f"values must be (T, N, d), got {self.values.shape}")
        if np.isnan(self.values).any():
            raise ContractError("dataset contains NaN values")
        if len(self.node_ids) != self.values.shape[1]:
            raise DimensionError(
                f"{len(self.node_ids)} node ids for {self.values.shape[1]} nodes"
            )
        if self.interval_minutes <= 0:
            raise DomainError(f"interval must be positive, got {self.interval_minutes}")
        if self.static_adjacency is not None:
            self.static_adjacency = np.asarray(self.static_adjacency, dtype=np.float64)
            n = self.values.shape[1]
            if self.static_adjacency.shape != (n, n):
                raise DimensionError(
                    f"static adjacency {self.static_adjacency.shape} != {(n, n)}"
                )
            if (self.static_adjacency < 0).any():
                raise ContractError("static adjacency must be non-negative")

    @property
    def n_steps(self):
        return self.values.shape[0]

    @property
    def n_nodes(self):
        return self.values.shape[1]

    @property
    def n_features(self):
        return self.values.shape[2]

    @property
    def steps_per_day(self):
        return max(1, MINUTES_PER_DAY // self.interval_minutes)

    def timestamp(self, step):
        return self.start_timestamp + timedelta(minutes=self.interval_minutes * step)

    def timestamps(self, start=0, stop=None):
        stop = self.n_steps if stop is None else stop
        return [self.timestamp(i) for i in range(start, stop)]

    def time_of_day_index(self, step):
        """Index into a learned daily embedding table."""
        ts = self.timestamp(step)
        minutes = ts.hour * 60 + ts.minute
        return (minutes // self.interval_minutes) % self.steps_per_day


@dataclass
class NormalizationState:
    """Per-feature min/max fit on the training split only."""

    feat_min: np.ndarray
    feat_max: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        self.feat_min = np.asarray(self.feat_min, dtype=np.float64)
        self.feat_max = np.asarray(self.feat_max, dtype=np.float64)
        if np.any(self.feat_max < self.feat_min):
            raise ContractError("normalization max < min")
        if self.degenerate is None:
            self.degenerate = self.feat_max == self.feat_min
        else:
            self.degenerate = np.asarray(self.degenerate, dtype=bool)


def minmax_fit(train_values) -> NormalizationState:
    train_values = np.asarray(train_values, dtype=np.float64)
    return NormalizationState(
        feat_min=train_values.min(axis=(0, 1)),
        feat_max=train_values.max(axis=(0, 1)),
    )


def minmax_normalize(data, state: NormalizationState):
    """(x - min) / (max - min); degenerate features map to 0."""
    data = np.asarray(data, dtype=np.float64)
    span = np.where(state.degenerate, 1.0, state.feat_max - state.feat_min)
    out = (data - state.feat_min) / span
    if state.degenerate.any():
        out = np.where(state.degenerate, 0.0, out)
    return out


def minmax_denormalize(data, state: NormalizationState):
    data = np.asarray(data, dtype=np.float64)
    span = np.where(state.degenerate, 0.0, state.feat_max - state.feat_min)
    return data * span + state.feat_min


def _slice(ds: STGDataset, start, stop) -> STGDataset:
    return STGDataset(
        values=ds.values[start:stop],
        node_ids=ds.node_ids,
        interval_minutes=ds.interval_minutes,
        start_timestamp=ds.timestamp(start),
        static_adjacency=ds.static_adjacency,
    )


def split_dataset(ds: STGDataset, ratios=(0.6, 0.2, 0.2), p=None, k=None):
    """Contiguous train/val/test split along time; no shuffling.

    When window sizes are given, each split must be able to hold at least
    one (p, k) window.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"split ratios must sum to 1, got {ratios}")
    T = ds.n_steps
    b1 = int(np.floor(ratios[0] * T))
    b2 = int(np.floor((ratios[0] + ratios[1]) * T))
    parts = (_slice(ds, 0, b1), _slice(ds, b1, b2), _slice(ds, b2, T))
    if p is not None:
        need = p + (k or 1)
        for name, part in zip(("train", "val", "test"), parts):
            if part.n_steps < need:
                raise ContractError(
                    f"{name} split has {part.n_steps} steps, too small for one "
                    f"window of p={p}, k={k}"
                )
    return parts


def window_iterator(split: STGDataset, p, k):
    """Every contiguous (history, target) pair at stride 1.

    Yields (x, y, timestamps): x is a (p, N, d) view, y a (k, N, d) view,
    timestamps the p + k step datetimes the window covers (history first).
    """
    if p < 1 or k < 1:
        raise ContractError(f"window sizes must be >= 1, got p={p}, k={k}")
    T = split.n_steps
    for start in range(T - p - k + 1):
        x = split.values[start:start + p]
        y = split.values[start + p:start + p + k]
        yield x, y, split.timestamps(start, start + p + k)


def window_count(split_length, p, k):
    return max(0, split_length - p - k + 1)


@dataclass
class SyntheticConfig:
    n_nodes: int = 20
    t_steps: int = 2000
    interval_minutes: int = 60
    seed: int = 0
    radius: float = 0.6
    diffusion: float = 0.2
    amplitude: float = 0.15
    noise_sigma: float = 0.05

    def __post_init__(self):
        for name in ("n_nodes", "t_steps", "interval_minutes", "radius"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        for name in ("diffusion", "amplitude", "noise_sigma"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")


def _connected(adj):
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in np.nonzero(adj[i])[0]:
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    return seen.all()


def generate_synthetic(cfg: SyntheticConfig) -> STGDataset:
    """Random geometric graph driving a diffusion process with a daily
    sinusoid and Gaussian noise. Deterministic per seed; regenerates the
    node layout (up to 10 tries) if the graph comes out disconnected."""
    rng = np.random.default_rng(cfg.seed)
    adj = None
    for attempt in range(10):
        pos = rng.uniform(0.0, 1.0, size=(cfg.n_nodes, 2))
        dist = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
        cand = (dist < cfg.radius).astype(np.float64)
        if _connected(cand):
            adj = cand
            break
        warnings.warn(
            f"synthetic graph attempt {attempt + 1} was disconnected; retrying"
        )
    if adj is None:
        raise ContractError(
            "could not draw a connected geometric graph in 10 attempts; "
            "increase the radius"
        )
    a_static = adj / adj.sum(axis=1, keepdims=True)

    steps_per_day = max(1, MINUTES_PER_DAY // cfg.interval_minutes)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=cfg.n_nodes)
    c = cfg.diffusion
    values = np.empty((cfg.t_steps, cfg.n_nodes, 1))
    x = rng.uniform(0.0, 1.0, size=cfg.n_nodes)
    values[0, :, 0] = x
    for t in range(1, cfg.t_steps):
        forcing = cfg.amplitude * np.sin(2.0 * np.pi * t / steps_per_day + phase)
        noise = cfg.noise_sigma * rng.normal(size=cfg.n_nodes)
        x = (1.0 - c) * x + c * (a_static @ x) + forcing + noise
        values[t, :, 0] = x

    return STGDataset(
        values=values,
        node_ids=[f"n{i}" for i in range(cfg.n_nodes)],
        interval_minutes=cfg.interval_minutes,
        start_timestamp=datetime(2024, 1, 1),
        static_adjacency=a_static,
    )


def _format_ts(ts: datetime) -> str:
    return ts.isoformat(timespec="seconds")


def _parse_ts(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1]
    return datetime.fromisoformat(text)


def save_csv(ds: STGDataset, path):
    d = ds.n_features
    header = "timestamp,node_id," + ",".join(f"feature_{i}" for i in range(d))
    with open(path, "w") as f:
        f.write(header + "\n")
        for t in range(ds.n_steps):
            ts = _format_ts(ds.timestamp(t))
            for n, node in enumerate(ds.node_ids):
                feats = ",".join(repr(float(v)) for v in ds.values[t, n])
                f.write(f"{ts},{node},{feats}\n")


def load_csv(path) -> STGDataset:
    """Read the grid back; every (timestamp, node) cell must be present."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ContractError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[:2] != ["timestamp", "node_id"]:
        raise ContractError(f"{path}: header must start with timestamp,node_id")
    feat_names = header[2:]
    d = len(feat_names)
    if d == 0 or feat_names != [f"feature_{i}" for i in range(d)]:
        raise ContractError(f"{path}: feature columns must be feature_0..feature_{{d-1}}")

    cells = {}
    ts_order, node_order = [], []
    ts_seen, node_seen = set(), set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2 + d:
            raise ContractError(f"{path}:{lineno}: expected {2 + d} fields, got {len(parts)}")
        try:
            ts = _parse_ts(parts[0])
            feats = [float(v) for v in parts[2:]]
        except ValueError as e:
            raise ContractError(f"{path}:{lineno}: {e}") from None
        node = parts[1]
        if ts not in ts_seen:
            ts_seen.add(ts)
            ts_order.append(ts)
        if node not in node_seen:
            node_seen.add(node)
            node_order.append(node)
        cells[(ts, node)] = feats

    ts_order.sort()
    missing = [(ts, node) for ts in ts_order for node in node_order
               if (ts, node) not in cells]
    if missing:
        shown = ", ".join(f"({_format_ts(ts)}, {node})" for ts, node in missing[:5])
        more = "" if len(missing) <= 5 else f" and {len(missing) - 5} more"
        raise ContractError(f"{path}: missing cells {shown}{more}")

    if len(ts_order) > 1:
        deltas = {
            int((b - a).total_seconds() // 60)
            for a, b in zip(ts_order, ts_order[1:])
        }
        if len(deltas) != 1:
            raise ContractError(f"{path}: irregular timestamp spacing {sorted(deltas)}")
        interval = deltas.pop()
    else:
        interval = 1

    values = np.array(
        [[cells[(ts, node)] for node in node_order] for ts in ts_order]
    )
    return STGDataset(
        values=values,
        node_ids=node_order,
        interval_minutes=interval,
        start_timestamp=ts_order[0],
    )


def save_binary(ds: STGDataset, path):
    """Cube in the tensor container format plus a JSON sidecar."""
    path = str(path)
    serialize.save_tensor(path, ds.values)
    sidecar = {
        "node_ids": list(ds.node_ids),
        "interval_minutes": ds.interval_minutes,
        "start_timestamp": _format_ts(ds.start_timestamp),
    }
    if ds.static_adjacency is not None:
        sidecar["static_adjacency"] = ds.static_adjacency.tolist()
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, sort_keys=True)


def load_binary(path) -> STGDataset:
    path = str(path)
    values = serialize.load_tensor(path)
    with open(path + ".json") as f:
        sidecar = json.load(f)
    adj = sidecar.get("static_adjacency")
    return STGDataset(
        values=values,
        node_ids=sidecar["node_ids"],
        interval_minutes=sidecar["interval_minutes"],
        start_timestamp=_parse_ts(sidecar["start_timestamp"]),
        static_adjacency=None if adj is None else np.asarray(adj),
    )


SCENARIOS = ("rush", "non_rush", "weekend", "non_weekend")


def scenario_mask(timestamps, scenario):
    """Boolean mask over timestamps.

    rush: weekdays, [08:00, 11:00) or [16:00, 19:00). non_rush: the other
    weekday hours. weekend: Saturday/Sunday. non_weekend: weekdays.
    Interval boundaries are half-open so 11:00 itself is not rush.
    """
    if scenario not in SCENARIOS:
        raise ContractError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    out = np.zeros(len(timestamps), dtype=bool)
    for i, ts in enumerate(timestamps):
        weekday = ts.weekday() < 5
        minutes = ts.hour * 60 + ts.minute
        rush = weekday and (8 * 60 <= minutes < 11 * 60 or 16 * 60 <= minutes < 19 * 60)
        if scenario == "rush":
            out[i] = rush
        elif scenario == "non_rush":
            out[i] = weekday and not rush
        elif scenario == "weekend":
            out[i] = not weekday
        else:
            out[i] = weekday
    return out
