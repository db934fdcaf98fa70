"""Per-node processing speeds, deadlines, and simulated-time accounting.

A node's speed is the number of per-sample gradients it evaluates per
second, drawn i.i.d. per (node, round) from a bounded positive
distribution. Under a deadline ``T_d`` a node finishes
``floor(v * T_d)`` gradients (capped at its shard size); under a fixed
batch the synchronous round lasts as long as the slowest node needs.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "SpeedModel",
    "SimClock",
    "draw_speed",
    "mean_speed",
    "expected_inverse_speed",
    "batch_size_for_deadline",
    "deadline_for_batch",
    "effective_batch",
    "sync_round_time",
    "async_schedule",
]


@dataclass(frozen=True)
class SpeedModel:
    """Speed distribution with bounded positive support (gradients/second)."""

    kind: str  # "uniform" | "degenerate" | "empirical"
    v_lo: float = 0.0
    v_hi: float = 0.0
    values: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind == "uniform":
            if not (0.0 < self.v_lo <= self.v_hi):
                raise ValueError(f"need 0 < v_lo <= v_hi, got [{self.v_lo}, {self.v_hi}]")
        elif self.kind == "degenerate":
            if self.v_lo <= 0.0 or self.v_lo != self.v_hi:
                raise ValueError("degenerate speed must be a single positive value")
        elif self.kind == "empirical":
            if not self.values or min(self.values) <= 0.0:
                raise ValueError("empirical speeds must be non-empty and positive")
        else:
            raise ValueError(f"unknown speed model kind {self.kind!r}")

    @classmethod
    def uniform(cls, v_lo: float, v_hi: float) -> "SpeedModel":
        return cls(kind="uniform", v_lo=float(v_lo), v_hi=float(v_hi))

    @classmethod
    def degenerate(cls, v: float) -> "SpeedModel":
        return cls(kind="degenerate", v_lo=float(v), v_hi=float(v))

    @classmethod
    def empirical(cls, values: Sequence[float]) -> "SpeedModel":
        vals = tuple(float(v) for v in values)
        return cls(kind="empirical", v_lo=min(vals), v_hi=max(vals), values=vals)


def draw_speed(model: SpeedModel, rng: np.random.Generator) -> float:
    if model.kind == "uniform":
        return float(rng.uniform(model.v_lo, model.v_hi))
    if model.kind == "degenerate":
        return model.v_lo
    return model.values[int(rng.integers(len(model.values)))]


def mean_speed(model: SpeedModel) -> float:
    if model.kind == "uniform":
        return 0.5 * (model.v_lo + model.v_hi)
    if model.kind == "degenerate":
        return model.v_lo
    return float(np.mean(model.values))


def expected_inverse_speed(model: SpeedModel) -> float:
    """E[1/V]: closed form for uniform, exact otherwise.

    By Jensen this is at least 1/E[V], strictly so for non-degenerate
    uniform models.
    """
    if model.kind == "uniform":
        if model.v_lo == model.v_hi:
            return 1.0 / model.v_lo
        return float((np.log(model.v_hi) - np.log(model.v_lo)) / (model.v_hi - model.v_lo))
    if model.kind == "degenerate":
        return 1.0 / model.v_lo
    return float(np.mean(1.0 / np.asarray(model.values)))


def batch_size_for_deadline(v: float, t_d: float, m: int) -> int:
    """Gradients finished by the deadline: ``min(floor(v * t_d), m)``.

    Zero is a legal result; the caller substitutes a zero gradient.
    """
    if t_d < 0:
        raise ValueError("deadline must be >= 0")
    return min(int(np.floor(v * t_d)), m)


def deadline_for_batch(b: int, model: SpeedModel) -> float:
    """Deadline targeting an expected batch of ``b``: ``b / E[V]``."""
    if b <= 0:
        raise ValueError("target batch must be positive")
    return b / mean_speed(model)


def effective_batch(t_d: float, model: SpeedModel, m: int) -> float:
    """Variance-equivalent batch size ``min(T_d / E[1/V], m)``."""
    return min(t_d / expected_inverse_speed(model), float(m))


def sync_round_time(
    mode: str,
    value: float,
    model: SpeedModel,
    n: int,
    comm_seconds: float,
    rng: np.random.Generator | None = None,
) -> float:
    """Duration of one synchronous round.

    ``deadline`` mode costs exactly the deadline (``value = T_d``) plus
    communication. ``fixed_batch`` mode draws a fresh speed per node and
    costs ``value / min(speeds)`` plus communication: the slowest node
    gates the round.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    if comm_seconds < 0:
        raise ValueError("comm_seconds must be >= 0")
    if mode == "deadline":
        return value + comm_seconds
    if mode == "fixed_batch":
        if rng is None:
            raise ValueError("fixed_batch timing needs an rng")
        v_min = min(draw_speed(model, rng) for _ in range(n))
        return value / v_min + comm_seconds
    raise ValueError(f"unknown round mode {mode!r}")


def async_schedule(
    n: int,
    b: int,
    model: SpeedModel | Sequence[SpeedModel],
    rng,
    overhead: float = 0.0,
) -> Iterator[tuple[float, int]]:
    """Endless stream of (time, node) completion events, globally ordered.

    Node i's k-th event occurs at the cumulative sum of its own
    ``b / V_{i,k} + overhead`` durations. Simultaneous events are
    ordered by node index. ``model`` may be shared or a per-node list;
    ``rng`` is a single generator (split into per-node children), a list
    of per-node generators, or a callable ``(node, k) -> Generator``.
    """
    if b < 1:
        raise ValueError("batch must be >= 1")
    models = list(model) if isinstance(model, (list, tuple)) else [model] * n
    if len(models) != n:
        raise ValueError(f"need {n} per-node speed models, got {len(models)}")

    if callable(rng):
        draw = lambda i, k: draw_speed(models[i], rng(i, k))  # noqa: E731
    else:
        rngs = list(rng) if isinstance(rng, (list, tuple)) else rng.spawn(n)
        draw = lambda i, k: draw_speed(models[i], rngs[i])  # noqa: E731

    counts = [0] * n
    heap: list[tuple[float, int]] = []
    for i in range(n):
        heapq.heappush(heap, (b / draw(i, 0) + overhead, i))
    while True:
        t, i = heapq.heappop(heap)
        yield t, i
        counts[i] += 1
        heapq.heappush(heap, (t + b / draw(i, counts[i]) + overhead, i))


@dataclass
class SimClock:
    """Monotone simulated wall-clock in seconds."""

    now: float = 0.0

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("time cannot run backwards")
        self.now += seconds
        return self.now
