"""Decentralized optimizer steps and the simulation loops that drive them.

All four algorithms share the gossip structure: nodes average neighbor
models through the mixing matrix W and take a local stochastic gradient
step. They differ in what is exchanged, how the batch is formed, and
how the clock advances.

  quantimed : quantized exchange, deadline-limited batch, constant
              round time. Per node,
              x_i' = (1 - eps + eps w_ii) x_i
                     + eps sum_{j in N_i} w_ij z_j - alpha eps g_i
              with z_j the dequantized neighbor message.
  qdsgd     : same update with a fixed batch size; the round waits for
              the slowest node.
  dsgd      : unquantized fixed-batch gossip,
              x_i' = sum_j w_ij x_j - alpha g_i.
  async     : event-driven dsgd; each node fires on its own clock and
              reads the latest neighbor models published strictly
              before its firing instant.

Every random draw comes from a stream keyed by
(run seed, node, purpose, iteration), so runs are reproducible and the
draws of one node never depend on how many nodes exist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .compute_model import (
    SimClock,
    SpeedModel,
    async_schedule,
    batch_size_for_deadline,
    draw_speed,
    sync_round_time,
)
from .metrics import MetricsRow, consensus_error, optimality_gap
from .objectives import (
    DataShards,
    Objective,
    deadline_stochastic_gradient,
    global_gradient,
    global_loss,
)
from .quantize import QuantizerSpec, comm_time, quantize_values, wire_size
from .rng import substream
from .topology import Graph, MixingMatrix

__all__ = [
    "ALGORITHMS",
    "NodeState",
    "StepSizes",
    "RoundResult",
    "RunSetup",
    "SimResult",
    "stepsizes_convex",
    "stepsizes_nonconvex",
    "initial_states",
    "quantimed_step",
    "qdsgd_step",
    "dsgd_step",
    "run",
]

ALGORITHMS = ("quantimed", "dsgd", "qdsgd", "async")

# substream purposes
QUANTIZE = "quantize"
SPEED = "speed"
BATCH = "batch"
ROUND = "round"

RAW_BYTES_PER_COORD = 2  # 16-bit reference precision


@dataclass
class NodeState:
    """A node's model and the latest values received from each neighbor."""

    node: int
    x: np.ndarray
    mailbox: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class StepSizes:
    """Gradient scale ``alpha`` and averaging scale ``eps``."""

    alpha: float
    eps: float
    schedule: str = "explicit"

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not (0.0 < self.eps <= 1.0):
            raise ValueError("eps must be in (0, 1]")


def stepsizes_convex(T: int, delta: float) -> StepSizes:
    """Strongly convex schedule ``alpha = T^(-delta/2)``, ``eps = T^(-3 delta/2)``.

    ``delta`` must lie strictly inside (0, 1/2); the guarantee degrades
    to a constant floor at the right endpoint.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < delta < 0.5):
        raise ValueError(f"delta must be in the open interval (0, 1/2), got {delta}")
    return StepSizes(
        alpha=float(T) ** (-delta / 2.0),
        eps=float(T) ** (-1.5 * delta),
        schedule=f"convex(delta={delta})",
    )


def stepsizes_nonconvex(T: int) -> StepSizes:
    """Nonconvex schedule ``alpha = T^(-1/6)``, ``eps = T^(-1/2)``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return StepSizes(
        alpha=float(T) ** (-1.0 / 6.0),
        eps=float(T) ** (-0.5),
        schedule="nonconvex",
    )


@dataclass
class RoundResult:
    """Everything one synchronous round produced.

    ``z`` holds the dequantized exchanged values and ``grads`` the
    stochastic gradients actually applied, so tests can replay the
    update through an independent formula.
    """

    states: list[NodeState]
    z: np.ndarray
    grads: np.ndarray
    batch_sizes: np.ndarray
    clamped: int
    bytes_sent: int
    round_seconds: float


def initial_states(n: int, p: int) -> list[NodeState]:
    """All-zero initial models."""
    return [NodeState(node=i, x=np.zeros(p)) for i in range(n)]


def _models(states: list[NodeState]) -> np.ndarray:
    return np.stack([s.x for s in states])


def _exchange(
    states: list[NodeState],
    quantizer: QuantizerSpec | None,
    seed: int,
    t: int,
) -> tuple[np.ndarray, int, int]:
    """Broadcast phase: returns (values, bytes per round, clamp count)."""
    n = len(states)
    p = states[0].x.size
    if quantizer is None:
        return _models(states), n * RAW_BYTES_PER_COORD * p, 0
    z = np.empty((n, p))
    clamped = 0
    for s in states:
        values, clipped = quantize_values(
            s.x, quantizer, substream(seed, s.node, QUANTIZE, t)
        )
        z[s.node] = values
        clamped += clipped
    return z, n * wire_size(quantizer, p), clamped


def _deadline_batches(
    states: list[NodeState],
    deadline: float,
    speed_model: SpeedModel,
    shards: DataShards,
    seed: int,
    t: int,
) -> np.ndarray:
    sizes = np.empty(len(states), dtype=int)
    for s in states:
        v = draw_speed(speed_model, substream(seed, s.node, SPEED, t))
        sizes[s.node] = batch_size_for_deadline(v, deadline, shards.m)
    return sizes


def _node_gradients(
    states: list[NodeState],
    batch_sizes: np.ndarray,
    objective: Objective,
    shards: DataShards,
    seed: int,
    t: int,
) -> np.ndarray:
    grads = np.empty((len(states), objective.p))
    for s in states:
        sample = deadline_stochastic_gradient(
            objective,
            shards,
            s.node,
            s.x,
            int(batch_sizes[s.node]),
            rng=substream(seed, s.node, BATCH, t),
            iteration=t,
        )
        grads[s.node] = sample.grad
    return grads


def _gossip_update(
    states: list[NodeState],
    mixing: MixingMatrix,
    z: np.ndarray,
    grads: np.ndarray,
    alpha: float,
    eps: float,
) -> list[NodeState]:
    """Apply the quantized-gossip update row by row from iteration-t values."""
    w = mixing.matrix
    w_off = w - np.diag(np.diag(w))
    out = []
    for s in states:
        i = s.node
        new_x = (
            (1.0 - eps + eps * w[i, i]) * s.x
            + eps * (w_off[i] @ z)
            - alpha * eps * grads[i]
        )
        mailbox = {int(j): z[j] for j in np.nonzero(w_off[i])[0]}
        out.append(NodeState(node=i, x=new_x, mailbox=mailbox))
    return out


def _comm_seconds(quantizer: QuantizerSpec | None, p: int, tc: float) -> float:
    return tc if quantizer is None else comm_time(quantizer, p, tc)


def quantimed_step(
    states: list[NodeState],
    mixing: MixingMatrix,
    sizes: StepSizes,
    deadline: float,
    speed_model: SpeedModel,
    quantizer: QuantizerSpec | None,
    objective: Objective,
    shards: DataShards,
    seed: int,
    t: int,
    tc: float = 0.0,
) -> RoundResult:
    """One deadline round: quantize and exchange, then update with
    whatever batch each node finished by the deadline.

    All messages carry iteration-t values; the round lasts exactly
    ``deadline`` plus the (quantization-scaled) communication time.
    """
    z, nbytes, clamped = _exchange(states, quantizer, seed, t)
    batch_sizes = _deadline_batches(states, deadline, speed_model, shards, seed, t)
    grads = _node_gradients(states, batch_sizes, objective, shards, seed, t)
    new_states = _gossip_update(states, mixing, z, grads, sizes.alpha, sizes.eps)
    seconds = sync_round_time(
        "deadline", deadline, speed_model, len(states),
        _comm_seconds(quantizer, objective.p, tc),
    )
    return RoundResult(new_states, z, grads, batch_sizes, clamped, nbytes, seconds)


def qdsgd_step(
    states: list[NodeState],
    mixing: MixingMatrix,
    sizes: StepSizes,
    batch: int,
    speed_model: SpeedModel,
    quantizer: QuantizerSpec | None,
    objective: Objective,
    shards: DataShards,
    seed: int,
    t: int,
    tc: float = 0.0,
) -> RoundResult:
    """Quantized gossip with a fixed batch; the slowest node gates the round."""
    z, nbytes, clamped = _exchange(states, quantizer, seed, t)
    batch_sizes = np.full(len(states), min(batch, shards.m), dtype=int)
    grads = _node_gradients(states, batch_sizes, objective, shards, seed, t)
    new_states = _gossip_update(states, mixing, z, grads, sizes.alpha, sizes.eps)
    seconds = sync_round_time(
        "fixed_batch", batch, speed_model, len(states),
        _comm_seconds(quantizer, objective.p, tc),
        rng=substream(seed, ROUND, t),
    )
    return RoundResult(new_states, z, grads, batch_sizes, clamped, nbytes, seconds)


def dsgd_step(
    states: list[NodeState],
    mixing: MixingMatrix,
    alpha: float,
    batch: int,
    speed_model: SpeedModel,
    objective: Objective,
    shards: DataShards,
    seed: int,
    t: int,
    tc: float = 0.0,
) -> RoundResult:
    """Plain synchronous gossip SGD: ``x_i' = sum_j w_ij x_j - alpha g_i``.

    Messages are exact models; gradients use a fixed batch, so each
    round waits for the slowest node and pays the full communication
    cost.
    """
    w = mixing.matrix
    x = _models(states)
    batch_sizes = np.full(len(states), min(batch, shards.m), dtype=int)
    grads = _node_gradients(states, batch_sizes, objective, shards, seed, t)
    new_states = []
    for s in states:
        i = s.node
        new_x = w[i] @ x - alpha * grads[i]
        mailbox = {int(j): x[j] for j in np.nonzero(w[i])[0] if j != i}
        new_states.append(NodeState(node=i, x=new_x, mailbox=mailbox))
    seconds = sync_round_time(
        "fixed_batch", batch, speed_model, len(states), tc,
        rng=substream(seed, ROUND, t),
    )
    nbytes = len(states) * RAW_BYTES_PER_COORD * objective.p
    return RoundResult(new_states, x, grads, batch_sizes, 0, nbytes, seconds)


@dataclass
class RunSetup:
    """Assembled inputs for one simulated run."""

    algo: str
    graph: Graph
    mixing: MixingMatrix
    objective: Objective
    shards: DataShards
    speed_model: SpeedModel | list[SpeedModel]  # per-node list: async only
    sizes: StepSizes
    seed: int
    quantizer: QuantizerSpec | None = None
    tc: float = 0.0
    T: int | None = None
    deadline: float | None = None
    batch: int | None = None
    time_budget: float | None = None
    grid_samples: int = 200

    def __post_init__(self) -> None:
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if self.algo == "quantimed" and self.deadline is None:
            raise ValueError("quantimed needs a deadline")
        if self.algo in ("dsgd", "qdsgd", "async") and self.batch is None:
            raise ValueError(f"{self.algo} needs a fixed batch size")
        if self.algo == "async" and self.time_budget is None:
            raise ValueError("async runs need a simulated-time budget")
        if self.algo != "async" and self.T is None:
            raise ValueError("synchronous runs need an iteration count T")
        if self.algo != "async" and isinstance(self.speed_model, (list, tuple)):
            raise ValueError("per-node speed models are supported for async runs only")


@dataclass
class SimResult:
    rows: list[MetricsRow]
    final_models: np.ndarray
    clamp_events: int


def _row(
    setup: RunSetup, iteration: int, now: float, X: np.ndarray, nbytes: int
) -> MetricsRow:
    x_bar = X.mean(axis=0)
    gap = None
    if setup.objective.x_star is not None:
        gap = optimality_gap(X, setup.objective.x_star)
    grad = global_gradient(setup.objective, setup.shards, x_bar)
    return MetricsRow(
        iteration=iteration,
        sim_time_s=now,
        loss=global_loss(setup.objective, setup.shards, x_bar),
        gap=gap,
        consensus=consensus_error(X),
        grad_norm_sq=float(grad @ grad),
        bytes=nbytes,
    )


def _run_sync(setup: RunSetup) -> SimResult:
    states = initial_states(setup.graph.n, setup.objective.p)
    clock = SimClock()
    rows = [_row(setup, 0, clock.now, _models(states), 0)]
    clamp_total = 0
    for t in range(setup.T):
        if setup.algo == "quantimed":
            res = quantimed_step(
                states, setup.mixing, setup.sizes, setup.deadline, setup.speed_model,
                setup.quantizer, setup.objective, setup.shards, setup.seed, t, setup.tc,
            )
        elif setup.algo == "qdsgd":
            res = qdsgd_step(
                states, setup.mixing, setup.sizes, setup.batch, setup.speed_model,
                setup.quantizer, setup.objective, setup.shards, setup.seed, t, setup.tc,
            )
        else:
            res = dsgd_step(
                states, setup.mixing, setup.sizes.alpha, setup.batch, setup.speed_model,
                setup.objective, setup.shards, setup.seed, t, setup.tc,
            )
        states = res.states
        clamp_total += res.clamped
        clock.advance(res.round_seconds)
        rows.append(_row(setup, t + 1, clock.now, _models(states), res.bytes_sent))
    return SimResult(rows=rows, final_models=_models(states), clamp_events=clamp_total)


def _run_async(setup: RunSetup) -> SimResult:
    """Event-driven baseline.

    Each node fires at the cumulative sum of its own compute plus
    communication times. A firing node reads, per neighbor, the latest
    value published strictly before its firing instant (simultaneous
    events form a group that reads the pre-group snapshot, so equal
    constant speeds reproduce the synchronous trajectory exactly).
    Metrics are sampled on a uniform simulated-time grid.
    """
    n, p = setup.graph.n, setup.objective.p
    w = setup.mixing.matrix
    batch = min(setup.batch, setup.shards.m)
    quantizer = setup.quantizer
    msg_bytes = (
        RAW_BYTES_PER_COORD * p if quantizer is None else wire_size(quantizer, p)
    )

    x = np.zeros((n, p))
    published = np.zeros((n, p))  # visible to strictly later firings
    counts = [0] * n
    clamp_total = 0
    bytes_since_row = 0

    events = async_schedule(
        n, batch, setup.speed_model,
        lambda i, k: substream(setup.seed, i, SPEED, k),
        overhead=setup.tc,
    )
    pending = next(events)

    grid = [
        setup.time_budget * k / setup.grid_samples
        for k in range(1, setup.grid_samples + 1)
    ]
    rows = [_row(setup, 0, 0.0, x, 0)]
    next_sample = 0

    def flush_grid(up_to: float) -> None:
        nonlocal next_sample, bytes_since_row
        while next_sample < len(grid) and grid[next_sample] < up_to:
            rows.append(
                _row(setup, next_sample + 1, grid[next_sample], x, bytes_since_row)
            )
            bytes_since_row = 0
            next_sample += 1

    while pending[0] <= setup.time_budget:
        t_now = pending[0]
        flush_grid(t_now)
        group = []
        while pending[0] == t_now:
            group.append(pending)
            pending = next(events)
        # equal-time events read a snapshot frozen at the group start
        snapshot = published.copy()
        for _, i in group:
            k = counts[i]
            sample = deadline_stochastic_gradient(
                setup.objective, setup.shards, i, x[i], batch,
                rng=substream(setup.seed, i, BATCH, k), iteration=k,
            )
            # own model is read live, neighbors from the pre-group snapshot
            backup, snapshot[i] = snapshot[i].copy(), x[i]
            x[i] = w[i] @ snapshot - setup.sizes.alpha * sample.grad
            snapshot[i] = backup
            if quantizer is None:
                published[i] = x[i]
            else:
                values, clipped = quantize_values(
                    x[i], quantizer, substream(setup.seed, i, QUANTIZE, k)
                )
                clamp_total += clipped
                published[i] = values
            bytes_since_row += msg_bytes
            counts[i] = k + 1
    flush_grid(math.inf)
    return SimResult(rows=rows, final_models=x, clamp_events=clamp_total)


def run(setup: RunSetup) -> SimResult:
    """Drive a full run: T synchronous rounds, or events up to the budget.

    Row 0 always records the all-zero initial models; identical setups
    produce identical results.
    """
    if setup.algo == "async":
        return _run_async(setup)
    return _run_sync(setup)
