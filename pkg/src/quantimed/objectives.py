"""Loss families, data partitions, and gradient oracles.

Each of ``n`` nodes holds ``m`` samples; the global objective is the
average over nodes of the per-node mean loss. Three families share one
vectorized contract (per-sample losses and gradients on ``(k, q)``
sample blocks):

  quadratic : l(x, c) = 0.5 ||x - c||^2 with per-sample centers c;
              analytic optimum at the global center mean, mu = K = 1.
  logistic  : l(x, (a, y)) = log(1 + exp(-y a.x)) + ridge/2 ||x||^2
              with labels y in {-1, +1}; K = ridge + max ||a||^2 / 4,
              mu = ridge.
  mlp       : squared error of a one-hidden-layer tanh network against
              targets produced by a fixed teacher network of the same
              shape; nonconvex, smoothness constant estimated by
              Hessian-vector power iteration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

__all__ = [
    "DataShards",
    "Objective",
    "QuadraticObjective",
    "LogisticObjective",
    "MlpObjective",
    "GradSample",
    "make_quadratic",
    "make_logistic",
    "make_mlp",
    "load_samples_csv",
    "local_full_gradient",
    "deadline_stochastic_gradient",
    "global_loss",
    "global_gradient",
    "shards_to_text",
]


@dataclass(frozen=True)
class DataShards:
    """The n x m sample partition: ``samples[i]`` is node i's block."""

    samples: np.ndarray  # (n, m, q)
    source: str = "synthetic"

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim != 3:
            raise ValueError("samples must have shape (n, m, q)")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def m(self) -> int:
        return self.samples.shape[1]

    @property
    def q(self) -> int:
        return self.samples.shape[2]

    def node(self, i: int) -> np.ndarray:
        return self.samples[i]

    def all_samples(self) -> np.ndarray:
        return self.samples.reshape(self.n * self.m, self.q)


@dataclass
class GradSample:
    """One stochastic gradient evaluation and the batch that produced it."""

    node: int
    iteration: int | None
    indices: np.ndarray
    grad: np.ndarray
    batch_size: int


class Objective:
    """Base contract: vectorized per-sample losses and gradients.

    Subclasses set ``family`` and implement :meth:`sample_losses` and
    :meth:`sample_grads`; :meth:`batch_grad` may be overridden when the
    mean gradient has a cheaper form than averaging per-sample rows.
    """

    family = "abstract"

    def __init__(
        self,
        p: int,
        K: float,
        mu: float | None,
        x_star: np.ndarray | None = None,
        f_star: float | None = None,
        k_is_estimate: bool = False,
    ):
        self.p = int(p)
        self.K = float(K)
        self.mu = None if mu is None else float(mu)
        self.x_star = None if x_star is None else np.asarray(x_star, dtype=float)
        self.f_star = None if f_star is None else float(f_star)
        self.k_is_estimate = bool(k_is_estimate)

    def sample_losses(self, x: np.ndarray, samples: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_grads(self, x: np.ndarray, samples: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def batch_grad(self, x: np.ndarray, samples: np.ndarray) -> np.ndarray:
        return self.sample_grads(x, samples).mean(axis=0)


class QuadraticObjective(Objective):
    family = "quadratic"

    def sample_losses(self, x, samples):
        diff = x[None, :] - samples
        return 0.5 * np.sum(diff * diff, axis=1)

    def sample_grads(self, x, samples):
        return x[None, :] - samples

    def batch_grad(self, x, samples):
        return x - samples.mean(axis=0)


class LogisticObjective(Objective):
    family = "logistic"

    def __init__(self, p, K, mu, ridge: float):
        super().__init__(p=p, K=K, mu=mu)
        self.ridge = float(ridge)

    @staticmethod
    def _split(samples):
        return samples[:, :-1], samples[:, -1]

    def sample_losses(self, x, samples):
        a, y = self._split(samples)
        margins = y * (a @ x)
        return np.logaddexp(0.0, -margins) + 0.5 * self.ridge * float(x @ x)

    def sample_grads(self, x, samples):
        a, y = self._split(samples)
        margins = y * (a @ x)
        # sigmoid(-margins), stable for large |margins|
        weight = 0.5 * (1.0 - np.tanh(0.5 * margins))
        return (-y * weight)[:, None] * a + self.ridge * x[None, :]

    def batch_grad(self, x, samples):
        a, y = self._split(samples)
        margins = y * (a @ x)
        weight = 0.5 * (1.0 - np.tanh(0.5 * margins))
        return a.T @ (-y * weight) / len(y) + self.ridge * x


class MlpObjective(Objective):
    """One-hidden-layer tanh network with scalar output and squared loss.

    Parameters pack as ``[W1.ravel(), b1, w2, b2]`` with W1 of shape
    (hidden, in_dim). Samples are rows ``[a, y]``.
    """

    family = "mlp"

    def __init__(self, in_dim: int, hidden: int, K: float):
        p = hidden * in_dim + 2 * hidden + 1
        super().__init__(p=p, K=K, mu=None, f_star=0.0, k_is_estimate=True)
        self.in_dim = int(in_dim)
        self.hidden = int(hidden)

    def unpack(self, x):
        h, d = self.hidden, self.in_dim
        w1 = x[: h * d].reshape(h, d)
        b1 = x[h * d : h * d + h]
        w2 = x[h * d + h : h * d + 2 * h]
        b2 = x[-1]
        return w1, b1, w2, b2

    @staticmethod
    def pack(w1, b1, w2, b2) -> np.ndarray:
        return np.concatenate([np.ravel(w1), b1, w2, [float(b2)]])

    def _forward(self, x, samples):
        w1, b1, w2, b2 = self.unpack(x)
        a, y = samples[:, :-1], samples[:, -1]
        hidden = np.tanh(a @ w1.T + b1)
        return a, y, hidden, hidden @ w2 + b2 - y

    def sample_losses(self, x, samples):
        _, _, _, resid = self._forward(x, samples)
        return 0.5 * resid * resid

    def sample_grads(self, x, samples):
        _, _, w2, _ = self.unpack(x)
        a, _, hidden, resid = self._forward(x, samples)
        back = (resid[:, None] * w2[None, :]) * (1.0 - hidden * hidden)  # (k, h)
        dw1 = back[:, :, None] * a[:, None, :]  # (k, h, d)
        dw2 = resid[:, None] * hidden
        return np.concatenate(
            [dw1.reshape(len(a), -1), back, dw2, resid[:, None]], axis=1
        )

    def batch_grad(self, x, samples):
        _, _, w2, _ = self.unpack(x)
        a, _, hidden, resid = self._forward(x, samples)
        k = len(a)
        back = (resid[:, None] * w2[None, :]) * (1.0 - hidden * hidden)
        dw1 = back.T @ a / k
        db1 = back.mean(axis=0)
        dw2 = hidden.T @ resid / k
        db2 = resid.mean()
        return self.pack(dw1, db1, dw2, db2)


def make_quadratic(
    n: int,
    m: int,
    p: int,
    seed: int,
    center_shift: float = 2.0,
    centers: np.ndarray | None = None,
) -> tuple[QuadraticObjective, DataShards]:
    """Quadratic family with Gaussian per-sample centers.

    Centers are drawn around a common random shift of magnitude
    ``center_shift`` so the optimum sits away from the zero initial
    model. Pass ``centers`` of shape (n, m, p) to pin them explicitly.
    """
    if min(n, m, p) < 1:
        raise ValueError("n, m, p must all be >= 1")
    if centers is None:
        rng = substream(seed, "objective-data")
        shift = center_shift * rng.standard_normal(p)
        centers = shift + rng.standard_normal((n, m, p))
    centers = np.asarray(centers, dtype=float).reshape(n, m, p)
    shards = DataShards(samples=centers, source=f"quadratic(seed={seed})")
    x_star = centers.reshape(n * m, p).mean(axis=0)
    obj = QuadraticObjective(p=p, K=1.0, mu=1.0, x_star=x_star)
    obj.f_star = float(global_loss(obj, shards, x_star))
    return obj, shards


def _logistic_from_rows(rows: np.ndarray, n: int, m: int, ridge: float, source: str):
    features, labels = rows[:, :-1], rows[:, -1]
    bad = np.nonzero(~np.isin(labels, (-1.0, 1.0)))[0]
    if bad.size:
        raise ValueError(f"labels must be -1 or +1 (first offender: row {bad[0]})")
    samples = rows.reshape(n, m, rows.shape[1])
    shards = DataShards(samples=samples, source=source)
    K = ridge + float(np.max(np.sum(features * features, axis=1))) / 4.0
    obj = LogisticObjective(p=features.shape[1], K=K, mu=ridge, ridge=ridge)
    return obj, shards


def make_logistic(
    n: int,
    m: int,
    p: int,
    seed: int | None = None,
    csv_path: str | None = None,
    ridge: float = 0.1,
) -> tuple[LogisticObjective, DataShards]:
    """Ridge-regularized logistic regression on synthetic or CSV data.

    Synthetic mode plants a random direction and labels points by its
    sign. CSV mode reads comma-separated rows (header optional, last
    column the +-1 label), assigns rows to nodes round-robin, and
    truncates to ``n * m``.
    """
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    if csv_path is not None:
        raw = load_samples_csv(csv_path)
        if len(raw) < n * m:
            raise ValueError(f"need at least {n * m} rows, file has {len(raw)}")
        order = np.argsort(np.arange(n * m) % n, kind="stable")  # round-robin fill
        rows = raw[: n * m][order]
        return _logistic_from_rows(rows, n, m, ridge, source=f"csv:{csv_path}")
    if seed is None:
        raise ValueError("make_logistic needs a seed or a csv_path")
    rng = substream(seed, "objective-data")
    features = rng.standard_normal((n * m, p))
    direction = rng.standard_normal(p)
    direction /= np.linalg.norm(direction)
    labels = np.where(features @ direction >= 0.0, 1.0, -1.0)
    rows = np.concatenate([features, labels[:, None]], axis=1)
    return _logistic_from_rows(rows, n, m, ridge, source=f"logistic(seed={seed})")


def _estimate_smoothness(obj: Objective, samples: np.ndarray, rng, iters: int = 30) -> float:
    """Spectral-norm estimate of the Hessian at a random point.

    Power iteration on Hessian-vector products formed by central
    differences of the mean gradient. An estimate, not a supremum.
    """
    x0 = 0.5 * rng.standard_normal(obj.p)
    v = rng.standard_normal(obj.p)
    v /= np.linalg.norm(v)
    h = 1e-5 * (1.0 + np.linalg.norm(x0))
    lam = 0.0
    for _ in range(iters):
        hv = (
            obj.batch_grad(x0 + h * v, samples) - obj.batch_grad(x0 - h * v, samples)
        ) / (2.0 * h)
        lam = float(abs(v @ hv))
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            break
        v = hv / norm
    return max(lam, 1e-12)


def make_mlp(
    n: int, m: int, in_dim: int, hidden: int, seed: int
) -> tuple[MlpObjective, DataShards]:
    """Teacher-student tanh network: targets come from a hidden teacher.

    The data is realizable (student weights equal to the teacher give
    zero loss), so the global minimum value is exactly 0.
    """
    if hidden < 1:
        raise ValueError("hidden must be >= 1")
    rng = substream(seed, "objective-data")
    w1 = rng.standard_normal((hidden, in_dim)) / np.sqrt(in_dim)
    b1 = 0.1 * rng.standard_normal(hidden)
    w2 = rng.standard_normal(hidden) / np.sqrt(hidden)
    b2 = 0.1 * rng.standard_normal()
    inputs = rng.standard_normal((n * m, in_dim))
    targets = np.tanh(inputs @ w1.T + b1) @ w2 + b2
    rows = np.concatenate([inputs, targets[:, None]], axis=1)
    shards = DataShards(samples=rows.reshape(n, m, in_dim + 1), source=f"mlp(seed={seed})")
    probe = MlpObjective(in_dim=in_dim, hidden=hidden, K=1.0)
    K = _estimate_smoothness(probe, shards.all_samples(), substream(seed, "mlp-smoothness"))
    return MlpObjective(in_dim=in_dim, hidden=hidden, K=K), shards


def load_samples_csv(path: str) -> np.ndarray:
    """Read numeric rows; last column is the label.

    The first line may be a non-numeric header. Any later row with the
    wrong arity or a non-numeric field is rejected with its line number.
    """
    rows: list[list[float]] = []
    arity: int | None = None
    with open(path, newline="") as fh:
        for lineno, parts in enumerate(csv.reader(fh), start=1):
            if not parts or (len(parts) == 1 and not parts[0].strip()):
                continue
            try:
                values = [float(v) for v in parts]
            except ValueError:
                if lineno == 1:
                    continue  # optional header
                raise ValueError(f"{path}:{lineno}: non-numeric field in {parts!r}")
            if arity is None:
                arity = len(values)
                if arity < 2:
                    raise ValueError(f"{path}:{lineno}: rows need >= 2 columns")
            elif len(values) != arity:
                raise ValueError(
                    f"{path}:{lineno}: expected {arity} columns, got {len(values)}"
                )
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.asarray(rows, dtype=float)


def local_full_gradient(obj: Objective, shards: DataShards, i: int, x) -> np.ndarray:
    """Exact mean gradient over node i's shard."""
    if not (0 <= i < shards.n):
        raise ValueError(f"node index {i} outside 0..{shards.n - 1}")
    return obj.batch_grad(np.asarray(x, dtype=float), shards.node(i))


def deadline_stochastic_gradient(
    obj: Objective,
    shards: DataShards,
    i: int,
    x,
    batch,
    rng: np.random.Generator | None = None,
    iteration: int | None = None,
) -> GradSample:
    """Mini-batch gradient for whatever fit under the deadline.

    ``batch`` is either an explicit index multiset or a size: sizes
    below ``m`` draw indices with replacement from ``rng``, a size of
    ``m`` (or more) uses every sample once, and size 0 returns the zero
    vector (the no-gradient-finished fallback).
    """
    x = np.asarray(x, dtype=float)
    m = shards.m
    if isinstance(batch, (int, np.integer)):
        b = int(batch)
        if b < 0:
            raise ValueError("batch size must be >= 0")
        if b >= m:
            indices = np.arange(m)
        elif b == 0:
            indices = np.empty(0, dtype=int)
        else:
            if rng is None:
                raise ValueError("sampling a batch by size needs an rng")
            indices = rng.integers(0, m, size=b)
    else:
        indices = np.asarray(batch, dtype=int)
        if indices.size and (indices.min() < 0 or indices.max() >= m):
            raise ValueError(f"batch indices must lie in [0, {m})")
    if indices.size == 0:
        grad = np.zeros(obj.p)
    else:
        grad = obj.batch_grad(x, shards.node(i)[indices])
    return GradSample(
        node=i,
        iteration=iteration,
        indices=indices,
        grad=grad,
        batch_size=int(indices.size),
    )


def global_loss(obj: Objective, shards: DataShards, x) -> float:
    """f(x): average over nodes of the per-node mean loss.

    Shards all hold exactly m samples, so this equals the mean loss over
    the pooled sample set, which is what one vectorized pass computes.
    """
    x = np.asarray(x, dtype=float)
    return float(obj.sample_losses(x, shards.all_samples()).mean())


def global_gradient(obj: Objective, shards: DataShards, x) -> np.ndarray:
    """Gradient of f: the average of the per-node full gradients, computed
    as one vectorized pass over the pooled samples (shards are equal-sized)."""
    x = np.asarray(x, dtype=float)
    return obj.batch_grad(x, shards.all_samples())


def shards_to_text(shards: DataShards) -> str:
    """Structured dump of the per-node sample-index assignment."""
    lines = [f'{{"source": "{shards.source}", "n": {shards.n}, "m": {shards.m}, "nodes": [']
    for i in range(shards.n):
        start = i * shards.m
        idxs = ", ".join(str(start + j) for j in range(shards.m))
        comma = "," if i < shards.n - 1 else ""
        lines.append(f"  [{idxs}]{comma}")
    lines.append("]}")
    return "\n".join(lines) + "\n"
