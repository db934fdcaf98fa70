"""Communication graphs and gossip mixing matrices.

Graphs are undirected, connected, and loop-free. Mixing matrices are
derived from the graph Laplacian as ``W = I - L/kappa`` with
``kappa > lambda_max(L)/2``, which makes W symmetric, doubly stochastic,
with a simple unit eigenvalue and all other eigenvalues in (-1, 1). The
quantity ``beta = max(|lambda_2|, |lambda_n|)`` and the spectral gap
``1 - beta`` control how fast gossip averaging contracts.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np

__all__ = [
    "Graph",
    "MixingMatrix",
    "SpectralReport",
    "build_erdos_renyi",
    "build_ring",
    "build_path",
    "build_complete",
    "laplacian",
    "default_kappa",
    "laplacian_mixing",
    "lazy_mixing",
    "validate_mixing",
    "graph_to_text",
    "graph_from_text",
]

ROW_SUM_TOL = 1e-12
UNIT_EIGENVALUE_TOL = 1e-9
RESAMPLE_LIMIT = 1000


def _normalize_edges(n: int, edges: Iterable[tuple[int, int]]) -> frozenset[tuple[int, int]]:
    out = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if i == j:
            raise ValueError(f"self-loop on node {i}")
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i}, {j}) outside node range 0..{n - 1}")
        out.add((min(i, j), max(i, j)))
    return frozenset(out)


def _adjacency(n: int, edges: Iterable[tuple[int, int]]) -> tuple[tuple[int, ...], ...]:
    neigh: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        neigh[i].append(j)
        neigh[j].append(i)
    return tuple(tuple(sorted(ns)) for ns in neigh)


def _is_connected(n: int, adjacency: tuple[tuple[int, ...], ...]) -> bool:
    seen = [False] * n
    seen[0] = True
    queue = deque([0])
    count = 1
    while queue:
        u = queue.popleft()
        for v in adjacency[u]:
            if not seen[v]:
                seen[v] = True
                count += 1
                queue.append(v)
    return count == n


@dataclass(frozen=True)
class Graph:
    """Undirected connected graph on nodes ``0..n-1`` without self-loops."""

    n: int
    edges: frozenset[tuple[int, int]]
    adjacency: tuple[tuple[int, ...], ...]

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "Graph":
        if n < 1:
            raise ValueError("graph needs at least one node")
        es = _normalize_edges(n, edges)
        adj = _adjacency(n, es)
        if not _is_connected(n, adj):
            raise ValueError("graph is not connected")
        return cls(n=n, edges=es, adjacency=adj)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.adjacency[i]

    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=float)


def build_erdos_renyi(
    n: int, p_c: float, rng: np.random.Generator, max_attempts: int = RESAMPLE_LIMIT
) -> Graph:
    """Sample a connected G(n, p_c) graph, resampling whole draws until connected.

    Each unordered pair is an edge independently with probability
    ``p_c``. Disconnected draws are discarded; after ``max_attempts``
    consecutive failures a RuntimeError signals that ``p_c`` is too
    small for ``n``.
    """
    if n < 2:
        raise ValueError("Erdos-Renyi sampling needs n >= 2")
    if not (0.0 <= p_c <= 1.0):
        raise ValueError(f"edge probability must be in [0, 1], got {p_c}")
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for _ in range(max_attempts):
        mask = rng.random(len(pairs)) < p_c
        edges = [pair for pair, keep in zip(pairs, mask) if keep]
        adj = _adjacency(n, edges)
        if _is_connected(n, adj):
            return Graph(n=n, edges=frozenset(edges), adjacency=adj)
    raise RuntimeError(
        f"no connected graph in {max_attempts} draws (p_c={p_c} too small for n={n})"
    )


def build_ring(n: int) -> Graph:
    if n < 3:
        raise ValueError("ring needs n >= 3")
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def build_path(n: int) -> Graph:
    if n < 2:
        raise ValueError("path needs n >= 2")
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def build_complete(n: int) -> Graph:
    if n < 2:
        raise ValueError("complete graph needs n >= 2")
    return Graph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def laplacian(g: Graph) -> np.ndarray:
    """Graph Laplacian L = diag(degrees) - adjacency."""
    L = np.zeros((g.n, g.n))
    for i, j in g.edges:
        L[i, j] = L[j, i] = -1.0
        L[i, i] += 1.0
        L[j, j] += 1.0
    return L


@dataclass(frozen=True)
class SpectralReport:
    """Per-invariant verdicts plus spectral data for a candidate mixing matrix.

    ``ok`` aggregates the checks required of a gossip matrix: symmetry,
    unit row sums, a simple unit eigenvalue (consensus subspace is the
    all-ones line), and smallest eigenvalue above -1. Nonnegativity of
    the entries is reported separately: the Laplacian construction can
    produce slightly negative diagonals on irregular graphs without
    affecting any spectral property the optimizers rely on.
    """

    ok: bool
    symmetric: bool
    row_stochastic: bool
    unit_eigenvalue_simple: bool
    lambda_min_ok: bool
    nonnegative: bool
    pattern_ok: bool | None
    beta: float
    spectral_gap: float
    eigenvalues: np.ndarray
    row_sum_error: float
    min_entry: float

    def summary(self) -> str:
        def mark(flag: bool | None) -> str:
            return "-" if flag is None else ("pass" if flag else "FAIL")

        lines = [
            f"symmetric:              {mark(self.symmetric)}",
            f"row sums = 1 (+-1e-12): {mark(self.row_stochastic)}  (max error {self.row_sum_error:.3e})",
            f"unit eigenvalue simple: {mark(self.unit_eigenvalue_simple)}",
            f"lambda_min > -1:        {mark(self.lambda_min_ok)}  (lambda_min {self.eigenvalues[-1]:.6f})",
            f"entries >= 0:           {mark(self.nonnegative)}  (min entry {self.min_entry:.3e}, informational)",
        ]
        if self.pattern_ok is not None:
            lines.append(f"graph sparsity pattern: {mark(self.pattern_ok)}")
        lines.append(f"beta = {self.beta:.6f}, spectral gap = {self.spectral_gap:.6f}")
        return "\n".join(lines)


def _beta_from_eigenvalues(eigenvalues: np.ndarray) -> float:
    if eigenvalues.size < 2:
        return 0.0
    return float(max(abs(eigenvalues[1]), abs(eigenvalues[-1])))


def validate_mixing(w, graph: Graph | None = None) -> SpectralReport:
    """Check a candidate matrix against the gossip-matrix invariants.

    Accepts a raw square array or a MixingMatrix. Failures are reported,
    never raised. When ``graph`` is given, also checks that off-diagonal
    weights vanish outside its edge set.
    """
    mat = np.asarray(getattr(w, "matrix", w), dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {mat.shape}")
    n = mat.shape[0]

    symmetric = bool(np.array_equal(mat, mat.T))
    row_sum_error = float(np.max(np.abs(mat.sum(axis=1) - 1.0)))
    row_stochastic = row_sum_error <= ROW_SUM_TOL
    min_entry = float(mat.min())
    nonnegative = min_entry >= 0.0

    sym_part = mat if symmetric else 0.5 * (mat + mat.T)
    eigenvalues = np.sort(np.linalg.eigvalsh(sym_part))[::-1]
    unit_multiplicity = int(np.sum(np.abs(eigenvalues - 1.0) <= UNIT_EIGENVALUE_TOL))
    unit_eigenvalue_simple = unit_multiplicity == 1
    lambda_min_ok = bool(eigenvalues[-1] > -1.0 + 1e-12)

    pattern_ok = None
    if graph is not None:
        off = ~np.eye(n, dtype=bool)
        allowed = np.zeros((n, n), dtype=bool)
        for i, j in graph.edges:
            allowed[i, j] = allowed[j, i] = True
        pattern_ok = bool(np.all(mat[off & ~allowed] == 0.0))

    beta = _beta_from_eigenvalues(eigenvalues)
    return SpectralReport(
        ok=symmetric and row_stochastic and unit_eigenvalue_simple and lambda_min_ok,
        symmetric=symmetric,
        row_stochastic=row_stochastic,
        unit_eigenvalue_simple=unit_eigenvalue_simple,
        lambda_min_ok=lambda_min_ok,
        nonnegative=nonnegative,
        pattern_ok=pattern_ok,
        beta=beta,
        spectral_gap=1.0 - beta,
        eigenvalues=eigenvalues,
        row_sum_error=row_sum_error,
        min_entry=min_entry,
    )


@dataclass(frozen=True)
class MixingMatrix:
    """Symmetric doubly stochastic gossip weights with cached spectral data.

    ``eigenvalues`` are sorted descending, so ``eigenvalues[0] == 1`` and
    ``eigenvalues[-1]`` is the smallest. Instances are immutable; the
    underlying array is marked read-only.
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray
    beta: float
    spectral_gap: float

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def lambda_2(self) -> float:
        return float(self.eigenvalues[1]) if self.n > 1 else 1.0

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[-1])

    @classmethod
    def from_matrix(cls, w, check: bool = True) -> "MixingMatrix":
        mat = np.array(getattr(w, "matrix", w), dtype=float)
        report = validate_mixing(mat)
        if check and not report.ok:
            raise ValueError("matrix violates mixing invariants:\n" + report.summary())
        mat.setflags(write=False)
        eig = report.eigenvalues.copy()
        eig.setflags(write=False)
        return cls(
            matrix=mat,
            eigenvalues=eig,
            beta=report.beta,
            spectral_gap=report.spectral_gap,
        )


def default_kappa(g: Graph, margin: float = 0.2) -> float:
    """Laplacian scale ``(1 + margin) * lambda_max(L) / 2``.

    ``margin`` must be positive for the strict inequality
    ``kappa > lambda_max(L)/2`` required downstream.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    lam_max = float(np.linalg.eigvalsh(laplacian(g))[-1])
    return (1.0 + margin) * lam_max / 2.0


def laplacian_mixing(g: Graph, kappa: float) -> MixingMatrix:
    """Mixing matrix ``W = I - L/kappa``.

    Requires ``kappa > lambda_max(L)/2`` so the smallest eigenvalue of W
    stays above -1.
    """
    L = laplacian(g)
    lam_max = float(np.linalg.eigvalsh(L)[-1])
    if kappa <= lam_max / 2.0:
        raise ValueError(
            f"kappa={kappa} must exceed lambda_max(L)/2 = {lam_max / 2.0}"
        )
    w = np.eye(g.n) - L / kappa
    return MixingMatrix.from_matrix(w)


def lazy_mixing(w: MixingMatrix, eps: float) -> MixingMatrix:
    """Lazy matrix ``(1 - eps) I + eps W``.

    Eigenvalues shift to ``1 - eps + eps * lambda_i(W)``. For
    ``eps <= 1/(1 - lambda_min(W))`` all of them are nonnegative and
    ``beta`` of the result equals ``1 - eps (1 - lambda_2(W))``; above
    that range only the identity, not the closed form, holds.
    """
    if not (0.0 < eps <= 1.0):
        raise ValueError(f"eps must be in (0, 1], got {eps}")
    if w.lambda_min < 1.0 and eps > 1.0 / (1.0 - w.lambda_min) + 1e-15:
        warnings.warn(
            "eps exceeds 1/(1 - lambda_min); the closed-form beta identity "
            "no longer applies",
            stacklevel=2,
        )
    lazy = (1.0 - eps) * np.eye(w.n) + eps * w.matrix
    # invariants are inherited algebraically from w; re-checking them
    # numerically would misfire for eps below the eigenvalue tolerance
    return MixingMatrix.from_matrix(lazy, check=False)


def graph_to_text(g: Graph) -> str:
    """Serialize as an edge list: header ``n=<count>``, one ``i j`` per line."""
    lines = [f"n={g.n}"]
    lines.extend(f"{i} {j}" for i, j in sorted(g.edges))
    return "\n".join(lines) + "\n"


def graph_from_text(text: str) -> Graph:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("n="):
        raise ValueError("edge-list text must start with an 'n=<count>' header")
    n = int(lines[0][2:])
    edges = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 2:
            raise ValueError(f"malformed edge line: {ln!r}")
        edges.append((int(parts[0]), int(parts[1])))
    return Graph.from_edges(n, edges)
