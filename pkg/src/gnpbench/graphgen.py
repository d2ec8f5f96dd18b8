"""Synthetic graph families for training and extrapolation testing.

Six undirected families: Erdos-Renyi, Barabasi-Albert preferential
attachment, random 4-regular (pairing model), uniform random trees (Prufer),
ladders, and dense-ER expanders. Every generator filters out graphs
containing a degree-0 node by regenerating, since several task objectives
divide by node degree. All sampling flows from explicit seeds.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace

import numpy as np

ER = "er"
BA = "ba"
FOURREGULAR = "4regular"
TREE = "tree"
LADDER = "ladder"
EXPANDER = "expander"

FAMILIES = (ER, BA, FOURREGULAR, TREE, LADDER, EXPANDER)

CONST_ONE = "const_one"
UNIFORM = "uniform"

_MAX_ATTEMPTS = 1000
_EXPANDER_P = 0.8


class GenerationError(RuntimeError):
    """A generator spec proved infeasible (attempt budget exhausted etc.)."""


@dataclass
class Graph:
    """Undirected graph: edge list with u <= v, optional symmetric weights.

    ``edges`` has shape (E, 2); self-loops (u == v) never appear at
    generation time and are only added by the node-task pipeline.
    ``node_features`` is (n, f). Treat instances as immutable.
    """

    n: int
    edges: np.ndarray
    edge_weights: np.ndarray | None = None
    node_features: np.ndarray | None = None
    _adj: list | None = field(default=None, repr=False, compare=False)

    def adjacency(self) -> list[np.ndarray]:
        """Per-node sorted neighbor arrays (self-loops contribute once)."""
        if self._adj is None:
            neigh = [[] for _ in range(self.n)]
            for u, v in self.edges:
                if u == v:
                    neigh[u].append(u)
                else:
                    neigh[u].append(v)
                    neigh[v].append(u)
            self._adj = [np.array(sorted(x), dtype=np.int64) for x in neigh]
        return self._adj

    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency()], dtype=np.int64)


@dataclass(frozen=True)
class GenSpec:
    family: str
    n_min: int
    n_max: int
    count: int
    seed: int
    er_p_min: float = 0.1
    er_p_max: float = 0.9

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not (1 <= self.n_min <= self.n_max):
            raise ValueError("need 1 <= n_min <= n_max")
        if not (0.0 < self.er_p_min <= self.er_p_max <= 1.0):
            raise ValueError("need 0 < er_p_min <= er_p_max <= 1")


def _edges_from_pairs(pairs) -> np.ndarray:
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.array(sorted((min(u, v), max(u, v)) for u, v in pairs), dtype=np.int64)
    return e


def _all_degrees_positive(n, edges) -> bool:
    if len(edges) == 0:
        return n == 0
    return np.unique(edges).size == n


def _er_once(n, p, rng) -> np.ndarray:
    mask = np.triu(rng.random((n, n)) < p, k=1)
    return np.argwhere(mask).astype(np.int64)


def gen_er(spec: GenSpec, rng: np.random.Generator) -> list[Graph]:
    """Erdos-Renyi G(n, p) with n and p drawn fresh per graph."""
    graphs = []
    for _ in range(spec.count):
        for attempt in range(_MAX_ATTEMPTS):
            n = int(rng.integers(spec.n_min, spec.n_max + 1))
            p = float(rng.uniform(spec.er_p_min, spec.er_p_max))
            edges = _er_once(n, p, rng)
            if _all_degrees_positive(n, edges):
                graphs.append(Graph(n=n, edges=edges))
                break
        else:
            raise GenerationError(
                f"ER spec infeasible: no degree>=1 graph in {_MAX_ATTEMPTS} attempts"
            )
    return graphs


def _ba_once(n, m, rng) -> np.ndarray:
    # Seed core: clique on m+1 nodes; each later node attaches to m distinct
    # targets sampled preferentially from the degree-weighted multiset.
    pairs = [(i, j) for i in range(m + 1) for j in range(i + 1, m + 1)]
    repeated: list[int] = []
    for i in range(m + 1):
        repeated.extend([i] * m)
    for v in range(m + 1, n):
        targets: set[int] = set()
        while len(targets) < m:
            targets.add(int(repeated[rng.integers(0, len(repeated))]))
        for t in targets:
            pairs.append((t, v))
            repeated.append(t)
        repeated.extend([v] * m)
    return _edges_from_pairs(pairs)


def gen_ba(spec: GenSpec, rng: np.random.Generator) -> list[Graph]:
    """Barabasi-Albert graphs; attachment count m ~ U[ceil(.05n), floor(.4n)]."""
    graphs = []
    for _ in range(spec.count):
        n = int(rng.integers(spec.n_min, spec.n_max + 1))
        m_lo = max(1, int(np.ceil(0.05 * n)))
        m_hi = max(m_lo, int(np.floor(0.4 * n)))
        m = int(rng.integers(m_lo, m_hi + 1))
        if m >= n:
            raise GenerationError(f"BA: m={m} >= n={n}")
        graphs.append(Graph(n=n, edges=_ba_once(n, m, rng)))
    return graphs


def _four_regular_once(n, rng) -> np.ndarray | None:
    stubs = np.repeat(np.arange(n), 4)
    rng.shuffle(stubs)
    pairs = stubs.reshape(-1, 2)
    if np.any(pairs[:, 0] == pairs[:, 1]):
        return None
    canon = np.sort(pairs, axis=1)
    keys = canon[:, 0] * n + canon[:, 1]
    if np.unique(keys).size != len(keys):
        return None
    return _edges_from_pairs(canon)


def _prufer_tree(n, rng) -> np.ndarray:
    if n == 1:
        return np.zeros((0, 2), dtype=np.int64)
    if n == 2:
        return np.array([[0, 1]], dtype=np.int64)
    seq = rng.integers(0, n, size=n - 2)
    degree = np.ones(n, dtype=np.int64)
    for s in seq:
        degree[s] += 1
    pairs = []
    leaves = sorted(int(i) for i in range(n) if degree[i] == 1)
    heapq.heapify(leaves)
    for s in seq:
        leaf = heapq.heappop(leaves)
        pairs.append((leaf, int(s)))
        degree[s] -= 1
        if degree[s] == 1:
            heapq.heappush(leaves, int(s))
    u = heapq.heappop(leaves)
    v = heapq.heappop(leaves)
    pairs.append((u, v))
    return _edges_from_pairs(pairs)


def _ladder(n) -> tuple[int, np.ndarray]:
    k = n // 2
    n_eff = 2 * k
    pairs = []
    for i in range(k - 1):
        pairs.append((i, i + 1))
        pairs.append((k + i, k + i + 1))
    for i in range(k):
        pairs.append((i, k + i))
    return n_eff, _edges_from_pairs(pairs)


def gen_structured(spec: GenSpec, rng: np.random.Generator) -> list[Graph]:
    """4-regular / tree / ladder / expander families."""
    graphs = []
    for _ in range(spec.count):
        n = int(rng.integers(spec.n_min, spec.n_max + 1))
        if spec.family == FOURREGULAR:
            if n < 5:
                raise GenerationError("4regular needs n >= 5")
            for attempt in range(_MAX_ATTEMPTS):
                edges = _four_regular_once(n, rng)
                if edges is not None:
                    break
            else:
                raise GenerationError("4regular pairing rejected too often")
            graphs.append(Graph(n=n, edges=edges))
        elif spec.family == TREE:
            if n < 2:
                raise GenerationError("tree needs n >= 2 for degree >= 1")
            graphs.append(Graph(n=n, edges=_prufer_tree(n, rng)))
        elif spec.family == LADDER:
            if n < 4:
                raise GenerationError("ladder needs n >= 4")
            n_eff, edges = _ladder(n)
            graphs.append(Graph(n=n_eff, edges=edges))
        elif spec.family == EXPANDER:
            for attempt in range(_MAX_ATTEMPTS):
                edges = _er_once(n, _EXPANDER_P, rng)
                if _all_degrees_positive(n, edges):
                    break
            else:
                raise GenerationError("expander regeneration budget exhausted")
            graphs.append(Graph(n=n, edges=edges))
        else:
            raise GenerationError(f"gen_structured: bad family {spec.family}")
    return graphs


def generate(spec: GenSpec) -> list[Graph]:
    """Generate ``spec.count`` graphs of the requested family from its seed."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    if spec.family == ER:
        return gen_er(spec, rng)
    if spec.family == BA:
        return gen_ba(spec, rng)
    return gen_structured(spec, rng)


def attach_features(graphs, feature_spec, rng=None) -> list[Graph]:
    """Set node features: ("const_one",) or ("uniform", lo, hi[, dim])."""
    kind = feature_spec[0]
    out = []
    if kind == CONST_ONE:
        for g in graphs:
            out.append(replace(g, node_features=np.ones((g.n, 1))))
    elif kind == UNIFORM:
        lo, hi = feature_spec[1], feature_spec[2]
        dim = feature_spec[3] if len(feature_spec) > 3 else 3
        if rng is None:
            raise ValueError("uniform features need an rng")
        for g in graphs:
            out.append(replace(g, node_features=rng.uniform(lo, hi, size=(g.n, dim))))
    else:
        raise ValueError(f"unknown feature spec {feature_spec!r}")
    return out


def validate(g: Graph, allow_self_loops: bool = False) -> None:
    """Check symmetry/no-duplicate/min-degree invariants; raise on violation."""
    e = g.edges
    if e.size:
        if e.min() < 0 or e.max() >= g.n:
            raise ValueError("edge endpoint out of range")
        if not allow_self_loops and np.any(e[:, 0] == e[:, 1]):
            raise ValueError("unexpected self-loop")
        if np.any(e[:, 0] > e[:, 1]):
            raise ValueError("edges must be stored with u <= v")
        keys = e[:, 0].astype(np.int64) * g.n + e[:, 1]
        if np.unique(keys).size != len(keys):
            raise ValueError("parallel edges")
    plain = e[e[:, 0] != e[:, 1]] if e.size else e
    if not _all_degrees_positive(g.n, plain):
        raise ValueError("degree-0 node")
    if g.edge_weights is not None:
        if len(g.edge_weights) != len(e):
            raise ValueError("weights not parallel to edges")
        if np.any(g.edge_weights < 0):
            raise ValueError("negative edge weight")


# -- JSON Lines serialization ------------------------------------------------


def graph_to_obj(g: Graph) -> dict:
    feat = g.node_features
    return {
        "n": g.n,
        "edges": [[int(u), int(v)] for u, v in g.edges],
        "weights": None if g.edge_weights is None else [float(w) for w in g.edge_weights],
        "feat_dim": 0 if feat is None else int(feat.shape[1]),
        "features": [] if feat is None else [float(x) for x in feat.ravel()],
    }


def graph_from_obj(obj: dict) -> Graph:
    n = int(obj["n"])
    edges = np.array(obj["edges"], dtype=np.int64).reshape(-1, 2)
    weights = None if obj["weights"] is None else np.array(obj["weights"], dtype=np.float64)
    feat_dim = int(obj["feat_dim"])
    features = None
    if feat_dim:
        features = np.array(obj["features"], dtype=np.float64).reshape(n, feat_dim)
    return Graph(n=n, edges=edges, edge_weights=weights, node_features=features)


def serialize(graphs, path) -> None:
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_obj(g)) + "\n")


def deserialize(path) -> list[Graph]:
    graphs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                graphs.append(graph_from_obj(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}: malformed graph on line {lineno}: {exc}") from exc
    return graphs
