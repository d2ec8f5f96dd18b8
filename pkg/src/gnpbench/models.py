"""Model architectures: graph-level GIN, node-level GIN stack, set models.

All three families run over disjoint-union batches: node features of many
graphs stacked into one matrix, neighborhoods pooled via contiguous segment
runs, and per-graph readout via graph-boundary segments. Aggregation comes in
two flavours:

* additive (graph-level): out_v = MLP(h_v + POOL({h_u : u in N(v)}))
* self-in-pool (node-level): out_v = MLP(POOL({h_u + w_uv : u in N(v)+{v}}))
  where the scalar edge weight is broadcast-added to the neighbor features;
  the dataset pipeline guarantees a weight-0 self-loop on every node, which
  makes MIN aggregation one synchronous Bellman-Ford relaxation round.

The configured non-negativity activation is applied immediately before every
learnable-norm pooling call; a learnable-norm instance over a 1-dimensional
input runs in minus-only mode (the half split gives the plus side zero
columns there, and full mode requires at least 2).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import pooling as pl
from . import tasks
from .autodiff import Node, Param, ShapeError, Tape

RELU = "relu"
ABS_RELU = "abs_relu"
ABS_LEAKYRELU = "abs_leakyrelu"
ABS_ELU = "abs_elu"
ACTIVATIONS = (RELU, ABS_RELU, ABS_LEAKYRELU, ABS_ELU)

BASIC = "basic"
DEEP = "deep"


@dataclass
class ModelConfig:
    task: str
    agg: str = pl.SUM
    readout: str = pl.MAX
    pool: str = pl.MEAN
    hidden_dim: int = 32
    in_dim: int = 1
    activation: str = RELU
    gnp_mode: str = pl.FULL
    gnp_epsilon: float = pl.DEFAULT_EPSILON
    set_depth: str = BASIC

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, obj):
        return cls(**obj)


def apply_activation(tape: Tape, x: Node, kind: str) -> Node:
    if kind == RELU:
        return tape.relu(x)
    if kind == ABS_RELU:
        return tape.relu(tape.abs(x))
    if kind == ABS_LEAKYRELU:
        return tape.leaky_relu(tape.abs(x))
    if kind == ABS_ELU:
        return tape.elu(tape.abs(x))
    raise ShapeError(f"unknown activation {kind!r}")


def _glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    def __init__(self, rng, d_in, d_out, name):
        self.w = Param(_glorot(rng, d_in, d_out), name=f"{name}.w")
        self.b = Param(np.zeros((1, d_out)), name=f"{name}.b")

    def __call__(self, tape: Tape, x: Node) -> Node:
        return x @ tape.watch(self.w) + tape.watch(self.b)

    def params(self):
        return [self.w, self.b]


class MlpBlock:
    """Two FC layers with ReLU between them."""

    def __init__(self, rng, d_in, d_hidden, d_out, name):
        self.lin1 = Linear(rng, d_in, d_hidden, f"{name}.lin1")
        self.lin2 = Linear(rng, d_hidden, d_out, f"{name}.lin2")

    def __call__(self, tape: Tape, x: Node) -> Node:
        return self.lin2(tape, tape.relu(self.lin1(tape, x)))

    def params(self):
        return self.lin1.params() + self.lin2.params()


def make_pool(kind, dim, cfg: ModelConfig, rng, name):
    """Baseline kind string, or a fresh learnable-pooling instance.

    1-dimensional instances run in both-halves mode: the column split would
    leave the positive side empty, and tasks need either half there (degree
    sums live in the positive half, min-style relaxation in the negative).
    """
    if kind != pl.GNP:
        return kind
    mode = cfg.gnp_mode
    if dim < 2 and mode == pl.FULL:
        mode = pl.BOTH
    return pl.GnpParams(dim, epsilon=cfg.gnp_epsilon, mode=mode, rng=rng, name=name)


def _pool(tape, pool, x, seg, cfg):
    if isinstance(pool, pl.GnpParams):
        return pl.gnp_apply(tape, pool, apply_activation(tape, x, cfg.activation), seg)
    return pl.pool_segments(tape, pool, x, seg)


# -- batching -----------------------------------------------------------------


class GraphPrep:
    """Per-sample arrays for fast disjoint-union batching."""

    __slots__ = (
        "n", "n_edges", "feats", "src", "dst_starts", "w", "perm", "src_starts",
        "target", "labels", "mask", "target_node",
    )

    def __init__(self, sample: tasks.Sample):
        g = sample.graph
        self.n = g.n
        self.feats = g.node_features
        e = g.edges
        loops = e[:, 0] == e[:, 1]
        plain = e[~loops]
        w = g.edge_weights
        if w is None:
            w = np.zeros(len(e))
        pw = w[~loops]
        src = np.concatenate([plain[:, 0], plain[:, 1], e[loops][:, 0]])
        dst = np.concatenate([plain[:, 1], plain[:, 0], e[loops][:, 1]])
        wd = np.concatenate([pw, pw, w[loops]])
        order = np.argsort(dst, kind="stable")
        self.src = src[order]
        self.w = wd[order].reshape(-1, 1)
        self.dst_starts = np.searchsorted(dst[order], np.arange(g.n + 1))
        self.perm = np.argsort(self.src, kind="stable")
        self.src_starts = np.searchsorted(self.src[self.perm], np.arange(g.n + 1))
        self.n_edges = len(self.src)
        self.target = sample.target
        self.labels = sample.labels
        self.mask = sample.mask
        self.target_node = sample.target_node


@dataclass
class Batch:
    feats: np.ndarray
    src: np.ndarray
    w: np.ndarray
    agg_seg: pl.Segments
    scatter: tuple
    graph_seg: pl.Segments
    sizes: np.ndarray
    targets: np.ndarray | None = None
    labels: np.ndarray | None = None
    mask: np.ndarray | None = None
    has_weights: bool = False


def make_batch(preps: list[GraphPrep]) -> Batch:
    node_off = 0
    edge_off = 0
    feats, src, w, perm = [], [], [], []
    dst_starts = [np.zeros(1, dtype=np.intp)]
    src_starts = [np.zeros(1, dtype=np.intp)]
    graph_starts = [0]
    for p in preps:
        feats.append(p.feats)
        src.append(p.src + node_off)
        w.append(p.w)
        perm.append(p.perm + edge_off)
        dst_starts.append(p.dst_starts[1:] + edge_off)
        src_starts.append(p.src_starts[1:] + edge_off)
        node_off += p.n
        edge_off += p.n_edges
        graph_starts.append(node_off)
    wcat = np.concatenate(w)
    batch = Batch(
        feats=np.concatenate(feats),
        src=np.concatenate(src),
        w=wcat,
        agg_seg=pl.Segments(np.concatenate(dst_starts)),
        scatter=(np.concatenate(perm), np.concatenate(src_starts)),
        graph_seg=pl.Segments(np.array(graph_starts)),
        sizes=np.array([p.n for p in preps], dtype=np.float64).reshape(-1, 1),
        has_weights=bool(np.any(wcat != 0.0)),
    )
    if preps[0].target is not None:
        batch.targets = np.array([p.target for p in preps]).reshape(-1, 1)
    if preps[0].labels is not None:
        batch.labels = np.concatenate([p.labels for p in preps]).reshape(-1, 1)
        batch.mask = np.concatenate([p.mask for p in preps]).astype(np.float64).reshape(-1, 1)
    return batch


class SetPrep:
    __slots__ = ("x", "n", "target")

    def __init__(self, sample: tasks.Sample):
        self.x = sample.elements.reshape(-1, 1)
        self.n = len(sample.elements)
        self.target = sample.target


@dataclass
class SetBatch:
    x: np.ndarray
    seg: pl.Segments
    counts: np.ndarray
    targets: np.ndarray
    sum_x: np.ndarray
    sum_sq: np.ndarray
    sum_sq_dev: np.ndarray  # sum (x - mu_known)^2 per set


def make_set_batch(preps: list[SetPrep], mu_known: float) -> SetBatch:
    starts = np.cumsum([0] + [p.n for p in preps])
    x = np.concatenate([p.x for p in preps])
    return SetBatch(
        x=x,
        seg=pl.Segments(starts),
        counts=np.array([p.n for p in preps], dtype=np.float64).reshape(-1, 1),
        targets=np.array([p.target for p in preps]).reshape(-1, 1),
        sum_x=np.array([p.x.sum() for p in preps]).reshape(-1, 1),
        sum_sq=np.array([(p.x**2).sum() for p in preps]).reshape(-1, 1),
        sum_sq_dev=np.array([((p.x - mu_known) ** 2).sum() for p in preps]).reshape(-1, 1),
    )


# -- model families -----------------------------------------------------------


class GraphModel:
    """One GIN layer (additive self term), activation, readout, linear head."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        h = cfg.hidden_dim
        self.agg = make_pool(cfg.agg, cfg.in_dim, cfg, rng, "agg")
        self.mlp = MlpBlock(rng, cfg.in_dim, h, h, "gin")
        self.readout = make_pool(cfg.readout, h, cfg, rng, "readout")
        self.head = Linear(rng, h, 1, "head")

    def forward(self, tape: Tape, batch: Batch, feats_node: Node | None = None) -> Node:
        h0 = tape.constant(batch.feats) if feats_node is None else feats_node
        src_in = h0
        if isinstance(self.agg, pl.GnpParams):
            src_in = apply_activation(tape, h0, self.cfg.activation)
        gathered = tape.gather_rows(src_in, batch.src, scatter=batch.scatter)
        if isinstance(self.agg, pl.GnpParams):
            pooled = pl.gnp_apply(tape, self.agg, gathered, batch.agg_seg)
        else:
            pooled = pl.pool_segments(tape, self.agg, gathered, batch.agg_seg)
        h1 = self.mlp(tape, h0 + pooled)
        r = apply_activation(tape, h1, self.cfg.activation)
        if isinstance(self.readout, pl.GnpParams):
            out = pl.gnp_apply(tape, self.readout, r, batch.graph_seg)
        else:
            out = pl.pool_segments(tape, self.readout, r, batch.graph_seg)
        return self.head(tape, out)

    def params(self):
        out = []
        if isinstance(self.agg, pl.GnpParams):
            out += self.agg.params()
        out += self.mlp.params()
        if isinstance(self.readout, pl.GnpParams):
            out += self.readout.params()
        return out + self.head.params()

    def gnp_instances(self):
        out = []
        if isinstance(self.agg, pl.GnpParams):
            out.append(("agg", self.agg))
        if isinstance(self.readout, pl.GnpParams):
            out.append(("readout", self.readout))
        return out


class NodeModel:
    """Three self-in-pool GIN layers, per-node linear head, no readout."""

    N_LAYERS = 3

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        h = cfg.hidden_dim
        self.aggs = []
        self.mlps = []
        for i in range(self.N_LAYERS):
            d_in = cfg.in_dim if i == 0 else h
            self.aggs.append(make_pool(cfg.agg, d_in, cfg, rng, f"agg{i + 1}"))
            self.mlps.append(MlpBlock(rng, d_in, h, h, f"gin{i + 1}"))
        self.head = Linear(rng, h, 1, "head")

    def forward(self, tape: Tape, batch: Batch, feats_node: Node | None = None) -> Node:
        h = tape.constant(batch.feats) if feats_node is None else feats_node
        w = tape.constant(batch.w) if batch.has_weights else None
        for agg, mlp in zip(self.aggs, self.mlps):
            g = tape.gather_rows(h, batch.src, scatter=batch.scatter)
            if w is not None:
                g = g + w
            if isinstance(agg, pl.GnpParams):
                g = apply_activation(tape, g, self.cfg.activation)
                pooled = pl.gnp_apply(tape, agg, g, batch.agg_seg)
            else:
                pooled = pl.pool_segments(tape, agg, g, batch.agg_seg)
            h = mlp(tape, pooled)
        return self.head(tape, h)

    def params(self):
        out = []
        for agg, mlp in zip(self.aggs, self.mlps):
            if isinstance(agg, pl.GnpParams):
                out += agg.params()
            out += mlp.params()
        return out + self.head.params()

    def gnp_instances(self):
        return [
            (f"agg{i + 1}", a) for i, a in enumerate(self.aggs) if isinstance(a, pl.GnpParams)
        ]


class SetModel:
    """FC, activation, pooling, FC head; deep variant adds one FC before pooling."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        h = cfg.hidden_dim
        self.fc1 = Linear(rng, cfg.in_dim, h, "fc1")
        self.fc_deep = Linear(rng, h, h, "fc_deep") if cfg.set_depth == DEEP else None
        self.pool = make_pool(cfg.pool, h, cfg, rng, "pool")
        self.fc2 = Linear(rng, h, 1, "fc2")

    def forward(self, tape: Tape, batch: SetBatch, feats_node: Node | None = None) -> Node:
        x = tape.constant(batch.x) if feats_node is None else feats_node
        h = apply_activation(tape, self.fc1(tape, x), self.cfg.activation)
        if self.fc_deep is not None:
            h = apply_activation(tape, self.fc_deep(tape, h), self.cfg.activation)
        if isinstance(self.pool, pl.GnpParams):
            pooled = pl.gnp_apply(tape, self.pool, h, batch.seg)
        else:
            pooled = pl.pool_segments(tape, self.pool, h, batch.seg)
        out = self.fc2(tape, pooled)
        if self.cfg.task == tasks.SIGMA2_MAP:
            out = tape.softplus(out)  # the MAP loss needs a positive variance
        return out

    def params(self):
        out = self.fc1.params()
        if self.fc_deep is not None:
            out += self.fc_deep.params()
        if isinstance(self.pool, pl.GnpParams):
            out += self.pool.params()
        return out + self.fc2.params()

    def gnp_instances(self):
        return [("pool", self.pool)] if isinstance(self.pool, pl.GnpParams) else []


def build_model(cfg: ModelConfig, seed: int = 0):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D6F64]))
    kind = tasks.task_kind(cfg.task)
    if kind == tasks.GRAPH:
        return GraphModel(cfg, rng)
    if kind == tasks.NODE:
        return NodeModel(cfg, rng)
    return SetModel(cfg, rng)


def prepare(dataset: tasks.Dataset):
    """Turn a dataset into batch-ready per-sample structures."""
    if tasks.task_kind(dataset.task) == tasks.SET:
        return [SetPrep(s) for s in dataset.samples]
    return [GraphPrep(s) for s in dataset.samples]


# -- single-sample wrappers (tests / inspection) --------------------------------


def gin_layer_forward(tape, agg, mlp, sample: tasks.Sample, h: Node, cfg: ModelConfig,
                      self_in_pool: bool) -> Node:
    """One GIN layer on a single graph, for direct inspection."""
    prep = GraphPrep(sample)
    batch = make_batch([prep])
    g = tape.gather_rows(h, batch.src, scatter=batch.scatter)
    if self_in_pool:
        if batch.has_weights:
            g = g + tape.constant(batch.w)
        if isinstance(agg, pl.GnpParams):
            g = apply_activation(tape, g, cfg.activation)
            pooled = pl.gnp_apply(tape, agg, g, batch.agg_seg)
        else:
            pooled = pl.pool_segments(tape, agg, g, batch.agg_seg)
        return mlp(tape, pooled)
    if isinstance(agg, pl.GnpParams):
        g = apply_activation(tape, g, cfg.activation)
        pooled = pl.gnp_apply(tape, agg, g, batch.agg_seg)
    else:
        pooled = pl.pool_segments(tape, agg, g, batch.agg_seg)
    return mlp(tape, h + pooled)


def graph_model_forward(model: GraphModel, sample: tasks.Sample):
    tape = Tape()
    pred = model.forward(tape, make_batch([GraphPrep(sample)]))
    return tape, pred


def node_model_forward(model: NodeModel, sample: tasks.Sample):
    tape = Tape()
    pred = model.forward(tape, make_batch([GraphPrep(sample)]))
    return tape, pred


def set_model_forward(model: SetModel, sample: tasks.Sample):
    tape = Tape()
    pred = model.forward(tape, make_set_batch([SetPrep(sample)], tasks.DEFAULT_SET_PARAMS.mu_known))
    return tape, pred


# -- checkpoints ----------------------------------------------------------------


def checkpoint_to_obj(model) -> dict:
    params = {}
    for p in model.params():
        params[p.name] = {"shape": list(p.value.shape), "data": [float(x) for x in p.value.ravel()]}
    return {"config": model.cfg.to_dict(), "params": params}


def save_checkpoint(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_to_obj(model), fh, sort_keys=True)
        fh.write("\n")


def model_from_checkpoint_obj(obj: dict):
    cfg = ModelConfig.from_dict(obj["config"])
    model = build_model(cfg, seed=0)
    stored = obj["params"]
    mine = {p.name: p for p in model.params()}
    if set(stored) != set(mine):
        raise ValueError(
            f"checkpoint parameter names do not match model: {sorted(set(stored) ^ set(mine))}"
        )
    for name, entry in stored.items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        mine[name].value[...] = arr
    return model


def load_checkpoint(path):
    with open(path) as fh:
        return model_from_checkpoint_obj(json.load(fh))
