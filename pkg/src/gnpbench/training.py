"""Optimizers, losses, training loop, metrics, and grid sweeps.

Exponent preimages (the p-reparameterization parameters) live in their own
parameter group and receive a separate, typically larger, learning rate.
Checkpoint selection is always the epoch minimizing validation loss; test
metrics are computed from that checkpoint, never the final epoch.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from . import models as mdl
from . import tasks
from .autodiff import P_EXPONENTS, Param, Tape

RMSPROP = "rmsprop"
ADAM = "adam"

_SP = tasks.DEFAULT_SET_PARAMS


class TrainingDiverged(RuntimeError):
    """Loss or a gradient went non-finite; names the epoch and batch."""


@dataclass
class TrainConfig:
    task: str
    model: mdl.ModelConfig
    optimizer: str = RMSPROP
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 1e-2
    lr_p: float = 3e-2
    clip_norm: float = 1e4
    epochs: int = 50
    batch_size: int = 64
    eval_batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.lr_p <= 0 or self.clip_norm <= 0:
            raise ValueError("lr, lr_p, clip_norm must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self):
        d = self.__dict__.copy()
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        obj["model"] = mdl.ModelConfig.from_dict(obj["model"])
        return cls(**obj)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha1(payload.encode()).hexdigest()[:8]


@dataclass
class RunResult:
    config: dict
    best_epoch: int
    val_loss_curve: list
    test_metrics: dict
    pq_trajectory: dict
    checkpoint: dict

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str):
        return cls(**json.loads(text))


# -- optimizers -----------------------------------------------------------------


def _group_lr(param: Param, lr, lr_p):
    return lr_p if param.group == P_EXPONENTS else lr


def rmsprop_init(params):
    return {p.name: np.zeros_like(p.value) for p in params}


def step_rmsprop(params, grads, state, lr, lr_p, decay=0.99, eps=1e-8):
    """state <- decay*state + (1-decay)*g^2; p <- p - lr_g * g/(sqrt(state)+eps)."""
    for p, g in zip(params, grads):
        s = state[p.name]
        s *= decay
        s += (1.0 - decay) * g * g
        p.value -= _group_lr(p, lr, lr_p) * g / (np.sqrt(s) + eps)


def adam_init(params):
    return {
        "t": 0,
        "m": {p.name: np.zeros_like(p.value) for p in params},
        "v": {p.name: np.zeros_like(p.value) for p in params},
    }


def step_adam(params, grads, state, lr, lr_p, betas=(0.9, 0.999), eps=1e-8):
    """Standard bias-corrected Adam with per-group learning rates."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g in zip(params, grads):
        m = state["m"][p.name]
        v = state["v"][p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= _group_lr(p, lr, lr_p) * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads, max_norm) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if not np.isfinite(norm):
        raise TrainingDiverged("non-finite gradient norm")
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= scale
    return scale


# -- losses -----------------------------------------------------------------------


def loss_node(tape: Tape, task: str, pred, batch) -> "Node":
    """Scalar training loss for one batch, as a tape node."""
    kind = tasks.task_kind(task)
    if kind == tasks.NODE:
        d = (pred - tape.constant(batch.labels)) * tape.constant(batch.mask)
        return tape.sum_rows(tape.sum_cols(d * d)) / tape.constant(batch.mask.sum())
    if kind == tasks.GRAPH or task in (tasks.MU_POST, tasks.SIGMA2_POST):
        d = pred - tape.constant(batch.targets)
        return tape.mean_rows(d * d)
    if task == tasks.MU_MAP:
        # sum_i (x_i - mu)^2 / (2 s^2) + (mu - mu0)^2 / (2 s0^2), constants dropped
        a = tape.constant(batch.sum_sq)
        b = tape.constant(batch.sum_x)
        n = tape.constant(batch.counts)
        sq = a - pred * b * tape.constant(2.0) + n * pred * pred
        per = sq * tape.constant(0.5 / _SP.sigma_sq) + (
            pred * pred * tape.constant(0.5 / _SP.sigma0_sq)
        )
        return tape.mean_rows(per)
    if task == tasks.SIGMA2_MAP:
        coef = batch.counts / 2.0 + _SP.alpha + 1.0
        num = batch.sum_sq_dev / 2.0 + _SP.beta
        per = tape.constant(coef) * tape.log(pred) + tape.constant(num) / pred
        return tape.mean_rows(per)
    raise ValueError(f"no loss for task {task!r}")


def _loss_terms_numpy(task, pred, batch):
    """(sum of per-item losses, item count) for streaming validation loss."""
    kind = tasks.task_kind(task)
    if kind == tasks.NODE:
        d = (pred - batch.labels) * batch.mask
        return float(np.sum(d * d)), float(batch.mask.sum())
    if kind == tasks.GRAPH or task in (tasks.MU_POST, tasks.SIGMA2_POST):
        d = pred - batch.targets
        return float(np.sum(d * d)), float(len(pred))
    if task == tasks.MU_MAP:
        sq = batch.sum_sq - 2.0 * pred * batch.sum_x + batch.counts * pred * pred
        per = sq * (0.5 / _SP.sigma_sq) + pred * pred * (0.5 / _SP.sigma0_sq)
        return float(np.sum(per)), float(len(pred))
    if task == tasks.SIGMA2_MAP:
        coef = batch.counts / 2.0 + _SP.alpha + 1.0
        num = batch.sum_sq_dev / 2.0 + _SP.beta
        per = coef * np.log(pred) + num / pred
        return float(np.sum(per)), float(len(pred))
    raise ValueError(task)


def _make_batch(task, preps):
    if tasks.task_kind(task) == tasks.SET:
        return mdl.make_set_batch(preps, _SP.mu_known)
    return mdl.make_batch(preps)


def _forward_numpy(model, task, preps, batch_size):
    """Forward-only predictions plus their batches, in fixed order."""
    out = []
    for i in range(0, len(preps), batch_size):
        batch = _make_batch(task, preps[i : i + batch_size])
        tape = Tape()
        out.append((model.forward(tape, batch).value, batch))
    return out


def dataset_loss(model, task, preps, batch_size) -> float:
    num = 0.0
    den = 0.0
    for pred, batch in _forward_numpy(model, task, preps, batch_size):
        a, b = _loss_terms_numpy(task, pred, batch)
        num += a
        den += b
    return num / den


def evaluate(model, task, preps, batch_size=16) -> dict:
    """Test metrics: MAPE for graph/set tasks, MAE over masked nodes for node tasks."""
    kind = tasks.task_kind(task)
    if kind == tasks.NODE:
        err_sum = 0.0
        cnt = 0.0
        for pred, batch in _forward_numpy(model, task, preps, batch_size):
            err_sum += float(np.sum(np.abs(pred - batch.labels) * batch.mask))
            cnt += float(batch.mask.sum())
        return {"mae": err_sum / cnt}
    ape_sum = 0.0
    ae_sum = 0.0
    cnt = 0
    for pred, batch in _forward_numpy(model, task, preps, batch_size):
        y = batch.targets
        if np.any(y == 0.0):
            raise ValueError("zero target in a MAPE task")
        ape_sum += float(np.sum(np.abs(pred - y) / np.abs(y)))
        ae_sum += float(np.sum(np.abs(pred - y)))
        cnt += len(y)
    return {"mape": 100.0 * ape_sum / cnt, "mae": ae_sum / cnt}


# -- the training loop --------------------------------------------------------------


def train(cfg: TrainConfig, train_ds, val_ds, test_ds) -> RunResult:
    """Mini-batch training with best-validation checkpointing.

    Datasets may be tasks.Dataset objects or pre-prepared lists from
    models.prepare. Deterministic for a fixed config (seed included).
    """
    task = cfg.task
    tr = train_ds if isinstance(train_ds, list) else mdl.prepare(train_ds)
    va = val_ds if isinstance(val_ds, list) else mdl.prepare(val_ds)
    te = test_ds if isinstance(test_ds, list) else mdl.prepare(test_ds)

    model = mdl.build_model(cfg.model, seed=cfg.seed)
    params = model.params()
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x7472]))
    if cfg.optimizer == RMSPROP:
        state = rmsprop_init(params)
        step = lambda ps, gs: step_rmsprop(ps, gs, state, cfg.lr, cfg.lr_p)
    elif cfg.optimizer == ADAM:
        state = adam_init(params)
        step = lambda ps, gs: step_adam(
            ps, gs, state, cfg.lr, cfg.lr_p, betas=(cfg.beta1, cfg.beta2)
        )
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")

    val_curve = []
    trajectory = {name: [] for name, _ in model.gnp_instances()}
    best_epoch = -1
    best_val = np.inf
    best_params = None

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(tr))
        for bi in range(0, len(tr), cfg.batch_size):
            batch = _make_batch(task, [tr[j] for j in order[bi : bi + cfg.batch_size]])
            tape = Tape()
            pred = model.forward(tape, batch)
            loss = loss_node(tape, task, pred, batch)
            if not np.isfinite(loss.value[0, 0]):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {bi // cfg.batch_size}"
                )
            tape.backward(loss)
            grads = [tape.grad(p).copy() for p in params]
            clip_grad_norm(grads, cfg.clip_norm)
            step(params, grads)
            for p in params:
                if not np.all(np.isfinite(p.value)):
                    raise TrainingDiverged(
                        f"non-finite parameter {p.name} at epoch {epoch}, "
                        f"batch {bi // cfg.batch_size}"
                    )
        val = dataset_loss(model, task, va, cfg.eval_batch_size)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        val_curve.append(val)
        for name, gp in model.gnp_instances():
            trajectory[name].append(gp.exponent_values())
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = {p.name: p.value.copy() for p in params}

    for p in params:
        p.value[...] = best_params[p.name]
    metrics = evaluate(model, task, te, cfg.eval_batch_size)

    return RunResult(
        config=cfg.to_dict(),
        best_epoch=best_epoch,
        val_loss_curve=val_curve,
        test_metrics=metrics,
        pq_trajectory=trajectory,
        checkpoint=mdl.checkpoint_to_obj(model),
    )


# -- hyperparameter sweeps ------------------------------------------------------------


@dataclass
class SweepResult:
    best: TrainConfig
    results: list = field(default_factory=list)  # (config dict, RunResult)


def sweep_grid(base: TrainConfig, grid: dict) -> list[TrainConfig]:
    """Expand {field: [values]} into concrete configs (sorted key order)."""
    keys = sorted(grid)
    combos = itertools.product(*(grid[k] for k in keys))
    out = []
    for combo in combos:
        cfg = TrainConfig.from_dict(base.to_dict())
        for k, v in zip(keys, combo):
            if not hasattr(cfg, k):
                raise ValueError(f"unknown sweep field {k!r}")
            setattr(cfg, k, v)
        out.append(cfg)
    return out


def sweep(base: TrainConfig, grid: dict, train_ds, val_ds, test_ds) -> SweepResult:
    """Train every grid point; select by best validation loss."""
    configs = sweep_grid(base, grid)
    if not configs:
        raise ValueError("empty sweep grid")
    results = []
    for cfg in configs:
        res = train(cfg, train_ds, val_ds, test_ds)
        results.append((cfg, res))
    best_cfg, _ = min(results, key=lambda cr: min(cr[1].val_loss_curve))
    return SweepResult(best=best_cfg, results=results)
