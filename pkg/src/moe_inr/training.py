"""Losses, manager pretraining targets, and the pretrain / train-all / experts-only loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.cluster.vq import kmeans2

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .model import FixedRouter, MoeModel

log = logging.getLogger(__name__)

PRETRAIN_KINDS = ("none", "random", "grid", "kmeans", "fixed-subdivision", "fixed-random")


class TrainingDiverged(ad.NonFiniteError):
    pass


# -- losses ------------------------------------------------------------------

def _onehot(labels: np.ndarray, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError("label out of range")
    return np.eye(n, dtype=ad.get_default_dtype())[labels]


def segmentation_loss(q: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over samples of -log q[label] (log floored at 1e-12)."""
    onehot = _onehot(labels, q.shape[-1])
    return (ad.log(q) * onehot).sum(axis=-1).mean() * -1.0


def _weighted(q: Tensor, per_expert: Tensor) -> Tensor:
    n = q.shape[-1]
    return (q * per_expert).sum(axis=-1).mean() * (1.0 / n)


def moe_recon_loss(q: Tensor, outputs: Tensor, y_gt) -> Tensor:
    """(1/N) sum_i q_i * mean_c (out_ic - y_c)^2, averaged over the batch."""
    y = np.asarray(y_gt.value if isinstance(y_gt, Tensor) else y_gt)
    if outputs.ndim != 3 or q.shape != outputs.shape[:2] or y.shape != (outputs.shape[0], outputs.shape[2]):
        raise ad.ShapeError(f"shapes q{q.shape} outputs{outputs.shape} y{y.shape} do not align")
    per = ad.square(outputs - y[:, None, :]).mean(axis=-1)
    return _weighted(q, per)


def sdf_recon_loss(q: Tensor, outputs: Tensor, y_gt) -> Tensor:
    """L1 version of the MoE loss with all points weighted equally."""
    y = np.asarray(y_gt.value if isinstance(y_gt, Tensor) else y_gt)
    if y.ndim == 1:
        y = y[:, None]
    if outputs.ndim != 3 or q.shape != outputs.shape[:2] or y.shape != (outputs.shape[0], outputs.shape[2]):
        raise ad.ShapeError(f"shapes q{q.shape} outputs{outputs.shape} y{y.shape} do not align")
    per = ad.absolute(outputs - y[:, None, :]).mean(axis=-1)
    return _weighted(q, per)


# -- pretraining targets -----------------------------------------------------

@dataclass
class LabelGrid:
    """Piecewise-constant label field on an axis-aligned box split into cells."""

    lo: np.ndarray
    hi: np.ndarray
    labels: np.ndarray  # shape = cells per axis

    def lookup(self, x: np.ndarray) -> np.ndarray:
        shape = np.array(self.labels.shape)
        idx = np.floor((np.asarray(x) - self.lo) / (self.hi - self.lo) * shape).astype(np.int64)
        idx = np.clip(idx, 0, shape - 1)
        return self.labels[tuple(idx.T)]


@dataclass
class PretrainTarget:
    kind: str
    labels: np.ndarray                 # one label per coordinate in ``coords``
    coords: np.ndarray
    n_experts: int
    grid: LabelGrid | None = None
    domain: tuple[float, float] | None = None  # sample fresh points here when set

    def batch(self, rng: np.random.Generator, size: int | None):
        if self.domain is not None and self.grid is not None and size:
            x = rng.uniform(self.domain[0], self.domain[1], size=(size, self.coords.shape[1]))
            return x, self.grid.lookup(x)
        if size is None or size >= len(self.coords):
            return self.coords, self.labels
        idx = rng.choice(len(self.coords), size=size, replace=False)
        return self.coords[idx], self.labels[idx]

    def shares(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_experts) / len(self.labels)


def split_factors(n: int, dims: int) -> list[int]:
    """Split ``n`` into ``dims`` per-axis block counts, as balanced as possible."""
    primes, k, p = [], n, 2
    while k > 1:
        while k % p == 0:
            primes.append(p)
            k //= p
        p += 1
    counts = [1] * dims
    for f in sorted(primes, reverse=True):
        counts[int(np.argmin(counts))] *= f
    return counts


def _lattice_bounds(coords: np.ndarray):
    """Half-cell padded bounds and per-axis sizes if coords lie on a lattice."""
    lo, hi, shape = [], [], []
    for a in range(coords.shape[1]):
        u = np.unique(coords[:, a])
        step = (u[-1] - u[0]) / (len(u) - 1) if len(u) > 1 else 1.0
        lo.append(u[0] - step / 2)
        hi.append(u[-1] + step / 2)
        shape.append(len(u))
    return np.array(lo), np.array(hi), tuple(shape)


def _kmeans(features: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    # standardise so coordinates and signal values weigh alike
    scale = features.std(axis=0)
    feats = features / np.where(scale > 0, scale, 1.0)
    _, labels = kmeans2(feats, k, iter=iters, minit="++", seed=rng)
    return labels.astype(np.int64)


def make_pretrain_target(kind: str, coords: np.ndarray, n_experts: int, seed: int = 0,
                         values: np.ndarray | None = None, cells: int | None = None,
                         domain: tuple[float, float] | None = None, kmeans_iters: int = 50) -> PretrainTarget:
    """Expert-assignment map over ``coords``.

    ``random`` draws one uniform label per lattice cell: per coordinate for
    lattice inputs (pixels, samples) or per cell of a ``cells``^d grid over
    ``domain`` (3D uses 64). ``grid`` splits the bounding box into
    ``n_experts`` equal blocks. ``kmeans`` clusters coords joined with values.
    """
    if kind not in PRETRAIN_KINDS:
        raise ValueError(f"unknown pretraining kind {kind!r}")
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or len(coords) == 0:
        raise ValueError("coords must be a nonempty (n, d) array")
    rng = np.random.default_rng(seed)
    dims = coords.shape[1]
    if domain is not None:
        lo, hi = np.full(dims, domain[0], float), np.full(dims, domain[1], float)
    else:
        lo, hi, lattice = _lattice_bounds(coords)

    if kind == "none":
        return PretrainTarget(kind, np.zeros(len(coords), dtype=np.int64), coords, n_experts)
    if kind == "kmeans":
        if values is None or len(values) == 0:
            raise ValueError("kmeans pretraining needs the signal values")
        feats = np.concatenate([coords, np.asarray(values, float).reshape(len(coords), -1)], axis=1)
        return PretrainTarget(kind, _kmeans(feats, n_experts, kmeans_iters, rng), coords, n_experts)
    if kind in ("grid", "fixed-subdivision"):
        shape = tuple(split_factors(n_experts, dims))
        grid = LabelGrid(lo, hi, np.arange(n_experts).reshape(shape))
    else:  # random, fixed-random
        shape = (cells,) * dims if cells is not None else (lattice if domain is None else (64,) * dims)
        grid = LabelGrid(lo, hi, rng.integers(0, n_experts, size=shape))
    return PretrainTarget(kind, grid.lookup(coords), coords, n_experts, grid, domain)


# -- schedule and loop -------------------------------------------------------

@dataclass
class TrainSchedule:
    total_iters: int = 5000
    pretrain_iters: int = 1000
    t_all: float = 0.8
    t_e: float = 0.2
    batch_size: int | None = None      # None: every coordinate each step
    lr: float = 1e-5
    lr_decay: float = 0.99995
    pretrain_lr: float | None = None   # None: same as lr
    pretrain_batch: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    log_every: int = 100
    snapshot_every: int = 0            # 0: only at the end

    def __post_init__(self):
        if abs(self.t_all + self.t_e - 1.0) > 1e-12:
            raise ValueError("t_all + t_e must equal 1")
        if not 0.0 <= self.t_all <= 1.0:
            raise ValueError("t_all must be in [0, 1]")
        if self.total_iters < 0 or self.pretrain_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        self.betas = tuple(self.betas)

    @property
    def phase_boundary(self) -> int:
        return int(np.floor(self.t_all * self.total_iters + 1e-9))


class Dataset(Protocol):
    """Anything that hands out (coords, targets) per iteration."""

    loss: str  # "mse" or "l1"

    def batch(self, rng: np.random.Generator, size: int | None, iteration: int): ...


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    pretrain_curve: list[float] = field(default_factory=list)
    assignments: dict[int, np.ndarray] = field(default_factory=dict)
    iter_time_ms: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["loss"] if self.rows else float("nan")


def pretrain_manager(model: MoeModel, target: PretrainTarget, schedule: TrainSchedule) -> list[float]:
    """Fit the manager (and the expert encoder feeding it) to ``target`` by cross-entropy.

    Expert parameters are not touched. Returns the per-iteration CE curve.
    """
    if target.kind == "none" or schedule.pretrain_iters == 0 or getattr(model, "router", None) is not None:
        return []
    params = model.manager_params() + model.expert_encoder_params()
    lr = schedule.pretrain_lr if schedule.pretrain_lr is not None else schedule.lr
    opt = Adam(params, lr=lr, decay=schedule.lr_decay, betas=schedule.betas)
    rng = np.random.default_rng(schedule.seed + 7919)
    curve = []
    for it in range(schedule.pretrain_iters):
        x, labels = target.batch(rng, schedule.pretrain_batch)
        q = model.manager_probs(Tensor(x))
        loss = segmentation_loss(q, labels)
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(f"pretraining CE not finite at iteration {it}")
        curve.append(loss.item())
        opt.step(ad.backward(loss, params))
    return curve


def attach_fixed_router(model: MoeModel, target: PretrainTarget) -> MoeModel:
    """Replace the learned manager by the constant map in ``target``."""
    if target.grid is None:
        raise ValueError("fixed routing needs a grid-backed target")
    model.router = FixedRouter(target.grid.lookup, model.config.n_experts)
    return model


def train(model, dataset, schedule: TrainSchedule, aux_target: PretrainTarget | None = None,
          evaluate: Callable[[object], dict] | None = None,
          on_log: Callable[[dict], None] | None = None) -> TrainLog:
    """Two-phase reconstruction training.

    Iterations before ``schedule.phase_boundary`` update every parameter;
    the rest update only the experts. ``evaluate(model)`` is called at each
    log step and its dict merged into the row.
    """
    params = model.parameters()
    opt = Adam(params, lr=schedule.lr, decay=schedule.lr_decay, betas=schedule.betas)
    experts = model.expert_params()
    rng = np.random.default_rng(schedule.seed + 104729)
    boundary = schedule.phase_boundary
    loss_fn = sdf_recon_loss if getattr(dataset, "loss", "mse") == "l1" else moe_recon_loss
    out = TrainLog()
    n = getattr(model, "config", None)
    n_experts = n.n_experts if n is not None else 1
    t0 = time.perf_counter()
    eval_time = 0.0
    for it in range(schedule.total_iters):
        phase = "all" if it < boundary else "experts"
        x, y, idx = dataset.batch(rng, schedule.batch_size, it)
        xt = Tensor(x)
        q, outs = model.forward(xt, train_shared=phase == "all")
        loss = loss_fn(q, outs, y)
        if aux_target is not None and phase == "all" and q.requires_grad:
            labels = aux_target.labels if idx is None else aux_target.labels[idx]
            loss = loss + segmentation_loss(q, labels)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at iteration {it} ({phase} phase, lr={opt.lr:.3g})")
        lr_now = opt.lr
        grads = ad.backward(loss)
        opt.step(grads, only=None if phase == "all" else experts)

        last = it == schedule.total_iters - 1
        te = time.perf_counter()
        if (schedule.log_every and it % schedule.log_every == 0) or last:
            shares = np.bincount(np.argmax(q.value, axis=-1), minlength=n_experts) / q.shape[0]
            row = {"iter": it, "phase": phase, "loss": value, "lr": lr_now}
            if evaluate is not None:
                row.update(evaluate(model))
            row.update({f"share_{k}": float(s) for k, s in enumerate(shares)})
            out.rows.append(row)
            if on_log is not None:
                on_log(row)
            log.debug("iter %d %s loss %.6g", it, phase, value)
        if schedule.snapshot_every and it % schedule.snapshot_every == 0 and hasattr(dataset, "coords"):
            out.assignments[it] = model.route_and_reconstruct(dataset.coords)[1]
        eval_time += time.perf_counter() - te
    if schedule.total_iters:
        # optimisation time only; logging and evaluation are excluded
        out.iter_time_ms = 1000.0 * (time.perf_counter() - t0 - eval_time) / schedule.total_iters
    if hasattr(dataset, "coords"):
        out.assignments[schedule.total_iters] = model.route_and_reconstruct(dataset.coords)[1]
    return out
