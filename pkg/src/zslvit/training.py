"""Minibatch training loop: Adam, gradient clipping, logging, resume."""

import json
import logging
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .backbone import BackboneConfig, load_params, save_params
from .errors import ConfigError, ContractError, FormatError, NumericalError
from .evaluation import evaluate
from .losses import (
    LossWeights,
    aggregate_set_loss_batch,
    l1_rows,
    prediction_loss_batch,
    total_loss,
)
from .model import ModelConfig, ZslVit

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # optimization
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    grad_clip: float = 5.0
    cosine_decay: bool = False
    # objective
    gamma: float = 0.9
    kappa: float = 0.9
    lambda_sr: float = 0.1
    lambda_vr: float = 1.0
    l1_sum: bool = False  # raw-sum reduction instead of mean
    normalize_prototypes: bool = False
    # architecture (image geometry and attr_dim come from the dataset)
    patch_size: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    mlp_ratio: float = 2.0
    num_layers: int = 6
    set_layers: tuple = (2, 4)
    bridge_hidden: int = 0
    learned_kv: bool = False
    weighted_keep: bool = False
    set_scale_per_head: bool = False
    # bookkeeping
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints
    eval_every: int = 1
    eval_tau: float = 0.4

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ConfigError(f"{name} must lie in (0,1), got {b}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0,1], got {self.gamma}")
        if not 0.0 < self.kappa <= 1.0:
            raise ConfigError(f"kappa must lie in (0,1], got {self.kappa}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.lambda_sr < 0 or self.lambda_vr < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    def model_config(self, dataset):
        backbone = BackboneConfig(
            image_size=dataset.image_size,
            patch_size=self.patch_size,
            channels=dataset.channels,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            num_layers=self.num_layers,
            set_layers=self.set_layers,
        )
        return ModelConfig(
            backbone=backbone,
            attr_dim=dataset.attr_dim,
            gamma=self.gamma,
            kappa=self.kappa,
            bridge_hidden=self.bridge_hidden,
            learned_kv=self.learned_kv,
            weighted_keep=self.weighted_keep,
            set_scale_per_head=self.set_scale_per_head,
            normalize_prototypes=self.normalize_prototypes,
        )


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class TrainState:
    adam: AdamState
    epoch: int = 0
    best_h: float = -1.0
    best_epoch: int = -1
    history: list = field(default_factory=list)  # per-epoch row dicts


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        return 0.0
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            flat = p.grad.ravel()
            sq += float(np.dot(flat, flat))
    norm = math.sqrt(sq)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def _pack_adam(params, state):
    """Lay the moment arrays out as views into flat buffers.

    The elementwise update then runs as a handful of full-width passes
    instead of one pass per parameter.  The dict entries stay views of the
    flat storage, so checkpoint save/load keeps seeing ordinary
    per-parameter arrays and resumed runs continue bit-identically.
    """
    names = tuple(sorted(params))
    total = sum(params[n].data.size for n in names)
    pm = np.zeros(total)
    pv = np.zeros(total)
    slices = []
    off = 0
    for n in names:
        shape = params[n].data.shape
        size = params[n].data.size
        sl = slice(off, off + size)
        if n in state.m:
            pm[sl] = state.m[n].ravel()
            pv[sl] = state.v[n].ravel()
        state.m[n] = pm[sl].reshape(shape)
        state.v[n] = pv[sl].reshape(shape)
        slices.append((n, sl))
        off += size
    state._pm = pm
    state._pv = pv
    state._slices = tuple(slices)
    state._gbuf = np.empty(total)
    state._ubuf = np.empty(total)


def _packed_ready(params, state):
    pm = getattr(state, "_pm", None)
    if pm is None or len(state._slices) != len(params):
        return False
    m = state.m
    for n, _ in state._slices:
        arr = m.get(n)
        if arr is None or arr.base is not pm:
            return False
    return True


def adam_step(params, state, cfg, lr=None):
    """Bias-corrected Adam update in sorted parameter order."""
    lr = cfg.learning_rate if lr is None else lr
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    state.step += 1
    t = state.step
    bc1 = 1 - b1**t
    root_bc2 = math.sqrt(1 - b2**t)
    if not _packed_ready(params, state):
        _pack_adam(params, state)
    g = state._gbuf
    for n, sl in state._slices:
        grad = params[n].grad
        if grad is None:
            g[sl] = 0.0
        else:
            g[sl] = grad.ravel()
    # One-pass screen via the sum; only scan per parameter on suspicion.
    if not math.isfinite(float(np.sum(g))):
        for n, sl in state._slices:
            if not np.all(np.isfinite(g[sl])):
                raise NumericalError(f"non-finite gradient in parameter {n!r} at step {t}")
    pm = state._pm
    pv = state._pv
    u = state._ubuf
    pm *= b1
    np.multiply(g, 1 - b1, out=u)
    pm += u
    pv *= b2
    np.multiply(g, g, out=u)
    u *= 1 - b2
    pv += u
    np.sqrt(pv, out=u)
    u /= root_bc2
    u += eps
    np.divide(pm, u, out=u)
    u *= lr / bc1
    for n, sl in state._slices:
        p = params[n]
        p.data -= u[sl].reshape(p.data.shape)
    return state


LOG_COLUMNS = ("epoch", "l_set", "l_pre", "total", "U", "S", "H")


def _format_row(row):
    def fmt(x):
        return "" if x is None else (f"{x:.12g}" if isinstance(x, float) else str(x))

    return "\t".join(fmt(row[c]) for c in LOG_COLUMNS)


def write_train_log(path, history):
    with open(path, "w") as fh:
        fh.write("\t".join(LOG_COLUMNS) + "\n")
        for row in history:
            fh.write(_format_row(row) + "\n")


def read_train_log(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != LOG_COLUMNS:
            raise FormatError(f"{path}: unexpected log header {header}")
        for ln, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(LOG_COLUMNS):
                raise FormatError(f"{path}:{ln}: expected {len(LOG_COLUMNS)} columns")
            row = {"epoch": int(parts[0])}
            for col, txt in zip(LOG_COLUMNS[1:], parts[1:]):
                row[col] = None if txt == "" else float(txt)
            rows.append(row)
    return rows


STATE_FILE = "train_state.json"


def save_train_state(directory, model, state, rng):
    """Full resumable checkpoint: model, moments, counters, RNG state."""
    model.save(directory)
    opt = {}
    for name, arr in state.adam.m.items():
        opt[f"m.{name}"] = arr
    for name, arr in state.adam.v.items():
        opt[f"v.{name}"] = arr
    if opt:
        save_params(os.path.join(directory, "opt"), opt)
    payload = {
        "step": state.adam.step,
        "epoch": state.epoch,
        "best_h": state.best_h,
        "best_epoch": state.best_epoch,
        "rng_state": rng.bit_generator.state,
    }
    with open(os.path.join(directory, STATE_FILE), "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_train_state(directory, model):
    """Restore counters/moments/RNG; model params load separately."""
    path = os.path.join(directory, STATE_FILE)
    if not os.path.exists(path):
        raise FormatError(f"missing training state file {path}")
    with open(path) as fh:
        payload = json.load(fh)
    state = TrainState(adam=AdamState(step=payload["step"]))
    state.epoch = payload["epoch"]
    state.best_h = payload["best_h"]
    state.best_epoch = payload["best_epoch"]
    opt_dir = os.path.join(directory, "opt")
    if os.path.isdir(opt_dir):
        blobs = load_params(opt_dir)
        for name, arr in blobs.items():
            kind, pname = name.split(".", 1)
            target = state.adam.m if kind == "m" else state.adam.v
            target[pname] = arr
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    return state, rng


def train(model, dataset, cfg, out_dir=None, resume_from=None):
    """Train on D_tr^s; returns TrainState with per-epoch history.

    With ``out_dir`` set, writes train_log.tsv plus best/ and final/
    checkpoints (final/ carries optimizer state and is resumable).
    """
    if not dataset.splits["trs"]:
        raise ContractError("training needs a non-empty trs split")
    items = list(dataset.splits["trs"])
    weights = LossWeights(lambda_sr=cfg.lambda_sr, lambda_vr=cfg.lambda_vr)
    reduction = "sum" if cfg.l1_sum else "mean"
    seen_ids = sorted(dataset.seen_ids)
    label_index = {cid: i for i, cid in enumerate(seen_ids)}
    seen_matrix = ad.tensor(dataset.prototype_matrix(seen_ids, normalize=cfg.normalize_prototypes))
    num_set = len(model.cfg.backbone.set_layers)

    if resume_from is not None:
        model.load_state(load_params(resume_from))
        state, rng = load_train_state(resume_from, model)
    else:
        state = TrainState(adam=AdamState())
        rng = np.random.default_rng(cfg.seed)

    total_steps = max(1, cfg.epochs * math.ceil(len(items) / cfg.batch_size))
    params = model.parameters()

    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        order = rng.permutation(len(items))
        epoch_l_set = 0.0
        epoch_l_pre = 0.0
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start : start + cfg.batch_size]]
            b = len(batch)
            model.zero_grad()
            images = np.stack([dataset.image(key) for key, _ in batch])
            zmat = np.stack([dataset.prototype(cid).z for _, cid in batch])
            labels = [label_index[cid] for _, cid in batch]
            z_rows = ad.tensor(zmat)
            res = model.forward_batch(images, z=z_rows, training=True)
            pairs = [
                (
                    l1_rows(z_rows, rec.set_out.z_hat, reduction=reduction),
                    l1_rows(rec.cls_in, rec.set_out.cls_hat, reduction=reduction),
                )
                for rec in res.set_records
            ]
            l_set = aggregate_set_loss_batch(pairs, weights, b, num_set)
            l_pre = ad.scale(
                prediction_loss_batch(res.cls_final, model.w_v2s, seen_matrix, labels), 1.0 / b
            )
            ad.backward(ad.add(l_set, l_pre))
            batch_l_set = float(l_set.data)
            batch_l_pre = float(l_pre.data)
            breakdown = total_loss(batch_l_set, batch_l_pre)
            if not math.isfinite(breakdown.total) or breakdown.total > 1e6:
                raise NumericalError(
                    f"training diverged at epoch {epoch} step {state.adam.step + 1}: "
                    f"l_set={batch_l_set:.3e} l_pre={batch_l_pre:.3e}"
                )
            clip_gradients(params, cfg.grad_clip)
            lr = cfg.learning_rate
            if cfg.cosine_decay:
                lr *= 0.5 * (1.0 + math.cos(math.pi * state.adam.step / total_steps))
            adam_step(params, state.adam, cfg, lr=lr)
            epoch_l_set += batch_l_set
            epoch_l_pre += batch_l_pre
            batches += 1
        row = {
            "epoch": epoch,
            "l_set": epoch_l_set / max(batches, 1),
            "l_pre": epoch_l_pre / max(batches, 1),
            "total": (epoch_l_set + epoch_l_pre) / max(batches, 1),
            "U": None,
            "S": None,
            "H": None,
        }
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            report = evaluate(model, dataset, mode="gzsl", tau=cfg.eval_tau)
            row["U"], row["S"], row["H"] = report.u, report.s, report.h
            if report.h > state.best_h:
                state.best_h = report.h
                state.best_epoch = epoch
                if out_dir is not None:
                    model.save(os.path.join(out_dir, "best"))
        state.epoch = epoch
        state.history.append(row)
        log.info(
            "epoch %d: l_set=%.4f l_pre=%.4f%s",
            epoch,
            row["l_set"],
            row["l_pre"],
            "" if row["H"] is None else f" H={row['H']:.3f}",
        )
        if out_dir is not None and cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
            save_train_state(os.path.join(out_dir, f"epoch_{epoch:04d}"), model, state, rng)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_train_log(os.path.join(out_dir, "train_log.tsv"), state.history)
        save_train_state(os.path.join(out_dir, "final"), model, state, rng)
        if state.best_epoch < 0:
            model.save(os.path.join(out_dir, "best"))
    return state
