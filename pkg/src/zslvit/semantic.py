"""Semantic token enhancement and score-based token pruning/fusion.

The stage sits inside selected encoder layers, between self-attention
and the feed-forward sublayer:

  1. a bridge maps the class token into attribute space (for the
     regression loss) and, during training, maps the class attribute
     vector back into visual space and blends it into the class token;
  2. the (possibly enhanced) class token scores every patch token with
     single-query attention;
  3. low-scoring patch tokens are dropped and folded into one fused
     token; high scorers pass through untouched.

Inference never touches attribute vectors: the blend is a no-op and the
bridge MLPs are skipped entirely.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import TokenSet, truncated_normal
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)


@dataclass
class SemanticBridge:
    """Two three-layer MLPs: visual -> attribute space and back."""

    v2s: list  # [(w, b)] * 3, d -> hidden -> hidden -> attr_dim
    s2v: list  # [(w, b)] * 3, attr_dim -> hidden -> hidden -> d


def init_bridge(rng, embed_dim, attr_dim, hidden):
    def mlp(dims):
        return [
            (ad.param(truncated_normal(rng, (din, dout))), ad.param(np.zeros(dout)))
            for din, dout in zip(dims[:-1], dims[1:])
        ]

    return SemanticBridge(
        v2s=mlp([embed_dim, hidden, hidden, attr_dim]),
        s2v=mlp([attr_dim, hidden, hidden, embed_dim]),
    )


def mlp_apply(x, layers):
    """ReLU MLP with a linear output layer, fused into one node.

    Works on a vector or on a matrix of row examples; caches every
    activation so backward is a plain chain of matmuls.
    """
    acts = [x.data]
    h = x.data
    for w, b in layers[:-1]:
        h = np.maximum(h @ w.data + b.data, 0.0)
        acts.append(h)
    w_last, b_last = layers[-1]
    out = h @ w_last.data + b_last.data

    def bw(g):
        d = g
        for i in range(len(layers) - 1, -1, -1):
            w, b = layers[i]
            a_in = acts[i]
            if w.requires_grad:
                w._accum(a_in.T @ d if a_in.ndim == 2 else np.outer(a_in, d))
            if b.requires_grad:
                b._accum(d.sum(axis=0) if d.ndim == 2 else d)
            if i == 0:
                if x.requires_grad:
                    x._accum(d @ w.data.T)
            else:
                d = (d @ w.data.T) * (acts[i] > 0)

    parents = [x] + [t for pair in layers for t in pair]
    return ad.make_node(out, parents, bw)


@dataclass
class SetOutput:
    """Products of the enhancement step for one layer."""

    z_hat: object  # Tensor[attr_dim] while training, else None
    cls_hat: object  # Tensor[d] while training, else None
    cls_enhanced: ad.Tensor


def semantic_enhance(cls, z, bridge, gamma, training):
    """Blend the class token with a reconstruction from attribute space.

    ``z`` is the ground-truth attribute vector of the example's class and
    is only consulted while training; gamma = 1 leaves the class token
    untouched (exact identity, not a multiply by 1).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    if not training:
        return SetOutput(z_hat=None, cls_hat=None, cls_enhanced=cls)
    if z is None:
        raise ContractError("training-mode enhancement needs the class attribute vector")
    z = z if isinstance(z, ad.Tensor) else ad.tensor(np.asarray(z, dtype=np.float64))
    z_hat = mlp_apply(cls, bridge.v2s)
    cls_hat = mlp_apply(z, bridge.s2v)
    if gamma == 1.0:
        enhanced = cls
    else:
        enhanced = ad.add(ad.scale(cls, gamma), ad.scale(cls_hat, 1.0 - gamma))
    return SetOutput(z_hat=z_hat, cls_hat=cls_hat, cls_enhanced=enhanced)


def token_attention(cls_enhanced, patches, scale_dim=None, kv=None, with_attended=True):
    """Score patch tokens with the class token as a single attention query.

    Keys and values are the patch tokens themselves unless ``kv`` supplies
    learned (wk, wv) projections.  Returns (scores a, attended tokens
    whose row i is a_i * v_i); ``with_attended=False`` skips the attended
    matrix (second element None) when only the scores are consumed.
    """
    d = patches.shape[1]
    if cls_enhanced.shape != (d,):
        raise ConfigError(
            f"class token shape {cls_enhanced.shape} does not match patch width {(d,)}"
        )
    if kv is None:
        keys = values = patches
    else:
        keys = patches @ kv[0]
        values = patches @ kv[1]
    scale = 1.0 / math.sqrt(scale_dim if scale_dim is not None else d)
    logits = ad.scale(keys @ cls_enhanced, scale)
    a = ad.softmax(logits)
    if not with_attended:
        return a, None
    return a, ad.scale_rows(values, a)


def keep_count(n, kappa):
    """Number of patch tokens retained by the pruning step.

    floor(kappa*n) with a tiny epsilon so exact rational products such as
    0.7*10 land on the intended integer, clamped to [1, n].
    """
    if not 0.0 < kappa <= 1.0:
        raise ConfigError(f"kappa must lie in (0, 1], got {kappa}")
    return min(n, max(1, int(math.floor(kappa * n + 1e-9))))


def top_k_indices(scores, k):
    """Indices of the k largest scores; ties resolve to the lower index."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return np.sort(order[:k])


@dataclass
class VieOutput:
    """Pruned-and-fused patch set for one layer."""

    patches: ad.Tensor
    kept_idx: np.ndarray
    dropped_idx: np.ndarray
    provenance: list = field(default_factory=list)

    @property
    def fused(self):
        return self.dropped_idx.size > 0


def visual_enhance(a, patches, kappa, provenance, weighted_keep=False):
    """Keep the top-k scored tokens, fuse the rest into one extra token.

    Kept tokens pass through unchanged by default (``weighted_keep``
    rescales them by their scores instead); the fused token is the
    score-weighted sum of the dropped tokens and is appended last with
    provenance -1.  kappa = 1 keeps everything and appends nothing.
    """
    n = patches.shape[0]
    if a.shape != (n,):
        raise ConfigError(f"score shape {a.shape} does not match {n} patch tokens")
    if n < 2:
        log.warning("token fusion skipped: only %d patch token(s)", n)
        return VieOutput(
            patches=patches,
            kept_idx=np.arange(n),
            dropped_idx=np.empty(0, dtype=np.int64),
            provenance=list(provenance),
        )
    k = keep_count(n, kappa)
    kept = top_k_indices(a.data, k)
    dropped = np.setdiff1d(np.arange(n), kept)
    prov = [provenance[i] for i in kept]
    fuse = dropped.size > 0
    data = np.empty((k + (1 if fuse else 0), patches.shape[1]))
    if weighted_keep:
        data[:k] = patches.data[kept] * a.data[kept][:, None]
    else:
        data[:k] = patches.data[kept]
    if fuse:
        data[k] = a.data[dropped] @ patches.data[dropped]

    def bw(g):
        gp = np.zeros_like(patches.data) if patches.requires_grad else None
        ga = np.zeros_like(a.data) if a.requires_grad else None
        if weighted_keep:
            if gp is not None:
                gp[kept] = g[:k] * a.data[kept][:, None]
            if ga is not None:
                ga[kept] = (g[:k] * patches.data[kept]).sum(axis=1)
        elif gp is not None:
            gp[kept] = g[:k]
        if fuse:
            if gp is not None:
                gp[dropped] = np.outer(a.data[dropped], g[k])
            if ga is not None:
                ga[dropped] = patches.data[dropped] @ g[k]
        if gp is not None:
            patches._accum(gp)
        if ga is not None:
            a._accum(ga)

    out = ad.make_node(data, (a, patches), bw)
    return VieOutput(
        patches=out,
        kept_idx=kept,
        dropped_idx=dropped,
        provenance=prov + [-1] if fuse else prov,
    )


# ---------------------------------------------------------------------------
# batched twins: the scoring and prune/fuse steps over a (B, n, d) minibatch
# ---------------------------------------------------------------------------


def token_scores_batch(cls_enhanced, patches, scale_dim=None, kv=None):
    """Batched single-query attention scores: (B, d) x (B, n, d) -> (B, n)."""
    bsz, n, d = patches.shape
    if cls_enhanced.shape != (bsz, d):
        raise ConfigError(
            f"class rows shape {cls_enhanced.shape} do not match patch batch {(bsz, d)}"
        )
    if kv is None:
        keys = patches.data
        wk = None
    else:
        wk = kv[0]
        keys = (patches.data.reshape(bsz * n, d) @ wk.data).reshape(bsz, n, d)
    scale = 1.0 / math.sqrt(scale_dim if scale_dim is not None else d)
    logits = (keys @ cls_enhanced.data[:, :, None])[:, :, 0]
    logits *= scale
    shifted = logits - logits.max(axis=-1, keepdims=True)
    a = np.exp(shifted)
    a /= a.sum(axis=-1, keepdims=True)

    def bw(g):
        ds = a * (g - (g * a).sum(axis=-1, keepdims=True))
        ds *= scale
        if cls_enhanced.requires_grad:
            cls_enhanced._accum((ds[:, None, :] @ keys)[:, 0, :])
        dkeys = ds[:, :, None] * cls_enhanced.data[:, None, :]
        if wk is None:
            if patches.requires_grad:
                patches._accum(dkeys)
        else:
            dk2 = dkeys.reshape(bsz * n, d)
            if wk.requires_grad:
                wk._accum(patches.data.reshape(bsz * n, d).T @ dk2)
            if patches.requires_grad:
                patches._accum((dk2 @ wk.data.T).reshape(bsz, n, d))

    parents = (cls_enhanced, patches) if wk is None else (cls_enhanced, patches, wk)
    return ad.make_node(a, parents, bw)


@dataclass
class VieBatchOutput:
    """Pruned-and-fused patch batch for one layer."""

    patches: ad.Tensor  # (B, k [+1], d)
    kept_idx: np.ndarray  # (B, k)
    dropped_idx: np.ndarray  # (B, n-k)
    fused: bool


def visual_enhance_batch(a, patches, kappa, weighted_keep=False):
    """Batched twin of ``visual_enhance``; every image keeps the same count."""
    bsz, n, d = patches.shape
    if a.shape != (bsz, n):
        raise ConfigError(f"score shape {a.shape} does not match patch batch {(bsz, n)}")
    if n < 2:
        log.warning("token fusion skipped: only %d patch token(s)", n)
        return VieBatchOutput(
            patches=patches,
            kept_idx=np.tile(np.arange(n), (bsz, 1)),
            dropped_idx=np.empty((bsz, 0), dtype=np.int64),
            fused=False,
        )
    k = keep_count(n, kappa)
    order = np.argsort(-a.data, axis=1, kind="stable")
    kept = np.sort(order[:, :k], axis=1)
    dropped = np.sort(order[:, k:], axis=1)
    fuse = dropped.shape[1] > 0
    a_kept = np.take_along_axis(a.data, kept, axis=1)
    kept_rows = np.take_along_axis(patches.data, kept[:, :, None], axis=1)
    data = np.empty((bsz, k + (1 if fuse else 0), d))
    if weighted_keep:
        data[:, :k] = kept_rows * a_kept[:, :, None]
    else:
        data[:, :k] = kept_rows
    if fuse:
        a_drop = np.take_along_axis(a.data, dropped, axis=1)
        drop_rows = np.take_along_axis(patches.data, dropped[:, :, None], axis=1)
        data[:, k] = (a_drop[:, None, :] @ drop_rows)[:, 0, :]

    def bw(g):
        gp = np.zeros_like(patches.data) if patches.requires_grad else None
        ga = np.zeros_like(a.data) if a.requires_grad else None
        gk = g[:, :k]
        if weighted_keep:
            if gp is not None:
                np.put_along_axis(gp, kept[:, :, None], gk * a_kept[:, :, None], axis=1)
            if ga is not None:
                np.put_along_axis(ga, kept, (gk * kept_rows).sum(axis=2), axis=1)
        elif gp is not None:
            np.put_along_axis(gp, kept[:, :, None], gk, axis=1)
        if fuse:
            gf = g[:, k]
            if gp is not None:
                np.put_along_axis(
                    gp, dropped[:, :, None], a_drop[:, :, None] * gf[:, None, :], axis=1
                )
            if ga is not None:
                np.put_along_axis(ga, dropped, (drop_rows @ gf[:, :, None])[:, :, 0], axis=1)
        if gp is not None:
            patches._accum(gp)
        if ga is not None:
            a._accum(ga)

    out = ad.make_node(data, (a, patches), bw)
    return VieBatchOutput(patches=out, kept_idx=kept, dropped_idx=dropped, fused=fuse)


def token_schedule(num_layers, n0, kappa, set_layers):
    """Patch-token counts seen by each sublayer, plus the unpruned baseline.

    Returns (schedule, baseline) where schedule[i] = (tokens into the
    attention sublayer of encoder i+1, tokens into its feed-forward
    sublayer).  Pure arithmetic; no model needed.
    """
    set_positions = set(set_layers)
    schedule = []
    n = n0
    for pos in range(1, num_layers + 1):
        n_attn = n
        if pos in set_positions and n >= 2:
            k = keep_count(n, kappa)
            n = k if k == n else k + 1
        schedule.append((n_attn, n))
    baseline = [(n0, n0)] * num_layers
    return schedule, baseline


def token_layer_reduction(num_layers, n0, kappa, set_layers):
    """Fractional drop in total patch-token * sublayer work."""
    schedule, baseline = token_schedule(num_layers, n0, kappa, set_layers)
    total = sum(a + f for a, f in schedule)
    base = sum(a + f for a, f in baseline)
    return (base - total) / base
