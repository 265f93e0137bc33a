"""Training objective: per-layer reconstruction losses, their batch
aggregate, the attribute-space cross-entropy, and the combined total."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lambda_sr: float = 0.1
    lambda_vr: float = 1.0

    def __post_init__(self):
        if self.lambda_sr < 0 or self.lambda_vr < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_set: float
    l_pre: float
    total: float
    per_layer: list = field(default_factory=list)  # (layer, l_sr, l_vr) floats


def set_losses(set_out, z, cls_in, reduction="mean"):
    """Reconstruction pair for one semantic layer of one example.

    l_sr compares the predicted attribute vector against the class's true
    one; l_vr compares the reconstructed class token against the class
    token as it came out of self-attention, before any blending, so the
    target does not depend on the bridge being trained.
    """
    if set_out.z_hat is None or set_out.cls_hat is None:
        raise ContractError("set_losses needs a training-mode enhancement output")
    z = z if isinstance(z, ad.Tensor) else ad.tensor(np.asarray(z, dtype=np.float64))
    if z.shape != set_out.z_hat.shape:
        raise DimensionError(
            f"attribute vector shape {z.shape} vs reconstruction {set_out.z_hat.shape}"
        )
    if cls_in.shape != set_out.cls_hat.shape:
        raise DimensionError(
            f"class token shape {cls_in.shape} vs reconstruction {set_out.cls_hat.shape}"
        )
    l_sr = ad.l1_loss(z, set_out.z_hat, reduction=reduction)
    l_vr = ad.l1_loss(cls_in, set_out.cls_hat, reduction=reduction)
    return l_sr, l_vr


def aggregate_set_loss(per_layer, weights, batch_size, num_set_layers):
    """(1/B)(1/S) sum over examples and layers of the weighted pair.

    ``per_layer`` holds one (l_sr, l_vr) tensor pair per example-layer;
    with no semantic layers the term is zero and the model degenerates to
    a plain backbone plus the prediction loss.
    """
    if num_set_layers == 0:
        log.warning("no semantic layers configured; reconstruction term is 0")
        return ad.tensor(0.0)
    if len(per_layer) != batch_size * num_set_layers:
        raise ContractError(
            f"expected {batch_size * num_set_layers} loss pairs, got {len(per_layer)}"
        )
    terms = []
    for l_sr, l_vr in per_layer:
        terms.append(ad.add(ad.scale(l_sr, weights.lambda_sr), ad.scale(l_vr, weights.lambda_vr)))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / (batch_size * num_set_layers))


def prediction_loss(cls_final, w_v2s, prototypes_seen, label_index):
    """Cross-entropy over seen classes with attribute-compatibility logits.

    ``prototypes_seen`` is the (num_seen, attr_dim) matrix of seen-class
    attribute vectors in candidate order; ``label_index`` indexes into it.
    """
    n_seen = prototypes_seen.shape[0]
    if not 0 <= label_index < n_seen:
        raise ContractError(f"label index {label_index} outside the {n_seen} seen classes")
    protos = (
        prototypes_seen
        if isinstance(prototypes_seen, ad.Tensor)
        else ad.tensor(np.asarray(prototypes_seen, dtype=np.float64))
    )
    phi = cls_final @ w_v2s
    logits = protos @ phi
    return ad.cross_entropy(logits, label_index)


# ---------------------------------------------------------------------------
# batched twins: one node per term over a whole minibatch
# ---------------------------------------------------------------------------


def l1_rows(a, b, reduction="mean"):
    """Sum over rows of the per-row L1 reduction, in one node.

    Equals sum_i l1_loss(a[i], b[i], reduction); rows all have the same
    length, so the "mean" case is total |a-b| / row_length.
    """
    if a.shape != b.shape:
        raise DimensionError(f"l1_rows: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim != 2:
        raise DimensionError(f"l1_rows: need row batches, got shape {a.shape}")
    if reduction == "mean":
        denom = a.shape[1]
    elif reduction == "sum":
        denom = 1
    else:
        raise ContractError(f"l1_rows: unknown reduction {reduction!r}")
    diff = a.data - b.data

    def bw(g):
        d = np.sign(diff) * (float(g) / denom)
        if a.requires_grad:
            a._accum(d)
        if b.requires_grad:
            b._accum(-d)

    return ad.make_node(np.asarray(np.abs(diff).sum() / denom), (a, b), bw)


def aggregate_set_loss_batch(per_layer, weights, batch_size, num_set_layers):
    """Batched twin of ``aggregate_set_loss``.

    ``per_layer`` holds one (l_sr_rows, l_vr_rows) pair per semantic
    layer, each already summed over the batch by ``l1_rows``.
    """
    if num_set_layers == 0:
        log.warning("no semantic layers configured; reconstruction term is 0")
        return ad.tensor(0.0)
    if len(per_layer) != num_set_layers:
        raise ContractError(f"expected {num_set_layers} loss pairs, got {len(per_layer)}")
    acc = None
    for l_sr, l_vr in per_layer:
        term = ad.add(ad.scale(l_sr, weights.lambda_sr), ad.scale(l_vr, weights.lambda_vr))
        acc = term if acc is None else ad.add(acc, term)
    return ad.scale(acc, 1.0 / (batch_size * num_set_layers))


def prediction_loss_batch(cls_final, w_v2s, prototypes_seen, label_indices):
    """Summed cross-entropy over a batch of class-token rows, one CE node."""
    protos = (
        prototypes_seen
        if isinstance(prototypes_seen, ad.Tensor)
        else ad.tensor(np.asarray(prototypes_seen, dtype=np.float64))
    )
    labels = np.asarray(label_indices, dtype=np.int64)
    n_seen = protos.shape[0]
    if labels.min() < 0 or labels.max() >= n_seen:
        raise ContractError(f"label indices outside the {n_seen} seen classes")
    phi = cls_final @ w_v2s
    logits = phi @ ad.transpose(protos)
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=1)
    rows = np.arange(labels.shape[0])
    val = float((np.log(total) - shifted[rows, labels]).sum())

    def bw(g):
        d = e * (float(g) / total)[:, None]
        d[rows, labels] -= float(g)
        logits._accum(d)

    return ad.make_node(np.asarray(val), (logits,), bw)


def total_loss(l_set, l_pre, per_layer=None):
    """Combine the two objective terms (prediction term has weight one)."""
    l_set_v = float(l_set.data) if isinstance(l_set, ad.Tensor) else float(l_set)
    l_pre_v = float(l_pre.data) if isinstance(l_pre, ad.Tensor) else float(l_pre)
    return LossBreakdown(
        l_set=l_set_v,
        l_pre=l_pre_v,
        total=l_set_v + l_pre_v,
        per_layer=list(per_layer or []),
    )
