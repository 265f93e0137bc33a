"""Mini vision-transformer backbone.

Pre-norm encoder blocks over a [cls] + patch token stream.  Token sets
keep the class token separate from patch tokens because downstream
stages treat them asymmetrically; ``provenance`` tags every patch token
with the original grid index it descends from (-1 once tokens have been
fused together).
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, FormatError
from .tensor_io import read_tensor, write_tensor


@dataclass
class BackboneConfig:
    """Geometry and width of the encoder stack.

    ``set_layers`` lists the encoders that run the semantic stage, as
    1-based positions in the stack ("2" means the second encoder), kept
    strictly inside the stack (each < num_layers).
    """

    image_size: int = 32
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 64
    num_heads: int = 4
    mlp_ratio: float = 2.0
    num_layers: int = 6
    set_layers: tuple = (2, 4)

    def __post_init__(self):
        self.set_layers = tuple(int(x) for x in self.set_layers)
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"patch_size {self.patch_size} does not divide image_size {self.image_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"num_heads {self.num_heads} does not divide embed_dim {self.embed_dim}"
            )
        if self.num_layers < 1:
            raise ConfigError("num_layers must be at least 1")
        if list(self.set_layers) != sorted(set(self.set_layers)):
            raise ConfigError(f"set_layers must be strictly increasing, got {self.set_layers}")
        for pos in self.set_layers:
            if not 1 <= pos < self.num_layers:
                raise ConfigError(
                    f"set_layers position {pos} outside [1, num_layers) for "
                    f"num_layers={self.num_layers}"
                )

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.channels * self.patch_size * self.patch_size

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def ffn_dim(self):
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class TokenSet:
    """One image's token stream: a class token plus n patch tokens."""

    cls: ad.Tensor
    patches: ad.Tensor
    provenance: list = field(default_factory=list)

    @property
    def n(self):
        return self.patches.shape[0]

    def stacked(self):
        return ad.concat([ad.reshape(self.cls, (1, self.cls.shape[0])), self.patches], axis=0)


def split_tokens(seq, provenance):
    d = seq.shape[1]
    cls = ad.reshape(ad.slice_rows(seq, 0, 1), (d,))
    return TokenSet(cls=cls, patches=ad.slice_rows(seq, 1, seq.shape[0]), provenance=list(provenance))


def truncated_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) with rejection outside +/- bound*std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


@dataclass
class AttentionParams:
    ln_g: ad.Tensor
    ln_b: ad.Tensor
    wq: ad.Tensor
    bq: ad.Tensor
    wk: ad.Tensor
    bk: ad.Tensor
    wv: ad.Tensor
    bv: ad.Tensor
    wo: ad.Tensor
    bo: ad.Tensor


@dataclass
class FfnParams:
    ln_g: ad.Tensor
    ln_b: ad.Tensor
    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor


@dataclass
class PatchParams:
    proj_w: ad.Tensor
    proj_b: ad.Tensor
    pos: ad.Tensor
    cls: ad.Tensor


def init_attention(rng, d):
    return AttentionParams(
        ln_g=ad.param(np.ones(d)),
        ln_b=ad.param(np.zeros(d)),
        wq=ad.param(truncated_normal(rng, (d, d))),
        bq=ad.param(np.zeros(d)),
        wk=ad.param(truncated_normal(rng, (d, d))),
        bk=ad.param(np.zeros(d)),
        wv=ad.param(truncated_normal(rng, (d, d))),
        bv=ad.param(np.zeros(d)),
        wo=ad.param(truncated_normal(rng, (d, d))),
        bo=ad.param(np.zeros(d)),
    )


def init_ffn(rng, d, hidden):
    return FfnParams(
        ln_g=ad.param(np.ones(d)),
        ln_b=ad.param(np.zeros(d)),
        w1=ad.param(truncated_normal(rng, (d, hidden))),
        b1=ad.param(np.zeros(hidden)),
        w2=ad.param(truncated_normal(rng, (hidden, d))),
        b2=ad.param(np.zeros(d)),
    )


def init_patch(rng, cfg):
    return PatchParams(
        proj_w=ad.param(truncated_normal(rng, (cfg.patch_dim, cfg.embed_dim))),
        proj_b=ad.param(np.zeros(cfg.embed_dim)),
        pos=ad.param(truncated_normal(rng, (cfg.num_patches + 1, cfg.embed_dim))),
        cls=ad.param(np.zeros(cfg.embed_dim)),
    )


def patchify(image, patch_size):
    """(C, H, W) image -> (n, C*p*p) rows in row-major grid order."""
    c, h, w = image.shape
    g_h, g_w = h // patch_size, w // patch_size
    x = image.reshape(c, g_h, patch_size, g_w, patch_size)
    x = x.transpose(1, 3, 0, 2, 4)  # (gh, gw, C, p, p)
    return x.reshape(g_h * g_w, c * patch_size * patch_size)


def embed_sequence(image, cfg, params):
    """Project an image into the stacked (n+1, d) token sequence.

    Row 0 is the class token, rows 1..n the projected patches; positions
    are added to every row.  Fused into one node so the whole embedding
    costs a single tape entry.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.channels, cfg.image_size, cfg.image_size):
        raise FormatError(
            f"image shape {image.shape} does not match configured "
            f"{(cfg.channels, cfg.image_size, cfg.image_size)}"
        )
    rows = patchify(image, cfg.patch_size)
    proj_w, proj_b, pos, cls = params.proj_w, params.proj_b, params.pos, params.cls
    data = np.empty((cfg.num_patches + 1, cfg.embed_dim))
    data[0] = cls.data + pos.data[0]
    data[1:] = rows @ proj_w.data + proj_b.data + pos.data[1:]

    def bw(g):
        if proj_w.requires_grad:
            proj_w._accum(rows.T @ g[1:])
        if proj_b.requires_grad:
            proj_b._accum(g[1:].sum(axis=0))
        if pos.requires_grad:
            pos._accum(g)
        if cls.requires_grad:
            cls._accum(g[0])

    return ad.make_node(data, (proj_w, proj_b, pos, cls), bw)


def patch_embed(image, cfg, params):
    """Project an image into the initial token set (cls + positions added)."""
    seq = embed_sequence(image, cfg, params)
    return split_tokens(seq, range(cfg.num_patches))


def mhsa_seq(seq, params, num_heads):
    """Pre-norm self-attention sublayer with residual, on a (T, d) sequence.

    One fused node: layer norm, q/k/v projections, per-head softmax
    attention, output projection, and the residual all share a tape
    entry.  Returns (new sequence, per-head weights array) where the
    weights are a plain (heads, T, T) array for tracing.
    """
    x = seq.data
    t_len, d = x.shape
    if d % num_heads != 0:
        raise DimensionError(f"mhsa: embed dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    sc = 1.0 / math.sqrt(dh)
    h, xc, inv = ad.ln_forward_arrays(x, params.ln_g.data, params.ln_b.data)
    # The head scale rides along inside the q weights, so neither the
    # activations nor the scores ever need a separate scaling pass.
    wqs = params.wq.data * sc
    qd = h @ wqs
    qd += params.bq.data * sc
    kd = h @ params.wk.data
    kd += params.bk.data
    vd = h @ params.wv.data
    vd += params.bv.data
    qh = qd.reshape(t_len, num_heads, dh).transpose(1, 0, 2)
    kh = kd.reshape(t_len, num_heads, dh).transpose(1, 0, 2)
    vh = vd.reshape(t_len, num_heads, dh).transpose(1, 0, 2)
    s = qh @ kh.transpose(0, 2, 1)
    s -= s.max(axis=-1, keepdims=True)
    weights = np.exp(s, out=s)
    weights /= weights.sum(axis=-1, keepdims=True)
    av = weights @ vh
    att = np.ascontiguousarray(av.transpose(1, 0, 2)).reshape(t_len, d)
    proj = att @ params.wo.data
    proj += params.bo.data
    out = proj
    out += x

    def bw(g):
        if params.wo.requires_grad:
            params.wo._accum_owned(att.T @ g)
        if params.bo.requires_grad:
            params.bo._accum_owned(g.sum(axis=0))
        gh = (g @ params.wo.data.T).reshape(t_len, num_heads, dh).transpose(1, 0, 2)
        da = gh @ vh.transpose(0, 2, 1)
        # sum_j w_ij * da_ij collapses to the row dot gh . av, so the
        # correction term never touches the (T, T) weight matrices.
        da -= np.einsum("htd,htd->ht", gh, av)[..., None]
        da *= weights
        ds = da
        dq = np.ascontiguousarray((ds @ kh).transpose(1, 0, 2)).reshape(t_len, d)
        dk = np.ascontiguousarray((ds.transpose(0, 2, 1) @ qh).transpose(1, 0, 2)).reshape(t_len, d)
        dv = np.ascontiguousarray(
            (weights.transpose(0, 2, 1) @ gh).transpose(1, 0, 2)
        ).reshape(t_len, d)
        # wqs holds wq * sc, so the q gradients need the scale put back.
        for w_p, b_p, dz, f in (
            (params.wq, params.bq, dq, sc),
            (params.wk, params.bk, dk, 1.0),
            (params.wv, params.bv, dv, 1.0),
        ):
            if w_p.requires_grad:
                gw = h.T @ dz
                if f != 1.0:
                    gw *= f
                w_p._accum_owned(gw)
            if b_p.requires_grad:
                gb = dz.sum(axis=0)
                if f != 1.0:
                    gb *= f
                b_p._accum_owned(gb)
        dhid = dq @ wqs.T
        tmp = dk @ params.wk.data.T
        dhid += tmp
        np.matmul(dv, params.wv.data.T, out=tmp)
        dhid += tmp
        if params.ln_g.requires_grad:
            params.ln_g._accum_owned(np.einsum("ti,ti,t->i", dhid, xc, inv))
        if params.ln_b.requires_grad:
            params.ln_b._accum_owned(dhid.sum(axis=0))
        if seq.requires_grad:
            dx = ad.ln_backward_arrays(dhid, xc, inv, params.ln_g.data)
            dx += g
            seq._accum_owned(dx)

    parents = (
        seq,
        params.ln_g,
        params.ln_b,
        params.wq,
        params.bq,
        params.wk,
        params.bk,
        params.wv,
        params.bv,
        params.wo,
        params.bo,
    )
    return ad.make_node(out, parents, bw), weights


def ffn_seq(seq, params):
    """Pre-norm feed-forward sublayer with residual, fused into one node."""
    x = seq.data
    h, xc, inv = ad.ln_forward_arrays(x, params.ln_g.data, params.ln_b.data)
    pre = h @ params.w1.data
    pre += params.b1.data
    act, t, pre2 = ad.gelu_arrays(pre)
    out = act @ params.w2.data
    out += params.b2.data
    out += x

    def bw(g):
        if params.w2.requires_grad:
            params.w2._accum_owned(act.T @ g)
        if params.b2.requires_grad:
            params.b2._accum_owned(g.sum(axis=0))
        dpre = g @ params.w2.data.T
        dpre *= ad.gelu_grad_arrays(pre, t, pre2)
        if params.w1.requires_grad:
            params.w1._accum_owned(h.T @ dpre)
        if params.b1.requires_grad:
            params.b1._accum_owned(dpre.sum(axis=0))
        dh = dpre @ params.w1.data.T
        if params.ln_g.requires_grad:
            params.ln_g._accum_owned(np.einsum("ti,ti,t->i", dh, xc, inv))
        if params.ln_b.requires_grad:
            params.ln_b._accum_owned(dh.sum(axis=0))
        if seq.requires_grad:
            dx = ad.ln_backward_arrays(dh, xc, inv, params.ln_g.data)
            dx += g
            seq._accum_owned(dx)

    parents = (seq, params.ln_g, params.ln_b, params.w1, params.b1, params.w2, params.b2)
    return ad.make_node(out, parents, bw)


def mhsa(tokens, params, num_heads):
    """Pre-norm multi-head self-attention sublayer with residual.

    Returns the updated token set and the per-head attention weights
    (plain array, heads x T x T) for tracing.
    """
    out, weights = mhsa_seq(tokens.stacked(), params, num_heads)
    return split_tokens(out, tokens.provenance), weights


def ffn(tokens, params):
    """Pre-norm position-wise feed-forward sublayer with residual."""
    return split_tokens(ffn_seq(tokens.stacked(), params), tokens.provenance)


# ---------------------------------------------------------------------------
# batched kernels: the same sublayers over a whole (B, T, d) minibatch
# ---------------------------------------------------------------------------
#
# Token pruning keeps the same count for every image, so a minibatch stays
# rectangular end to end and each training step can run as one graph of
# large array ops instead of B small ones.  Every kernel below mirrors its
# per-image twin exactly; a dedicated test pins the gradients of the two
# paths against each other.


def patchify_batch(images, patch_size):
    """(B, C, H, W) images -> (B, n, C*p*p) rows in row-major grid order."""
    bsz, c, h, w = images.shape
    g_h, g_w = h // patch_size, w // patch_size
    x = images.reshape(bsz, c, g_h, patch_size, g_w, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (B, gh, gw, C, p, p)
    return np.ascontiguousarray(x).reshape(bsz, g_h * g_w, c * patch_size * patch_size)


def embed_batch(images, cfg, params):
    """Batched patch embedding: (B, C, H, W) -> (B, n+1, d) sequences."""
    images = np.asarray(images, dtype=np.float64)
    bsz = images.shape[0]
    if images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise FormatError(
            f"image batch shape {images.shape[1:]} does not match configured "
            f"{(cfg.channels, cfg.image_size, cfg.image_size)}"
        )
    rows = patchify_batch(images, cfg.patch_size)
    proj_w, proj_b, pos, cls = params.proj_w, params.proj_b, params.pos, params.cls
    n, pd = cfg.num_patches, cfg.patch_dim
    data = np.empty((bsz, n + 1, cfg.embed_dim))
    data[:, 0] = cls.data + pos.data[0]
    data[:, 1:] = (rows.reshape(bsz * n, pd) @ proj_w.data).reshape(bsz, n, -1)
    data[:, 1:] += proj_b.data + pos.data[1:]

    def bw(g):
        gp = g[:, 1:]
        if proj_w.requires_grad:
            gp2 = np.ascontiguousarray(gp).reshape(bsz * n, -1)
            proj_w._accum_owned(rows.reshape(bsz * n, pd).T @ gp2)
        if proj_b.requires_grad:
            proj_b._accum_owned(gp.sum(axis=(0, 1)))
        if pos.requires_grad:
            pos._accum_owned(g.sum(axis=0))
        if cls.requires_grad:
            cls._accum_owned(g[:, 0].sum(axis=0))

    return ad.make_node(data, (proj_w, proj_b, pos, cls), bw)


def mhsa_batch(seq, params, num_heads):
    """Batched twin of ``mhsa_seq`` on a (B, T, d) sequence tensor."""
    x = seq.data
    bsz, t_len, d = x.shape
    if d % num_heads != 0:
        raise DimensionError(f"mhsa: embed dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    sc = 1.0 / math.sqrt(dh)
    gain = params.ln_g.data
    lbias = params.ln_b.data
    xhat, inv = ad.ln_normalize_arrays(x)
    x2h = xhat.reshape(bsz * t_len, d)
    # One fused gemm covers the three projections; slicing the result by
    # the q/k/v block index recovers head views without extra copies.  The
    # head scale rides inside the q weight block and the norm's gain and
    # bias ride inside the weight matrix and bias row, so the
    # sequence-sized activations only ever see the standardized input.
    w3 = np.concatenate([params.wq.data * sc, params.wk.data, params.wv.data], axis=1)
    b3 = np.concatenate([params.bq.data * sc, params.bk.data, params.bv.data])
    b3 += lbias @ w3
    w3g = w3 * gain[:, None]
    qkv = x2h @ w3g
    qkv += b3
    heads = qkv.reshape(bsz, t_len, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    qh, kh, vh = heads[0], heads[1], heads[2]
    s = qh @ kh.transpose(0, 1, 3, 2)
    # Softmax is shift invariant and float64 scores sit far below the exp
    # overflow threshold, so the max subtraction would only add two full
    # passes here.  A diverging run can still overflow; the training loop
    # screens non-finite values, so the fp flags stay quiet here.
    with np.errstate(over="ignore", invalid="ignore"):
        weights = np.exp(s, out=s)
        weights /= weights.sum(axis=-1, keepdims=True)
    av = weights @ vh
    att = np.ascontiguousarray(av.transpose(0, 2, 1, 3)).reshape(bsz * t_len, d)
    proj = att @ params.wo.data
    proj += params.bo.data
    out = proj.reshape(bsz, t_len, d)
    out += x

    def bw(g):
        g2 = g.reshape(bsz * t_len, d)
        if params.wo.requires_grad:
            params.wo._accum_owned(att.T @ g2)
        if params.bo.requires_grad:
            params.bo._accum_owned(g2.sum(axis=0))
        gh = (g2 @ params.wo.data.T).reshape(bsz, t_len, num_heads, dh).transpose(0, 2, 1, 3)
        da = gh @ vh.transpose(0, 1, 3, 2)
        # sum_j w_ij * da_ij collapses to the row dot gh . av, so the
        # correction term never touches the (T, T) weight matrices.
        da -= np.einsum("bhtd,bhtd->bht", gh, av)[..., None]
        da *= weights
        ds = da
        dz = np.empty((bsz, t_len, 3, num_heads, dh))
        dzv = dz.transpose(2, 0, 3, 1, 4)
        dzv[0][...] = ds @ kh
        dzv[1][...] = ds.transpose(0, 1, 3, 2) @ qh
        dzv[2][...] = weights.transpose(0, 1, 3, 2) @ gh
        d2 = dz.reshape(bsz * t_len, 3 * d)
        pw = x2h.T @ d2
        db = d2.sum(axis=0)
        # Undo the folds in weight space: pw is the gradient wrt w3g and db
        # the gradient wrt the folded bias row, both parameter sized.
        if params.ln_g.requires_grad:
            params.ln_g._accum_owned(np.einsum("ij,ij->i", pw, w3))
        if params.ln_b.requires_grad:
            params.ln_b._accum_owned(w3 @ db)
        pw *= gain[:, None]
        pw += np.outer(lbias, db)
        pw[:, :d] *= sc
        db[:d] *= sc
        for i, (w_p, b_p) in enumerate(
            ((params.wq, params.bq), (params.wk, params.bk), (params.wv, params.bv))
        ):
            if w_p.requires_grad:
                w_p._accum(pw[:, i * d : (i + 1) * d])
            if b_p.requires_grad:
                b_p._accum(db[i * d : (i + 1) * d])
        if seq.requires_grad:
            dxhat = (d2 @ w3g.T).reshape(bsz, t_len, d)
            dx = ad.ln_backward_xhat(dxhat, xhat, inv)
            dx += g
            seq._accum_owned(dx)

    parents = (
        seq,
        params.ln_g,
        params.ln_b,
        params.wq,
        params.bq,
        params.wk,
        params.bk,
        params.wv,
        params.bv,
        params.wo,
        params.bo,
    )
    return ad.make_node(out, parents, bw)


def ffn_batch(seq, params):
    """Batched twin of ``ffn_seq`` on a (B, T, d) sequence tensor."""
    x = seq.data
    bsz, t_len, d = x.shape
    gain = params.ln_g.data
    lbias = params.ln_b.data
    xhat, inv = ad.ln_normalize_arrays(x)
    x2h = xhat.reshape(bsz * t_len, d)
    # The norm's gain and bias ride inside w1/b1 and the GELU's leading
    # 1/2 inside w2, so no sequence-sized scaling pass remains.
    w1g = params.w1.data * gain[:, None]
    b1f = params.b1.data + lbias @ params.w1.data
    w2h = params.w2.data * 0.5
    pre = x2h @ w1g
    pre += b1f
    act, t, pre2 = ad.gelu_arrays_raw(pre)
    proj = act @ w2h
    proj += params.b2.data
    out = proj.reshape(bsz, t_len, d)
    out += x

    def bw(g):
        g2 = g.reshape(bsz * t_len, d)
        if params.w2.requires_grad:
            gw2 = act.T @ g2
            gw2 *= 0.5
            params.w2._accum_owned(gw2)
        if params.b2.requires_grad:
            params.b2._accum_owned(g2.sum(axis=0))
        dpre = g2 @ w2h.T
        dpre *= ad.gelu_grad_raw_arrays(pre, t, pre2)
        pw = x2h.T @ dpre
        db = dpre.sum(axis=0)
        # Undo the folds in weight space: pw is the gradient wrt w1g and db
        # the gradient wrt the folded bias row, both parameter sized.
        if params.ln_g.requires_grad:
            params.ln_g._accum_owned(np.einsum("ij,ij->i", pw, params.w1.data))
        if params.ln_b.requires_grad:
            params.ln_b._accum_owned(params.w1.data @ db)
        if params.w1.requires_grad:
            pw *= gain[:, None]
            pw += np.outer(lbias, db)
            params.w1._accum_owned(pw)
        if params.b1.requires_grad:
            params.b1._accum_owned(db)
        if seq.requires_grad:
            dxhat = (dpre @ w1g.T).reshape(bsz, t_len, d)
            dx = ad.ln_backward_xhat(dxhat, xhat, inv)
            dx += g
            seq._accum_owned(dx)

    parents = (seq, params.ln_g, params.ln_b, params.w1, params.b1, params.w2, params.b2)
    return ad.make_node(out, parents, bw)


def split_batch_tokens(seq, with_patches=True):
    """(B, T, d) sequence -> class rows (B, d) and patch rows (B, T-1, d).

    ``with_patches=False`` skips the patch tensor (second element None)
    when only the class rows are consumed.
    """
    x = seq.data

    def bw_cls(g):
        buf = np.zeros_like(x)
        buf[:, 0] = g
        seq._accum_owned(buf)

    cls = ad.make_node(x[:, 0].copy(), (seq,), bw_cls)
    if not with_patches:
        return cls, None

    def bw_patches(g):
        buf = np.zeros_like(x)
        buf[:, 1:] = g
        seq._accum_owned(buf)

    patches = ad.make_node(x[:, 1:].copy(), (seq,), bw_patches)
    return cls, patches


def stack_batch_tokens(cls, patches):
    """Inverse of ``split_batch_tokens``: prepend class rows back."""
    data = np.concatenate([cls.data[:, None, :], patches.data], axis=1)

    def bw(g):
        if cls.requires_grad:
            cls._accum(g[:, 0])
        if patches.requires_grad:
            patches._accum(g[:, 1:])

    return ad.make_node(data, (cls, patches), bw)


# ---------------------------------------------------------------------------
# checkpoints: a text manifest plus one raw tensor blob per parameter
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"


def save_params(directory, params):
    """``params`` is a flat name -> Tensor (or array) mapping."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], ad.Tensor) else params[name]
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(name + "\t" + ",".join(str(s) for s in arr.shape))
        write_tensor(os.path.join(directory, name + ".zvt"), arr)
    with open(os.path.join(directory, MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(directory):
    """Read a checkpoint directory back into a name -> array mapping."""
    manifest = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise FormatError(f"missing checkpoint manifest {manifest}")
    out = {}
    with open(manifest) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                name, shape_txt = line.split("\t")
            except ValueError:
                raise FormatError(f"{manifest}:{ln}: expected 'name<TAB>shape', got {line!r}")
            shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
            blob = os.path.join(directory, name + ".zvt")
            if not os.path.exists(blob):
                raise FormatError(f"{manifest}:{ln}: missing tensor file {blob}")
            arr = read_tensor(blob)
            if arr.shape != shape:
                raise FormatError(
                    f"{blob}: shape {arr.shape} disagrees with manifest {shape}"
                )
            out[name] = arr
    return out
