"""Full network: backbone encoders with the semantic stage spliced in."""

import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .backbone import (
    BackboneConfig,
    embed_batch,
    embed_sequence,
    ffn_batch,
    ffn_seq,
    init_attention,
    init_ffn,
    init_patch,
    load_params,
    mhsa_batch,
    mhsa_seq,
    save_params,
    split_batch_tokens,
    stack_batch_tokens,
    truncated_normal,
)
from .errors import ConfigError, ContractError, FormatError
from .runconfig import config_hash, parse_kv_text, write_kv
from .semantic import (
    init_bridge,
    semantic_enhance,
    token_attention,
    token_scores_batch,
    visual_enhance,
    visual_enhance_batch,
)


@dataclass
class ModelConfig:
    backbone: BackboneConfig
    attr_dim: int
    gamma: float = 0.9
    kappa: float = 0.9
    bridge_hidden: int = 0  # 0 means "use embed_dim"
    learned_kv: bool = False
    weighted_keep: bool = False
    set_scale_per_head: bool = False
    normalize_prototypes: bool = False

    def __post_init__(self):
        if self.attr_dim < 1:
            raise ConfigError(f"attr_dim must be positive, got {self.attr_dim}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 < self.kappa <= 1.0:
            raise ConfigError(f"kappa must lie in (0, 1], got {self.kappa}")

    @property
    def hidden(self):
        return self.bridge_hidden if self.bridge_hidden > 0 else self.backbone.embed_dim

    @property
    def scale_dim(self):
        return self.backbone.head_dim if self.set_scale_per_head else self.backbone.embed_dim

    def to_flat(self):
        out = {}
        for f in fields(BackboneConfig):
            out[f.name] = getattr(self.backbone, f.name)
        for f in fields(ModelConfig):
            if f.name != "backbone":
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_flat(cls, flat):
        backbone_names = {f.name for f in fields(BackboneConfig)}
        b_kwargs, m_kwargs = {}, {}
        for key, value in flat.items():
            (b_kwargs if key in backbone_names else m_kwargs)[key] = value
        return cls(backbone=BackboneConfig(**b_kwargs), **m_kwargs)

    def hash(self):
        return config_hash(self.to_flat())


@dataclass
class LayerView:
    attn: object
    ffn: object
    bridge: object = None
    kv: object = None


@dataclass
class SetRecord:
    """Everything the losses and traces need from one semantic layer."""

    layer: int  # 1-based encoder position
    set_out: object
    cls_in: ad.Tensor
    scores: ad.Tensor
    vie: object


@dataclass
class TraceRecord:
    layer: int
    scores: np.ndarray
    kept: np.ndarray
    dropped: np.ndarray
    provenance_in: list
    provenance_out: list


@dataclass
class ForwardResult:
    phi: ad.Tensor  # attribute-space embedding of the image
    cls_final: ad.Tensor
    set_records: list = field(default_factory=list)
    token_counts: list = field(default_factory=list)  # (into attn, into ffn) patch tokens
    trace: list = None


class ZslVit:
    """Vision transformer with semantic enhancement on selected layers."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        b = cfg.backbone
        rng = np.random.default_rng(seed)
        self._params = {}
        self.patch = init_patch(rng, b)
        self._register("patch", self.patch)
        self.layers = []
        for i in range(b.num_layers):
            attn = init_attention(rng, b.embed_dim)
            ff = init_ffn(rng, b.embed_dim, b.ffn_dim)
            view = LayerView(attn=attn, ffn=ff)
            self._register(f"layers.{i}.attn", attn)
            self._register(f"layers.{i}.ffn", ff)
            if (i + 1) in b.set_layers:
                view.bridge = init_bridge(rng, b.embed_dim, cfg.attr_dim, cfg.hidden)
                for j, (w, bb) in enumerate(view.bridge.v2s):
                    self._params[f"layers.{i}.v2s.{j}.w"] = w
                    self._params[f"layers.{i}.v2s.{j}.b"] = bb
                for j, (w, bb) in enumerate(view.bridge.s2v):
                    self._params[f"layers.{i}.s2v.{j}.w"] = w
                    self._params[f"layers.{i}.s2v.{j}.b"] = bb
                if cfg.learned_kv:
                    view.kv = (
                        ad.param(truncated_normal(rng, (b.embed_dim, b.embed_dim))),
                        ad.param(truncated_normal(rng, (b.embed_dim, b.embed_dim))),
                    )
                    self._params[f"layers.{i}.kv.wk"] = view.kv[0]
                    self._params[f"layers.{i}.kv.wv"] = view.kv[1]
            self.layers.append(view)
        self.final_ln_g = ad.param(np.ones(b.embed_dim))
        self.final_ln_b = ad.param(np.zeros(b.embed_dim))
        self._params["final.ln_g"] = self.final_ln_g
        self._params["final.ln_b"] = self.final_ln_b
        self.w_v2s = ad.param(truncated_normal(rng, (b.embed_dim, cfg.attr_dim)))
        self._params["head.w_v2s"] = self.w_v2s

    def _register(self, prefix, obj):
        for f in fields(obj):
            self._params[f"{prefix}.{f.name}"] = getattr(obj, f.name)

    def parameters(self):
        return self._params

    def num_parameters(self):
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def forward(self, image, z=None, training=False, collect_trace=False):
        cfg = self.cfg
        b = cfg.backbone
        # The encoder runs on the stacked (1 + n, d) sequence; tokens are
        # only split out around the semantic stage, which treats the class
        # token and the patch tokens asymmetrically.
        seq = embed_sequence(image, b, self.patch)
        prov = list(range(b.num_patches))
        set_records = []
        token_counts = []
        trace = [] if collect_trace else None
        for i, layer in enumerate(self.layers):
            n_in = seq.shape[0] - 1
            seq, _ = mhsa_seq(seq, layer.attn, b.num_heads)
            if layer.bridge is not None:
                cls_in = ad.row_vector(seq, 0)
                patches = ad.slice_rows(seq, 1, seq.shape[0])
                set_out = semantic_enhance(cls_in, z, layer.bridge, cfg.gamma, training)
                scores, _ = token_attention(
                    set_out.cls_enhanced,
                    patches,
                    scale_dim=cfg.scale_dim,
                    kv=layer.kv,
                    with_attended=False,
                )
                prov_in = list(prov)
                vie = visual_enhance(
                    scores, patches, cfg.kappa, prov_in, weighted_keep=cfg.weighted_keep
                )
                seq = ad.stack_rows(set_out.cls_enhanced, vie.patches)
                prov = list(vie.provenance)
                set_records.append(
                    SetRecord(layer=i + 1, set_out=set_out, cls_in=cls_in, scores=scores, vie=vie)
                )
                if collect_trace:
                    trace.append(
                        TraceRecord(
                            layer=i + 1,
                            scores=scores.data.copy(),
                            kept=vie.kept_idx.copy(),
                            dropped=vie.dropped_idx.copy(),
                            provenance_in=prov_in,
                            provenance_out=list(vie.provenance),
                        )
                    )
            token_counts.append((n_in, seq.shape[0] - 1))
            seq = ffn_seq(seq, layer.ffn)
        cls_final = ad.layer_norm(ad.row_vector(seq, 0), self.final_ln_g, self.final_ln_b)
        phi = cls_final @ self.w_v2s
        return ForwardResult(
            phi=phi,
            cls_final=cls_final,
            set_records=set_records,
            token_counts=token_counts,
            trace=trace,
        )

    def forward_batch(self, images, z=None, training=False):
        """Batched twin of ``forward`` over (B, C, H, W) images.

        Pruning keeps the same token count for every image, so the whole
        minibatch runs as one rectangular graph; gradients match the
        per-image loop up to float summation order.  ``z`` is the (B,
        attr_dim) matrix of class attribute rows while training.  Traces
        and provenance stay per-image features of ``forward``.
        """
        cfg = self.cfg
        b = cfg.backbone
        seq = embed_batch(images, b, self.patch)
        if training:
            if z is None:
                raise ContractError("training-mode batch forward needs class attribute rows")
            z = z if isinstance(z, ad.Tensor) else ad.tensor(np.asarray(z, dtype=np.float64))
        set_records = []
        token_counts = []
        for i, layer in enumerate(self.layers):
            n_in = seq.shape[1] - 1
            seq = mhsa_batch(seq, layer.attn, b.num_heads)
            if layer.bridge is not None:
                cls_in, patches = split_batch_tokens(seq)
                set_out = semantic_enhance(cls_in, z, layer.bridge, cfg.gamma, training)
                scores = token_scores_batch(
                    set_out.cls_enhanced, patches, scale_dim=cfg.scale_dim, kv=layer.kv
                )
                vie = visual_enhance_batch(
                    scores, patches, cfg.kappa, weighted_keep=cfg.weighted_keep
                )
                seq = stack_batch_tokens(set_out.cls_enhanced, vie.patches)
                set_records.append(
                    SetRecord(layer=i + 1, set_out=set_out, cls_in=cls_in, scores=scores, vie=vie)
                )
            token_counts.append((n_in, seq.shape[1] - 1))
            seq = ffn_batch(seq, layer.ffn)
        cls_rows, _ = split_batch_tokens(seq, with_patches=False)
        cls_final = ad.layer_norm(cls_rows, self.final_ln_g, self.final_ln_b)
        phi = cls_final @ self.w_v2s
        return ForwardResult(
            phi=phi,
            cls_final=cls_final,
            set_records=set_records,
            token_counts=token_counts,
            trace=None,
        )

    def embed(self, image):
        """Attribute-space embedding for inference; builds no graph."""
        with ad.no_grad():
            return self.forward(image, training=False).phi.data

    # -- persistence ------------------------------------------------------

    def save(self, directory):
        save_params(directory, self._params)
        write_kv(os.path.join(directory, "model_config.txt"), self.cfg.to_flat())

    def load_state(self, arrays):
        missing = sorted(set(self._params) - set(arrays))
        extra = sorted(set(arrays) - set(self._params))
        if missing or extra:
            raise FormatError(
                f"checkpoint mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for name, p in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise FormatError(
                    f"checkpoint parameter {name}: shape {arr.shape} != {p.data.shape}"
                )
            p.data = arr.copy()

    @classmethod
    def load(cls, directory):
        cfg_path = os.path.join(directory, "model_config.txt")
        if not os.path.exists(cfg_path):
            raise FormatError(f"missing model config {cfg_path}")
        with open(cfg_path) as fh:
            raw = parse_kv_text(fh.read(), source=cfg_path)
        flat = {}
        for key, text in raw.items():
            if key == "set_layers":
                flat[key] = tuple(int(v) for v in text.split(",")) if text else ()
            elif key in ("mlp_ratio", "gamma", "kappa"):
                flat[key] = float(text)
            elif key in (
                "learned_kv",
                "weighted_keep",
                "set_scale_per_head",
                "normalize_prototypes",
            ):
                flat[key] = text.lower() == "true"
            else:
                flat[key] = int(text)
        model = cls(ModelConfig.from_flat(flat))
        model.load_state(load_params(directory))
        return model
