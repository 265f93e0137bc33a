"""Calibrated zero-shot prediction and CZSL/GZSL evaluation.

Predictions softmax attribute-compatibility scores over the candidate
classes, then add a calibration constant tau to every unseen class
before the argmax.  Accuracy follows the mean per-class protocol: top-1
accuracy is averaged within each class first, then across classes.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError

MODES = ("czsl", "gzsl")


def harmonic_mean(u, s):
    """2*U*S/(U+S); unit-agnostic (percent in, percent out)."""
    if u + s == 0:
        return 0.0
    return 2.0 * u * s / (u + s)


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def class_scores(cls_final, w_v2s, prototypes):
    """Softmax over candidate classes of phi . z^c with phi = cls^T W."""
    if not prototypes:
        raise ContractError("empty candidate set")
    cls_v = cls_final.data if isinstance(cls_final, ad.Tensor) else np.asarray(cls_final)
    w = w_v2s.data if isinstance(w_v2s, ad.Tensor) else np.asarray(w_v2s)
    phi = cls_v @ w
    logits = np.array([p.z @ phi for p in prototypes])
    return _softmax(logits)


def predict(scores, prototypes, tau, mode):
    """Calibrated argmax; ties resolve to the lowest class id.

    ``prototypes`` must be aligned with ``scores`` and sorted by class id
    (the evaluation loop guarantees this).  In CZSL the candidates are all
    unseen, so tau shifts every score equally and cannot change the pick.
    """
    if tau < 0:
        raise ContractError(f"tau must be non-negative, got {tau}")
    scores = np.asarray(scores, dtype=np.float64)
    if mode == "gzsl":
        bonus = np.array([0.0 if p.seen else tau for p in prototypes])
        scores = scores + bonus
    return prototypes[int(np.argmax(scores))].class_id


@dataclass
class EvalReport:
    mode: str
    tau: float
    per_class_acc: dict
    per_class_counts: dict  # class -> (correct, total)
    confusion: dict  # (true, pred) -> count
    acc: float = None  # CZSL
    u: float = None  # GZSL
    s: float = None
    h: float = None
    seed: int = 0
    config_hash: str = "-"
    per_sample_acc: float = None  # diagnostic only
    roles: dict = field(default_factory=dict)  # class -> "seen"|"unseen"

    def summary_line(self):
        def pct(x):
            return "-" if x is None else f"{100.0 * x:.2f}"

        return f"acc={pct(self.acc)} | U={pct(self.u)} S={pct(self.s)} H={pct(self.h)}"

    def serialize(self):
        lines = [
            "# zero-shot evaluation report",
            f"mode = {self.mode.upper()}",
            f"tau = {self.tau!r}",
            f"seed = {self.seed}",
            f"config_hash = {self.config_hash}",
            "",
            "class_id\trole\tn\tcorrect\tacc",
        ]
        for cid in sorted(self.per_class_acc):
            correct, total = self.per_class_counts[cid]
            role = self.roles.get(cid, "?")
            lines.append(f"{cid}\t{role}\t{total}\t{correct}\t{self.per_class_acc[cid]:.6f}")
        lines += ["", self.summary_line(), ""]
        return "\n".join(lines)


def _score_image(model, image, proto_matrix, normalize):
    phi = model.embed(image)
    if normalize:
        phi = phi / max(np.linalg.norm(phi), 1e-12)
    return _softmax(proto_matrix @ phi)


def evaluate(model, dataset, mode="gzsl", tau=0.4, workers=None, seed=0, config_hash="-"):
    """Run the full protocol on a dataset's test splits."""
    mode = mode.lower()
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "czsl":
        candidates = sorted(dataset.unseen_ids)
        items = list(dataset.splits["teu"])
    else:
        candidates = sorted(dataset.seen_ids + dataset.unseen_ids)
        items = list(dataset.splits["tes"]) + list(dataset.splits["teu"])
    if not items:
        raise ContractError(f"no test images for mode {mode!r}")
    if not candidates:
        raise ContractError("empty candidate set")

    protos = [dataset.prototype(c) for c in candidates]
    normalize = bool(getattr(getattr(model, "cfg", None), "normalize_prototypes", False))
    proto_matrix = np.stack([p.z for p in protos])
    if normalize:
        proto_matrix = proto_matrix / np.maximum(
            np.linalg.norm(proto_matrix, axis=1, keepdims=True), 1e-12
        )

    if workers is None:
        workers = int(os.environ.get("ZSLVIT_THREADS", "1"))
    images = [dataset.image(key) for key, _ in items]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            all_scores = list(
                pool.map(lambda im: _score_image(model, im, proto_matrix, normalize), images)
            )
    else:
        all_scores = [_score_image(model, im, proto_matrix, normalize) for im in images]

    correct = {}
    total = {}
    confusion = {}
    hits = 0
    for (key, cid), scores in zip(items, all_scores):
        pred = predict(scores, protos, tau, mode)
        total[cid] = total.get(cid, 0) + 1
        if pred == cid:
            correct[cid] = correct.get(cid, 0) + 1
            hits += 1
        confusion[(cid, pred)] = confusion.get((cid, pred), 0) + 1

    per_class = {cid: correct.get(cid, 0) / total[cid] for cid in total}
    counts = {cid: (correct.get(cid, 0), total[cid]) for cid in total}
    roles = {cid: ("seen" if dataset.prototype(cid).seen else "unseen") for cid in total}
    report = EvalReport(
        mode=mode,
        tau=tau,
        per_class_acc=per_class,
        per_class_counts=counts,
        confusion=confusion,
        seed=seed,
        config_hash=config_hash,
        per_sample_acc=hits / len(items),
        roles=roles,
    )
    if mode == "czsl":
        report.acc = float(np.mean([per_class[c] for c in sorted(per_class)]))
    else:
        unseen = [per_class[c] for c in sorted(per_class) if not dataset.prototype(c).seen]
        seen = [per_class[c] for c in sorted(per_class) if dataset.prototype(c).seen]
        if not unseen or not seen:
            raise ContractError("generalized evaluation needs both seen and unseen test classes")
        report.u = float(np.mean(unseen))
        report.s = float(np.mean(seen))
        report.h = harmonic_mean(report.u, report.s)
    return report
