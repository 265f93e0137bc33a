"""Report artifacts: attention traces, calibration sweeps, ablation grids."""

import dataclasses
import json
import logging
import os

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, FormatError
from .evaluation import evaluate
from .model import ZslVit
from .training import train

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# token-selection traces
# ---------------------------------------------------------------------------

def trace_image(model, image):
    """One dict per semantic layer describing the token selection."""
    with ad.no_grad():
        res = model.forward(image, training=False, collect_trace=True)
    records = []
    for tr in res.trace:
        records.append(
            {
                "layer": tr.layer,
                "scores": [float(s) for s in tr.scores],
                "kept": [int(i) for i in tr.kept],
                "dropped": [int(i) for i in tr.dropped],
                "provenance_in": list(tr.provenance_in),
                "provenance_out": list(tr.provenance_out),
            }
        )
    return records


def dump_attention(model, dataset, items, path):
    """JSONL trace, one line per (image, semantic layer)."""
    count = 0
    with open(path, "w") as fh:
        for key, cid in items:
            for rec in trace_image(model, dataset.image(key)):
                rec = {"image": key, "class_id": cid, **rec}
                fh.write(json.dumps(rec) + "\n")
                count += 1
    return count


def read_trace(path):
    records = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{ln}: bad trace record: {e}")
    return records


def kept_patch_mask(record, num_patches):
    """Boolean original-grid mask of patches surviving a selection step."""
    mask = np.zeros(num_patches, dtype=bool)
    prov = record["provenance_in"]
    for i in record["kept"]:
        orig = prov[i]
        if orig >= 0:
            mask[orig] = True
    return mask


# ---------------------------------------------------------------------------
# calibration sweep
# ---------------------------------------------------------------------------

def tau_sweep(model, dataset, taus, seed=0, config_hash="-"):
    reports = []
    for tau in taus:
        reports.append(
            evaluate(model, dataset, mode="gzsl", tau=tau, seed=seed, config_hash=config_hash)
        )
    return reports


def write_tau_sweep(path, reports):
    with open(path, "w") as fh:
        fh.write("tau\tU\tS\tH\n")
        for rep in reports:
            fh.write(f"{rep.tau!r}\t{rep.u:.6f}\t{rep.s:.6f}\t{rep.h:.6f}\n")


def read_tau_sweep(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != "tau\tU\tS\tH":
            raise FormatError(f"{path}: unexpected sweep header {header!r}")
        for ln, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{ln}: expected 4 columns")
            rows.append({k: float(v) for k, v in zip(("tau", "U", "S", "H"), parts)})
    return rows


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_vr", "no_sr", "no_enhance", "no_prune")


def variant_config(base, variant):
    """Single-knob departures from the full objective/architecture."""
    if variant == "full":
        return dataclasses.replace(base)
    if variant == "no_vr":
        return dataclasses.replace(base, lambda_vr=0.0)
    if variant == "no_sr":
        return dataclasses.replace(base, lambda_sr=0.0)
    if variant == "no_enhance":
        return dataclasses.replace(base, gamma=1.0)
    if variant == "no_prune":
        return dataclasses.replace(base, kappa=1.0)
    raise ConfigError(f"unknown ablation variant {variant!r}; pick from {ABLATION_VARIANTS}")


def run_ablation(dataset, base_cfg, variants=ABLATION_VARIANTS, seeds=(0, 1, 2), out_dir=None):
    """Train each variant per seed, score once, return one row per run."""
    if not variants:
        raise ConfigError("ablation needs at least one variant")
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = dataclasses.replace(variant_config(base_cfg, variant), seed=seed)
            model = ZslVit(cfg.model_config(dataset), seed=seed)
            run_dir = None
            if out_dir is not None:
                run_dir = os.path.join(out_dir, f"{variant}_seed{seed}")
            train(model, dataset, cfg, out_dir=run_dir)
            gzsl = evaluate(model, dataset, mode="gzsl", tau=cfg.eval_tau, seed=seed)
            czsl = evaluate(model, dataset, mode="czsl", tau=0.0, seed=seed)
            rows.append(
                {
                    "variant": variant,
                    "seed": seed,
                    "U": gzsl.u,
                    "S": gzsl.s,
                    "H": gzsl.h,
                    "czsl_acc": czsl.acc,
                }
            )
            log.info(
                "ablation %s seed %d: H=%.3f czsl=%.3f", variant, seed, gzsl.h, czsl.acc
            )
    return rows


ABLATION_COLUMNS = ("variant", "seed", "U", "S", "H", "czsl_acc")


def write_ablation(path, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(ABLATION_COLUMNS) + "\n")
        for row in rows:
            fh.write(
                f"{row['variant']}\t{row['seed']}\t{row['U']:.6f}\t{row['S']:.6f}"
                f"\t{row['H']:.6f}\t{row['czsl_acc']:.6f}\n"
            )


def read_ablation(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != ABLATION_COLUMNS:
            raise FormatError(f"{path}: unexpected ablation header {header}")
        for ln, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(ABLATION_COLUMNS):
                raise FormatError(f"{path}:{ln}: expected {len(ABLATION_COLUMNS)} columns")
            rows.append(
                {
                    "variant": parts[0],
                    "seed": int(parts[1]),
                    "U": float(parts[2]),
                    "S": float(parts[3]),
                    "H": float(parts[4]),
                    "czsl_acc": float(parts[5]),
                }
            )
    return rows


def summarize_ablation(rows):
    """Mean metrics per variant plus the H gap to the full model."""
    if not rows:
        raise ContractError("no ablation rows to summarize")
    by_variant = {}
    for row in rows:
        by_variant.setdefault(row["variant"], []).append(row)
    summary = []
    full_h = None
    if "full" in by_variant:
        full_h = float(np.mean([r["H"] for r in by_variant["full"]]))
    for variant, group in by_variant.items():
        mean_h = float(np.mean([r["H"] for r in group]))
        summary.append(
            {
                "variant": variant,
                "runs": len(group),
                "U": float(np.mean([r["U"] for r in group])),
                "S": float(np.mean([r["S"] for r in group])),
                "H": mean_h,
                "czsl_acc": float(np.mean([r["czsl_acc"] for r in group])),
                "dH_vs_full": None if full_h is None else mean_h - full_h,
            }
        )
    summary.sort(key=lambda r: -r["H"])
    return summary


def write_ablation_summary(path, summary):
    with open(path, "w") as fh:
        fh.write("variant\truns\tU\tS\tH\tczsl_acc\tdH_vs_full\n")
        for row in summary:
            dh = "" if row["dH_vs_full"] is None else f"{row['dH_vs_full']:.6f}"
            fh.write(
                f"{row['variant']}\t{row['runs']}\t{row['U']:.6f}\t{row['S']:.6f}"
                f"\t{row['H']:.6f}\t{row['czsl_acc']:.6f}\t{dh}\n"
            )
