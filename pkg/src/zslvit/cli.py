"""Command line interface.

Every subcommand that writes an artifact directory drops a manifest.json
recording the exact configuration, and report paths render companion PNG
figures next to the delimited files they summarize.
"""

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from . import data as data_io
from . import plots, reporting
from .data import SynthSpec, generate
from .errors import ConfigError, FormatError, NumericalError, ZslVitError
from .evaluation import evaluate
from .losses import LossWeights, aggregate_set_loss, prediction_loss, set_losses
from .model import ZslVit
from .runconfig import (
    RunManifest,
    StopWatch,
    dataclass_from_kv,
    dataclass_to_kv,
    read_kv,
)
from .training import TrainConfig, read_train_log, train

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _config_from(args, cls, skip=()):
    """File config (if any) overlaid with explicitly given CLI flags."""
    mapping = read_kv(args.config) if getattr(args, "config", None) else {}
    cfg = dataclass_from_kv(cls, mapping)
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    overrides = {}
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _parse_layers(text):
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse layer list {text!r}; expected e.g. '2,4'")


def _parse_float_list(text, flag):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse {flag} value {text!r}")


def _parse_int_list(text, flag):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse {flag} value {text!r}")


def _manifest(args, command, cfg_mapping, seed, inputs, outputs, watch, out_dir):
    RunManifest(
        command=command,
        config=dict(cfg_mapping),
        seed=seed,
        code_version=__version__,
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        wall_clock_s=round(watch.elapsed(), 3),
    ).write(out_dir)


def _add_train_flags(sp):
    sp.add_argument("--config", help="key = value file with TrainConfig fields")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--lr", type=float, dest="learning_rate")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--grad-clip", type=float, dest="grad_clip")
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--kappa", type=float)
    sp.add_argument("--lambda-sr", type=float, dest="lambda_sr")
    sp.add_argument("--lambda-vr", type=float, dest="lambda_vr")
    sp.add_argument("--patch-size", type=int, dest="patch_size")
    sp.add_argument("--embed-dim", type=int, dest="embed_dim")
    sp.add_argument("--num-heads", type=int, dest="num_heads")
    sp.add_argument("--num-layers", type=int, dest="num_layers")
    sp.add_argument("--mlp-ratio", type=float, dest="mlp_ratio")
    sp.add_argument(
        "--set-layers",
        dest="set_layers_text",
        help="comma separated 1-based encoder positions, empty string for none",
    )
    sp.add_argument("--bridge-hidden", type=int, dest="bridge_hidden")
    sp.add_argument("--eval-every", type=int, dest="eval_every")
    sp.add_argument("--eval-tau", type=float, dest="eval_tau")
    sp.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    for flag, dest in (
        ("--cosine-decay", "cosine_decay"),
        ("--l1-sum", "l1_sum"),
        ("--learned-kv", "learned_kv"),
        ("--weighted-keep", "weighted_keep"),
        ("--set-scale-per-head", "set_scale_per_head"),
        ("--normalize-prototypes", "normalize_prototypes"),
    ):
        sp.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None)


def _train_config(args):
    if getattr(args, "set_layers_text", None) is not None:
        args.set_layers = _parse_layers(args.set_layers_text)
    return _config_from(args, TrainConfig)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    watch = StopWatch()
    spec = _config_from(args, SynthSpec)
    ds = generate(spec)
    data_io.save(ds, args.out)
    _manifest(
        args,
        "gen-data",
        dataclass_to_kv(spec),
        spec.seed,
        inputs=[],
        outputs=["attributes.tsv", "splits.tsv", "images/", "spec.txt"],
        watch=watch,
        out_dir=args.out,
    )
    print(
        f"wrote {len(ds.images)} images "
        f"({len(ds.splits['trs'])} train, {len(ds.splits['tes'])} seen test, "
        f"{len(ds.splits['teu'])} unseen test) to {args.out}"
    )
    return 0


def cmd_train(args):
    watch = StopWatch()
    cfg = _train_config(args)
    ds = data_io.load(args.data)
    model = ZslVit(cfg.model_config(ds), seed=cfg.seed)
    state = train(model, ds, cfg, out_dir=args.out, resume_from=args.resume)
    outputs = ["train_log.tsv", "final/", "best/"]
    if state.history:
        plots.plot_training_curves(state.history, os.path.join(args.out, "train_curves.png"))
        outputs.append("train_curves.png")
    _manifest(
        args, "train", dataclass_to_kv(cfg), cfg.seed,
        inputs=[args.data] + ([args.resume] if args.resume else []),
        outputs=outputs, watch=watch, out_dir=args.out,
    )
    if state.history:
        last = state.history[-1]
        print(
            f"epoch {last['epoch']}: total={last['total']:.4f} "
            f"best H={max(state.best_h, 0.0):.4f} (epoch {state.best_epoch})"
        )
    else:
        print("no epochs requested; wrote initial checkpoint")
    return 0


def cmd_eval(args):
    watch = StopWatch()
    ds = data_io.load(args.data)
    model = ZslVit.load(args.model)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    report = evaluate(
        model, ds, mode=args.mode, tau=args.tau, seed=args.seed,
        config_hash=model.cfg.hash(),
    )
    report_path = os.path.join(args.out, "report.txt")
    with open(report_path, "w") as fh:
        fh.write(report.serialize())
    outputs.append("report.txt")
    if args.tau_grid:
        taus = _parse_float_list(args.tau_grid, "--tau-grid")
        if args.mode != "gzsl":
            raise ConfigError("--tau-grid only makes sense with --mode gzsl")
        reports = reporting.tau_sweep(model, ds, taus, seed=args.seed,
                                      config_hash=model.cfg.hash())
        sweep_path = os.path.join(args.out, "tau_sweep.tsv")
        reporting.write_tau_sweep(sweep_path, reports)
        rows = reporting.read_tau_sweep(sweep_path)
        plots.plot_tau_sweep(rows, os.path.join(args.out, "tau_sweep.png"))
        outputs += ["tau_sweep.tsv", "tau_sweep.png"]
    _manifest(
        args, "eval",
        {"mode": args.mode, "tau": args.tau, "tau_grid": args.tau_grid or ""},
        args.seed, inputs=[args.data, args.model], outputs=outputs,
        watch=watch, out_dir=args.out,
    )
    print(report.summary_line())
    return 0


def cmd_ablate(args):
    watch = StopWatch()
    cfg = _train_config(args)
    ds = data_io.load(args.data)
    variants = (
        tuple(v.strip() for v in args.variants.split(",") if v.strip())
        if args.variants
        else reporting.ABLATION_VARIANTS
    )
    seeds = _parse_int_list(args.seeds, "--seeds")
    rows = reporting.run_ablation(
        ds, cfg, variants=variants, seeds=seeds,
        out_dir=args.out if args.keep_runs else None,
    )
    os.makedirs(args.out, exist_ok=True)
    table_path = os.path.join(args.out, "ablation.tsv")
    reporting.write_ablation(table_path, rows)
    summary = reporting.summarize_ablation(rows)
    reporting.write_ablation_summary(os.path.join(args.out, "ablation_summary.tsv"), summary)
    plots.plot_ablation(rows, os.path.join(args.out, "ablation.png"))
    _manifest(
        args, "ablate",
        {**dataclass_to_kv(cfg), "variants": ",".join(variants),
         "seeds": ",".join(str(s) for s in seeds)},
        cfg.seed, inputs=[args.data],
        outputs=["ablation.tsv", "ablation_summary.tsv", "ablation.png"],
        watch=watch, out_dir=args.out,
    )
    for row in summary:
        dh = "" if row["dH_vs_full"] is None else f"  dH={row['dH_vs_full']:+.4f}"
        print(f"{row['variant']:<12} H={row['H']:.4f}{dh}")
    return 0


def cmd_dump_attention(args):
    watch = StopWatch()
    ds = data_io.load(args.data)
    model = ZslVit.load(args.model)
    if args.split not in ds.splits:
        raise ConfigError(f"unknown split {args.split!r}; pick from trs, tes, teu")
    items = ds.splits[args.split][: args.limit]
    if not items:
        raise ConfigError(f"split {args.split!r} holds no images")
    os.makedirs(args.out, exist_ok=True)
    trace_path = os.path.join(args.out, "attention_trace.jsonl")
    count = reporting.dump_attention(model, ds, items, trace_path)
    records = reporting.read_trace(trace_path)
    grid = model.cfg.backbone.grid
    plots.plot_token_masks(records, grid, os.path.join(args.out, "token_masks.png"))
    _manifest(
        args, "dump-attention",
        {"split": args.split, "limit": args.limit}, 0,
        inputs=[args.data, args.model],
        outputs=["attention_trace.jsonl", "token_masks.png"],
        watch=watch, out_dir=args.out,
    )
    print(f"wrote {count} trace records for {len(items)} images to {trace_path}")
    return 0


def cmd_gradcheck(args):
    from .backbone import BackboneConfig
    from .model import ModelConfig

    cfg = ModelConfig(
        backbone=BackboneConfig(
            image_size=16, patch_size=4, channels=1, embed_dim=8,
            num_heads=2, mlp_ratio=2.0, num_layers=3, set_layers=(2,),
        ),
        attr_dim=6, gamma=0.8, kappa=0.75,
    )
    model = ZslVit(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed + 1)
    image = rng.normal(size=(1, 16, 16))
    z = rng.uniform(0.5, 1.0, size=6)
    protos = np.vstack([z, rng.uniform(0.0, 1.0, size=(2, 6))])
    weights = LossWeights()

    def objective():
        res = model.forward(image, z=z, training=True)
        pairs = [set_losses(rec.set_out, z, rec.cls_in) for rec in res.set_records]
        l_set = aggregate_set_loss(pairs, weights, 1, len(pairs))
        l_pre = prediction_loss(res.cls_final, model.w_v2s, protos, 0)
        return ad.add(l_set, l_pre)

    report = ad.grad_check(
        objective, model.parameters(), tol=args.tol, corrupt=args.corrupt
    )
    print(report.summary())
    if not report.passed:
        print("gradient check FAILED", file=sys.stderr)
        return 3
    return 0


def cmd_plot(args):
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    if args.kind == "train":
        plots.plot_training_curves(read_train_log(args.input), args.out)
    elif args.kind == "tau":
        plots.plot_tau_sweep(reporting.read_tau_sweep(args.input), args.out)
    elif args.kind == "ablation":
        plots.plot_ablation(reporting.read_ablation(args.input), args.out)
    elif args.kind == "masks":
        if args.grid is None:
            raise ConfigError("--grid is required for mask plots")
        plots.plot_token_masks(reporting.read_trace(args.input), args.grid, args.out)
    else:
        raise ConfigError(f"unknown plot kind {args.kind!r}")
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="zslvit",
        description="Semantic-guided vision transformer for zero-shot learning.",
    )
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="render a synthetic attribute dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="key = value file with dataset fields")
    sp.add_argument("--num-seen", type=int, dest="num_seen")
    sp.add_argument("--num-unseen", type=int, dest="num_unseen")
    sp.add_argument("--attr-dim", type=int, dest="attr_dim")
    sp.add_argument("--train-per-seen", type=int, dest="train_per_seen")
    sp.add_argument("--test-per-seen", type=int, dest="test_per_seen")
    sp.add_argument("--test-per-unseen", type=int, dest="test_per_unseen")
    sp.add_argument("--image-size", type=int, dest="image_size")
    sp.add_argument("--channels", type=int)
    sp.add_argument("--grid", type=int)
    sp.add_argument("--signal-strength", type=float, dest="signal_strength")
    sp.add_argument("--background-noise-std", type=float, dest="background_noise_std")
    sp.add_argument("--attr-patch-fraction", type=float, dest="attr_patch_fraction")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="fit a model on a dataset directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint directory with optimizer state")
    _add_train_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on the test splits")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("czsl", "gzsl"), default="gzsl")
    sp.add_argument("--tau", type=float, default=0.4)
    sp.add_argument("--tau-grid", dest="tau_grid", help="comma separated taus to sweep")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train single-knob variants over seeds")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variants", help="comma separated subset of "
                    + ",".join(reporting.ABLATION_VARIANTS))
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--keep-runs", action="store_true", dest="keep_runs",
                    help="save per-run logs and checkpoints under --out")
    _add_train_flags(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("dump-attention", help="trace token selection on test images")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="tes")
    sp.add_argument("--limit", type=int, default=4)
    sp.set_defaults(func=cmd_dump_attention)

    sp = sub.add_parser("gradcheck", help="finite-difference audit of the gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--corrupt", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("plot", help="re-render a figure from a report file")
    sp.add_argument("--kind", required=True, choices=("train", "tau", "ablation", "masks"))
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--grid", type=int, help="patches per side (mask plots)")
    sp.set_defaults(func=cmd_plot)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING
    if args.verbose == 1:
        level = logging.INFO
    elif args.verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3
    except ZslVitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
