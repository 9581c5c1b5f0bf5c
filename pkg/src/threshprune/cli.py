"""Command-line surface: prune, finetune, eval, export, analyze, sweep."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from . import analysis, artifact, checkpoint, pruning, training
from .autograd import ShapeError
from .data import IdxFormatError, load_idx
from .fileio import atomic_write_text
from .runconfig import ConfigError, load_config, parse_config, serialize_config

log = logging.getLogger("threshprune")

_KNOWN_ERRORS = (
    ConfigError,
    IdxFormatError,
    ShapeError,
    artifact.ArtifactError,
    checkpoint.CheckpointError,
    pruning.DegenerateLayerError,
    FileNotFoundError,
    ValueError,
)


def _save_run(outdir, result, masks=None):
    os.makedirs(outdir, exist_ok=True)
    analysis.write_run_log(os.path.join(outdir, "run.csv"), result.trail)
    analysis.write_layer_log(os.path.join(outdir, "layers.csv"), result.layer_rows)
    atomic_write_text(os.path.join(outdir, "config.txt"), serialize_config(result.config))
    meta = _run_meta(result)
    checkpoint.save_checkpoint(
        os.path.join(outdir, "checkpoint.npz"),
        result.model,
        meta=meta,
        init_weights=result.init_weights,
        masks=masks,
    )


def _run_meta(result):
    last = result.trail[-1] if result.trail else None
    return {
        "config": serialize_config(result.config),
        "epochs_run": len(result.trail),
        "diverged": result.diverged,
        "keep_ratio": last.keep_ratio if last else 1.0,
        "val_top1": last.top1 if last else None,
        "lambda_n": result.lambda_state.n,
    }


def cmd_prune(args):
    cfg = load_config(args.config)
    log.info("pruning %s on %s for %d epochs", cfg.model, cfg.dataset, cfg.prune_epochs)
    result = training.prune_run(cfg)
    _save_run(args.out, result)
    if result.diverged:
        log.error("run diverged; trail up to the last healthy epoch was kept")
        return 1
    last = result.trail[-1]
    log.info(
        "done: keep_ratio=%.4f val_top1=%.4f (trail of %d checkpoints) -> %s",
        last.keep_ratio,
        last.top1,
        len(result.trail),
        args.out,
    )
    return 0


def cmd_finetune(args):
    loaded = checkpoint.load_checkpoint(args.from_ckpt)
    cfg = parse_config(loaded.meta["config"]) if args.config is None else load_config(args.config)
    if args.epochs is not None:
        cfg = replace(cfg, finetune_epochs=args.epochs)
    train, val = training.build_dataset(cfg)
    model = loaded.model
    masks = training.finalize(model)
    res = training.finetune(
        model, masks, train, val, cfg.finetune_epochs, cfg.lr, cfg.batch_size, cfg.seed
    )
    os.makedirs(args.out, exist_ok=True)
    checkpoint.save_checkpoint(
        os.path.join(args.out, "finetuned.npz"),
        model,
        meta={"config": serialize_config(cfg), "val_top1": res.best_top1, "phase": "finetuned"},
        init_weights=loaded.init_weights,
        masks=masks,
    )
    rows = [[e, repr(l), repr(t1), repr(t5)] for e, l, t1, t5 in res.rows]
    analysis.write_csv(
        os.path.join(args.out, "finetune.csv"), ["epoch", "val_loss", "val_top1", "val_top5"], rows
    )
    log.info("finetuned: best val_top1=%.4f -> %s", res.best_top1, args.out)
    return 0


def _dataset_for_eval(data_arg, dtype):
    if os.path.isdir(data_arg):
        candidates = [
            ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
            ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ]
        for images, labels in candidates:
            ipath = os.path.join(data_arg, images)
            lpath = os.path.join(data_arg, labels)
            if os.path.exists(ipath) and os.path.exists(lpath):
                return load_idx(ipath, lpath, split="val", dtype=dtype)
        raise FileNotFoundError(f"no IDX image/label pair found in {data_arg}")
    cfg = load_config(data_arg)
    _, val = training.build_dataset(cfg)
    return val


def cmd_eval(args):
    loaded = checkpoint.load_checkpoint(args.model)
    ds = _dataset_for_eval(args.data, loaded.model.dtype)
    res = training.evaluate(loaded.model, ds)
    print(f"loss = {res.loss!r}")
    print(f"top1 = {res.top1!r}")
    print(f"top5 = {res.top5!r}")
    return 0


def cmd_export(args):
    loaded = checkpoint.load_checkpoint(args.checkpoint)
    if not loaded.model.registry:
        raise artifact.ArtifactError(f"{args.checkpoint}: no pruning state to export")
    training.finalize(loaded.model)  # idempotent when already hard-pruned
    art = artifact.export_sparse(args.out, loaded.model)
    rate = artifact.compression_rate(art)
    log.info(
        "exported %d/%d weights (rate %s ~ %.2fx) -> %s",
        art.kept_weights,
        art.total_weights,
        rate,
        float(rate),
        args.out,
    )
    return 0


def cmd_analyze(args):
    loaded = checkpoint.load_checkpoint(args.checkpoint)
    if args.layer not in loaded.model.registry:
        raise ValueError(
            f"layer {args.layer!r} not in prunable registry {sorted(loaded.model.registry)}"
        )
    if args.layer not in loaded.init_weights:
        raise ValueError(f"{args.checkpoint} carries no initial-weight snapshot for {args.layer!r}")
    p = loaded.model.registry[args.layer]
    cdf_rows, scatter_rows = analysis.analyze_layer(
        p.w.data, loaded.init_weights[args.layer], p.tau_value
    )
    os.makedirs(args.out, exist_ok=True)
    analysis.write_cdf_csv(os.path.join(args.out, f"{args.layer}.cdf.csv"), cdf_rows)
    analysis.write_scatter_csv(os.path.join(args.out, f"{args.layer}.scatter.csv"), scatter_rows)
    log.info("wrote CDF and scatter tables for %s -> %s", args.layer, args.out)
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for mode in modes:
        if mode not in pruning.GRAD_MODES:
            raise ConfigError(f"unknown mode {mode!r} in --modes; expected one of {pruning.GRAD_MODES}")
    results = training.sweep(cfg, modes)
    os.makedirs(args.out, exist_ok=True)
    summary = []
    for mode, entry in results.items():
        subdir = os.path.join(args.out, mode)
        _save_run(subdir, entry.result)
        summary.append(
            [
                mode,
                repr(entry.final_keep_ratio),
                repr(entry.transitional_occupancy),
                repr(entry.best_top1),
            ]
        )
    analysis.write_csv(
        os.path.join(args.out, "summary.csv"),
        ["mode", "final_keep_ratio", "transitional_occupancy", "best_top1"],
        summary,
    )
    log.info("sweep over %s -> %s", ",".join(modes), args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="threshprune",
        description="Unstructured pruning with per-layer learned thresholds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="run the soft-pruning phase from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="runs/prune")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("finetune", help="hard-prune a checkpoint and finetune with frozen masks")
    p.add_argument("--from", dest="from_ckpt", required=True, metavar="CKPT")
    p.add_argument("--config", default=None, help="override the config stored in the checkpoint")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", default="runs/finetune")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True, metavar="FILE")
    p.add_argument("--data", required=True, help="IDX directory or a run-config file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write the sparse CSR artifact for a pruned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("analyze", help="emit CDF/scatter tables for one layer of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", required=True, metavar="ID")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="run one config under several gradient modes")
    p.add_argument("--config", required=True)
    p.add_argument("--modes", default="approx,full_unclamped,l0_in_weight_update")
    p.add_argument("--out", default="runs/sweep")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint():
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
