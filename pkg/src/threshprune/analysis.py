"""CSV run logs and figure-data emitters (weight-distribution CDFs,
original-vs-pruned scatter tables, per-layer weight-energy traces)."""

from __future__ import annotations

import csv
import io

import numpy as np

from .fileio import atomic_write_text

RUN_LOG_HEADER = [
    "epoch",
    "lambda",
    "keep_ratio",
    "soft_l0_total",
    "train_loss",
    "train_top1",
    "val_loss",
    "val_top1",
    "val_top5",
]

LAYER_LOG_HEADER = ["epoch", "layer", "tau", "temp", "layer_keep_ratio", "mean_w_sq"]


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())



def run_log_rows(trail):
    """Trail checkpoints as run-log CSV rows (floats rendered via repr)."""
    rows = []
    for c in trail:
        rows.append(
            [
                c.epoch,
                repr(c.lam),
                repr(c.keep_ratio),
                repr(c.soft_l0_total),
                repr(c.train_loss),
                repr(c.train_top1),
                repr(c.val_loss),
                repr(c.top1),
                repr(c.top5),
            ]
        )
    return rows


def write_run_log(path, trail):
    write_csv(path, RUN_LOG_HEADER, run_log_rows(trail))


def write_layer_log(path, layer_rows):
    rows = [
        [r.epoch, r.layer, repr(r.tau), repr(r.temp), repr(r.layer_keep_ratio), repr(r.mean_w_sq)]
        for r in layer_rows
    ]
    write_csv(path, LAYER_LOG_HEADER, rows)


def read_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        return header, list(reader)


# ---------------------------------------------------------------------------
# layer analyses


def analyze_layer(pruned_weights, original_weights, tau):
    """CDF and scatter tables of squared weights before/after pruning.

    Returns (cdf_rows, scatter_rows). CDF rows are
    (kind, w_sq, cdf) with kind in {original, pruned}; scatter rows pair
    each weight's original and pruned squared value in flat order. Both
    tables carry one ``threshold`` marker row holding tau.
    """
    orig = np.asarray(original_weights)
    pruned = np.asarray(pruned_weights)
    if orig.shape != pruned.shape:
        raise ValueError(f"layer shapes differ: {orig.shape} vs {pruned.shape}")
    o2 = (orig * orig).ravel()
    p2 = (pruned * pruned).ravel()
    cdf_rows = [("threshold", repr(float(tau)), "")]
    for kind, w2 in (("original", o2), ("pruned", p2)):
        order = np.sort(w2)
        n = order.size
        for i, value in enumerate(order):
            cdf_rows.append((kind, repr(float(value)), repr((i + 1) / n)))
    scatter_rows = [("threshold", repr(float(tau)), repr(float(tau)))]
    scatter_rows.extend(
        ("weight", repr(float(a)), repr(float(b))) for a, b in zip(o2, p2)
    )
    return cdf_rows, scatter_rows


def write_cdf_csv(path, cdf_rows):
    write_csv(path, ["kind", "w_sq", "cdf"], cdf_rows)


def write_scatter_csv(path, scatter_rows):
    write_csv(path, ["kind", "w_sq_original", "w_sq_pruned"], scatter_rows)


def threshold_crossings(original_weights, pruned_weights, tau):
    """Count weights that changed sides of the threshold during pruning.

    Returns (kept_though_initially_small, pruned_though_initially_large).
    """
    o2 = np.asarray(original_weights) ** 2
    p2 = np.asarray(pruned_weights) ** 2
    kept_small = int(((o2 <= tau) & (p2 > tau)).sum())
    pruned_large = int(((o2 > tau) & (p2 <= tau)).sum())
    return kept_small, pruned_large
