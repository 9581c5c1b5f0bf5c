"""Three-phase pruning pipeline: soft-prune training with learned
thresholds, hard-prune finalization, and mask-frozen finetuning.

Every run is single-threaded and bit-deterministic for a fixed config:
batch order comes from per-epoch seeded generators and all reductions are
numpy's fixed-order kernels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from . import data as datamod
from . import layers as nn
from . import pruning
from .autograd import Tensor
from .runconfig import RunConfig


@dataclass
class TrailCheckpoint:
    """One row of the per-epoch trail of progressively sparser models."""

    epoch: int
    keep_ratio: float
    train_loss: float
    train_top1: float
    val_loss: float
    top1: float
    top5: float
    lam: float
    soft_l0_total: float
    per_layer: list  # (layer, tau, temp, layer_keep_ratio)


@dataclass
class LayerLogRow:
    epoch: int
    layer: str
    tau: float
    temp: float
    layer_keep_ratio: float
    mean_w_sq: float


@dataclass
class EvalResult:
    loss: float
    top1: float
    top5: float


@dataclass
class PruneResult:
    config: RunConfig
    model: nn.Model
    trail: list
    layer_rows: list
    lambda_state: pruning.LambdaState
    init_weights: dict
    diverged: bool = False

    @property
    def registry(self):
        return self.model.registry


@dataclass
class FinetuneResult:
    model: nn.Model
    masks: dict
    rows: list  # (epoch, val_loss, val_top1, val_top5)
    best_top1: float


class SGDMomentum:
    """Plain SGD with momentum 0.9, no dampening, no weight decay."""

    def __init__(self, lr, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self._buf = {}

    def update(self, tensor, grad):
        buf = self._buf.get(id(tensor))
        if buf is None:
            buf = self._buf[id(tensor)] = np.zeros_like(tensor.data)
        buf *= self.momentum
        buf += grad
        tensor.data -= self.lr * buf


_PHASE_IDS = {"pretrain": 1, "prune": 2, "finetune": 3}


def _epoch_rng(seed, phase, epoch):
    # hash() is process-randomized for strings, so phases get fixed ids.
    return np.random.default_rng(np.random.SeedSequence((seed, _PHASE_IDS[phase], epoch)))


def _batches(n, batch_size, rng=None):
    idx = np.arange(n)
    if rng is not None:
        rng.shuffle(idx)
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def build_dataset(cfg):
    """(train, val) datasets for a config."""
    if cfg.dataset == "blobs":
        return datamod.synthetic_blobs(
            cfg.seed,
            classes=cfg.classes,
            dim=cfg.dim,
            n_per_class=cfg.n_per_class,
            noise=cfg.noise,
            dtype=cfg.numpy_dtype(),
        )
    train_images = os.path.join(cfg.data_dir, "train-images-idx3-ubyte")
    train_labels = os.path.join(cfg.data_dir, "train-labels-idx1-ubyte")
    val_images = os.path.join(cfg.data_dir, "t10k-images-idx3-ubyte")
    val_labels = os.path.join(cfg.data_dir, "t10k-labels-idx1-ubyte")
    train = datamod.load_idx(train_images, train_labels, split="train", dtype=cfg.numpy_dtype())
    val = datamod.load_idx(
        val_images,
        val_labels,
        mean=train.meta["mean"],
        std=train.meta["std"],
        split="val",
        dtype=cfg.numpy_dtype(),
    )
    if cfg.n_train and cfg.n_train < len(train):
        train = datamod.Dataset(
            train.inputs[: cfg.n_train],
            train.labels[: cfg.n_train],
            train.classes,
            "train",
            dict(train.meta),
        )
    return train, val


def build_model(cfg):
    if cfg.model == "mlp3":
        input_shape = (cfg.dim,) if cfg.dataset == "blobs" else (784,)
    elif cfg.dataset == "blobs":
        if not cfg.image_shape:
            raise ValueError("conv models on blob data need image_shape = CxHxW")
        if int(np.prod(cfg.image_shape)) != cfg.dim:
            raise ValueError(f"image_shape {cfg.image_shape} does not match dim {cfg.dim}")
        input_shape = cfg.image_shape
    else:
        input_shape = cfg.image_shape or (1, 28, 28)
    return nn.build(cfg.model, input_shape, classes=cfg.classes, seed=cfg.seed, dtype=cfg.numpy_dtype())


def evaluate(model, dataset, batch_size=256):
    """Deterministic fixed-order evaluation: (loss, top1, top-k) with k = min(5, classes)."""
    k = min(5, dataset.classes)
    loss_sum = 0.0
    top1 = 0
    topk = 0
    with ag.no_grad():
        for idx in _batches(len(dataset), batch_size):
            logits = model.forward(Tensor(dataset.inputs[idx]), training=False)
            labels = dataset.labels[idx]
            loss = ag.softmax_cross_entropy(logits, labels)
            loss_sum += loss.item() * len(idx)
            z = logits.data
            top1 += int((z.argmax(axis=1) == labels).sum())
            order = np.argsort(-z, axis=1, kind="stable")[:, :k]
            topk += int((order == labels[:, None]).any(axis=1).sum())
    n = len(dataset)
    return EvalResult(loss_sum / n, top1 / n, topk / n)


def _batch_top1(logits, labels):
    return int((logits.argmax(axis=1) == labels).sum())


def keep_stats(registry):
    """(keep_ratio, per-layer rows) recomputed from the live weights."""
    per_layer = []
    kept_total = 0
    size_total = 0
    for lname, p in registry.items():
        kept = p.kept_count()
        per_layer.append((lname, p.tau_value, p.temp, kept / p.w.size))
        kept_total += kept
        size_total += p.w.size
    ratio = kept_total / size_total if size_total else 1.0
    return ratio, per_layer


def _plain_epoch(model, train, opt, batch_size, rng):
    """One epoch of unregularized cross-entropy training on raw parameters."""
    loss_sum = 0.0
    top1 = 0
    for idx in _batches(len(train), batch_size, rng):
        ag.reset_tape()
        model.zero_grad()
        logits = model.forward(Tensor(train.inputs[idx]), training=True)
        loss = ag.softmax_cross_entropy(logits, train.labels[idx])
        ag.backward(loss)
        for _, t in model.parameters():
            opt.update(t, t.grad)
        loss_sum += loss.item() * len(idx)
        top1 += _batch_top1(logits.data, train.labels[idx])
    n = len(train)
    return loss_sum / n, top1 / n


def prune_run(cfg, train=None, val=None, model=None):
    """Run the full soft-pruning phase and emit the checkpoint trail.

    Weights update through the selected gradient mode; the raw L0 pull is
    excluded from weight updates unless the mode says otherwise. Thresholds
    follow plain gradient descent on the regularized objective. Stops at the
    epoch budget, at the target keep ratio, or on divergence (NaN loss), in
    which case the trail up to the last healthy epoch is returned.
    """
    cfg.validate()
    hp = cfg.hyper_params()
    if train is None or val is None:
        train, val = build_dataset(cfg)
    if model is None:
        model = build_model(cfg)

    opt = SGDMomentum(cfg.lr)
    for epoch in range(cfg.pretrain_epochs):
        _plain_epoch(model, train, opt, cfg.batch_size, _epoch_rng(cfg.seed, "pretrain", epoch))

    variant = "full" if hp.grad_mode in ("full_clamped", "full_unclamped") else "approx"
    registry = model.attach_pruning(
        hp.temp_scale, tau_init=cfg.tau_init, exempt=cfg.exempt_layers, grad_variant=variant
    )
    init_weights = {lname: p.w.data.copy() for lname, p in registry.items()}
    state = pruning.init_lambda_state(hp)
    eta_tau = cfg.lr * hp.threshold_lr_ratio
    registry_ids = {id(p.w) for p in registry.values()}

    trail = []
    layer_rows = []
    diverged = False
    for epoch in range(1, cfg.prune_epochs + 1):
        if cfg.recompute_temperature:
            for p in registry.values():
                p.temp = pruning.layer_temperature(p.w.data, hp.temp_scale)
        rng = _epoch_rng(cfg.seed, "prune", epoch)
        loss_sum = 0.0
        top1 = 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            ag.reset_tape()
            model.zero_grad()
            logits = model.forward(Tensor(train.inputs[idx]), training=True)
            loss = ag.softmax_cross_entropy(logits, train.labels[idx])
            batch_loss = loss.item()
            if not np.isfinite(batch_loss):
                diverged = True
                break
            ag.backward(loss)
            lam = state.lam
            l0_lam = lam if cfg.regularizer == "soft_l0" else 0.0
            for p in registry.values():
                dv = p.last_v.grad
                g = pruning.weight_grad(
                    p, dv, l0_lam, hp.grad_mode, eta=cfg.lr, kappa=hp.clamp_kappa
                )
                if cfg.regularizer == "l2":
                    g = g + 2.0 * lam * p.w.data
                elif cfg.regularizer == "l1":
                    g = g + lam * np.sign(p.w.data)
                opt.update(p.w, g)
                pruning.threshold_step(p, dv, l0_lam, eta_tau)
            for _, t in model.parameters():
                if id(t) not in registry_ids:
                    opt.update(t, t.grad)
            loss_sum += batch_loss * len(idx)
            top1 += _batch_top1(logits.data, train.labels[idx])
        if diverged:
            break
        n = len(train)
        val_res = evaluate(model, val)
        ratio, per_layer = keep_stats(registry)
        trail.append(
            TrailCheckpoint(
                epoch=epoch,
                keep_ratio=ratio,
                train_loss=loss_sum / n,
                train_top1=top1 / n,
                val_loss=val_res.loss,
                top1=val_res.top1,
                top5=val_res.top5,
                lam=state.lam,
                soft_l0_total=pruning.soft_l0_total(registry),
                per_layer=per_layer,
            )
        )
        for lname, tau, temp, lkeep in per_layer:
            w = registry[lname].w.data
            layer_rows.append(
                LayerLogRow(epoch, lname, tau, temp, lkeep, float((w * w).mean()))
            )
        state = pruning.lambda_step(state, hp, ratio)
        if cfg.target_keep_ratio and ratio <= cfg.target_keep_ratio:
            break
    return PruneResult(
        config=cfg,
        model=model,
        trail=trail,
        layer_rows=layer_rows,
        lambda_state=state,
        init_weights=init_weights,
        diverged=diverged,
    )


def best_checkpoint(trail, target_keep_ratio=0.0):
    """Highest-top1 trail row among those meeting the target keep ratio.

    Falls back to the overall best when no row meets the target.
    """
    if not trail:
        raise ValueError("empty trail")
    eligible = [c for c in trail if not target_keep_ratio or c.keep_ratio <= target_keep_ratio]
    pool = eligible or trail
    return max(pool, key=lambda c: (c.top1, -c.epoch))


def finalize(model):
    """Hard-prune in place using the learned thresholds.

    Every weight with w^2 <= tau becomes exact zero; the binary keep masks
    are stored on the registry and returned. Idempotent.
    """
    masks = {}
    for lname, p in model.registry.items():
        mask = pruning.hard_keep_mask(p.w.data, p.tau_value)
        p.w.data *= mask
        p.mask = mask
        p.mode = "hard"
        masks[lname] = mask
    return masks


def finetune(model, masks, train, val, epochs, lr, batch_size=64, seed=0):
    """Mask-frozen cross-entropy finetuning of a hard-pruned model.

    Masked weights stay exactly zero (their gradient is zeroed by the mask
    multiply in the forward pass). No regularization, thresholds frozen.
    Returns the best-validation state seen, including the starting point.
    """
    for lname, p in model.registry.items():
        p.mode = "hard"
        p.mask = masks[lname]
    opt = SGDMomentum(lr)
    rows = []
    start = evaluate(model, val)
    best = (start.top1, _snapshot(model))
    rows.append((0, start.loss, start.top1, start.top5))
    for epoch in range(1, epochs + 1):
        _plain_epoch(model, train, opt, batch_size, _epoch_rng(seed, "finetune", epoch))
        res = evaluate(model, val)
        rows.append((epoch, res.loss, res.top1, res.top5))
        if res.top1 > best[0]:
            best = (res.top1, _snapshot(model))
    _restore(model, best[1])
    return FinetuneResult(model=model, masks=masks, rows=rows, best_top1=best[0])


def _snapshot(model):
    params = {name: t.data.copy() for name, t in model.parameters()}
    buffers = {name: arr.copy() for name, arr in model.named_buffers()}
    return params, buffers


def _restore(model, snap):
    params, buffers = snap
    for name, t in model.parameters():
        t.data[...] = params[name]
    for name, arr in model.named_buffers():
        arr[...] = buffers[name]


# ---------------------------------------------------------------------------
# gradient-mode sweeps (the premature-termination comparison)


@dataclass
class SweepEntry:
    mode: str
    result: PruneResult
    final_keep_ratio: float
    transitional_occupancy: float
    best_top1: float


def sweep(cfg, modes):
    """Run the same config once per gradient mode and collect stall metrics."""
    out = {}
    for mode in modes:
        if mode not in pruning.GRAD_MODES:
            raise ValueError(f"unknown sweep mode {mode!r}; expected one of {pruning.GRAD_MODES}")
        mode_cfg = replace(cfg, grad_mode=mode)
        res = prune_run(mode_cfg)
        ratio, _ = keep_stats(res.registry)
        out[mode] = SweepEntry(
            mode=mode,
            result=res,
            final_keep_ratio=ratio,
            transitional_occupancy=pruning.transitional_occupancy(res.registry),
            best_top1=max((c.top1 for c in res.trail), default=0.0),
        )
    return out
