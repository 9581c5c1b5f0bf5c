"""Dense model checkpoints.

A checkpoint is a numpy .npz archive with a JSON metadata string plus one
array per parameter, batchnorm buffer, threshold, mask and initial-weight
snapshot. Loading rebuilds the zoo model and restores the registry, so the
layer-to-parameter mapping survives round trips.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass

import numpy as np

from . import layers as nn
from .fileio import atomic_write_bytes


class CheckpointError(ValueError):
    pass


@dataclass
class LoadedCheckpoint:
    model: nn.Model
    meta: dict
    init_weights: dict
    masks: dict

    @property
    def registry(self):
        return self.model.registry


def save_checkpoint(path, model, meta=None, init_weights=None, masks=None):
    """Write the model (and pruning state, when attached) atomically."""
    meta = dict(meta or {})
    meta.setdefault("model", model.name)
    meta.setdefault("input_shape", list(model.input_shape))
    meta.setdefault("classes", model.classes)
    meta.setdefault("dtype", model.dtype.name)
    arrays = {}
    for name, tensor in model.parameters():
        arrays[f"param/{name}"] = tensor.data
    for name, buf in model.named_buffers():
        arrays[f"buffer/{name}"] = buf
    registry_meta = {}
    for lname, p in model.registry.items():
        arrays[f"tau/{lname}"] = p.tau.data
        registry_meta[lname] = {"temp": p.temp, "mode": p.mode, "grad_variant": p.grad_variant}
        if p.mask is not None:
            arrays[f"mask/{lname}"] = p.mask.astype(np.uint8)
    meta["registry"] = registry_meta
    for lname, w in (init_weights or {}).items():
        arrays[f"init/{lname}"] = w
    for lname, m in (masks or {}).items():
        arrays[f"mask/{lname}"] = m.astype(np.uint8)
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path):
    """Rebuild the model from a checkpoint file."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with np.load(path) as archive:
        arrays = {key: archive[key] for key in archive.files}
    try:
        meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: missing or invalid metadata") from exc
    model = nn.build(
        meta["model"],
        tuple(meta["input_shape"]),
        classes=meta["classes"],
        seed=0,
        dtype=np.dtype(meta["dtype"]),
    )
    params = dict(model.parameters())
    buffers = dict(model.named_buffers())
    masks = {}
    init_weights = {}
    taus = {}
    for key, arr in arrays.items():
        kind, _, name = key.partition("/")
        if kind == "param":
            if name not in params:
                raise CheckpointError(f"{path}: unknown parameter {name!r}")
            params[name].data[...] = arr
        elif kind == "buffer":
            buffers[name][...] = arr
        elif kind == "tau":
            taus[name] = arr
        elif kind == "mask":
            masks[name] = arr.astype(bool)
        elif kind == "init":
            init_weights[name] = arr
        else:
            raise CheckpointError(f"{path}: unknown array kind {kind!r}")
    registry_meta = meta.get("registry", {})
    if registry_meta:
        temps = {lname: rec["temp"] for lname, rec in registry_meta.items()}
        exempt = tuple(
            lname for lname, _ in model.prunable_layers() if lname not in registry_meta
        )
        variant = next(iter(registry_meta.values()))["grad_variant"]
        model.attach_pruning(1.0, exempt=exempt, grad_variant=variant, temps=temps)
        for lname, p in model.registry.items():
            p.tau.data[...] = taus[lname]
            p.mode = registry_meta[lname]["mode"]
            if lname in masks:
                p.mask = masks[lname]
    return LoadedCheckpoint(model=model, meta=meta, init_weights=init_weights, masks=masks)
