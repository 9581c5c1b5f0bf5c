"""Portable sparse-model artifact.

Layout: a UTF-8 ``key = value`` manifest, a ``---`` separator line, then
per-layer compressed-sparse-row payloads in manifest order. Each payload is
row pointers (u64 LE, rows+1), column indices (u32 LE, nnz) and values
(f32 LE, nnz). Conv kernels are flattened to (out_channels) x (in*kh*kw)
matrices; linear weights are stored with rows = output features. Values are
f32 regardless of training precision; the manifest records the source.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .fileio import atomic_write_bytes

FORMAT_VERSION = 1
_SEPARATOR = b"---\n"


class ArtifactError(ValueError):
    pass


@dataclass
class LayerRecord:
    layer_id: str
    shape: tuple  # original weight tensor shape
    rows: int
    cols: int
    tau: float
    kept: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def dense(self):
        """Dense (rows, cols) f32 reconstruction of the CSR payload."""
        out = np.zeros((self.rows, self.cols), dtype=np.float32)
        for r in range(self.rows):
            lo, hi = self.row_ptr[r], self.row_ptr[r + 1]
            out[r, self.col_idx[lo:hi]] = self.values[lo:hi]
        return out


@dataclass
class SparseArtifact:
    manifest: dict
    layers: list  # LayerRecord in manifest order

    @property
    def total_weights(self):
        return int(self.manifest["total_weights"])

    @property
    def kept_weights(self):
        return int(self.manifest["kept_weights"])


def _as_matrix(weight):
    """Weight tensor as a (out, in*) 2-D matrix with rows = output channels."""
    w = np.asarray(weight)
    if w.ndim == 2:  # linear weights are stored (in, out)
        return w.T
    if w.ndim == 4:  # conv kernels are stored (out, in, kh, kw)
        return w.reshape(w.shape[0], -1)
    raise ArtifactError(f"cannot serialize weight of rank {w.ndim}")


def _to_csr(matrix):
    rows, _ = matrix.shape
    row_ptr = np.zeros(rows + 1, dtype=np.uint64)
    col_parts = []
    val_parts = []
    for r in range(rows):
        nz = np.nonzero(matrix[r])[0]
        col_parts.append(nz.astype(np.uint32))
        val_parts.append(matrix[r, nz].astype(np.float32))
        row_ptr[r + 1] = row_ptr[r] + nz.size
    col_idx = np.concatenate(col_parts) if col_parts else np.zeros(0, np.uint32)
    values = np.concatenate(val_parts) if val_parts else np.zeros(0, np.float32)
    return row_ptr, col_idx, values


def export_sparse(path, model, extra_manifest=None):
    """Serialize the hard-pruned prunable weights of ``model`` to ``path``."""
    registry = model.registry
    if not registry:
        raise ArtifactError("model has no prunable registry attached")
    records = []
    total = 0
    kept = 0
    for lname, p in registry.items():
        matrix = _as_matrix(p.w.data).astype(np.float32)
        row_ptr, col_idx, values = _to_csr(matrix)
        total += p.w.size
        kept += values.size
        records.append(
            LayerRecord(
                layer_id=lname,
                shape=tuple(p.w.data.shape),
                rows=matrix.shape[0],
                cols=matrix.shape[1],
                tau=p.tau_value,
                kept=values.size,
                row_ptr=row_ptr,
                col_idx=col_idx,
                values=values,
            )
        )
    if kept == 0:
        raise ArtifactError("no weights survive pruning; refusing to export an empty artifact")
    rate = Fraction(total, kept)
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"model = {model.name}",
        f"source_dtype = {model.dtype.name}",
        f"total_weights = {total}",
        f"kept_weights = {kept}",
        f"compression_rate = {float(rate)!r}",
        f"compression_rate_exact = {rate.numerator}/{rate.denominator}",
        f"layers = {len(records)}",
    ]
    for key, value in (extra_manifest or {}).items():
        lines.append(f"{key} = {value}")
    chunks = []
    for i, rec in enumerate(records):
        lines.extend(
            [
                f"layer.{i}.id = {rec.layer_id}",
                f"layer.{i}.shape = {'x'.join(str(s) for s in rec.shape)}",
                f"layer.{i}.rows = {rec.rows}",
                f"layer.{i}.cols = {rec.cols}",
                f"layer.{i}.tau = {rec.tau!r}",
                f"layer.{i}.kept = {rec.kept}",
            ]
        )
        chunks.append(rec.row_ptr.astype("<u8").tobytes())
        chunks.append(rec.col_idx.astype("<u4").tobytes())
        chunks.append(rec.values.astype("<f4").tobytes())
    payload = "\n".join(lines).encode("utf-8") + b"\n" + _SEPARATOR + b"".join(chunks)
    atomic_write_bytes(path, payload)
    return SparseArtifact(manifest=_parse_manifest(lines), layers=records)


def _parse_manifest(lines):
    manifest = {}
    for line in lines:
        key, _, value = line.partition("=")
        manifest[key.strip()] = value.strip()
    return manifest


def load_sparse(path):
    """Parse an artifact file and validate manifest counts against payloads."""
    with open(path, "rb") as f:
        blob = f.read()
    sep = blob.find(_SEPARATOR)
    if sep < 0:
        raise ArtifactError(f"{path}: missing manifest separator")
    manifest = _parse_manifest(blob[:sep].decode("utf-8").splitlines())
    if manifest.get("format_version") != str(FORMAT_VERSION):
        raise ArtifactError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    body = memoryview(blob)[sep + len(_SEPARATOR) :]
    offset = 0
    layers = []
    kept_sum = 0
    for i in range(int(manifest["layers"])):
        rows = int(manifest[f"layer.{i}.rows"])
        cols = int(manifest[f"layer.{i}.cols"])
        kept = int(manifest[f"layer.{i}.kept"])
        shape = tuple(int(s) for s in manifest[f"layer.{i}.shape"].split("x"))
        need = 8 * (rows + 1) + 4 * kept + 4 * kept
        if offset + need > len(body):
            raise ArtifactError(f"{path}: truncated payload for layer {i}")
        row_ptr = np.frombuffer(body, dtype="<u8", count=rows + 1, offset=offset)
        offset += 8 * (rows + 1)
        col_idx = np.frombuffer(body, dtype="<u4", count=kept, offset=offset)
        offset += 4 * kept
        values = np.frombuffer(body, dtype="<f4", count=kept, offset=offset)
        offset += 4 * kept
        if int(row_ptr[-1]) != kept:
            raise ArtifactError(
                f"{path}: layer {i} manifest kept={kept} but row pointers end at {int(row_ptr[-1])}"
            )
        kept_sum += kept
        layers.append(
            LayerRecord(
                layer_id=manifest[f"layer.{i}.id"],
                shape=shape,
                rows=rows,
                cols=cols,
                tau=float(manifest[f"layer.{i}.tau"]),
                kept=kept,
                row_ptr=row_ptr.astype(np.int64),
                col_idx=col_idx.astype(np.int64),
                values=np.asarray(values),
            )
        )
    if offset != len(body):
        raise ArtifactError(f"{path}: {len(body) - offset} trailing payload bytes")
    if kept_sum != int(manifest["kept_weights"]):
        raise ArtifactError(
            f"{path}: manifest kept_weights={manifest['kept_weights']} but payloads hold {kept_sum}"
        )
    return SparseArtifact(manifest=manifest, layers=layers)


def dense_weights(artifact):
    """{layer id: dense f32 matrix} reconstruction of every layer."""
    return {rec.layer_id: rec.dense() for rec in artifact.layers}


def compression_rate(artifact):
    """total/kept as an exact fraction."""
    kept = artifact.kept_weights
    if kept == 0:
        raise ArtifactError("artifact keeps zero weights")
    return Fraction(artifact.total_weights, kept)
