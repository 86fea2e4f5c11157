"""Binary tensor container and model/calibration serialization.

File layout:

    bytes 0-7    magic "D2MZ0001"
    bytes 8-15   uint64 little-endian byte length of the manifest
    manifest     UTF-8 text, one line per tensor: "name rows cols offset"
    payloads     raw little-endian IEEE-754 binary64, row-major, each
                 payload starting at a 64-byte-aligned absolute offset

Offsets in the manifest are absolute file offsets. Saving the mapping
returned by container_load reproduces the original file byte for byte.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ManifestError,
    NonFinitePayloadError,
    OverlappingPayloadError,
    ParameterError,
    ShapeError,
    TruncatedPayloadError,
)
from .factorize import DeltaFactor
from .moe import MoELayer, MoEModel, Role
from .pruning import PruneMask, PrunedBase
from .runtime import CompressedLayer, CompressedModel

MAGIC = b"D2MZ0001"
ALIGNMENT = 64
_NAME_RE = re.compile(r"^[A-Za-z0-9_./-]+$")

KIND_DENSE_MODEL = 0.0
KIND_COMPRESSED_MODEL = 1.0
KIND_CALIBRATION = 2.0


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def _manifest_text(names, shapes, offsets) -> str:
    return "".join(
        f"{name} {shape[0]} {shape[1]} {offset}\n"
        for name, shape, offset in zip(names, shapes, offsets)
    )


def container_save(path, tensors) -> None:
    """Write named float64 matrices to `path` in the container format."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ParameterError("tensor names must be unique")
    arrays = []
    for name in names:
        if not _NAME_RE.match(name or ""):
            raise ParameterError(f"invalid tensor name {name!r}")
        a = np.ascontiguousarray(tensors[name], dtype="<f8")
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ShapeError(f"tensor {name!r} must be 2-D with positive shape, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ShapeError(f"tensor {name!r} contains non-finite entries")
        arrays.append(a)
    shapes = [a.shape for a in arrays]

    # Offsets are absolute, so manifest length and offsets are mutually
    # dependent; iterate to the (monotone, hence existing) fixed point.
    offsets = [0] * len(arrays)
    for _ in range(10):
        manifest = _manifest_text(names, shapes, offsets).encode("utf-8")
        cursor = _align(len(MAGIC) + 8 + len(manifest))
        new_offsets = []
        for a in arrays:
            new_offsets.append(cursor)
            cursor = _align(cursor + a.nbytes)
        if new_offsets == offsets:
            break
        offsets = new_offsets
    else:
        raise ParameterError("container layout failed to stabilize")

    blob = bytearray()
    blob += MAGIC
    blob += len(manifest).to_bytes(8, "little")
    blob += manifest
    for a, offset in zip(arrays, offsets):
        blob += b"\x00" * (offset - len(blob))
        blob += a.tobytes()
    Path(path).write_bytes(bytes(blob))


def container_load(path) -> dict[str, np.ndarray]:
    """Read a container back into an ordered name -> matrix mapping."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a tensor container (bad magic)")
    if len(data) < len(MAGIC) + 8:
        raise ManifestError(f"{path}: missing manifest length")
    manifest_len = int.from_bytes(data[len(MAGIC): len(MAGIC) + 8], "little")
    manifest_end = len(MAGIC) + 8 + manifest_len
    if manifest_end > len(data):
        raise ManifestError(f"{path}: manifest extends past end of file")
    try:
        manifest = data[len(MAGIC) + 8: manifest_end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestError(f"{path}: manifest is not valid UTF-8") from exc

    entries = []
    for line_no, line in enumerate(manifest.splitlines(), 1):
        parts = line.split(" ")
        if len(parts) != 4:
            raise ManifestError(f"{path}: manifest line {line_no} malformed: {line!r}")
        name = parts[0]
        if not _NAME_RE.match(name):
            raise ManifestError(f"{path}: manifest line {line_no} has invalid name {name!r}")
        try:
            rows, cols, offset = int(parts[1]), int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise ManifestError(f"{path}: manifest line {line_no} has non-integer fields") from exc
        if rows < 1 or cols < 1 or offset < 0:
            raise ManifestError(f"{path}: manifest line {line_no} out of range")
        entries.append((name, rows, cols, offset))
    if len({e[0] for e in entries}) != len(entries):
        raise ManifestError(f"{path}: duplicate tensor names in manifest")

    spans = []
    for name, rows, cols, offset in entries:
        nbytes = rows * cols * 8
        if offset < manifest_end:
            raise OverlappingPayloadError(f"{path}: tensor {name!r} overlaps the manifest region")
        if offset + nbytes > len(data):
            raise TruncatedPayloadError(f"{path}: tensor {name!r} payload is truncated")
        spans.append((offset, offset + nbytes, name))
    for (s0, e0, n0), (s1, e1, n1) in zip(sorted(spans), sorted(spans)[1:]):
        if e0 > s1:
            raise OverlappingPayloadError(f"{path}: tensors {n0!r} and {n1!r} overlap")

    out: dict[str, np.ndarray] = {}
    for name, rows, cols, offset in entries:
        a = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset)
        a = a.reshape(rows, cols).astype(np.float64, copy=True)
        if not np.all(np.isfinite(a)):
            raise NonFinitePayloadError(f"{path}: tensor {name!r} contains NaN or Inf")
        out[name] = a
    return out


# ---------------------------------------------------------------------------
# object serialization on top of the raw container
# ---------------------------------------------------------------------------

def _scalar(value: float) -> np.ndarray:
    return np.array([[float(value)]])


def _row(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(1, -1)


def container_kind(tensors: dict[str, np.ndarray]) -> float:
    if "meta/kind" not in tensors:
        raise ManifestError("container has no meta/kind tensor")
    return float(tensors["meta/kind"][0, 0])


def save_model(path, model: MoEModel) -> None:
    tensors: dict[str, np.ndarray] = {"meta/kind": _scalar(KIND_DENSE_MODEL)}
    for l, layer in enumerate(model.layers):
        tensors[f"layer{l}/meta"] = _row([layer.top_k, layer.n_experts])
        tensors[f"layer{l}/gate"] = layer.gate
        for j, expert in enumerate(layer.experts):
            tensors[f"layer{l}/expert{j}/up"] = expert[Role.UP]
            tensors[f"layer{l}/expert{j}/down"] = expert[Role.DOWN]
    tensors["head"] = model.head
    container_save(path, tensors)


def load_model(tensors: dict[str, np.ndarray]) -> MoEModel:
    layers = []
    l = 0
    while f"layer{l}/meta" in tensors:
        meta = tensors[f"layer{l}/meta"][0]
        top_k, n_experts = int(meta[0]), int(meta[1])
        experts = [
            {Role.UP: tensors[f"layer{l}/expert{j}/up"],
             Role.DOWN: tensors[f"layer{l}/expert{j}/down"]}
            for j in range(n_experts)
        ]
        layers.append(MoELayer(gate=tensors[f"layer{l}/gate"], experts=experts, top_k=top_k))
        l += 1
    if not layers:
        raise ManifestError("container holds no layers")
    return MoEModel(layers=layers, head=tensors["head"])


def save_calibration(path, tokens: np.ndarray, labels: np.ndarray) -> None:
    tensors = {
        "meta/kind": _scalar(KIND_CALIBRATION),
        "calib/tokens": tokens,
        "calib/labels": _row(labels),
    }
    container_save(path, tensors)


def load_calibration(tensors: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    tokens = tensors["calib/tokens"]
    raw = tensors["calib/labels"][0]
    labels = raw.astype(np.int64)
    if np.any(labels != raw):
        raise ManifestError("calibration labels are not integral")
    if labels.size != tokens.shape[1]:
        raise ShapeError(f"{labels.size} labels for {tokens.shape[1]} tokens")
    return tokens, labels


def save_compressed_model(path, model: CompressedModel) -> None:
    tensors: dict[str, np.ndarray] = {"meta/kind": _scalar(KIND_COMPRESSED_MODEL)}
    for l, layer in enumerate(model.layers):
        if not isinstance(layer, CompressedLayer):
            raise ParameterError(f"layer {l} is not compressed; hybrid models are not serialized")
        tensors[f"layer{l}/meta"] = _row([layer.top_k, layer.n_experts, len(layer.trimmed)])
        tensors[f"layer{l}/gate"] = layer.gate
        if layer.trimmed:
            tensors[f"layer{l}/trimmed"] = _row(layer.trimmed)
        for role in (Role.UP, Role.DOWN):
            base = layer.base[role]
            prefix = f"layer{l}/base_{role.value}"
            tensors[f"{prefix}/kept"] = base.kept
            tensors[f"{prefix}/kept_ids"] = _row(base.kept_col_ids)
            tensors[f"{prefix}/meta"] = _row([base.mask.total_cols, base.mask.target_sparsity])
        for j in sorted(layer.deltas):
            for role in (Role.UP, Role.DOWN):
                factor = layer.deltas[j][role]
                tensors[f"layer{l}/expert{j}/{role.value}_u"] = factor.u
                tensors[f"layer{l}/expert{j}/{role.value}_v"] = factor.v
    tensors["head"] = model.head
    container_save(path, tensors)


def _load_pruned_base(tensors: dict[str, np.ndarray], prefix: str) -> PrunedBase:
    kept = tensors[f"{prefix}/kept"]
    kept_ids = tensors[f"{prefix}/kept_ids"][0].astype(np.int64)
    meta = tensors[f"{prefix}/meta"][0]
    total_cols, sparsity = int(meta[0]), float(meta[1])
    removed = np.setdiff1d(np.arange(total_cols), kept_ids)
    mask = PruneMask(total_cols=total_cols, static_removed=removed, target_sparsity=sparsity)
    return PrunedBase(kept=kept, kept_col_ids=kept_ids, mask=mask)


def load_compressed_model(tensors: dict[str, np.ndarray]) -> CompressedModel:
    layers = []
    l = 0
    while f"layer{l}/meta" in tensors:
        meta = tensors[f"layer{l}/meta"][0]
        top_k, n_experts, n_trimmed = int(meta[0]), int(meta[1]), int(meta[2])
        trimmed: tuple[int, ...] = ()
        if n_trimmed:
            trimmed = tuple(int(i) for i in tensors[f"layer{l}/trimmed"][0])
        base = {role: _load_pruned_base(tensors, f"layer{l}/base_{role.value}") for role in (Role.UP, Role.DOWN)}
        deltas = {}
        for j in range(n_experts):
            key = f"layer{l}/expert{j}/up_u"
            if key not in tensors:
                continue
            factors = {}
            for role in (Role.UP, Role.DOWN):
                u = tensors[f"layer{l}/expert{j}/{role.value}_u"]
                v = tensors[f"layer{l}/expert{j}/{role.value}_v"]
                factors[role] = DeltaFactor(u=u, v=v, rank=u.shape[1], expert_id=j, role=role)
            deltas[j] = factors
        layers.append(CompressedLayer(gate=tensors[f"layer{l}/gate"], base=base,
                                      deltas=deltas, top_k=top_k, trimmed=trimmed))
        l += 1
    if not layers:
        raise ManifestError("container holds no layers")
    return CompressedModel(layers=layers, head=tensors["head"])


def load_any(path):
    """Load a container and rebuild whatever object kind it declares."""
    tensors = container_load(path)
    kind = container_kind(tensors)
    if kind == KIND_DENSE_MODEL:
        return load_model(tensors)
    if kind == KIND_COMPRESSED_MODEL:
        return load_compressed_model(tensors)
    if kind == KIND_CALIBRATION:
        return load_calibration(tensors)
    raise ManifestError(f"unknown container kind {kind}")
