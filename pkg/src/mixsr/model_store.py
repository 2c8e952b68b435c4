"""Versioned single-file container for a :class:`MixtureNetwork`.

Layout (all integers little-endian)::

    offset  size  content
    0       4     magic b"MSCN"
    4       4     uint32 format version
    8       4     uint32 manifest byte length L
    12      L     manifest, UTF-8 JSON with sorted keys
    12+L    ...   blob: float32 little-endian tensors in manifest order

The manifest records ``n_experts``, one entry per expert (``kind``,
``config``, ``tensors``), the weight module (``null`` for an implicit
single-expert gate), free-form ``metadata`` and ``blob_bytes``. Each tensor
entry is ``{"name": ..., "shape": [...]}``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from typing import List, Tuple

import numpy as np

from .experts import EXPERT_KINDS, Expert
from .mixture import MixtureNetwork, WeightModule, WeightModuleConfig

MAGIC = b"MSCN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")


class ModelFormatError(Exception):
    """Base class for container errors; ``field`` names the offending item."""

    def __init__(self, message: str, field: str):
        super().__init__(f"{message} [field: {field}]")
        self.field = field


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedBlobError(ModelFormatError):
    pass


class ManifestInconsistencyError(ModelFormatError):
    pass


class ByteCountMismatchError(ModelFormatError):
    """Tensor shapes and byte counts disagree."""


def _tensor_entries(params) -> List[dict]:
    return [{"name": name, "shape": list(p.value.shape)} for name, p in params.items()]


def build_manifest(net: MixtureNetwork) -> dict:
    experts = [
        {"kind": e.kind, "config": asdict(e.config), "tensors": _tensor_entries(e.parameters())}
        for e in net.experts
    ]
    wm = None
    if net.weight_module is not None:
        wm = {
            "config": asdict(net.weight_module.config),
            "tensors": _tensor_entries(net.weight_module.parameters()),
        }
    blob_bytes = 4 * sum(p.value.size for p in net.parameters().values())
    return {
        "n_experts": net.n_experts,
        "experts": experts,
        "weight_module": wm,
        "metadata": dict(net.metadata),
        "blob_bytes": blob_bytes,
    }


def serialize(net: MixtureNetwork) -> bytes:
    manifest = json.dumps(build_manifest(net), sort_keys=True, indent=1).encode("utf-8")
    blob = b"".join(p.value.astype("<f4").tobytes() for p in net.parameters().values())
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)) + manifest + blob


def save_model(net: MixtureNetwork, path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = os.fspath(path)
    data = serialize(net)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".mscn-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_header(data: bytes) -> Tuple[dict, int]:
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise BadMagicError(f"not a model container (magic {data[:4]!r})", "magic")
    _, version, mlen = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version} is not supported (expected {FORMAT_VERSION})", "format-version")
    start = _HEADER.size
    if len(data) < start + mlen:
        raise TruncatedBlobError(f"manifest declares {mlen} bytes but only {len(data) - start} remain", "manifest")
    try:
        manifest = json.loads(data[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestInconsistencyError(f"manifest is not valid JSON: {exc}", "manifest") from exc
    return manifest, start + mlen


def read_manifest(path) -> dict:
    """Return the manifest without materializing any tensor."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) == _HEADER.size and head[:4] == MAGIC:
            mlen = _HEADER.unpack(head)[2]
            head += fh.read(mlen)
    return _read_header(head)[0]


def _require(manifest: dict, key: str):
    if key not in manifest:
        raise ManifestInconsistencyError(f"manifest is missing {key!r}", key)
    return manifest[key]


def _check_tensors(declared, params, where: str) -> None:
    actual = _tensor_entries(params)
    if [t.get("name") for t in declared] != [t["name"] for t in actual]:
        raise ManifestInconsistencyError(f"{where} tensor names do not match its architecture", f"{where}.tensors")
    for d, a in zip(declared, actual):
        if list(d.get("shape", [])) != a["shape"]:
            raise ByteCountMismatchError(
                f"{where} tensor {a['name']} has declared shape {d.get('shape')} but architecture needs {a['shape']}",
                f"{where}.tensors.{a['name']}",
            )


def deserialize(data: bytes) -> MixtureNetwork:
    manifest, offset = _read_header(data)
    n = _require(manifest, "n_experts")
    experts_meta = _require(manifest, "experts")
    if not isinstance(n, int) or n < 1:
        raise ManifestInconsistencyError(f"n_experts must be a positive integer, got {n!r}", "n_experts")
    if len(experts_meta) != n:
        raise ManifestInconsistencyError(f"manifest declares {n} experts but has {len(experts_meta)} expert sections", "experts")

    experts: List[Expert] = []
    for i, meta in enumerate(experts_meta):
        kind = meta.get("kind")
        if kind not in EXPERT_KINDS:
            raise ManifestInconsistencyError(f"expert {i} has unknown kind {kind!r}", f"experts[{i}].kind")
        cls, cfg_cls = EXPERT_KINDS[kind]
        try:
            cfg = cfg_cls.from_dict(meta.get("config", {}))
        except (TypeError, ValueError) as exc:
            raise ManifestInconsistencyError(f"expert {i} config invalid: {exc}", f"experts[{i}].config") from exc
        expert = cls(cfg)
        _check_tensors(meta.get("tensors", []), expert.parameters(), f"experts[{i}]")
        experts.append(expert)

    wm_meta = _require(manifest, "weight_module")
    wm = None
    if wm_meta is None:
        if n != 1:
            raise ManifestInconsistencyError(f"{n} experts but no weight module section", "weight_module")
    else:
        try:
            wm_cfg = WeightModuleConfig.from_dict(wm_meta.get("config", {}))
        except (TypeError, ValueError) as exc:
            raise ManifestInconsistencyError(f"weight module config invalid: {exc}", "weight_module.config") from exc
        wm = WeightModule(n, wm_cfg)
        _check_tensors(wm_meta.get("tensors", []), wm.parameters(), "weight_module")

    net = MixtureNetwork(experts, wm)
    net.metadata = dict(manifest.get("metadata", {}))
    params = net.parameters()
    expected = 4 * sum(p.value.size for p in params.values())
    declared = _require(manifest, "blob_bytes")
    if declared != expected:
        raise ByteCountMismatchError(f"blob_bytes {declared} disagrees with tensor shapes ({expected} bytes)", "blob_bytes")
    blob = data[offset:]
    if len(blob) < expected:
        raise TruncatedBlobError(f"blob has {len(blob)} bytes, expected {expected}", "blob")
    if len(blob) > expected:
        raise ByteCountMismatchError(f"blob has {len(blob)} bytes, expected {expected}", "blob")
    pos = 0
    for p in params.values():
        nbytes = 4 * p.value.size
        p.value[...] = np.frombuffer(blob, dtype="<f4", count=p.value.size, offset=pos).reshape(p.value.shape)
        pos += nbytes
    return net


def load_model(path) -> MixtureNetwork:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"model file not found: {path}")
    with open(path, "rb") as fh:
        return deserialize(fh.read())
