"""Checkpoint files: a magic line, a one-line JSON header, then raw float64.

The binary payload is little-endian float64: the transform parameters in
``params()`` order, followed by the training inputs, values and gradients
(row-major), which synthesized regression needs for prediction.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from ..losses import Dataset, HyperParams
from ..training import TrainedModel
from ..transforms import Prnn, RevNet, TransformKind

MAGIC = b"DRILLS-CHECKPOINT\n"
FORMAT_VERSION = 1
_LE = np.dtype("<f8")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found, expected=FORMAT_VERSION):
        super().__init__(f"checkpoint format version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _skeleton(kind: str, arch: dict):
    if kind == TransformKind.PRNN.value:
        sizes = [int(s) for s in arch["layer_sizes"]]
        return Prnn.create(sizes[0], np.random.default_rng(0), sizes)
    if kind == TransformKind.REVNET.value:
        return RevNet(int(arch["d"]), int(arch["num_blocks"]), float(arch["step_size"]), int(arch["width"]))
    raise CheckpointCorruptError(f"unknown transform kind {kind!r}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_checkpoint(model: TrainedModel, path) -> None:
    """Write ``model`` to ``path`` atomically (temp file then rename)."""
    t, data = model.transform, model.data
    payload = np.concatenate([
        t.params(), data.inputs.ravel(), data.values, data.gradients.ravel(),
    ]).astype(_LE).tobytes()
    hp = dataclasses.asdict(model.hp)
    header = {
        "version": FORMAT_VERSION,
        "kind": t.kind.value,
        "architecture": t.architecture(),
        "hyperparams": hp,
        "meta": model.meta,
        "n_params": t.n_params,
        "data": {"N": data.N, "d": data.d, "lo": data.domain_lo.tolist(),
                 "hi": data.domain_hi.tolist(), "name": data.name},
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = MAGIC + json.dumps(_jsonable(header), sort_keys=True).encode("ascii") + b"\n" + payload
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> TrainedModel:
    """Read a checkpoint; nothing is returned unless every check passes."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointCorruptError(f"{path}: header is truncated")
    try:
        header = json.loads(blob[len(MAGIC):end].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header ({exc})") from None
    if not isinstance(header, dict):
        raise CheckpointCorruptError(f"{path}: header is not an object")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(header.get("version"))
    try:
        skeleton = _skeleton(header["kind"], header["architecture"])
        n_params, info = int(header["n_params"]), header["data"]
        N, d = int(info["N"]), int(info["d"])
        digest = header["sha256"]
        hp_fields = dict(header["hyperparams"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"{path}: incomplete header ({exc})") from None
    if n_params != skeleton.n_params:
        raise CheckpointShapeError(
            f"{path}: header declares {n_params} parameters, architecture needs {skeleton.n_params}")
    if d != skeleton.d:
        raise CheckpointShapeError(f"{path}: data dimension {d} does not match transform dimension {skeleton.d}")
    body = blob[end + 1:]
    expected = 8 * (n_params + N * (2 * d + 1))
    if len(body) != expected:
        raise CheckpointCorruptError(f"{path}: payload has {len(body)} bytes, expected {expected}")
    if hashlib.sha256(body).hexdigest() != digest:
        raise CheckpointCorruptError(f"{path}: payload checksum mismatch")

    flat = np.frombuffer(body, dtype=_LE).astype(np.float64)
    theta, rest = flat[:n_params], flat[n_params:]
    X = rest[:N * d].reshape(N, d)
    y = rest[N * d:N * d + N]
    G = rest[N * d + N:].reshape(N, d)
    if hp_fields.get("omega") is not None:
        hp_fields["omega"] = tuple(hp_fields["omega"])
    try:
        hp = HyperParams(**hp_fields)
        data = Dataset(X, y, G, info["lo"], info["hi"], info.get("name", ""))
    except (TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"{path}: invalid contents ({exc})") from None
    return TrainedModel(skeleton.with_params(theta), data, hp, dict(header.get("meta") or {}))
