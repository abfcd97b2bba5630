"""On-disk formats: parameter blobs, loss logs and result files.

``params.bin`` layout::

    b"FCPARAM1" | uint32 LE manifest length | UTF-8 JSON manifest | float64 LE data

The manifest lists ``{"name", "shape", "offset"}`` per tensor (offset in
values, not bytes) and the SHA-256 of the data section.
"""

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from .autodiff import ParamSet
from .errors import ArtifactFormatError

logger = logging.getLogger(__name__)

MAGIC = b"FCPARAM1"
FORMAT_VERSION = 1
LOSS_COLUMNS = ["iter", "ce", "aux", "meta"]


def pack(groups: Dict[str, ParamSet]) -> ParamSet:
    """Merge named groups into one ParamSet keyed ``group/name``."""
    merged = ParamSet()
    for group, params in groups.items():
        for name, value in params.items():
            merged[f"{group}/{name}"] = value
    return merged


def unpack(params: ParamSet) -> "OrderedDict[str, ParamSet]":
    groups: "OrderedDict[str, ParamSet]" = OrderedDict()
    for key, value in params.items():
        if "/" not in key:
            raise ArtifactFormatError(f"tensor {key!r} has no group prefix")
        group, name = key.rsplit("/", 1)
        groups.setdefault(group, ParamSet())[name] = value
    return groups


def save_params(
    path, params: ParamSet, metadata: Optional[Dict[str, Any]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for name, value in params.items():
        tensors.append({"name": name, "shape": list(value.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        offset += value.size
    data = b"".join(chunks)
    manifest = {
        "version": FORMAT_VERSION,
        "tensors": tensors,
        "sha256": hashlib.sha256(data).hexdigest(),
        "metadata": metadata or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.write_bytes(MAGIC + struct.pack("<I", len(header)) + header + data)
    logger.info(f"Saved {len(tensors)} tensors ({offset} values) to {path}")
    return path


def read_params(path) -> Tuple[ParamSet, Dict[str, Any]]:
    """Load a parameter blob and its manifest, validating magic and checksum."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ArtifactFormatError(f"{path}: not a parameter file (bad magic)")
    start = len(MAGIC) + 4
    if len(raw) < start:
        raise ArtifactFormatError(f"{path}: truncated header")
    (length,) = struct.unpack("<I", raw[len(MAGIC) : start])
    try:
        manifest = json.loads(raw[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactFormatError(f"{path}: unreadable manifest: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise ArtifactFormatError(
            f"{path}: unsupported version {manifest.get('version')}"
        )

    data = raw[start + length :]
    if hashlib.sha256(data).hexdigest() != manifest.get("sha256"):
        raise ArtifactFormatError(f"{path}: checksum mismatch")
    values = np.frombuffer(data, dtype="<f8")
    params = ParamSet()
    for tensor in manifest["tensors"]:
        shape = tuple(tensor["shape"])
        size = int(np.prod(shape))
        chunk = values[tensor["offset"] : tensor["offset"] + size]
        if chunk.size != size:
            raise ArtifactFormatError(f"{path}: tensor {tensor['name']} is truncated")
        params[tensor["name"]] = chunk.astype(np.float64).reshape(shape)
    return params, manifest


def write_loss_log(path, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame[LOSS_COLUMNS].to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {len(frame)} loss rows to {path}")
    return path


def read_loss_log(path) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = set(LOSS_COLUMNS) - set(frame.columns)
    if missing:
        raise ArtifactFormatError(f"{path}: missing columns {sorted(missing)}")
    return frame


def write_json(path, data: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(data), sort_keys=True, indent=2) + "\n")
    return path


def read_json(path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text())


def write_table(path, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def _plain(value: Any) -> Any:
    """Convert numpy scalars/arrays and tuples into JSON-native values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value
