"""
FEWSHOT-AD ARRAY CONTAINER
==========================
Versioned on-disk container for checkpoints and memory banks.

Layout (a zip archive):
    manifest.json          - format version, kind, free-form metadata
    arrays/<name>.npy      - one member per named numpy array

Members are written in sorted order with a fixed timestamp, so the same
contents always produce the same bytes. Writes go to a temp file that is
renamed into place.
"""

import hashlib
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from .errors import ArtifactError

FORMAT_VERSION = 1
FIXED_TIMESTAMP = (1980, 1, 1, 0, 0, 0)
MANIFEST_NAME = "manifest.json"
ARRAY_PREFIX = "arrays/"

PathLike = Union[str, Path]


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=FIXED_TIMESTAMP)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def canonical_json(payload: Any) -> bytes:
    return json.dumps(payload, sort_keys=True, indent=2, default=json_default).encode("utf-8")


def json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def to_bytes(arrays: Dict[str, np.ndarray], manifest: Dict[str, Any], kind: str) -> bytes:
    """Serialize arrays + manifest into container bytes."""
    header = dict(manifest)
    header["format_version"] = FORMAT_VERSION
    header["kind"] = kind
    header["arrays"] = sorted(arrays)

    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w") as zf:
        zf.writestr(_member(MANIFEST_NAME), canonical_json(header))
        for name in sorted(arrays):
            payload = io.BytesIO()
            np.save(payload, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(_member(f"{ARRAY_PREFIX}{name}.npy"), payload.getvalue())
    return buffer.getvalue()


def from_bytes(data: bytes, kind: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            manifest = json.loads(zf.read(MANIFEST_NAME).decode("utf-8"))
            arrays = {}
            for name in manifest.get("arrays", []):
                raw = zf.read(f"{ARRAY_PREFIX}{name}.npy")
                arrays[name] = np.load(io.BytesIO(raw), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise ArtifactError(f"corrupt {kind} container: {e}")

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ArtifactError(f"unsupported {kind} format version {version} (expected {FORMAT_VERSION})")
    if manifest.get("kind") != kind:
        raise ArtifactError(f"expected a {kind} container, found {manifest.get('kind')!r}")
    return arrays, manifest


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise ArtifactError(f"could not write file: {e}", path=str(path)) from e
    return path


def atomic_write_json(path: PathLike, payload: Any) -> Path:
    return atomic_write_bytes(path, canonical_json(payload) + b"\n")


def write_container(path: PathLike, arrays: Dict[str, np.ndarray],
                    manifest: Dict[str, Any], kind: str) -> Path:
    return atomic_write_bytes(path, to_bytes(arrays, manifest, kind))


def read_container(path: PathLike, kind: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ArtifactError(f"could not read {kind}: {e}", path=str(path)) from e
    try:
        return from_bytes(data, kind)
    except ArtifactError as e:
        raise ArtifactError(e.message, path=str(path)) from e


def file_sha256(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def bytes_sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
