"""Model archive: a directory holding ``manifest.json`` plus one ``.f64`` blob
per matrix.

A blob is two little-endian uint64 dimensions (rows, cols) followed by the
matrix as little-endian float64 in row-major order. All writes go to a
temporary file first and are renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
_HEADER = np.dtype("<u8")
_DATA = np.dtype("<f8")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def matrix_to_bytes(A) -> bytes:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ValueError(f"only 2-D matrices can be stored, got shape {A.shape}")
    header = np.array(A.shape, dtype=_HEADER).tobytes()
    return header + np.ascontiguousarray(A, dtype=_DATA).tobytes()


def matrix_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise ValueError("truncated matrix blob")
    rows, cols = (int(d) for d in np.frombuffer(buf[:16], dtype=_HEADER))
    expected = 16 + rows * cols * 8
    if len(buf) != expected:
        raise ValueError(f"matrix blob has {len(buf)} bytes, expected {expected}")
    return np.frombuffer(buf[16:], dtype=_DATA).reshape(rows, cols).astype(np.float64)


def write_matrix(path, A) -> None:
    atomic_write_bytes(path, matrix_to_bytes(A))


def read_matrix(path) -> np.ndarray:
    return matrix_from_bytes(Path(path).read_bytes())


def save_archive(directory, manifest: dict, matrices: dict) -> Path:
    """Write ``W_<name>.f64`` for every entry of ``matrices`` plus the manifest.

    The manifest gains a ``matrices`` key listing the stored names.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, A in matrices.items():
        write_matrix(directory / f"W_{name}.f64", A)
    manifest = dict(manifest)
    manifest["matrices"] = sorted(matrices)
    atomic_write_text(directory / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_archive(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    manifest = json.loads(manifest_path.read_text())
    matrices = {
        name: read_matrix(directory / f"W_{name}.f64") for name in manifest.get("matrices", [])
    }
    return manifest, matrices
