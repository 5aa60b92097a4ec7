from __future__ import annotations

import io
import json
import logging
import os
import pickle
import subprocess
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from hierrisk.window import DataError

logger = logging.getLogger(__name__)

TENSOR_SUFFIX = ".f32"
TENSOR_SUFFIXES = {"<f4": TENSOR_SUFFIX, "<f8": ".f64"}
SIDECAR_SUFFIX = ".json"
LAYOUT_VERSION = 1


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(temp_path, path)
    except Exception:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise


def atomic_write_json(path: str | os.PathLike, payload: Any) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
    atomic_write_bytes(path, (text + "\n").encode("utf-8"))


def read_json(path: str | os.PathLike) -> Any:
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except OSError as exc:
        reason = exc.strerror or "unable to read file"
        raise DataError(f"{path}: cannot open file ({reason})") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno} invalid JSON ({exc.msg})") from exc


def tensor_name(name: str, level: int | None = None) -> str:
    return name if level is None else f"{name}.g{level}"


def write_tensor(
    directory: str | os.PathLike, name: str, array: np.ndarray, dtype: str = "<f4"
) -> Path:
    """
    Store one tensor as little-endian floats plus a JSON sidecar with its shape.

    Layout: <name>.f32 (or .f64 for dtype "<f8") holds the raw row-major
    values, <name>.json holds {"name", "shape", "dtype", "layout_version"}.
    """
    if dtype not in TENSOR_SUFFIXES:
        raise DataError(f"{name}: unsupported dtype {dtype!r}")
    directory = Path(directory)
    values = np.ascontiguousarray(np.asarray(array), dtype=dtype)
    path = directory / f"{name}{TENSOR_SUFFIXES[dtype]}"
    atomic_write_bytes(path, values.tobytes(order="C"))
    atomic_write_json(
        directory / f"{name}{SIDECAR_SUFFIX}",
        {
            "name": name,
            "shape": list(values.shape),
            "dtype": dtype,
            "layout_version": LAYOUT_VERSION,
        },
    )
    logger.debug("tensor written name=%s shape=%s dtype=%s", name, values.shape, dtype)
    return path


def read_tensor(directory: str | os.PathLike, name: str) -> np.ndarray:
    directory = Path(directory)
    meta = read_json(directory / f"{name}{SIDECAR_SUFFIX}")
    dtype = meta.get("dtype")
    if dtype not in TENSOR_SUFFIXES:
        raise DataError(f"{name}: unsupported dtype {dtype!r}")
    shape = tuple(int(s) for s in meta["shape"])
    try:
        raw = (directory / f"{name}{TENSOR_SUFFIXES[dtype]}").read_bytes()
    except OSError as exc:
        raise DataError(f"{name}: cannot read tensor file ({exc.strerror})") from exc
    values = np.frombuffer(raw, dtype=dtype)
    expected = int(np.prod(shape)) if shape else 1
    if values.size != expected:
        raise DataError(f"{name}: {values.size} values on disk, sidecar shape {shape}")
    return values.reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def git_describe(cwd: str | os.PathLike | None = None) -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=cwd,
            capture_output=True,
            text=True,
            timeout=5,
            check=False,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    text = out.stdout.strip()
    return text if out.returncode == 0 and text else "unknown"


def write_manifest(
    out_dir: str | os.PathLike,
    *,
    command: str,
    config: dict[str, Any],
    seed: int,
    outputs: dict[str, Any] | None = None,
    metrics: dict[str, Any] | None = None,
) -> Path:
    path = Path(out_dir) / "manifest.json"
    atomic_write_json(
        path,
        {
            "command": command,
            "config": config,
            "seed": seed,
            "git_describe": git_describe(),
            "outputs": outputs or {},
            "metrics": metrics or {},
        },
    )
    return path


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def save_checkpoint(path: str | os.PathLike, payload: dict[str, Any]) -> Path:
    """torch.save into memory, then an atomic replace of `path`."""
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    atomic_write_bytes(path, buffer.getvalue())
    logger.debug("checkpoint written path=%s bytes=%d", path, buffer.tell())
    return Path(path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, Any]:
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise DataError(f"{path}: checkpoint not found") from exc
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from exc


def dump_diagnostics(out_dir: str | os.PathLike, name: str, payload: dict[str, Any]) -> Path:
    path = Path(out_dir) / f"{name}.diagnostic.json"
    atomic_write_json(path, payload)
    logger.error("diagnostic dump written path=%s", path)
    return path
