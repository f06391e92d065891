"""
densitymap — Shared output helpers
Atomic file writes, CSV tables and 8-bit PGM previews used by the core
format writer and the command-line driver.

Every writer goes through atomic_write_bytes: the payload lands in a
temporary file next to the target and is moved into place with os.replace,
so a reader never sees a half-written file.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Union

import numpy as np
import pandas as pd

log = logging.getLogger("densitymap.export")

PathLike = Union[str, os.PathLike]


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------

def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write payload to path via temp file + rename."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(
        prefix=f".{target.name}.", suffix=".tmp", dir=target.parent
    )
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    log.debug(f"Wrote {len(payload)} bytes to {target}")
    return target


def write_json(path: PathLike, data: Any) -> Path:
    """Write a JSON document with sorted keys (stable bytes for equal data)."""
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    """Write a DataFrame as CSV with full float precision."""
    text = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    return atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# PGM previews
# ---------------------------------------------------------------------------

def to_gray8(raster: np.ndarray, low_pct: float = 1.0, high_pct: float = 99.0) -> np.ndarray:
    """Linear stretch of raster over its [low_pct, high_pct] percentiles to 0..255."""
    values = np.asarray(raster, dtype=np.float64)
    lo, hi = np.percentile(values, [low_pct, high_pct])
    if not hi > lo:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = (values - lo) / (hi - lo)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def pgm_bytes(raster: np.ndarray) -> bytes:
    """Binary P5 PGM: header 'P5', width height, 255, then raw row-major bytes."""
    gray = to_gray8(raster)
    height, width = gray.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(gray).tobytes()


def write_pgm(path: PathLike, raster: np.ndarray) -> Path:
    return atomic_write_bytes(path, pgm_bytes(raster))
