"""Flat binary container: one plain-text JSON header line, then raw arrays.

The header lists every array's name, dtype and shape in payload order, so the
file is readable without numpy's zip container (whose member timestamps would
break byte-identical reruns).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = "MMBM-BLOB"


def write_blob(path: str | Path, kind: str, version: int, meta: dict[str, Any],
               arrays: dict[str, np.ndarray]) -> None:
    layout = []
    payload = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dtype, copy=False)
        layout.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape)})
        payload.append(arr.tobytes(order="C"))
    header = {"magic": MAGIC, "kind": kind, "version": version, "meta": meta, "arrays": layout}
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(line + b"\n")
        for chunk in payload:
            fh.write(chunk)


def read_blob(path: str | Path, kind: str) -> tuple[int, dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("magic") != MAGIC or header.get("kind") != kind:
            raise ValueError(f"{path}: not a {kind} file")
        arrays = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated array {spec['name']!r}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return header["version"], header["meta"], arrays
