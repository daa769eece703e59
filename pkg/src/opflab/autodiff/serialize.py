"""Checkpoint archive: named arrays plus a JSON metadata blob in one ``.npz`` file.

Layout (format version 1):

* every tensor is stored under its name as a little-endian array (``<f8``,
  ``<f4`` or ``<i8``) with its shape;
* ``__meta__`` holds UTF-8 JSON bytes with at least ``{"format": "opflab-ckpt",
  "version": 1}``.
"""
import json

import numpy as np

FORMAT = "opflab-ckpt"
VERSION = 1
_META = "__meta__"


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    if arr.dtype.kind in "iub":
        return arr.astype("<i8", copy=False)
    raise TypeError(f"cannot archive dtype {arr.dtype}")


def save_archive(path, tensors: dict, meta: dict | None = None):
    if _META in tensors:
        raise ValueError(f"tensor name {_META!r} is reserved")
    payload = {name: _le(v) for name, v in tensors.items()}
    header = {"format": FORMAT, "version": VERSION, **(meta or {})}
    payload[_META] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_archive(path):
    """Return ``(tensors, meta)``."""
    with np.load(path, allow_pickle=False) as z:
        if _META not in z.files:
            raise ValueError(f"{path}: not an {FORMAT} archive (no metadata)")
        meta = json.loads(bytes(z[_META]).decode())
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: not an {FORMAT} archive")
        if meta.get("version") != VERSION:
            raise ValueError(f"{path}: unsupported archive version {meta.get('version')}")
        tensors = {k: z[k] for k in z.files if k != _META}
    return tensors, meta
