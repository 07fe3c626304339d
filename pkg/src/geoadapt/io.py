"""Array containers: a plain ``.npz`` zip with a JSON metadata member.

Members are written with a fixed timestamp so identical inputs give
byte-identical files. ``numpy.load`` reads them directly; the metadata lives
in the ``__meta__`` member as UTF-8 JSON bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import ArtifactIncompatibleError

META_KEY = "__meta__"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def dumps_meta(meta: dict) -> str:
    return json.dumps(_to_jsonable(meta), sort_keys=True, indent=1)


def save_container(path, arrays: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            if name == META_KEY:
                raise ValueError(f"{META_KEY!r} is reserved")
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH), buf.getvalue())
        raw = np.frombuffer(dumps_meta(meta or {}).encode("utf-8"), dtype=np.uint8)
        buf = io.BytesIO()
        np.lib.format.write_array(buf, raw, allow_pickle=False)
        zf.writestr(zipfile.ZipInfo(f"{META_KEY}.npy", date_time=_EPOCH), buf.getvalue())
    return path


def load_container(path, kind: str | None = None) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``; if ``kind`` is given, ``meta['kind']`` must match."""
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if k != META_KEY}
        meta = json.loads(bytes(data[META_KEY]).decode("utf-8")) if META_KEY in data.files else {}
    if kind is not None and meta.get("kind") != kind:
        raise ArtifactIncompatibleError(f"{path}: expected a {kind!r} container, found {meta.get('kind')!r}")
    return arrays, meta
