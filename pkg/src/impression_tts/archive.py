"""Checkpoint archive: a zip of named ``.npy`` arrays plus a ``meta.json`` block."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch.nn as nn

SCHEMA = 1


def _zinfo(name: str) -> zipfile.ZipInfo:
    # fixed timestamp keeps archives byte-identical across runs
    return zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))


def module_arrays(modules: dict[str, nn.Module | None]) -> dict[str, np.ndarray]:
    """Flat ``namespace/param`` -> array copy for every present module."""
    out = {}
    for ns, mod in modules.items():
        if mod is None:
            continue
        for k, t in mod.state_dict().items():
            out[f"{ns}/{k}"] = t.detach().cpu().numpy().copy()
    return out


def namespace_hashes(arrays: dict[str, np.ndarray]) -> dict[str, str]:
    by_ns: dict[str, list[str]] = {}
    for k in arrays:
        by_ns.setdefault(k.split("/", 1)[0], []).append(k)
    hashes = {}
    for ns, keys in sorted(by_ns.items()):
        h = hashlib.sha256()
        for k in sorted(keys):
            h.update(k.encode())
            h.update(np.ascontiguousarray(arrays[k]).tobytes())
        hashes[ns] = h.hexdigest()
    return hashes


def write_archive(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"schema": SCHEMA, **meta}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_zinfo("meta.json"), json.dumps(meta, indent=2, sort_keys=True))
        for name, arr in sorted(arrays.items()):
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            zf.writestr(_zinfo(name + ".npy"), buf.getvalue())


def read_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("schema") != SCHEMA:
            raise ValueError(f"{path}: unsupported checkpoint schema {meta.get('schema')}")
        arrays = {n[:-4]: np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
                  for n in zf.namelist() if n.endswith(".npy")}
    return arrays, meta


def load_namespace(mod: nn.Module, ns: str, arrays: dict[str, np.ndarray]) -> None:
    import torch

    prefix = ns + "/"
    mod.load_state_dict({k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)})
