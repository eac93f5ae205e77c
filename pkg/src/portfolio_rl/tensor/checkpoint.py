"""Parameter checkpoints: one little-endian float64 blob plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ShapeError

FORMAT = "portfolio-rl-params/1"


def _paths(path):
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".bin", ".json") else path
    return base.with_suffix(".bin"), base.with_suffix(".json")


def save_arrays(arrays: dict, path, meta=None) -> None:
    bin_path, man_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name, a in arrays.items():
            a = np.ascontiguousarray(a, dtype="<f8")
            fh.write(a.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.size
    manifest = {"format": FORMAT, "dtype": "float64-le", "count": offset, "tensors": entries}
    if meta:
        manifest["meta"] = meta
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_arrays(path):
    bin_path, man_path = _paths(path)
    manifest = json.loads(man_path.read_text())
    flat = np.fromfile(bin_path, dtype="<f8")
    if flat.size != manifest["count"]:
        raise ShapeError(f"blob holds {flat.size} values, manifest expects {manifest['count']}")
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return out, manifest.get("meta")


def save_parameters(module, path, meta=None) -> None:
    save_arrays(module.state_dict(), path, meta)


def load_parameters(module, path):
    arrays, meta = load_arrays(path)
    module.load_state_dict(arrays)
    return meta
