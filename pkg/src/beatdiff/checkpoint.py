"""Checkpoint files: a zip archive holding ``manifest.json`` and one ``.npy`` per tensor.

Layout (all members stored uncompressed, timestamps pinned to 1980-01-01 so
identical contents give identical bytes):

    manifest.json          UTF-8 JSON, sorted keys; ``format`` and ``version``
                           identify the layout, the rest is caller metadata
    params/<name>.npy      numpy .npy (format 1.0) for each named tensor, in
                           sorted name order
"""
from __future__ import annotations

import io
import json
import zipfile
from typing import Dict, Tuple

import numpy as np

FORMAT = "beatdiff-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save(path, manifest: Dict, params: Dict[str, np.ndarray]) -> None:
    manifest = dict(manifest, format=FORMAT, version=VERSION)
    with zipfile.ZipFile(path, "w") as zf:
        _member(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8"))
        for name in sorted(params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(params[name]), version=(1, 0), allow_pickle=False)
            _member(zf, f"params/{name}.npy", buf.getvalue())


def load(path) -> Tuple[Dict, Dict[str, np.ndarray]]:
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile:
        raise ValueError(f"{path} is not a checkpoint file") from None
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise ValueError(f"{path} has no manifest") from None
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{path} is not a {FORMAT} file")
        if manifest.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        params = {}
        for name in zf.namelist():
            if name.startswith("params/") and name.endswith(".npy"):
                params[name[len("params/") : -len(".npy")]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return manifest, params


def state_dict_arrays(module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module, params: Dict[str, np.ndarray]):
    import torch

    expected = module.state_dict()
    missing = set(expected) - set(params)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    module.load_state_dict({k: torch.from_numpy(np.array(params[k])).to(expected[k].dtype) for k in expected})
    return module
