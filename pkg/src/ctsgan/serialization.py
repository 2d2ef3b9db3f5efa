"""Flat binary weight blobs with a JSON shape manifest."""

import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

FORMAT_VERSION = 1


def write_blob(tensors: dict, stem: Path, extra: Optional[dict] = None) -> None:
    manifest = {"format_version": FORMAT_VERSION, "dtype": "f32le", "tensors": []}
    if extra:
        manifest.update(extra)
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))


def read_blob(stem: Path):
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {stem}")
    flat = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f4")
    tensors = {}
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = flat[entry["offset"] : entry["offset"] + n]
        if chunk.size != n:
            raise ValueError(f"truncated blob {stem}.bin")
        tensors[entry["name"]] = torch.tensor(chunk.reshape(entry["shape"]))
    return tensors, manifest


def save_module(module: torch.nn.Module, stem) -> None:
    write_blob(module.state_dict(), Path(stem))


def load_module(module: torch.nn.Module, stem) -> torch.nn.Module:
    tensors, _ = read_blob(Path(stem))
    module.load_state_dict(tensors)
    return module
