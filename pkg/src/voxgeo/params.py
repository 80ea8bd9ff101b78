"""Externally trained parameter bundles: flat binary weights + JSON manifest.

The manifest names each array with its shape, byte offset, and dtype:

    {"arrays": {"refiner.conv1.weight": {"shape": [8, 16, 3, 3, 3],
                                         "offset": 0, "dtype": "float32"}, ...}}

Builders assemble the typed parameter structs used by the numeric modules.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .uncertainty import Conv3dParams, RefinerParams
from .geometry import AdapterParams, ChannelAttentionParams

_DTYPES = {"float32": np.float32, "float64": np.float64}


def load_weight_bundle(weights_path, manifest_path) -> dict[str, np.ndarray]:
    """Load every named array from a flat little-endian weights file."""
    manifest = json.loads(Path(manifest_path).read_text())
    blob = Path(weights_path).read_bytes()
    arrays = {}
    for name, entry in manifest["arrays"].items():
        dtype = np.dtype(_DTYPES[entry.get("dtype", "float32")]).newbyteorder("<")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        offset = int(entry["offset"])
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        if arr.size != count:
            raise ValueError(f"array {name!r} truncated in weights file")
        arrays[name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
    return arrays


def save_weight_bundle(arrays: dict[str, np.ndarray], weights_path, manifest_path):
    """Write arrays back-to-back with a matching manifest (float32)."""
    manifest = {"arrays": {}}
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        chunks.append(arr.astype("<f4").tobytes())
        manifest["arrays"][name] = {"shape": list(arr.shape), "offset": offset,
                                    "dtype": "float32"}
        offset += arr.nbytes
    Path(weights_path).write_bytes(b"".join(chunks))
    Path(manifest_path).write_text(json.dumps(manifest, indent=1))


def conv3d_from_bundle(arrays, prefix) -> Conv3dParams:
    return Conv3dParams(arrays[f"{prefix}.weight"], arrays[f"{prefix}.bias"])


def refiner_from_bundle(arrays, prefix="refiner") -> RefinerParams:
    alpha = arrays.get(f"{prefix}.alpha", np.zeros(()))
    return RefinerParams(
        conv1=conv3d_from_bundle(arrays, f"{prefix}.conv1"),
        conv2=conv3d_from_bundle(arrays, f"{prefix}.conv2"),
        conv3=conv3d_from_bundle(arrays, f"{prefix}.conv3"),
        alpha=float(np.asarray(alpha).reshape(())))


def adapter_from_bundle(arrays, prefix="adapter") -> AdapterParams:
    return AdapterParams(
        gamma=float(np.asarray(arrays[f"{prefix}.gamma"]).reshape(())),
        beta=float(np.asarray(arrays[f"{prefix}.beta"]).reshape(())),
        conv=conv3d_from_bundle(arrays, f"{prefix}.conv"),
        bn_mean=arrays[f"{prefix}.bn_mean"],
        bn_var=arrays[f"{prefix}.bn_var"],
        bn_gamma=arrays[f"{prefix}.bn_gamma"],
        bn_beta=arrays[f"{prefix}.bn_beta"])


def channel_attention_from_bundle(arrays, prefix="mlp") -> ChannelAttentionParams:
    return ChannelAttentionParams(
        w1=arrays[f"{prefix}.w1"], b1=arrays[f"{prefix}.b1"],
        w2=arrays[f"{prefix}.w2"], b2=arrays[f"{prefix}.b2"])
