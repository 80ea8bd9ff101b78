#!/usr/bin/env python3
"""Generate the shared kernel fixtures by driving `voxgeo kernel`.

For every op this writes random inputs as raw+JSON tensors, a request.json,
and then runs the core CLI to produce the expected outputs next to them, so
the TypeScript tests compare against literal CLI output. Deterministic
(seeded); rerun from frontend/: python scripts/make_fixtures.py
"""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from voxgeo import stitcher
from voxgeo.volcore import write_array_raw

ROOT = Path(__file__).resolve().parent.parent / "fixtures"


def _blob(rng, dims, cls=1, holes=0.15):
    lab = np.zeros(dims, dtype=np.int32)
    z, y, x = np.indices(dims)
    c = rng.uniform(2, np.array(dims) - 2)
    r = rng.uniform(2.0, min(dims) / 2)
    d2 = (z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2
    lab[d2 <= r * r] = cls
    lab[rng.random(dims) < holes] = 0
    if not lab.any():
        lab[tuple(np.array(dims) // 2)] = cls
    return lab


def emit(name, inputs, scalars, outputs):
    case = ROOT / name
    case.mkdir(parents=True, exist_ok=True)
    req = {"op": name.split("__")[0], "inputs": {}, "scalars": scalars,
           "outputs": {out: f"out_{out}.raw" for out in outputs}}
    for key, arr in inputs.items():
        write_array_raw(case / f"{key}.raw", arr)
        req["inputs"][key] = f"{key}.raw"
    (case / "request.json").write_text(json.dumps(req, indent=1))
    subprocess.run(
        ["voxgeo", "kernel", "--request", str(case / "request.json"),
         "--json-out", str(case / "expected.json")],
        check=True)
    print(f"  {name}: ok")


def main():
    rng = np.random.default_rng(20260823)

    labels = _blob(rng, (9, 10, 11))
    emit("sdm", {"labels": labels}, {"spacing": [0.7, 1.0, 1.3]}, ["phi"])

    p_fg = rng.uniform(0.0, 1.0, size=(6, 7, 8))
    emit("ambiguity", {"p_fg": p_fg}, {}, ["field"])

    field = rng.uniform(0.0, 1.0, size=(6, 7, 8)).astype(np.float32)
    emit("gate", {"field": field}, {"tau": 0.95}, ["mask"])

    shape = (3, 4, 5, 6)
    f_in = rng.normal(size=shape)
    f_ref = rng.normal(size=shape)
    mask = (rng.random(shape[1:]) < 0.4).astype(np.uint8)
    emit("gated_fusion", {"f_in": f_in, "f_ref": f_ref, "mask": mask},
         {"alpha": 0.7, "tau": 0.95}, ["fused"])
    upstream = rng.normal(size=shape)
    emit("gated_fusion_grad",
         {"f_in": f_in, "f_ref": f_ref, "mask": mask, "upstream": upstream},
         {"alpha": 0.7, "tau": 0.95}, ["grad_f_in", "grad_f_ref"])

    x = rng.normal(size=(4, 5, 6, 7))
    m = rng.uniform(0.0, 1.0, size=(5, 6, 7))
    emit("awp", {"x": x, "m": m}, {"eps": 1e-5}, ["z"])
    up = rng.normal(size=(4,))
    emit("awp_grad", {"x": x, "m": m, "upstream": up}, {"eps": 1e-5},
         ["grad_x", "grad_m"])

    logits = rng.normal(size=(5, 4, 5, 6))
    pred = np.exp(logits) / np.exp(logits).sum(axis=0, keepdims=True)
    gt = rng.integers(0, 5, size=(4, 5, 6)).astype(np.int32)
    emit("soft_dice", {"pred": pred, "gt": gt}, {"eps": 1e-5}, ["grad"])
    emit("cross_entropy", {"pred": pred, "gt": gt}, {}, ["grad"])

    dims = (10, 11, 12)
    pred_lab = _blob(rng, dims)
    gt_lab = _blob(rng, dims)
    emit("surface_distances", {"pred": pred_lab, "gt": gt_lab},
         {"cls": 1, "spacing": [0.5, 0.5, 0.8]}, [])

    vol = (12, 12, 12)
    window = (8, 8, 8)
    plan = stitcher.plan_windows(vol, window, 0.5)
    origins = np.array(plan.window_origins, dtype=np.int32)
    raw = rng.normal(size=(origins.shape[0], 3) + window)
    patches = np.exp(raw) / np.exp(raw).sum(axis=1, keepdims=True)
    emit("stitch", {"patches": patches, "origins": origins},
         {"dims": list(vol), "overlap": 0.5, "weights": "gaussian"}, ["probs"])


if __name__ == "__main__":
    sys.exit(main())
