"""Command-line entry point wiring all numeric modules.

Config precedence is flags > JSON config file > built-in defaults; the
effective configuration is echoed into every structured output so runs are
reproducible. Logs go to stderr, data to files or stdout. Exit codes:
0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import clinical, geometry, losses, metrics, params, selftest, stitcher
from . import uncertainty, volcore

log = logging.getLogger("voxgeo")


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _effective_config(args, defaults):
    """Merge flag values over a JSON config file over defaults."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = json.loads(Path(args.config).read_text())
        for key in cfg:
            if key in file_cfg:
                cfg[key] = file_cfg[key]
    for key in cfg:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            cfg[key] = val
    return cfg


def _setup(args):
    level = getattr(args, "log_level", None) or "info"
    logging.basicConfig(stream=sys.stderr, level=level.upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    threads = getattr(args, "threads", None)
    if threads is None and os.environ.get("VOXGEO_THREADS"):
        threads = int(os.environ["VOXGEO_THREADS"])
    if threads is not None:
        try:
            import numba
            numba.set_num_threads(max(1, int(threads)))
        except (ImportError, ValueError) as exc:
            log.warning("could not cap threads: %s", exc)


def _parse_classes(spec, available=None):
    """Class selections: "all", "1..32", "1-32", comma lists, or mixes."""
    if spec is None or spec == "all":
        return None
    out = []
    for part in str(spec).split(","):
        part = part.strip()
        m = re.fullmatch(r"(\d+)(?:\.\.|-)(\d+)", part)
        if m:
            out.extend(range(int(m.group(1)), int(m.group(2)) + 1))
        elif part:
            out.append(int(part))
    return sorted(set(out))


def _write_json(path, payload):
    text = json.dumps(payload, indent=1)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ambiguity(args):
    cfg = _effective_config(args, {"tau": 0.95})
    up = volcore.read_volume(args.upper, "prob")
    low = volcore.read_volume(args.lower, "prob")
    p_fg = uncertainty.foreground_prob(up, low)
    field = uncertainty.ambiguity_field(p_fg)
    mask = uncertainty.gating_mask(field, cfg["tau"])
    if args.out_field:
        volcore.write_volume(volcore.ProbVolume(field.data, field.spacing),
                             Path(args.out_field))
    if args.out_mask:
        volcore.write_volume(
            volcore.LabelVolume(mask.data.astype(np.int64), 2, field.spacing),
            Path(args.out_mask))
    log.info("ambiguity: active fraction %.4f at tau=%g",
             float(mask.data.mean()), cfg["tau"])
    _write_json(args.json_out, {"config": cfg,
                                "active_fraction": float(mask.data.mean())})
    return 0


def cmd_sdm(args):
    cfg = _effective_config(args, {"classes": "all"})
    labels = volcore.read_volume(args.labels, "label")
    selection = _parse_classes(cfg["classes"])
    target = "foreground-union" if selection is None else selection
    sdm = geometry.signed_distance_map(labels, target)
    out = Path(args.out)
    if out.suffix == ".nii":
        volcore.write_volume(
            volcore.ScalarVolume(sdm.data.astype(np.float32), sdm.spacing), out)
    else:
        # raw keeps the exact float64 field
        volcore.write_array_raw(out, sdm.data,
                                {"spacing": list(sdm.spacing), "kind": "scalar"})
    log.info("sdm: range [%.3f, %.3f] mm over %s", sdm.data.min(),
             sdm.data.max(), labels.data.shape)
    _write_json(args.json_out, {"config": cfg,
                                "phi_min_mm": float(sdm.data.min()),
                                "phi_max_mm": float(sdm.data.max())})
    return 0


def cmd_sdmaa(args):
    cfg = _effective_config(args, {"eps": 1e-5})
    feats, _ = volcore.read_array_raw(args.features)
    prior = volcore.read_volume(args.prior, "scalar")
    arrays = params.load_weight_bundle(args.weights, args.manifest)
    ap = params.adapter_from_bundle(arrays)
    cp = params.channel_attention_from_bundle(arrays)
    out = geometry.sdmaa_forward(feats, prior.data, ap, cp, cfg["eps"])
    volcore.write_array_raw(args.out, out.data.astype(np.float32),
                            {"config": cfg})
    log.info("sdmaa: recalibrated %d channels", out.channels)
    return 0


def cmd_loss(args):
    cfg = _effective_config(args, {"lambda_ce": 1.0, "lambda_dc": 1.0,
                                   "eps": 1e-5})
    pred, _ = volcore.read_array_raw(args.pred)
    gt = volcore.read_volume(args.gt, "label")
    lcfg = losses.LossConfig(lambda_ce=cfg["lambda_ce"],
                             lambda_dc=cfg["lambda_dc"], eps=cfg["eps"])
    report, grad = losses.combined_loss(pred, gt, lcfg)
    if args.out_grad:
        volcore.write_array_raw(args.out_grad, grad.astype(np.float32))
    payload = dict(report.as_dict(), config=cfg)
    _write_json(args.json_out if args.json_out else "-", payload)
    return 0


def cmd_metrics(args):
    cfg = _effective_config(args, {"classes": "all"})
    pred = volcore.read_volume(args.pred, "label")
    gt = volcore.read_volume(args.gt, "label")
    selection = _parse_classes(cfg["classes"])
    if selection is None:
        selection = sorted(set(np.unique(pred.data)) | set(np.unique(gt.data)))
        selection = [c for c in selection if c != 0]
    report = metrics.evaluate(pred, gt, selection)
    rows = report.as_rows()
    dest = open(args.csv, "w", newline="") if args.csv else sys.stdout
    try:
        dest.write(f"# config: {json.dumps(cfg)}\n")
        writer = csv.writer(dest)
        writer.writerow(["class", "dsc", "sen", "hd95_mm", "assd_mm", "flags"])
        for cls, dsc, sen, h95, a, flags in rows:
            writer.writerow([cls, f"{dsc:.6f}", f"{sen:.6f}",
                             f"{h95:.6f}", f"{a:.6f}", flags])
        writer.writerow(["mean", f"{report.mean_dsc:.6f}",
                         f"{report.mean_sen:.6f}", f"{report.mean_hd95:.6f}",
                         f"{report.mean_assd:.6f}", ""])
    finally:
        if args.csv:
            dest.close()
    return 0


def cmd_stitch(args):
    cfg = _effective_config(args, {"overlap": 0.5, "weights": "gaussian"})
    dims = tuple(int(x) for x in args.dims.split(","))
    window = tuple(int(x) for x in args.window.split(","))
    plan = stitcher.plan_windows(dims, window, cfg["overlap"])
    payload = {"config": dict(cfg, dims=list(dims), window=list(window)),
               "stride": list(plan.stride),
               "window_origins": [list(o) for o in plan.window_origins]}
    _write_json(args.plan_json if args.plan_json else "-", payload)
    log.info("stitch: %d windows planned", len(plan.window_origins))
    return 0


_PATCH_NAME = re.compile(r"(\d+)_(\d+)_(\d+)\.raw$")


def cmd_stitch_run(args):
    cfg = _effective_config(args, {"overlap": 0.5, "weights": "gaussian"})
    plan_doc = json.loads(Path(args.plan).read_text())
    window = tuple(plan_doc["config"]["window"])
    dims = tuple(plan_doc["config"]["dims"])
    plan = stitcher.plan_windows(dims, window, plan_doc["config"]["overlap"])
    weights = stitcher.make_weight_window(window, cfg["weights"])
    patches = []
    for raw in sorted(Path(args.patches).glob("*.raw")):
        data, meta = volcore.read_array_raw(raw)
        if "window_origin" in meta:
            origin = tuple(int(o) for o in meta["window_origin"])
        else:
            m = _PATCH_NAME.search(raw.name)
            if not m:
                raise ValueError(f"{raw.name}: no window_origin in sidecar and "
                                 "filename is not *_z_y_x.raw")
            origin = tuple(int(g) for g in m.groups())
        patches.append((origin, data))
    if not patches:
        raise ValueError(f"no .raw patches found in {args.patches}")
    probs = stitcher.stitch(patches, plan, weights, dims)
    volcore.write_volume(probs, Path(args.out))
    if args.out_labels:
        volcore.write_volume(stitcher.argmax_labels(probs), Path(args.out_labels))
    log.info("stitch-run: blended %d patches into %s", len(patches), dims)
    return 0


def cmd_proximity(args):
    cfg = _effective_config(args, {"structure": "sinus", "mode": "iso-surface"})
    labels = volcore.read_volume(args.labels, "label")
    structure = cfg["structure"]
    if structure in clinical.STRUCTURE_CLASSES:
        structure_class = clinical.STRUCTURE_CLASSES[structure]
    else:
        structure_class = int(structure)
        structure = f"class{structure_class}"
    teeth = []
    for code in _parse_classes(args.teeth) or []:
        if str(code) in clinical.CLASS_FOR_FDI:
            teeth.append(clinical.CLASS_FOR_FDI[str(code)])
    if not teeth:
        raise ValueError(f"no valid FDI tooth codes in {args.teeth!r}")
    refs = clinical.read_reference_csv(args.refs) if args.refs else None
    report = clinical.proximity_report(labels, teeth, structure_class, refs,
                                       structure, cfg["mode"])
    dest = open(args.csv, "w", newline="") if args.csv else sys.stdout
    try:
        dest.write(f"# config: {json.dumps(cfg)}\n")
        writer = csv.writer(dest)
        writer.writerow(["tooth_id", "structure", "d_auto_mm", "d_ref_mm",
                         "delta_e_mm", "risk_flag"])
        for r in report.results:
            writer.writerow([r.tooth_id, r.structure, f"{r.d_auto:.6f}",
                             "" if r.d_ref is None else f"{r.d_ref:.6f}",
                             "" if r.delta_e is None else f"{r.delta_e:.6f}",
                             int(r.risk_flag)])
    finally:
        if args.csv:
            dest.close()
    for note in report.skipped:
        log.warning("proximity: skipped %s", note)
    if report.mean_delta_e is not None:
        log.info("proximity: mean delta-E %.4f mm", report.mean_delta_e)
    return 0


def _shape_from_json(doc):
    if doc.get("type") == "sphere":
        return clinical.Sphere(tuple(doc["center"]), float(doc["radius"]),
                               int(doc["cls"]))
    if doc.get("type") == "capsule":
        return clinical.Capsule(tuple(doc["a"]), tuple(doc["b"]),
                                float(doc["radius"]), int(doc["cls"]))
    raise ValueError(f"unknown phantom shape {doc.get('type')!r}")


def cmd_phantom(args):
    doc = json.loads(Path(args.spec).read_text())
    spec = clinical.PhantomSpec(
        dims=tuple(doc["dims"]),
        spacing=tuple(doc.get("spacing", (1.0, 1.0, 1.0))),
        origin=tuple(doc.get("origin", (0.0, 0.0, 0.0))),
        shapes=tuple(_shape_from_json(s) for s in doc.get("shapes", ())))
    labels = clinical.make_phantom(spec)
    volcore.write_volume(labels, Path(args.out))
    log.info("phantom: %d foreground voxels", int((labels.data > 0).sum()))
    return 0


def cmd_selftest(args):
    return selftest.run_selftest(sys.stdout)


# ---------------------------------------------------------------------------
# Kernel dispatch (shared fixtures for foreign-function bindings)
# ---------------------------------------------------------------------------

def _kernel_dispatch(op, arrs, scalars):
    """Run one named kernel on raw arrays; returns (arrays, scalars) outputs."""
    if op == "sdm":
        labels = volcore.LabelVolume(
            arrs["labels"].astype(np.int64),
            int(arrs["labels"].max()) + 1,
            tuple(scalars.get("spacing", (1.0, 1.0, 1.0))))
        sdm = geometry.signed_distance_map(labels)
        return {"phi": sdm.data}, {}
    if op == "ambiguity":
        field = uncertainty.ambiguity_field(arrs["p_fg"])
        return {"field": field.data}, {}
    if op == "gate":
        field = uncertainty.AmbiguityField(arrs["field"])
        mask = uncertainty.gating_mask(field, scalars["tau"])
        return {"mask": mask.data.astype(np.uint8)}, {}
    if op == "gated_fusion":
        mask = uncertainty.GatingMask(arrs["mask"] > 0, scalars.get("tau", 0.95))
        fused = uncertainty.gated_fusion(arrs["f_in"], arrs["f_ref"], mask,
                                         scalars["alpha"])
        return {"fused": fused.data}, {}
    if op == "gated_fusion_grad":
        mask = uncertainty.GatingMask(arrs["mask"] > 0, scalars.get("tau", 0.95))
        g_in, g_ref, g_a = uncertainty.gated_fusion_grad(
            arrs["f_in"], arrs["f_ref"], mask, scalars["alpha"],
            arrs["upstream"])
        return {"grad_f_in": g_in.data, "grad_f_ref": g_ref.data}, \
               {"grad_alpha": g_a}
    if op == "awp":
        z = geometry.anatomical_weighted_pooling(arrs["x"], arrs["m"],
                                                 scalars.get("eps", 1e-5))
        return {"z": z}, {}
    if op == "awp_grad":
        gx, gm = geometry.awp_grad(arrs["x"], arrs["m"],
                                   scalars.get("eps", 1e-5), arrs["upstream"])
        return {"grad_x": gx.data, "grad_m": gm}, {}
    if op == "soft_dice":
        gt = volcore.LabelVolume(arrs["gt"].astype(np.int64),
                                 arrs["pred"].shape[0])
        loss, grad = losses.soft_dice(arrs["pred"], gt, scalars.get("eps", 1e-5))
        return {"grad": grad}, {"loss": loss}
    if op == "cross_entropy":
        gt = volcore.LabelVolume(arrs["gt"].astype(np.int64),
                                 arrs["pred"].shape[0])
        loss, grad = losses.cross_entropy(arrs["pred"], gt)
        return {"grad": grad}, {"loss": loss}
    if op == "surface_distances":
        spacing = tuple(scalars.get("spacing", (1.0, 1.0, 1.0)))
        cls = int(scalars.get("cls", 1))
        nc = int(max(arrs["pred"].max(), arrs["gt"].max())) + 1
        sp = metrics.extract_surface(
            volcore.LabelVolume(arrs["pred"].astype(np.int64), nc, spacing), cls)
        sg = metrics.extract_surface(
            volcore.LabelVolume(arrs["gt"].astype(np.int64), nc, spacing), cls)
        return {}, {"hd95": metrics.hd95(sp, sg), "assd": metrics.assd(sp, sg)}
    if op == "stitch":
        dims = tuple(int(d) for d in scalars["dims"])
        window = tuple(arrs["patches"].shape[-3:])
        plan = stitcher.plan_windows(dims, window, scalars.get("overlap", 0.5))
        weights = stitcher.make_weight_window(
            window, scalars.get("weights", "uniform"))
        origins = arrs["origins"].astype(int)
        patches = [(tuple(origins[i]), arrs["patches"][i])
                   for i in range(origins.shape[0])]
        out = stitcher.stitch(patches, plan, weights, dims)
        return {"probs": out.data}, {}
    raise ValueError(f"unknown kernel op {op!r}")


def cmd_kernel(args):
    request = json.loads(Path(args.request).read_text())
    base = Path(args.request).parent
    arrs = {name: volcore.read_array_raw(base / rel)[0]
            for name, rel in request.get("inputs", {}).items()}
    out_arrays, out_scalars = _kernel_dispatch(
        request["op"], arrs, request.get("scalars", {}))
    for name, rel in request.get("outputs", {}).items():
        if name in out_arrays:
            volcore.write_array_raw(base / rel,
                                    np.asarray(out_arrays[name]))
    payload = {"op": request["op"], "scalars": out_scalars,
               "config": request.get("scalars", {})}
    _write_json(args.json_out if args.json_out else "-", payload)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON config file (flags take precedence)")
    p.add_argument("--log-level", choices=["debug", "info", "warning", "error"])
    p.add_argument("--threads", type=int,
                   help="cap worker threads (default: VOXGEO_THREADS or cores)")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="voxgeo",
        description="Volumetric geometry and uncertainty toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ambiguity", help="ambiguity field and gating mask")
    p.add_argument("--upper", required=True)
    p.add_argument("--lower", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--out-field")
    p.add_argument("--out-mask")
    p.add_argument("--json-out")
    _add_common(p)
    p.set_defaults(func=cmd_ambiguity)

    p = sub.add_parser("sdm", help="signed distance map of a label region")
    p.add_argument("--labels", required=True)
    p.add_argument("--classes", help='"all", "1..32", or comma list')
    p.add_argument("--out", required=True)
    p.add_argument("--json-out")
    _add_common(p)
    p.set_defaults(func=cmd_sdm)

    p = sub.add_parser("sdmaa", help="shape-prior channel recalibration")
    p.add_argument("--features", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--eps", type=float)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_sdmaa)

    p = sub.add_parser("loss", help="combined CE + Dice loss report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--lambda-ce", type=float)
    p.add_argument("--lambda-dc", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--out-grad")
    p.add_argument("--json-out")
    p.add_argument("--json", action="store_true",
                   help="print the report as JSON (default behaviour)")
    _add_common(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("metrics", help="overlap and surface-distance metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes")
    p.add_argument("--csv")
    _add_common(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("stitch", help="plan sliding-window origins")
    p.add_argument("--dims", required=True)
    p.add_argument("--window", required=True)
    p.add_argument("--overlap", type=float)
    p.add_argument("--weights", choices=["uniform", "gaussian"])
    p.add_argument("--plan-json")
    _add_common(p)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("stitch-run", help="blend origin-tagged patches")
    p.add_argument("--patches", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--weights", choices=["uniform", "gaussian"])
    p.add_argument("--out", required=True)
    p.add_argument("--out-labels")
    _add_common(p)
    p.set_defaults(func=cmd_stitch_run)

    p = sub.add_parser("proximity", help="tooth-to-structure distance report")
    p.add_argument("--labels", required=True)
    p.add_argument("--teeth", required=True, help='FDI codes, e.g. "14-18,24-28"')
    p.add_argument("--structure")
    p.add_argument("--mode", choices=["iso-surface", "voxel-centers"])
    p.add_argument("--refs")
    p.add_argument("--csv")
    _add_common(p)
    p.set_defaults(func=cmd_proximity)

    p = sub.add_parser("phantom", help="rasterize a synthetic phantom")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("selftest", help="run the embedded oracle suite")
    _add_common(p)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("kernel", help="run one named kernel from a JSON request")
    p.add_argument("--request", required=True)
    p.add_argument("--json-out")
    _add_common(p)
    p.set_defaults(func=cmd_kernel)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup(args)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
