"""Command-line entry point.

Subcommands: synth | train | segment | eval | ablate | gradcheck.
Exit codes: 0 success, 2 usage error (argparse), 3 data/contract error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint
from .errors import (ContractViolation, DegenerateGeometryError,
                     GenerationError, MeshFormatError, NonFiniteError,
                     PartialDecimationError, TapeConsumedError)
from .synth import ArchSpec, generate_arch

DATA_ERRORS = (ContractViolation, MeshFormatError, DegenerateGeometryError,
               PartialDecimationError, GenerationError, NonFiniteError,
               TapeConsumedError, OSError, json.JSONDecodeError)

# fixed per-class colors for --color-mesh output (RGB in [0,1])
_PALETTE = np.array([
    [0.75, 0.75, 0.75], [0.89, 0.10, 0.11], [0.22, 0.49, 0.72],
    [0.30, 0.69, 0.29], [0.60, 0.31, 0.64], [1.00, 0.50, 0.00],
    [1.00, 1.00, 0.20], [0.65, 0.34, 0.16], [0.97, 0.51, 0.75],
])


def cmd_synth(args):
    from .meshio import write_labels, write_mesh
    os.makedirs(args.out, exist_ok=True)
    items = []
    for i in range(args.count):
        spec = ArchSpec(teeth=args.classes - 1, cells=args.cells,
                        seed=args.seed + i)
        mesh = generate_arch(spec)
        mesh_name = f"arch_{i:03d}.off"
        label_name = f"arch_{i:03d}.labels"
        write_mesh(os.path.join(args.out, mesh_name), mesh)
        write_labels(os.path.join(args.out, label_name), mesh.labels)
        items.append({"mesh": mesh_name, "labels": label_name})
    manifest = {"classes": args.classes, "count": args.count,
                "cells": args.cells, "seed": args.seed, "items": items}
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {args.count} meshes to {args.out}")
    return 0


def cmd_train(args):
    from .training import load_dataset, parse_config, train, write_log
    cfg = parse_config(args.config)
    dataset, classes = load_dataset(args.data)
    if cfg.classes != classes:
        raise ContractViolation(
            f"config says {cfg.classes} classes, dataset manifest says {classes}")
    log_path = args.log or args.out + ".log.csv"

    def report(row):
        epoch, lr, loss, oa, miou = row
        print(f"epoch {epoch:4d}  lr {lr:.2e}  loss {loss:.4f}  "
              f"oa {oa:.4f}  miou {miou:.4f}")

    _, rows = train(dataset, cfg, variant=args.variant,
                    ckpt_path=args.out, on_epoch=report)
    write_log(log_path, rows)
    print(f"checkpoint: {args.out}\nlog: {log_path}")
    return 0


def cmd_segment(args):
    from .meshio import cell_descriptors, load_mesh, write_labels
    model, _ = load_checkpoint(args.model)
    mesh = load_mesh(args.mesh)
    desc = cell_descriptors(mesh)
    probs = model.forward(desc, train=False)
    labels = np.argmax(probs.data, axis=1)
    write_labels(args.out, labels)
    if args.color_mesh:
        _write_colored_obj(args.color_mesh, mesh, labels, model.n_classes)
    print(f"wrote {len(labels)} labels to {args.out}")
    return 0


def _write_colored_obj(path, mesh, labels, n_classes):
    """OBJ with per-vertex colors (v x y z r g b); a vertex takes the label
    of the first face that uses it."""
    colors = np.zeros((mesh.n_vertices, 3))
    assigned = np.zeros(mesh.n_vertices, dtype=bool)
    palette = _PALETTE[np.asarray(labels) % len(_PALETTE)]
    for fi, face in enumerate(mesh.faces):
        for v in face:
            if not assigned[v]:
                colors[v] = palette[fi]
                assigned[v] = True
    with open(path, "w") as f:
        for p, c in zip(mesh.vertices, colors):
            f.write("v %.17g %.17g %.17g %.4f %.4f %.4f\n" % (*p, *c))
        for a, b, c in mesh.faces:
            f.write(f"f {a + 1} {b + 1} {c + 1}\n")


def cmd_eval(args):
    from .meshio import read_labels
    from .metrics import (confusion_matrix, iou_from_confusion,
                          oa_from_confusion)
    pred = read_labels(args.pred)
    truth = read_labels(args.truth)
    if len(pred) != len(truth):
        raise ContractViolation(
            f"pred has {len(pred)} labels, truth has {len(truth)}")
    conf = confusion_matrix(pred, truth, args.classes)
    ious = iou_from_confusion(conf)
    print("oa,miou," + ",".join(f"iou_c{c}" for c in range(args.classes)))
    cells = [repr(oa_from_confusion(conf)), repr(float(np.nanmean(ious)))]
    cells += ["" if np.isnan(v) else repr(float(v)) for v in ious]
    print(",".join(cells))
    return 0


def cmd_ablate(args):
    from .layers import canonical_variant
    from .training import load_dataset, parse_config, train, write_log
    cfg_base = parse_config(args.config)
    dataset, classes = load_dataset(args.data)
    if cfg_base.classes != classes:
        raise ContractViolation("config/dataset class count mismatch")
    runs = _parse_grid(args.grid)
    os.makedirs(args.out, exist_ok=True)

    summary = ["variant,K,epoch0_loss,final_loss,oa,miou"]
    for variant, k_override in runs:
        import dataclasses
        cfg = dataclasses.replace(cfg_base)
        if k_override is not None:
            cfg.K = k_override
        canonical_variant(variant)  # fail fast on unknown names
        _, rows = train(dataset, cfg, variant=variant)
        tag = variant if k_override is None else f"{variant}_K{k_override}"
        write_log(os.path.join(args.out, _safe(tag) + ".csv"), rows)
        first, last = rows[0], rows[-1]
        summary.append(f"{variant},{cfg.K},{first[2]!r},{last[2]!r},"
                       f"{last[3]!r},{last[4]!r}")
        print(f"{tag}: loss {first[2]:.4f} -> {last[2]:.4f}  "
              f"oa {last[3]:.4f}  miou {last[4]:.4f}")
    with open(os.path.join(args.out, "summary.csv"), "w") as f:
        f.write("\n".join(summary) + "\n")
    print(f"summary: {os.path.join(args.out, 'summary.csv')}")
    return 0


def _safe(tag):
    return tag.replace("+", "plus").replace("/", "_")


def _parse_grid(path):
    """One run per line: a variant name, optionally followed by K=<int>."""
    runs = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            k = None
            if len(parts) == 2 and parts[1].startswith("K="):
                k = int(parts[1][2:])
            elif len(parts) != 1:
                raise ContractViolation(
                    f"grid line {lineno}: expected 'VARIANT [K=<int>]'")
            runs.append((parts[0], k))
    if not runs:
        raise ContractViolation("empty ablation grid")
    return runs


def cmd_gradcheck(args):
    from .gradcheck import TOL, run_all
    results = run_all(seed=args.seed)
    ok = True
    for name, err, passed in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name:<24s} "
              f"max_rel_err={err:.3e} (tol {TOL:g})")
        ok = ok and passed
    return 0 if ok else 3


def build_parser():
    p = argparse.ArgumentParser(prog="meshseg",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate labeled synthetic arch meshes")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--cells", type=int, default=1024)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--variant", default="full")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="CSV log path (default <out>.log.csv)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("segment", help="label a mesh with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--mesh", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--color-mesh", dest="color_mesh",
                   help="also write an OBJ with per-class vertex colors")
    s.set_defaults(fn=cmd_segment)

    s = sub.add_parser("eval", help="compare predicted and true labels")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--classes", type=int, required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="run a variant grid with paired seeds")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
