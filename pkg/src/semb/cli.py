"""Command-line interface.

Subcommands: basis, align, eval, transfer, export-colors, gradcheck.
Exit codes are stable for scripting: 0 on success, 2 on any input or
contract error, 3 on numerical divergence (gradcheck additionally exits 1
when a gradient check fails).  Every command is deterministic given its
config and seed; reruns produce byte-identical outputs.
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import io as sio
from .errors import DivergenceError, SembError
from .losses import LossWeights
from .mesh import load_mesh, write_ply
from .metrics import (GPS_KAPPA, KeypointSet, alignment_map, gerr, gps_set,
                      pck_transfer, transfer_keypoints)
from .embedding import PixelField
from .optimize import (TrainConfig, _term_evaluator, grad_check,
                       max_relative_gradient_error, train)
from .losses import make_omega_samples

GRADCHECK_TOLERANCE = 1e-4


def _train_config(config):
    t = config.train
    return TrainConfig(
        steps=t.get("steps", 500),
        learning_rate=t.get("learning_rate", 1e-2),
        lr_drops=tuple((int(s), float(f)) for s, f in t.get("lr_drops", [])),
        weights=config.weights if config.weights is not None else LossWeights(),
        seed=config.seed,
        optimizer=t.get("optimizer", "adam"),
        beta1=t.get("beta1", 0.9),
        beta2=t.get("beta2", 0.999),
        epsilon=t.get("epsilon", 1e-8),
    )


def _load_config(path):
    doc = sio.read_json(path)
    config = sio.parse_problem_config(doc)
    return doc, config


def cmd_basis(args):
    mesh = load_mesh(args.mesh)
    basis = sio.cached_basis(mesh, args.q)
    out = Path(args.out)
    sio.write_matrix(out, basis.U)
    sio.write_matrix(str(out) + ".eigenvalues", basis.eigenvalues)
    sio.write_json(str(out) + ".json", {
        "mesh_hash": mesh.content_hash(),
        "num_vertices": mesh.num_vertices,
        "num_modes": basis.num_modes,
    })
    print(f"basis {basis.U.shape[0]} x {basis.U.shape[1]} written to {out}")
    return 0


def cmd_align(args):
    doc, config = _load_config(args.config)
    base_dir = Path(args.config).parent
    problem = sio.build_problem(config, base_dir=base_dir)
    report = train(_train_config(config), problem)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sio.write_json(out / "report.json", {
        "history": report.history,
        "config": doc,
    })
    for cid in sorted(problem.embeddings):
        emb = problem.embeddings[cid]
        path = out / f"embedding_{cid}.semb"
        sio.write_matrix(path, emb.ehat)
        sio.write_json(str(path) + ".json", {
            "category_id": cid,
            "q": emb.basis.num_modes,
            "d": emb.dim,
            "k": emb.num_vertices,
            "mode": problem.mode,
            "mesh_hash": problem.meshes[cid].content_hash(),
        })

    maps = {}
    cats = sorted(problem.embeddings)
    for m in cats:
        for n in cats:
            if m == n:
                continue
            vmap = alignment_map(problem.embeddings[m], problem.embeddings[n],
                                 mode=problem.mode)
            maps[(m, n)] = vmap
            sio.write_vertex_map_csv(out / f"vertex_map_{m}_to_{n}.csv",
                                     vmap.assignment)

    pair_metrics = {}
    for (m, n, path) in config.ground_truth_maps:
        gt_path = Path(path)
        if not gt_path.is_absolute():
            gt_path = base_dir / gt_path
        truth = sio.read_vertex_map_csv(gt_path)
        vmap = maps[(m, n)]
        geo = problem.geodesics[n]
        pair_metrics[f"{m}->{n}"] = {
            "gerr": gerr(vmap.assignment, truth, geo),
            "gps": gps_set(vmap.assignment, truth, geo),
        }
    metrics_doc = {"pairs": pair_metrics, "kappa": GPS_KAPPA, "mode": problem.mode,
                   "seed": config.seed}
    if pair_metrics:
        metrics_doc["mean_gerr"] = float(
            np.mean([v["gerr"] for v in pair_metrics.values()]))
        metrics_doc["mean_gps"] = float(
            np.mean([v["gps"] for v in pair_metrics.values()]))
    sio.write_json(out / "metrics.json", metrics_doc)
    print(f"wrote report, embeddings, vertex maps, metrics to {out}",
          file=sys.stderr)
    print(f"wall clock: {report.wall_clock:.2f}s", file=sys.stderr)
    return 0


def cmd_eval(args):
    mesh_src = load_mesh(args.mesh_source)
    mesh_tgt = load_mesh(args.mesh_target)
    assignment = sio.read_vertex_map_csv(args.map)
    if len(assignment) != mesh_src.num_vertices:
        raise SembError(
            f"map has {len(assignment)} rows, source mesh has {mesh_src.num_vertices}")
    if assignment.max() >= mesh_tgt.num_vertices or assignment.min() < 0:
        raise SembError("map target index out of range")
    geo = sio.cached_geodesics(mesh_tgt, normalized=True)

    if args.keypoints_source and args.keypoints_target:
        kp_src = sio.read_json(args.keypoints_source)
        kp_tgt = sio.read_json(args.keypoints_target)
        names = sorted(set(kp_src) & set(kp_tgt))
        if not names:
            raise SembError("keypoint files share no landmark names")
        predicted = np.array([assignment[int(kp_src[n])] for n in names])
        truth = np.array([int(kp_tgt[n]) for n in names])
        count = len(names)
    elif args.keypoints_source or args.keypoints_target:
        raise SembError("need both --keypoints-source and --keypoints-target")
    else:
        if mesh_src.num_vertices != mesh_tgt.num_vertices:
            raise SembError(
                "without keypoints, dense evaluation assumes identity ground truth "
                "and needs equal vertex counts")
        predicted = assignment
        truth = np.arange(mesh_tgt.num_vertices)
        count = mesh_tgt.num_vertices

    print(sio.dumps_canonical({
        "gerr": gerr(predicted, truth, geo),
        "gps": gps_set(predicted, truth, geo),
        "count": count,
        "kappa": GPS_KAPPA,
    }))
    return 0


def _load_field(scene_path, field_path):
    scene = sio.read_scene(scene_path)
    grid = sio.read_matrix(field_path)
    if grid.ndim != 3 or grid.shape[:2] != scene.mask.shape:
        raise SembError(f"field {field_path} does not match scene resolution")
    return scene, PixelField(grid, scene.mask, scene_id=scene.scene_id,
                             category_id=scene.category_id)


def cmd_transfer(args):
    _, src_field = _load_field(args.source_scene, args.source_field)
    tgt_scene, tgt_field = _load_field(args.target_scene, args.target_field)
    kp_src_doc = sio.read_json(args.keypoints_source)
    kp_tgt_doc = sio.read_json(args.keypoints_target)
    for name, entry in list(kp_src_doc.items()) + list(kp_tgt_doc.items()):
        if not isinstance(entry, list) or len(entry) != 3:
            raise SembError(f"keypoint {name!r} must be [row, col, visible]")
    kp_src = KeypointSet(kp_src_doc)
    kp_tgt = KeypointSet(kp_tgt_doc)

    predictions = transfer_keypoints(src_field, kp_src, tgt_field, mode=args.mode)
    rows, cols = np.nonzero(tgt_scene.mask)
    box_h = int(rows.max() - rows.min() + 1)
    box_w = int(cols.max() - cols.min() + 1)
    score = pck_transfer(predictions, kp_tgt, box_h, box_w, alpha=args.alpha)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sio.write_json(out / "predictions.json",
                   {name: [int(r), int(c)] for name, (r, c) in predictions.items()})
    sio.write_json(out / "score.json", {
        "pck": score,
        "alpha": args.alpha,
        "box": [box_h, box_w],
        "mode": args.mode,
        "landmarks": len(predictions),
    })
    print(sio.dumps_canonical({"pck": score}))
    return 0


def cmd_export_colors(args):
    if not (len(args.embedding) == len(args.mesh) == len(args.out)):
        raise SembError("--embedding, --mesh, and --out must be given equally often")
    meshes = []
    expanded = []
    for emb_path, mesh_path in zip(args.embedding, args.mesh):
        mesh = load_mesh(mesh_path)
        sidecar = sio.read_json(str(emb_path) + ".json")
        if sidecar.get("mesh_hash") != mesh.content_hash():
            raise SembError(f"embedding {emb_path} was not trained on mesh {mesh_path}")
        ehat = sio.read_matrix(emb_path)
        basis = sio.cached_basis(mesh, sidecar["q"])
        meshes.append(mesh)
        expanded.append(basis.U @ ehat)
    colors = sio.embedding_colors(expanded, seed=args.seed)
    comment = f"semb color export: shared 3-component projection, seed {args.seed}"
    for mesh, rgb, out in zip(meshes, colors, args.out):
        write_ply(mesh, out, colors=rgb, comments=[comment])
    print(f"wrote {len(args.out)} colored PLY file(s)")
    return 0


def cmd_gradcheck(args):
    _, config = _load_config(args.config)
    problem = sio.build_problem(config, base_dir=Path(args.config).parent)
    problem.initialize(config.seed)
    weights = config.weights if config.weights is not None else LossWeights()

    terms = []
    if problem.annotations:
        terms.append("sup")
    if problem.anchors:
        terms.append("anchor")
    if weights.lambda_m2m > 0 and len(problem.embeddings) >= 2:
        terms.append("m2m")
    if weights.lambda_i2m > 0 and problem.fields:
        terms.append("i2m_all" if weights.i2m_variant == "all" else "i2m")
    if not terms:
        raise SembError("no loss term is enabled by this config")

    corrupt = float(os.environ.get("SEMB_TEST_CORRUPT_GRAD", "0") or 0)
    failed = False
    print(f"{'term':<10} {'max rel err':>14} {'status':>8}")
    for term in terms:
        if corrupt:
            omega = make_omega_samples(problem, seed=(config.seed, 777)) \
                if problem.fields else None
            inner = _term_evaluator(problem, term, omega, weights)

            def fn(params, _inner=inner):
                value, grads = _inner(params)
                grads = dict(grads)
                first = sorted(grads)[0]
                grads[first] = grads[first] + corrupt
                return value, grads

            err = max_relative_gradient_error(fn, problem.parameters(),
                                              n_coords=args.coords, seed=config.seed)
        else:
            err = grad_check(problem, term, n_coords=args.coords,
                             seed=config.seed, weights=weights)
        ok = err < GRADCHECK_TOLERANCE
        failed = failed or not ok
        print(f"{term:<10} {err:>14.3e} {'ok' if ok else 'FAIL':>8}")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="semb",
        description="Surface-embedding correspondence: train, evaluate, export.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("basis", help="compute and cache a spectral basis")
    p.add_argument("--mesh", required=True)
    p.add_argument("--q", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("align", help="train embeddings and export alignment artifacts")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="evaluate a vertex map CSV against ground truth")
    p.add_argument("--map", required=True)
    p.add_argument("--mesh-source", required=True)
    p.add_argument("--mesh-target", required=True)
    p.add_argument("--keypoints-source")
    p.add_argument("--keypoints-target")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="transfer keypoints between two scenes")
    p.add_argument("--source-scene", required=True)
    p.add_argument("--source-field", required=True)
    p.add_argument("--target-scene", required=True)
    p.add_argument("--target-field", required=True)
    p.add_argument("--keypoints-source", required=True)
    p.add_argument("--keypoints-target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="neg_inner",
                   choices=["neg_inner", "inner", "neg_sqdist"])
    p.add_argument("--alpha", type=float, default=0.1)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("export-colors",
                       help="write vertex-colored PLYs from a shared projection")
    p.add_argument("--embedding", action="append", required=True)
    p.add_argument("--mesh", action="append", required=True)
    p.add_argument("--out", action="append", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_colors)

    p = sub.add_parser("gradcheck", help="finite-difference check of enabled losses")
    p.add_argument("--config", required=True)
    p.add_argument("--coords", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SembError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
