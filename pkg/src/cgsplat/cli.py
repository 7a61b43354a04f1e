"""Command-line entry point: ``cgsplat {generate,train,render,select,segment3d,eval}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .metrics import Query, evaluate
from .rasterizer import rasterize
from .scene import SegmentMask
from .segmenter import (
    DegenerateQueryError, convex_hull_extract, object_mask, query_feature, select_gaussians_3d, similarity_map,
)
from .synthdata import SceneSpec, View, make_dataset, prompt_pixel
from .trainer import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pixel(text: str) -> tuple[int, int]:
    try:
        u, v = (int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected u,v integers, got {text!r}") from None
    return u, v


def _manifest(data_dir) -> tuple[io.Manifest, Path]:
    root = Path(data_dir)
    return io.load_manifest(root / "manifest.json"), root


# ---- generate ----------------------------------------------------------------

def cmd_generate(args) -> int:
    opts = {}
    if args.spec:
        try:
            opts = json.loads(Path(args.spec).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{args.spec}: {exc}") from exc
        if not isinstance(opts, dict):
            raise ValueError(f"{args.spec}: expected a JSON object")
    corruption = {k: opts.pop(k) for k in ("split_prob", "drop_prob", "test_every") if k in opts}
    if args.seed is not None:
        opts["rng_seed"] = args.seed
    try:
        spec = SceneSpec(**opts)
    except TypeError as exc:
        raise ValueError(f"invalid scene spec: {exc}") from exc
    ds = make_dataset(spec, **corruption)

    out = io.ensure_dir(args.out)
    for sub in ("images", "masks", "gt"):
        io.ensure_dir(out / sub)
    io.save_cloud(out / "scene.ply", ds.scene.cloud, ds.scene.instance_id)
    records = []
    for split, views in (("train", ds.train), ("test", ds.test)):
        for v in views:
            name = f"{v.index:03d}"
            io.save_image(out / "images" / f"{name}.ppm", v.image)
            io.save_mask(out / "masks" / f"{name}.pgm", v.mask)
            io.save_mask(out / "gt" / f"{name}.pgm", v.gt_mask)
            records.append((v.index, io.ViewRecord(v.camera, split, f"images/{name}.ppm",
                                                   f"masks/{name}.pgm", f"gt/{name}.pgm")))
    records.sort(key=lambda r: r[0])
    extra = {"spec": dataclasses.asdict(spec), **corruption}
    m = io.Manifest("synthetic", spec.feature_dim, [r for _, r in records], "scene.ply", extra)
    io.save_manifest(out / "manifest.json", m)
    return EXIT_OK


# ---- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    m, root = _manifest(args.data)
    views = []
    for i in m.split("train"):
        r = m.views[i]
        views.append(View(r.camera, io.load_image(root / r.image), io.load_mask(root / r.mask), index=i))
    init = args.init or (root / m.cloud if m.cloud else None)
    if init is None:
        raise FileNotFoundError("no initial cloud: pass --init or list one in the manifest")
    cloud = io.load_cloud(init)

    cfg = TrainConfig(iterations=args.iters, freeze_geometry=args.freeze_geometry,
                      lambda_clustering=args.lambda_clustering, rng_seed=args.seed,
                      use_regularization=not args.no_regularization, densify=not args.no_densify)
    if args.clustering_every is not None:
        cfg.clustering_every = args.clustering_every
    if args.regularization_every is not None:
        cfg.regularization_every = args.regularization_every
    if args.feature_lr is not None:
        cfg.learning_rates["features"] = args.feature_lr
    cfg.__post_init__()

    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    with open(log_path, "w") as fh:
        result = train(cloud, views, cfg, log_file=fh, record_time=args.timing)
    io.save_cloud(args.out, result.cloud)
    return EXIT_OK


# ---- render / select / segment3d ---------------------------------------------

def _camera(args):
    ref = args.camera
    if Path(ref).is_file():
        return io.camera_from_record(json.loads(Path(ref).read_text()))
    try:
        idx = int(ref)
    except ValueError:
        raise ValueError(f"camera {ref!r} is neither an index nor a camera file") from None
    if not args.data:
        raise ValueError("a camera index needs --data")
    m, _ = _manifest(args.data)
    if not 0 <= idx < len(m.views):
        raise ValueError(f"camera index {idx} out of range (0..{len(m.views) - 1})")
    return m.views[idx].camera


def _view_camera(args):
    m, _ = _manifest(args.data)
    if not 0 <= args.view < len(m.views):
        raise ValueError(f"view {args.view} out of range (0..{len(m.views) - 1})")
    return m.views[args.view].camera


def cmd_render(args) -> int:
    cloud = io.load_cloud(args.model)
    out = rasterize(cloud, _camera(args))
    if args.out_image:
        io.save_image(args.out_image, out.color)
    if args.out_feat:
        io.save_feature_map(args.out_feat, out.features)
    return EXIT_OK


def cmd_select(args) -> int:
    cloud = io.load_cloud(args.model)
    cam = _view_camera(args)
    q = query_feature(cloud, cam, args.pixel)
    mask = object_mask(similarity_map(rasterize(cloud, cam).features, q), args.t)
    io.save_mask(args.out_mask, SegmentMask(mask.astype(np.int64)))
    return EXIT_OK


def cmd_segment3d(args) -> int:
    cloud = io.load_cloud(args.model)
    cam = _view_camera(args)
    q = query_feature(cloud, cam, args.pixel)
    seeds = select_gaussians_3d(cloud, q, args.t)
    if len(seeds) == 0:
        raise ValueError(f"no Gaussian reaches similarity {args.t} for pixel {args.pixel}")
    sel = convex_hull_extract(cloud, seeds)
    io.save_cloud(args.out, cloud.subset(sel.hull_indices))
    return EXIT_OK


# ---- eval --------------------------------------------------------------------

def _queries(path, m: io.Manifest, root: Path) -> list[Query]:
    if path:
        items = json.loads(Path(path).read_text())
    else:
        first = m.split("test")[0]
        ids = np.unique(io.load_mask(root / m.views[first].gt_mask).labels)
        items = [{"object_id": int(k), "view": first} for k in ids if k > 0]
    queries = []
    for it in items:
        r = m.views[int(it["view"])]
        if "pixel" in it:
            prompt = tuple(int(c) for c in it["pixel"])
        else:
            if not r.gt_mask:
                raise FileNotFoundError(f"view {it['view']} has no ground-truth mask")
            prompt = (io.load_mask(root / r.gt_mask), int(it["object_id"]))
        queries.append(Query(int(it["object_id"]), prompt, r.camera))
    return queries


def cmd_eval(args) -> int:
    m, root = _manifest(args.data)
    cloud = io.load_cloud(args.model)
    test = m.split("test")
    for i in test:
        if not m.views[i].gt_mask:
            raise FileNotFoundError(f"test view {i} has no ground-truth mask")
    gts = [io.load_mask(root / m.views[i].gt_mask) for i in test]
    report = evaluate(cloud, [m.views[i].camera for i in test], gts, _queries(args.queries, m, root), args.t)
    if not args.timing:
        report.render_ms = []
    text = report.to_records() if str(args.out).endswith(".jsonl") else report.to_table()
    Path(args.out).write_text(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cgsplat", description="Contrastive Gaussian clustering on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--spec", help="JSON scene spec (defaults apply to missing fields)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="optimize a cloud on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="initial cloud (default: the manifest's cloud)")
    t.add_argument("--iters", type=int, default=30000)
    t.add_argument("--freeze-geometry", action="store_true")
    t.add_argument("--lambda-clustering", type=float, default=1e-6)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--clustering-every", type=int)
    t.add_argument("--regularization-every", type=int)
    t.add_argument("--feature-lr", type=float)
    t.add_argument("--no-regularization", action="store_true")
    t.add_argument("--no-densify", action="store_true")
    t.add_argument("--log", help="JSONL training log (default: <out>.log.jsonl)")
    t.add_argument("--timing", action="store_true", help="add wall-clock ms to log records")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render color and features for one camera")
    r.add_argument("--model", required=True)
    r.add_argument("--camera", required=True, help="view index (with --data) or camera JSON file")
    r.add_argument("--data")
    r.add_argument("--out-image")
    r.add_argument("--out-feat")
    r.set_defaults(func=cmd_render)

    for name, fn, help_ in (("select", cmd_select, "2D mask for a prompted pixel"),
                            ("segment3d", cmd_segment3d, "extract the Gaussians of a prompted object")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--model", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--view", type=int, required=True)
        s.add_argument("--pixel", type=_pixel, required=True, help="u,v")
        s.add_argument("--t", type=float, default=0.7)
        s.add_argument("--out-mask" if name == "select" else "--out", required=True)
        s.set_defaults(func=fn)

    e = sub.add_parser("eval", help="mIoU / mBIoU over the test views")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--queries", help="JSON list of {object_id, view, [pixel]}")
    e.add_argument("--out", required=True, help="report path; .jsonl writes records, otherwise a table")
    e.add_argument("--t", type=float, default=0.7)
    e.add_argument("--timing", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, IndexError, KeyError, DegenerateQueryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
