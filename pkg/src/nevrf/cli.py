"""Command-line pipeline: dataset synthesis, sequential training, rendering,
compression, and evaluation.

Exit codes: 0 ok, 2 bad config/spec, 3 I/O failure, 4 missing artifact,
5 evaluation mismatch.
"""

from __future__ import annotations

import argparse
import glob
import json
import math
import os
import sys

import numpy as np

from . import codec, synth, training
from .config import dump_train_config, load_train_config
from .errors import FormatError, NevrfError
from .grid import AlignedGroupGrids, load_nvgd, save_nvgd
from .nn import load_checkpoint, save_checkpoint
from .renderer import RayMarchConfig, compute_featmaps, frame_tensors, psnr, render_image
from .scene import (
    Camera,
    load_frame,
    load_image,
    load_manifest,
    save_image,
)
from .training import TrainLogger, TrainerState, init_state, train_group

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING = 4
EXIT_EVAL = 5


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        with open(args.spec) as f:
            doc = json.load(f)
    except FileNotFoundError:
        return _fail(EXIT_MISSING, f"scene spec not found: {args.spec}")
    except json.JSONDecodeError as e:
        return _fail(EXIT_CONFIG, f"bad spec JSON at line {e.lineno} col {e.colno}: {e.msg}")
    try:
        spec = synth.spec_from_json(doc)
        if args.seed is not None:
            spec.seed = args.seed
    except (FormatError, KeyError, ValueError, TypeError) as e:
        return _fail(EXIT_CONFIG, f"bad scene spec: {e}")
    try:
        os.makedirs(args.out, exist_ok=True)
        manifest = synth.make_dataset(spec, args.out, image_format=args.format)
    except (OSError, PermissionError) as e:
        return _fail(EXIT_IO, f"cannot write dataset: {e}")
    n_imgs = spec.n_frames * spec.rig.n_cameras
    print(json.dumps({"manifest": manifest, "frames": spec.n_frames,
                      "views": spec.rig.n_cameras, "images": n_imgs}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _find_manifest(path: str) -> str:
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    return path


def cmd_train(args) -> int:
    manifest = _find_manifest(args.dataset)
    if not os.path.exists(manifest):
        return _fail(EXIT_MISSING, f"dataset manifest not found: {manifest}")
    try:
        cfg = load_train_config(
            args.config,
            seed=args.seed,
            group_size=args.group_size,
            n_s=args.ns,
            use_replay=False if args.no_replay else None,
            use_blend_net=False if args.no_blend_net else None,
        )
    except (FormatError, json.JSONDecodeError, TypeError, ValueError) as e:
        return _fail(EXIT_CONFIG, f"bad train config: {e}")
    try:
        ds = load_manifest(manifest)
    except FormatError as e:
        return _fail(EXIT_CONFIG, str(e))
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as e:
        return _fail(EXIT_IO, str(e))

    state = init_state(cfg)
    start_group = 0
    if args.resume:
        done = sorted(glob.glob(os.path.join(args.out, "group_*.nvck")))
        if done:
            last = done[-1]
            gi = int(os.path.basename(last)[6:10])
            start_group = gi + 1
            state.mlp, state.encoder, _ = load_checkpoint(last)
            buf_path = os.path.join(args.out, f"buffer_{gi:04d}.npz")
            if os.path.exists(buf_path):
                state.buffer.load(buf_path)
            lg = os.path.join(args.out, f"lastgrid_{gi:04d}.nvgd")
            if os.path.exists(lg):
                state.last_grid = load_nvgd(lg)

    log = TrainLogger(os.path.join(args.out, "train_log.jsonl"))
    n_groups = math.ceil(ds.n_frames / cfg.group_size)
    meta = {
        "group_size": cfg.group_size,
        "n_groups": n_groups,
        "n_frames": ds.n_frames,
        "config": dump_train_config(cfg),
    }
    with open(os.path.join(args.out, "run_meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)

    try:
        for gi in range(start_group, n_groups):
            lo = gi * cfg.group_size
            hi = min(lo + cfg.group_size, ds.n_frames)
            from .scene import SequenceGroup

            frames = tuple(load_frame(ds, t) for t in range(lo, hi))
            group = SequenceGroup(frames=frames, group_start=lo, group_end=hi - 1)
            state.accounting.group_loaded(sum(f.image_nbytes() for f in frames))

            aligned = train_group(group, state, cfg, ds.bbox_min, ds.bbox_max, log=log)
            container = codec.compress(aligned, s=args.block_size, eta=args.eta)
            codec.save_container(
                os.path.join(args.out, f"group_{gi:04d}.nvdc"), container
            )
            save_checkpoint(
                os.path.join(args.out, f"group_{gi:04d}.nvck"),
                state.mlp, state.encoder,
                hyperparams={"group": gi, "k_views": cfg.k_views},
            )
            state.buffer.save(os.path.join(args.out, f"buffer_{gi:04d}.npz"))
            save_nvgd(
                os.path.join(args.out, f"lastgrid_{gi:04d}.nvgd"), state.last_grid
            )
            del frames, group, aligned
            state.accounting.group_freed()
    except NevrfError as e:
        log.close()
        return _fail(1, f"training diverged: {e}")
    save_checkpoint(
        os.path.join(args.out, "final.nvck"), state.mlp, state.encoder,
        hyperparams={"groups": n_groups, "k_views": cfg.k_views},
    )
    log.close()
    print(json.dumps({
        "groups": n_groups,
        "peak_image_bytes": state.accounting.peak_image_bytes,
        "peak_buffer_bytes": state.accounting.peak_buffer_bytes,
        "buffer_records": len(state.buffer),
    }))
    return EXIT_OK


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


def _orbit_cameras(ref: Camera, n: int) -> list:
    center = ref.center
    radius = float(np.linalg.norm(center[:2]))
    z = float(center[2])
    cams = []
    for i in range(n):
        az = 2.0 * math.pi * i / n
        eye = np.array([radius * math.cos(az), radius * math.sin(az), z])
        ext = synth._look_at(eye, np.zeros(3))
        cams.append(Camera(intrinsics=ref.intrinsics, extrinsics=ext,
                           width=ref.width, height=ref.height))
    return cams


def cmd_render(args) -> int:
    manifest = _find_manifest(args.dataset)
    if not os.path.exists(manifest):
        return _fail(EXIT_MISSING, f"dataset manifest not found: {manifest}")
    meta_path = os.path.join(args.run, "run_meta.json")
    if not os.path.exists(meta_path):
        return _fail(EXIT_MISSING, f"run metadata not found: {meta_path}")
    with open(meta_path) as f:
        meta = json.load(f)
    group_size = meta["group_size"]
    gi = args.frame // group_size
    container_path = os.path.join(args.run, f"group_{gi:04d}.nvdc")
    if args.frame < 0 or args.frame >= meta["n_frames"] or not os.path.exists(container_path):
        return _fail(EXIT_MISSING, f"frame {args.frame} outside stored range "
                                   f"(missing {container_path})")
    ckpt_path = os.path.join(args.run, "final.nvck")
    if not os.path.exists(ckpt_path):
        return _fail(EXIT_MISSING, f"checkpoint not found: {ckpt_path}")

    ds = load_manifest(manifest)
    frame = load_frame(ds, args.frame)
    try:
        container = codec.load_container(container_path)
    except FormatError as e:
        return _fail(EXIT_CONFIG, f"bad container: {e}")
    grids = codec.decompress(container)
    grid = grids.grids[args.frame - gi * group_size]
    mlp, encoder, _ = load_checkpoint(ckpt_path)
    cfg_doc = meta.get("config", {})
    use_net = cfg_doc.get("use_blend_net", True)

    march = RayMarchConfig(
        n_s=args.ns,
        background=np.asarray(cfg_doc.get("background", [0, 0, 0])),
        k_views=cfg_doc.get("k_views", 4),
    )
    ft = frame_tensors(frame)
    featmaps = compute_featmaps(encoder, ft) if use_net else None
    os.makedirs(args.out, exist_ok=True)
    written = []
    if args.orbit:
        for i, cam in enumerate(_orbit_cameras(frame.cameras[0], args.orbit)):
            img = render_image(frame, grid, cam, march,
                               mlp=mlp if use_net else None,
                               featmaps=featmaps, ft=ft)
            path = os.path.join(args.out, f"orbit_{args.frame:04d}_{i:03d}.png")
            save_image(path, img)
            written.append(path)
    else:
        views = [args.view] if args.view is not None else list(range(frame.n_views))
        for v in views:
            if v < 0 or v >= frame.n_views:
                return _fail(EXIT_MISSING, f"view {v} out of range")
            img = render_image(frame, grid, frame.cameras[v], march,
                               mlp=mlp if use_net else None,
                               featmaps=featmaps, ft=ft)
            path = os.path.join(args.out, f"frame_{args.frame:04d}_view_{v:02d}.png")
            save_image(path, img)
            written.append(path)
    print(json.dumps({"written": written}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    if not os.path.isdir(args.rendered):
        return _fail(EXIT_MISSING, f"rendered dir not found: {args.rendered}")
    if not os.path.isdir(args.truth):
        return _fail(EXIT_MISSING, f"ground-truth dir not found: {args.truth}")
    exts = (".png", ".ppm")
    ra = sorted(f for f in os.listdir(args.rendered) if f.endswith(exts))
    rb = sorted(f for f in os.listdir(args.truth) if f.endswith(exts))
    unmatched = sorted(set(ra) ^ set(rb))
    if unmatched:
        for name in unmatched:
            print(f"unmatched: {name}", file=sys.stderr)
        return EXIT_EVAL
    images = []
    for name in ra:
        a = load_image(os.path.join(args.rendered, name))
        b = load_image(os.path.join(args.truth, name))
        try:
            images.append({"name": name, "psnr": psnr(a, b)})
        except NevrfError as e:
            print(f"unmatched: {name} ({e})", file=sys.stderr)
            return EXIT_EVAL
    mean = float(np.mean([e["psnr"] for e in images])) if images else 0.0
    doc = {"images": images, "mean_psnr": mean}
    if args.out:
        with open(args.out, "w") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# density
# ---------------------------------------------------------------------------


def cmd_density(args) -> int:
    if args.action == "compress":
        paths = sorted(glob.glob(os.path.join(args.input, "*.nvgd")))
        if not paths:
            return _fail(EXIT_MISSING, f"no .nvgd grids in {args.input}")
        try:
            grids = AlignedGroupGrids(grids=[load_nvgd(p) for p in paths])
        except (FormatError, NevrfError, ValueError) as e:
            return _fail(EXIT_CONFIG, f"grids not aligned: {e}")
        container = codec.compress(grids, s=args.block_size, eta=args.eta)
        codec.save_container(args.out, container)
        print(json.dumps({"out": args.out, "k": container.k,
                          "kept_rows": int(len(container.kept_rows)),
                          "bytes": codec.container_nbytes(container)}))
        return EXIT_OK
    if args.action == "decompress":
        if not os.path.exists(args.input):
            return _fail(EXIT_MISSING, f"container not found: {args.input}")
        try:
            container = codec.load_container(args.input)
        except FormatError as e:
            return _fail(EXIT_CONFIG, f"bad container: {e}")
        grids = codec.decompress(container)
        os.makedirs(args.out, exist_ok=True)
        written = []
        for i, g in enumerate(grids):
            path = os.path.join(args.out, f"frame_{i:04d}.nvgd")
            save_nvgd(path, g)
            written.append(path)
        print(json.dumps({"written": written}))
        return EXIT_OK
    # stats
    if not os.path.exists(args.input):
        return _fail(EXIT_MISSING, f"container not found: {args.input}")
    try:
        container = codec.load_container(args.input)
    except FormatError as e:
        return _fail(EXIT_CONFIG, f"bad container: {e}")
    s3 = container.block_size**3
    n_kept = int(len(container.kept_rows))
    report = {
        "k": container.k,
        "eta": container.eta,
        "n_rows": container.n_rows,
        "kept_rows": n_kept,
        "empty_rows": container.n_rows - n_kept,
        "container_bytes": codec.container_nbytes(container),
        "dense_bytes": 4 * container.n_rows * s3,
        "dense_nonempty_bytes": 4 * n_kept * s3,
        "frobenius_error": None,
    }
    if args.grids:
        paths = sorted(glob.glob(os.path.join(args.grids, "*.nvgd")))
        if paths:
            originals = AlignedGroupGrids(grids=[load_nvgd(p) for p in paths])
            m, _ = codec.blockify(originals, container.block_size)
            recon = codec.decompress(container)
            mr, _ = codec.blockify(recon, container.block_size)
            report["frobenius_error"] = float(np.linalg.norm(m - mr))
    print(json.dumps(report))
    return EXIT_OK


def cmd_buffer_stats(args) -> int:
    if not os.path.exists(args.input):
        return _fail(EXIT_MISSING, f"buffer snapshot not found: {args.input}")
    buf = training.ExperienceBuffer(1, 1, 1, 0.05, np.random.default_rng(0))
    buf.load(args.input)
    buf.capacity_error = max(1, len(buf.q_error))
    print(json.dumps(buf.stats()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nevrf")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--format", choices=["png", "ppm"], default="png")
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="sequential training over frame groups")
    tp.add_argument("--dataset", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--group-size", type=int, default=None)
    tp.add_argument("--ns", type=int, default=None)
    tp.add_argument("--eta", type=float, default=0.20)
    tp.add_argument("--block-size", type=int, default=8)
    tp.add_argument("--no-replay", action="store_true")
    tp.add_argument("--no-blend-net", action="store_true")
    tp.add_argument("--resume", action="store_true")
    tp.add_argument("--deterministic", action="store_true")
    tp.set_defaults(func=cmd_train)

    rp = sub.add_parser("render", help="render frames from a trained run")
    rp.add_argument("--run", required=True)
    rp.add_argument("--dataset", required=True)
    rp.add_argument("--frame", type=int, required=True)
    rp.add_argument("--view", type=int, default=None)
    rp.add_argument("--orbit", type=int, default=0)
    rp.add_argument("--out", required=True)
    rp.add_argument("--ns", type=int, default=128)
    rp.add_argument("--deterministic", action="store_true")
    rp.set_defaults(func=cmd_render)

    ep = sub.add_parser("eval", help="PSNR between two image directories")
    ep.add_argument("--rendered", required=True)
    ep.add_argument("--truth", required=True)
    ep.add_argument("--out", default=None)
    ep.set_defaults(func=cmd_eval)

    dp = sub.add_parser("density", help="density codec operations")
    dp.add_argument("action", choices=["compress", "decompress", "stats"])
    dp.add_argument("--in", dest="input", required=True)
    dp.add_argument("--out", default=None)
    dp.add_argument("--eta", type=float, default=0.20)
    dp.add_argument("--block-size", type=int, default=8)
    dp.add_argument("--grids", default=None)
    dp.add_argument("--deterministic", action="store_true")
    dp.set_defaults(func=cmd_density)

    bp = sub.add_parser("buffer-stats", help="inspect a buffer snapshot")
    bp.add_argument("--in", dest="input", required=True)
    bp.set_defaults(func=cmd_buffer_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("density",) and args.action in ("compress", "decompress"):
        if not args.out:
            return _fail(EXIT_CONFIG, "--out is required for compress/decompress")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
