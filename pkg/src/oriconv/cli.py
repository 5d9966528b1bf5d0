"""Command-line surface.

Subcommands: gen-data, train, eval, verify, bench, dump-features. Config is a
JSON file with "train", "network" and "data" sections; any matching CLI flag
overrides the config value (flags win). Exit codes: 0 success, 2 bad usage or
config, 3 numerical failure.

The ORICONV_THREADS environment variable caps worker threads for data
generation; training itself is single-threaded for determinism.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import checkpoint as ckpt
from . import metrics
from .errors import ConfigError, NumericalError, OriconvError
from .networks import NetworkSpec
from .synthdata import (
    SceneSpec,
    Sample,
    generate_orientation_patches,
    generate_scene,
    load_dataset,
    read_image,
    write_dataset,
)
from .trainer import (
    TrainConfig,
    TrainResult,
    build_network,
    save_training_checkpoint,
    train,
    verify_equivariance,
    write_loss_log,
)


def worker_threads() -> int:
    try:
        return max(int(os.environ.get("ORICONV_THREADS", "1")), 1)
    except ValueError:
        return 1


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    cfg.setdefault("train", {})
    cfg.setdefault("network", {})
    cfg.setdefault("data", {})
    return cfg


def _apply_overrides(cfg: dict, args) -> dict:
    over = {
        "seed": ("train", "seed"),
        "steps": ("train", "max_steps"),
        "batch_size": ("train", "batch_size"),
        "rotations": ("train", "n_rotations"),
    }
    for flag, (section, key) in over.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[section][key] = v
    if getattr(args, "rotations", None) is not None:
        cfg["network"]["n_rotations"] = args.rotations
    return cfg


def _build_specs(cfg: dict):
    tc = TrainConfig.from_dict(cfg["train"]) if cfg["train"] else TrainConfig()
    nd = dict(cfg["network"])
    nd.setdefault("task", tc.task)
    nd.setdefault("n_rotations", tc.n_rotations)
    ns = NetworkSpec.from_dict(nd)
    return tc, ns


def _load_training_data(cfg: dict, tc: TrainConfig, ns: NetworkSpec, data_dir=None):
    if data_dir:
        return load_dataset(data_dir)
    d = dict(cfg.get("data", {}))
    count = int(d.pop("count", 256))
    kind = d.pop("kind", "patches" if tc.task == "orientation" else "scenes")
    patch = int(d.pop("patch_size", ns.input_size))
    scene = SceneSpec(**d) if d else SceneSpec(seed=tc.seed)
    if kind == "patches":
        return generate_orientation_patches(scene, count, patch_size=patch)
    n = worker_threads()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as ex:
            return list(ex.map(lambda i: generate_scene(scene, i), range(count)))
    return [generate_scene(scene, i) for i in range(count)]


def _run_dir_paths(run_dir: str):
    return (
        os.path.join(run_dir, "checkpoint.ckpt"),
        os.path.join(run_dir, "config.json"),
        os.path.join(run_dir, "loss_log.csv"),
    )


def _restore_run(run_dir: str):
    ck_path, cfg_path, _ = _run_dir_paths(run_dir)
    if not os.path.exists(ck_path):
        raise ConfigError(f"no checkpoint at {ck_path}")
    with open(cfg_path) as fh:
        cfg = json.load(fh)
    tc, ns = _build_specs(cfg)
    tensors, step, h = ckpt.load_checkpoint(ck_path)
    expect = ckpt.config_hash({"train": tc.to_dict(), "network": ns.to_dict()})
    if h != expect:
        raise ConfigError("checkpoint/config hash mismatch; run directory is stale")
    net = build_network(ns, tc)
    ckpt.restore_network(net, tensors)
    return net, tc, ns, step


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    spec = SceneSpec(
        image_size=args.size,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        angle_range=(args.angle_min, args.angle_max),
        channels=args.channels,
        seed=args.seed,
    )
    write_dataset(args.out, spec, args.count)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    tc, ns = _build_specs(cfg)
    data = _load_training_data(cfg, tc, ns, args.data)
    net = build_network(ns, tc)
    result = train(tc, data, net)
    os.makedirs(args.out, exist_ok=True)
    ck_path, cfg_path, log_path = _run_dir_paths(args.out)
    save_training_checkpoint(ck_path, result, tc, ns)
    with open(cfg_path, "w") as fh:
        json.dump({"train": tc.to_dict(), "network": ns.to_dict()}, fh, indent=2)
    write_loss_log(log_path, result)
    last = result.log_rows[-1][2] if result.log_rows else float("nan")
    print(f"trained {tc.max_steps} steps; final loss {last:.6f}; run dir {args.out}")
    return 0


def _gt_tuples(sample: Sample):
    return [(o.class_id, (o.hbox, o.obox)) for o in sample.objects]


def cmd_eval(args) -> int:
    net, tc, ns, step = _restore_run(args.run)
    if ns.task != "detection":
        raise ConfigError("eval requires a detection run directory")
    data = load_dataset(args.data)
    per_dets, per_gts = [], []
    import time as _time

    t0 = _time.perf_counter()
    for s in data:
        per_dets.append(
            net.detect_image(s.image, score_threshold=args.score_threshold,
                             nms_iou=args.nms_iou)
        )
        per_gts.append(_gt_tuples(s))
    dt = _time.perf_counter() - t0
    classes = sorted({g[0] for gts in per_gts for g in gts})
    per_class, map50 = metrics.mean_average_precision(
        per_dets, per_gts, classes, iou_threshold=0.5
    )
    counts = {"localization": 0, "background": 0, "other": 0}
    gaps_x, gaps_y = [], []
    for dets, gts in zip(per_dets, per_gts):
        st, ct = metrics.error_taxonomy(dets, [g[1] for g in gts])
        for key in counts:
            counts[key] += ct[key]
        gaps_x.extend(st["gaps_x"])
        gaps_y.extend(st["gaps_y"])
    n_fp = sum(counts.values())
    gx = np.asarray(gaps_x) if gaps_x else np.zeros(1)
    gy = np.asarray(gaps_y) if gaps_y else np.zeros(1)
    result = metrics.EvalResult(
        per_class_ap=per_class,
        map50=map50,
        loc_error_mean=(float(gx.mean()), float(gy.mean())),
        loc_error_std=(float(gx.std()), float(gy.std())),
        loc_error_rate=counts["localization"] / max(n_fp, 1),
        bg_confusion_rate=counts["background"] / max(n_fp, 1),
        mean_angular_error=_mean_obb_angle_error(per_dets, per_gts),
        images_per_second=len(data) / max(dt, 1e-9),
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.json"), "w") as fh:
        fh.write(result.to_json())
    for cls in classes:
        dets = [(i, d) for i, ds in enumerate(per_dets) for d in ds if d.class_id == cls]
        gts = [(i, g[1]) for i, gs in enumerate(per_gts) for g in gs if g[0] == cls]
        _write_pr_csv(os.path.join(args.out, f"pr_class{cls}.csv"), dets, gts)
    print(f"mAP@0.5 = {map50:.4f} over {len(data)} images; report in {args.out}")
    return 0


def _mean_obb_angle_error(per_dets, per_gts) -> float:
    preds, trues = [], []
    for dets, gts in zip(per_dets, per_gts):
        for d in dets:
            if d.obox is None:
                continue
            best, best_g = 0.0, None
            for cls, pair in gts:
                from .detect import iou_hbb

                v = iou_hbb(d.hbox, pair[0])
                if v > best:
                    best, best_g = v, pair
            if best >= 0.5 and best_g is not None:
                preds.append(d.obox.theta % 90.0)
                trues.append(best_g[1].theta % 90.0)
    if not preds:
        return 0.0
    d = np.abs(np.asarray(preds) - np.asarray(trues))
    return float(np.minimum(d, 90.0 - d).mean())


def _write_pr_csv(path, dets, gts):
    from .metrics import _match_detections

    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, i))
    used = set()
    tp = 0
    rows = []
    for rank, i in enumerate(order, start=1):
        img_id, det = dets[i]
        best, best_g = 0.0, None
        for g_idx, (g_img, g) in enumerate(gts):
            if g_img != img_id or g_idx in used:
                continue
            from .detect import iou_hbb

            v = iou_hbb(det.hbox, g)
            if v > best:
                best, best_g = v, g_idx
        if best >= 0.5 and best_g is not None:
            used.add(best_g)
            tp += 1
        rows.append((rank, det.score, tp / rank, tp / max(len(gts), 1)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("rank", "score", "precision", "recall"))
        w.writerows(rows)


def cmd_verify(args) -> int:
    angles = [float(a) for a in args.angles.split(",")]
    ns = NetworkSpec(task="orientation", n_rotations=args.rotations)
    rows, sweep = verify_equivariance(
        ns, angles, args.out,
        rotation_counts=tuple(int(x) for x in args.sweep.split(",")),
        image_size=args.image_size, seed=args.seed or 0,
    )
    exact = all(r[2] for r in rows) if args.rotations % 4 == 0 else None
    print(f"wrote equivariance report to {args.out}; exact-90 pass: {exact}")
    return 0


def cmd_bench(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    scene = SceneSpec(seed=args.seed or 0, image_size=args.size)
    images = [generate_scene(scene, i).image for i in range(args.count)]
    rows = []
    for n_rot in (int(x) for x in args.sweep.split(",")):
        ns = NetworkSpec(
            task="orientation", n_rotations=n_rot, input_size=args.size,
            backbone=(
                {"size": 5, "filters": 4, "pool": 2},
                {"size": 3, "filters": 4, "pool": 2},
            ), head_window=4,
        )
        net = build_network(ns, TrainConfig(n_rotations=n_rot, seed=0))
        ips = metrics.throughput(lambda im: net.forward(im[None], training=False), images, warmup=1)
        rows.append((n_rot, ips))
        print(f"rotations={n_rot}: {ips:.2f} images/s")
    with open(os.path.join(args.out, "throughput.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("n_rotations", "images_per_second"))
        for r in rows:
            w.writerow((r[0], repr(r[1])))
    return 0


def cmd_dump_features(args) -> int:
    net, tc, ns, _ = _restore_run(args.run)
    img = read_image(args.image)
    os.makedirs(args.out, exist_ok=True)
    if ns.task == "detection":
        stacks = []
        x = img[None]
        for i, seg in enumerate(net.segments):
            x = seg.forward(x, False)
            stacks.append((f"level{i}", x[0]))
    else:
        stacks = [("trunk", net.trunk.forward(img[None], False)[0])]
    from .fieldops import split_stack

    for name, stack in stacks:
        p, q = split_stack(stack)
        rho = np.hypot(p, q)
        theta = np.where(rho > 0, np.arctan2(q, p), 0.0)
        for c in range(rho.shape[2]):
            np.savetxt(
                os.path.join(args.out, f"{name}_c{c}_rho.csv"), rho[:, :, c],
                delimiter=",", fmt="%.6g",
            )
            np.savetxt(
                os.path.join(args.out, f"{name}_c{c}_theta.csv"), theta[:, :, c],
                delimiter=",", fmt="%.6g",
            )
    print(f"wrote feature maps for {len(stacks)} level(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="oriconv",
        description="rotation-equivariant convolution toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=3)
    g.add_argument("--angle-min", type=float, default=0.0)
    g.add_argument("--angle-max", type=float, default=360.0)
    g.add_argument("--channels", type=int, default=1)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="pre-generated dataset directory (detection)")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--rotations", "--lambda", dest="rotations", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained detection run")
    e.add_argument("--run", required=True, help="run directory from train")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--score-threshold", type=float, default=0.3)
    e.add_argument("--nms-iou", type=float, default=0.45)
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("verify", help="equivariance verification report")
    v.add_argument("--rotations", "--lambda", dest="rotations", type=int, default=8)
    v.add_argument("--angles", default="0,90,180,270")
    v.add_argument("--sweep", default="1,2,4,8,17,24")
    v.add_argument("--image-size", type=int, default=64)
    v.add_argument("--seed", type=int)
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_verify)

    b = sub.add_parser("bench", help="throughput table over rotation counts")
    b.add_argument("--out", required=True)
    b.add_argument("--count", type=int, default=8)
    b.add_argument("--size", type=int, default=64)
    b.add_argument("--sweep", default="1,2,4,8")
    b.add_argument("--seed", type=int)
    b.set_defaults(fn=cmd_bench)

    d = sub.add_parser("dump-features", help="write per-level magnitude/angle maps")
    d.add_argument("--run", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_dump_features)
    return p


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except OriconvError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
