"""Command-line entry point.

Subcommands: demo, eval, gradcheck, bench-anab, viz-attention, train-toy.
A plain-text key=value config file can pre-set any long flag; explicit flags
win over the file.
"""

from __future__ import annotations

import argparse
import statistics
import sys
from pathlib import Path

import numpy as np

USAGE_EXIT = 2
FAIL_EXIT = 1


def load_config(path):
    values = {}
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{i}: expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _apply_config(args, parser):
    if getattr(args, "config", None):
        try:
            overrides = load_config(args.config)
        except (OSError, ValueError) as e:
            parser.error(str(e))
        for key, val in overrides.items():
            if not hasattr(args, key):
                parser.error(f"unknown config key {key!r}")
            current = getattr(args, key)
            if f"--{key.replace('_', '-')}" in sys.argv or f"--{key}" in sys.argv:
                continue  # explicit flag wins
            cast = type(current) if current is not None else str
            setattr(args, key, cast(val) if cast is not bool else val.lower() in ("1", "true", "yes"))
    return args


def cmd_demo(args):
    from .detector import ToyPipeline
    from .evaluate import EvalConfig, evaluate_class
    from .kitti import LabelRecord, detection_to_record, write_result_file
    from .train import make_synthetic_scenes

    scenes = make_synthetic_scenes(count=args.scenes, seed=args.seed)
    pipe = ToyPipeline(steps=args.steps, seed=args.seed, conf_thresh=args.conf)
    print(f"training toy pipeline for {args.steps} steps on {len(scenes)} scenes ...")
    pipe.fit(scenes)
    first, last = pipe.trace_[0][5], pipe.trace_[-1][5]
    print(f"total loss {first:.4f} -> {last:.4f}")

    all_dets = pipe.predict(scenes)
    frames = []
    for sc, dets in zip(scenes, all_dets):
        gts = []
        for box, p in zip(sc.boxes2d, sc.params3d):
            from .geometry import backproject
            x, y, z = backproject(sc.cam, (p[0], p[1], p[2]))
            gts.append(LabelRecord("Car", 0.0, 0, p[6], (box.x1, box.y1, box.x2, box.y2),
                                   (p[4], p[3], p[5]), (x, y, z), p[6]))
        frames.append((dets, gts))
    n_det = sum(len(d) for d, _ in frames)
    print(f"{n_det} detections above confidence {args.conf}")
    if args.out:
        out = Path(args.out)
        for i, (dets, _) in enumerate(frames):
            write_result_file([detection_to_record(d, ["Background", "Car"]) for d in dets],
                              out / f"{i:06d}.txt")
        print(f"wrote result files to {out}")
    for task in ("2d", "bev", "3d"):
        cfg = EvalConfig(mode=args.mode, task=task)
        ap = evaluate_class(frames, "Car", cfg, difficulty="hard")
        print(f"AP_{task}|{args.mode} (Car, hard, IoU>={cfg.threshold_for('Car')}): "
              f"{'n/a' if ap != ap else format(ap, '.4f')}")
    return 0


def cmd_eval(args):
    from .evaluate import DIFFICULTIES, EvalConfig, evaluate_class
    from .geometry import Box2D
    from .kitti import parse_label_file
    from .postproc import Detection

    gt_dir, det_dir = Path(args.gt), Path(args.det)
    for d in (gt_dir, det_dir):
        if not d.is_dir():
            print(f"error: not a directory: {d}", file=sys.stderr)
            return USAGE_EXIT
    class_names = args.classes.split(",")
    frames = []
    for gt_file in sorted(gt_dir.glob("*.txt")):
        gts = parse_label_file(gt_file)
        det_file = det_dir / gt_file.name
        dets = []
        if det_file.exists():
            for rec in parse_label_file(det_file):
                if rec.type not in class_names:
                    continue
                score = 1.0 if rec.score is None else rec.score
                dets.append(Detection(class_names.index(rec.type), score,
                                      rec.as_box2d(), rec.as_box3d(), rec.alpha))
        frames.append((dets, gts))
    if not frames:
        print(f"error: no ground-truth files in {gt_dir}", file=sys.stderr)
        return USAGE_EXIT

    cfg = EvalConfig(mode=args.mode, task=args.task)
    print(f"task={args.task} mode={args.mode}")
    print(f"{'class':<12}{'easy':>10}{'moderate':>10}{'hard':>10}")
    csv_lines = ["class,task,mode,easy,moderate,hard"]
    for cls in class_names:
        aps = [evaluate_class(frames, cls, cfg, difficulty=d) for d in DIFFICULTIES]
        fmt = lambda v: "n/a" if v != v else format(v, ".4f")
        print(f"{cls:<12}" + "".join(f"{fmt(v):>10}" for v in aps))
        csv_lines.append(f"{cls},{args.task},{args.mode}," + ",".join(fmt(v) for v in aps))
    print()
    print("\n".join(csv_lines))
    return 0


def cmd_gradcheck(args):
    from .suite import run_gradient_suite

    reports = run_gradient_suite(tol=args.tol, step=args.step, seed=args.seed)
    ok = True
    for r in reports:
        print(r)
        ok = ok and r.passed
    return 0 if ok else FAIL_EXIT


def cmd_bench_anab(args):
    from .attention import PyramidSpec, complexity_bench

    sizes = []
    for tok in args.sizes.split(","):
        h, w = tok.lower().split("x")
        sizes.append((int(h), int(w)))
    spec = PyramidSpec()
    print(f"{'HxW':>10}{'N':>8}{'L':>6}{'anab_ms':>10}{'nonlocal_ms':>13}")
    results = []
    for h, w in sizes:
        runs = [complexity_bench(h, w, args.channels, spec,
                                 nonlocal_hw=(h // args.nonlocal_shrink, w // args.nonlocal_shrink))
                for _ in range(args.runs)]
        anab = statistics.median(r["anab_time"] for r in runs)
        nl = statistics.median(r["nonlocal_time"] for r in runs)
        results.append((h * w, anab, nl))
        print(f"{f'{h}x{w}':>10}{h * w:>8}{spec.descriptor_count:>6}"
              f"{anab * 1e3:>10.2f}{nl * 1e3:>13.2f}")
    if len(results) >= 2:
        n0, a0, l0 = results[0]
        n1, a1, l1 = results[-1]
        print(f"N ratio {n1 / n0:.1f}: anab time ratio {a1 / a0:.2f}, "
              f"nonlocal time ratio {l1 / l0:.2f}")
    return 0


def cmd_viz_attention(args):
    from .attention import write_pgm
    from .ops import ConvSpec, conv2d
    from .tensor import Tensor, load_tensor
    from .train import ToyDetector, make_synthetic_scenes

    if args.tensor:
        feats = load_tensor(args.tensor)
    else:
        scenes = make_synthetic_scenes(count=1, seed=args.seed)
        model = ToyDetector(scenes[0].image.shape[2:], seed=args.seed)
        feats = Tensor(model.forward(scenes[0].image)["features"].data)
    rng = np.random.default_rng(args.seed)
    attn_conv = ConvSpec.init_random(feats.shape[1], 1, (1, 1), rng=rng)
    amap = conv2d(feats, attn_conv).sigmoid().data[0, 0]
    write_pgm(amap, args.out)
    print(f"wrote {amap.shape[1]}x{amap.shape[0]} attention map to {args.out}")
    return 0


def cmd_train_toy(args):
    from .train import TrainConfig, make_synthetic_scenes, train_toy, write_loss_trace

    scenes = make_synthetic_scenes(count=args.scenes, seed=args.seed)
    cfg = TrainConfig(total_steps=args.steps,
                      warmup_steps=max(1, args.scenes // 4))
    trace, _ = train_toy(scenes, steps=args.steps, train_cfg=cfg, seed=args.seed)
    print(f"step 0: total {trace[0][5]:.4f}   step {args.steps - 1}: total {trace[-1][5]:.4f}")
    if args.trace:
        write_loss_trace(trace, args.trace)
        print(f"wrote loss trace to {args.trace}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mono3d",
                                     description="Monocular 3D detection blocks: demo, eval, oracles")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", help="train the toy pipeline and report metrics")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--conf", type=float, default=0.75)
    p.add_argument("--mode", choices=("r11", "r40"), default="r40")
    p.add_argument("--out", help="directory for result files")
    p.set_defaults(fn=cmd_demo)

    p = sub.add_parser("eval", help="AP evaluation of result files against labels")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--gt", required=True, help="ground-truth label directory")
    p.add_argument("--det", required=True, help="detection result directory")
    p.add_argument("--task", choices=("2d", "bev", "3d"), default="3d")
    p.add_argument("--mode", choices=("r11", "r40"), default="r40")
    p.add_argument("--classes", default="Car,Pedestrian,Cyclist")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference oracle suite")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench-anab", help="attention-block scaling benchmark")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--sizes", default="48x160,96x320")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--nonlocal-shrink", type=int, default=6,
                   help="run the quadratic reference at size/shrink")
    p.set_defaults(fn=cmd_bench_anab)

    p = sub.add_parser("viz-attention", help="export an attention map as PGM")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--tensor", help="M3TN tensor file to use as features")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(fn=cmd_viz_attention)

    p = sub.add_parser("train-toy", help="run the toy trainer, write the loss trace")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--trace", help="CSV output path")
    p.set_defaults(fn=cmd_train_toy)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args = _apply_config(args, parser)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
