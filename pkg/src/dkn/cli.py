"""Command-line interface: ``dkn <command> ...``.

Exit status is 0 on success, 1 on runtime failure and 2 on usage errors.
"""

import argparse
import logging
import os
import sys
import time

import numpy as np

from dkn.errors import DknError

log = logging.getLogger("dkn")

IMAGE_EXTENSIONS = (".pgm", ".ppm", ".pfm", ".pnm")


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def find_pairs(directory):
    """Sorted ``(name, color_path, depth_path)`` for every complete pair in ``directory``."""
    colors, depths = {}, {}
    for entry in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(entry)
        if ext.lower() not in IMAGE_EXTENSIONS:
            continue
        name, _, kind = stem.rpartition(".")
        if kind == "color":
            colors[name] = os.path.join(directory, entry)
        elif kind == "depth":
            depths[name] = os.path.join(directory, entry)
    names = sorted(set(colors) & set(depths))
    if not names:
        raise DknError(f"no <name>.color.<ext> / <name>.depth.<ext> pairs in {directory}")
    return [(n, colors[n], depths[n]) for n in names]


def load_dataset(directory):
    from dkn.imageio import read_image
    from dkn.synthetic import ScenePair

    scenes = []
    for name, cpath, dpath in find_pairs(directory):
        color = read_image(cpath)
        depth = read_image(dpath)
        if depth.shape[1] != 1:
            raise DknError(f"{dpath}: depth must have one channel")
        scenes.append(ScenePair(color, depth, tag=f"{cpath}|{dpath}"))
    return scenes


# ----------------------------------------------------------------------
# commands


def cmd_train(args):
    from dkn.checkpoint import save_checkpoint
    from dkn.model import ModelConfig, build_model
    from dkn.synthetic import generate_scene
    from dkn.training import TrainConfig, train

    if args.data:
        dataset = load_dataset(args.data)
    else:
        dataset = [generate_scene(args.seed * 100003 + i) for i in range(args.synthetic)]
    config = ModelConfig(variant=args.variant, scale=args.scale, guided=not args.unguided,
                         residual=not args.no_residual, learn_offsets=not args.frozen_offsets)
    tconfig = TrainConfig(iterations=args.iters, scale=args.scale, seed=args.seed,
                          crop=args.crop, lr=args.lr, decay_every=args.decay_every,
                          checkpoint_every=args.checkpoint_every, checkpoint_path=args.out)
    model = build_model(config, seed=args.seed)

    def metadata(iteration, history):
        h = np.asarray(history)
        return {"iteration": iteration, "seed": args.seed,
                "loss_first": float(h[0]) if len(h) else None,
                "loss_last": float(h[-1]) if len(h) else None,
                "loss_mean_last100": float(h[-100:].mean()) if len(h) else None,
                "train": tconfig.to_dict()}

    def on_checkpoint(model, state, iteration, history):
        save_checkpoint(model, state, args.out, metadata(iteration, history))

    start = time.perf_counter()
    result = train(model, dataset, tconfig, on_checkpoint=on_checkpoint)
    save_checkpoint(model, result.state, args.out, metadata(result.iteration, result.history))
    print(f"trained {config.variant} for {args.iters} iterations in "
          f"{time.perf_counter() - start:.1f}s; final l1/pixel {result.history[-1]:.5f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_upsample(args):
    from dkn.checkpoint import load_checkpoint
    from dkn.imageio import read_image, write_image
    from dkn.inference import UpsampleRequest, upsample

    model, _, _ = load_checkpoint(args.ckpt)
    if model.config.guided and not args.guide:
        raise DknError("guidance required: the checkpoint holds a guided model, pass --guide")
    depth = read_image(args.depth)
    guide = read_image(args.guide) if args.guide and model.config.guided else None
    out = upsample(UpsampleRequest(depth, model, guide))
    write_image(out, args.out)
    print(f"wrote {out.shape[3]}x{out.shape[2]} depth to {args.out}")
    return 0


def cmd_eval(args):
    from dkn.checkpoint import load_checkpoint
    from dkn.inference import UpsampleRequest, upsample
    from dkn.metrics import PROTOCOL_SCALES, DepthImage, EvalReport, border_mask, rmse
    from dkn.training import synthesize_pair

    model, _, _ = load_checkpoint(args.ckpt)
    if model.config.scale != args.scale:
        raise DknError(f"checkpoint is trained for x{model.config.scale}, not x{args.scale}")
    scale = args.value_scale or PROTOCOL_SCALES[args.protocol]
    report = EvalReport(method=f"{model.config.variant} x{args.scale} {args.protocol}")
    for scene in load_dataset(args.data):
        lr, gt, guide = synthesize_pair(scene, args.scale)
        start = time.perf_counter()
        pred = upsample(UpsampleRequest(lr, model, guide if model.config.guided else None))
        seconds = time.perf_counter() - start
        mask = border_mask(gt.shape[2:], args.border) if args.border else None
        value = rmse(DepthImage(pred, scale, mask), DepthImage(gt, scale, mask))
        report.add(scene.tag.split("|")[0].rsplit(os.sep, 1)[-1].split(".color")[0],
                   value, seconds)
    text = report.text()
    sys.stdout.write(text)
    if args.report:
        with open(args.report, "w") as f:
            f.write(text)
    return 0


def cmd_gradcheck(args):
    from dkn.gradcheck import main_suite

    return 0 if main_suite(seed=args.seed) else 1


def cmd_synth(args):
    from dkn.imageio import write_image
    from dkn.synthetic import generate_scene

    h, w = args.size
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.n):
        scene = generate_scene(args.seed * 100003 + i, h, w)
        write_image(scene.hr_color, os.path.join(args.out, f"scene{i:04d}.color.ppm"))
        write_image(scene.hr_depth, os.path.join(args.out, f"scene{i:04d}.depth.pgm"))
    print(f"wrote {args.n} pairs of {w}x{h} to {args.out}")
    return 0


def _time_call(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_models(dkn_model, fdkn_model, size, repeat=3, seed=0):
    """Best-of-``repeat`` seconds for DKN and FDKN field computation at ``size``."""
    from dkn.autograd import no_grad
    from dkn.inference import compute_fields

    h, w = size
    rng = np.random.default_rng(seed)
    guide = rng.uniform(0, 1, (1, 3, h, w)).astype(np.float32)
    target = rng.uniform(0, 1, (1, 1, h, w)).astype(np.float32)
    times = {}
    for name, model in (("dkn", dkn_model), ("fdkn", fdkn_model)):
        model.eval()
        g = guide if model.config.guided else None
        with no_grad():
            compute_fields(model, g, target)  # warm-up
            times[name] = _time_call(lambda: compute_fields(model, g, target), repeat)
    return times


def cmd_bench(args):
    from dkn.checkpoint import load_checkpoint
    from dkn.model import ModelConfig, build_model

    if args.ckpt:
        loaded, _, _ = load_checkpoint(args.ckpt)
        cfg = loaded.config
    else:
        loaded, cfg = None, ModelConfig()
    models = {}
    for variant in ("dkn", "fdkn"):
        if loaded is not None and loaded.config.variant == variant:
            models[variant] = loaded
        else:
            models[variant] = build_model(ModelConfig(**{**cfg.to_dict(), "variant": variant}))
    times = bench_models(models["dkn"], models["fdkn"], args.size, args.repeat)
    h, w = args.size
    print(f"dkn  shift-and-stitch {w}x{h}: {times['dkn'] * 1000:.1f} ms")
    print(f"fdkn single pass      {w}x{h}: {times['fdkn'] * 1000:.1f} ms")
    print(f"speed-up {times['dkn'] / times['fdkn']:.1f}x")
    return 0


# ----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dkn", description="Deformable kernel depth upsampling")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a DKN or FDKN model")
    t.add_argument("--variant", choices=("dkn", "fdkn"), default="dkn")
    t.add_argument("--scale", type=int, choices=(4, 8, 16), default=4)
    t.add_argument("--unguided", action="store_true")
    t.add_argument("--no-residual", action="store_true")
    t.add_argument("--frozen-offsets", action="store_true",
                   help="keep sampling offsets at zero (ablation)")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="directory of <name>.color.<ext>/<name>.depth.<ext> pairs")
    src.add_argument("--synthetic", type=int, metavar="N", help="train on N synthetic scenes")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--iters", type=int, default=40000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--crop", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--decay-every", type=int, default=10000)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("upsample", help="upsample one depth map")
    u.add_argument("--ckpt", required=True)
    u.add_argument("--depth", required=True)
    u.add_argument("--guide")
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_upsample)

    e = sub.add_parser("eval", help="RMSE over a dataset directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--scale", type=int, choices=(4, 8, 16), required=True)
    e.add_argument("--protocol", choices=("nyu", "scaled255"), default="scaled255")
    e.add_argument("--value-scale", type=float, default=None,
                   help="override physical units per normalized unit")
    e.add_argument("--border", type=int, default=0, help="exclude N border pixels")
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write synthetic RGB-D pairs")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=_size, default=(96, 96))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("bench", help="time DKN vs FDKN inference")
    b.add_argument("--ckpt")
    b.add_argument("--size", type=_size, default=(128, 128))
    b.add_argument("--repeat", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (DknError, OSError, ValueError) as exc:
        print(f"dkn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
