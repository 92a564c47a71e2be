"""Command line entry point: ``fmgan <command> [options]``.

Exit status is 0 on success, 2 for invalid configs, arguments or input
files (the message names the offending field or path), and 1 when
training diverges.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .. import evaluation as ev
from ..datasets import ImageDataset, corrupt_patch, default_patch_side, sample_ring, write_directory
from ..trainers import TrainingDiverged, init_state, run
from . import checkpoint
from . import config as cfgmod
from .config import ConfigError
from .io import grid, open_dataset, save_png
from .procedures import generate_samples, inpaint, morph
from .sinks import CheckpointSink, CoverageSink, MetricsSink, PointsSink, sample_points, write_points

METRICS = ("top1", "realism", "diversity", "coverage", "reconstruction")


class UsageError(ValueError):
    pass


def _out_dir(args, default) -> Path:
    out = Path(args.out if args.out else default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def _resume_key(exp) -> dict:
    # everything except the iteration budget and output location must match
    d = cfgmod.to_dict(exp)
    d["train"] = {k: v for k, v in d["train"].items() if k != "max_iterations"}
    d.pop("out_dir")
    return d


def cmd_train(args) -> int:
    exp = cfgmod.load(args.config)
    exp = cfgmod.with_overrides(exp, args.out, args.seed, args.iterations)
    out = _out_dir(args, exp.out_dir)
    train, _ = open_dataset(exp.dataset)
    if args.checkpoint:
        state, saved = checkpoint.load(args.checkpoint)
        if _resume_key(saved) != _resume_key(exp):
            raise UsageError(f"checkpoint {args.checkpoint} was written by a different config")
    else:
        state = init_state(exp.train, exp.model, exp.weights)
    cfgmod.write_resolved(exp, out)
    sinks = [MetricsSink(out / "metrics.csv", exp.train.method, exp.wall_clock),
             CheckpointSink(out, exp.train.checkpoint_every, exp)]
    if exp.model.scale == "toy2d":
        sinks.append(PointsSink(out, exp.train.points_every, seed=exp.seed))
        if exp.train.eval_every:
            sinks.append(CoverageSink(out / "coverage.csv", exp.dataset.ring(), exp.train.eval_every,
                                      seed=exp.seed))
    state = run(exp.train, train, sinks, state=state)
    print(f"trained {exp.name} to iteration {state.iteration}; outputs in {out}")
    return 0


def cmd_generate(args) -> int:
    state, exp = checkpoint.load(args.checkpoint)
    out = _out_dir(args, Path(args.checkpoint).parent / "generated")
    seed = exp.seed if args.seed is None else args.seed
    x = generate_samples(state.models.G, args.cls, args.count, seed)
    stem = out / f"class_{args.cls:03d}_seed_{seed}"
    if exp.model.scale == "toy2d":
        write_points(stem.with_suffix(".csv"), x)
    else:
        np.save(stem.with_suffix(".npy"), x)
        if len(x):
            save_png(stem.with_suffix(".png"), grid(x))
    print(f"wrote {len(x)} samples to {stem}.*")
    return 0


def _image_run(args):
    state, exp = checkpoint.load(args.checkpoint)
    if exp.model.scale != "image" or state.models.E is None:
        raise UsageError("this command needs an image-scale checkpoint with an encoder")
    train, _ = open_dataset(exp.dataset)
    return state, exp, train


def cmd_morph(args) -> int:
    state, exp, data = _image_run(args)
    i, j = args.pair
    c1, c2 = int(data.c[i]), int(data.c[j])
    c = c1 if args.cls is None else args.cls
    if c1 != c or c2 != c:
        raise UsageError(f"pair has classes ({c1}, {c2}); morph needs both in class {c}")
    alphas, frames, _ = morph(state.models.E, state.models.G, data.x[i], data.x[j], c, args.steps, c1, c2)
    out = _out_dir(args, Path(args.checkpoint).parent / "morph")
    np.save(out / "morph.npy", frames)
    save_png(out / "morph.png", grid(frames, cols=len(frames)))
    print(f"wrote {len(frames)} frames (alpha {alphas[0]:g}..{alphas[-1]:g}) to {out}")
    return 0


def cmd_inpaint(args) -> int:
    state, exp, data = _image_run(args)
    x, c = data.x[args.index], int(data.c[args.index])
    patch = args.patch or default_patch_side(exp.model.side)
    seed = exp.seed if args.seed is None else args.seed
    corrupted, mask = corrupt_patch(x, patch, tuple(args.top_left) if args.top_left else None, seed)
    frames = inpaint(state.models.E, state.models.G, corrupted, mask, c, args.iterations)
    out = _out_dir(args, Path(args.checkpoint).parent / "inpaint")
    np.save(out / "inpaint.npy", frames)
    np.save(out / "mask.npy", mask)
    save_png(out / "corrupted.png", corrupted)
    for k, f in enumerate(frames, 1):
        save_png(out / f"iter_{k:02d}.png", f)
    print(f"wrote {len(frames)} inpainting iterations to {out}")
    return 0


def evaluate(state, exp, metrics, ref=None, per_class: int = 100, seed: int = 0) -> list[ev.EvalReport]:
    """EvalReports for ``metrics`` on a trained state."""
    if not metrics:
        raise UsageError("no metrics requested")
    unknown = sorted(set(metrics) - set(METRICS))
    if unknown:
        raise UsageError(f"unknown metrics {unknown}; choose from {METRICS}")
    scale, K = exp.model.scale, exp.model.num_classes
    digest, it = cfgmod.digest(exp), state.iteration
    reports = []
    for m in metrics:
        if (m == "coverage") != (scale == "toy2d"):
            raise UsageError(f"metric {m!r} does not apply to {scale} models")
        if m == "coverage":
            pts = sample_points(state, 10_000, seed)
            reports.append(ev.EvalReport(m, ev.mode_coverage(pts, exp.dataset.ring()).fraction,
                                         len(pts), digest, it))
            continue
        sampler = ev.generator_sampler(state.models.G)
        count = per_class * K
        if m in ("top1", "realism"):
            if ref is None:
                raise UsageError(f"metric {m!r} needs a reference classifier")
            if ref.num_classes != K or ref.model.cfg.sample_shape != exp.model.sample_shape:
                raise UsageError("reference classifier and model have different scales")
        if m == "top1":
            v = ev.top1_discriminability(ref, sampler, per_class, seed)
        elif m == "realism":
            rng = np.random.default_rng(seed)
            xs = np.concatenate([sampler(c, per_class, rng) for c in range(K)])
            v = ev.realism_score(ref, xs)
        elif m == "diversity":
            v = ev.per_class_diversity(sampler, K, per_class, seed)
        else:
            if state.models.E is None:
                raise UsageError("reconstruction needs an encoder")
            _, test = open_dataset(exp.dataset)
            v = ev.reconstruction_error(state.models.E, state.models.G, test.x, test.c)
            count = len(test)
        reports.append(ev.EvalReport(m, v, count, digest, it))
    return reports


def cmd_eval(args) -> int:
    metrics = [m for m in (args.metrics or "").split(",") if m]
    if not metrics:
        raise UsageError("no metrics requested")
    state, exp = checkpoint.load(args.checkpoint)
    ref = None
    if args.reference:
        ref_path = Path(args.reference)
        if ref_path.exists():
            ref = checkpoint.load_reference(ref_path)
        elif args.fit_reference:
            train, test = open_dataset(exp.dataset)
            ref = ev.train_reference_classifier(train, test, exp.model, seed=exp.seed)
            checkpoint.save_reference(ref_path, ref)
            print(f"reference classifier held-out top-1 {ref.heldout_accuracy:.4f} -> {ref_path}")
        else:
            raise UsageError(f"reference classifier {ref_path} not found (pass --fit-reference)")
    reports = evaluate(state, exp, metrics, ref, args.per_class, 0 if args.seed is None else args.seed)
    out = _out_dir(args, Path(args.checkpoint).parent)
    path = out / "eval.csv"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value", "sample_count", "config_digest", "iteration"])
        for r in reports:
            w.writerow([r.metric, repr(r.value), r.sample_count, r.config_digest, r.iteration])
            print(f"{r.metric}\t{r.value:.6g}")
    return 0


def cmd_make_dataset(args) -> int:
    exp = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    exp = cfgmod.with_overrides(exp, seed=args.seed)
    out = _out_dir(args, Path(exp.out_dir) / "dataset")
    if exp.dataset.kind == "ring":
        pts = sample_ring(exp.dataset.ring(), args.count, np.random.default_rng(exp.seed))
        print(f"wrote {write_points(out / 'ring.csv', pts)}")
        return 0
    train, test = open_dataset(exp.dataset)
    full = ImageDataset(np.concatenate([train.x, test.x]), np.concatenate([train.c, test.c]))
    print(f"wrote {len(full)} images, manifest {write_directory(full, out)}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fmgan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=False, ckpt=False):
        if config:
            sp.add_argument("--config", required=config == "required", help="experiment TOML file")
        if ckpt:
            sp.add_argument("--checkpoint", required=ckpt == "required", help="checkpoint file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the seed")
        return sp

    sp = common(sub.add_parser("train", help="train from a config"), config="required", ckpt=True)
    sp.add_argument("--iterations", type=int, help="override train.max_iterations")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("generate", help="sample G(z, c)"), ckpt="required")
    sp.add_argument("--class", dest="cls", type=int, default=0)
    sp.add_argument("--count", type=int, default=64)
    sp.set_defaults(func=cmd_generate)

    sp = common(sub.add_parser("morph", help="interpolate between two encoded images"), ckpt="required")
    sp.add_argument("--pair", type=int, nargs=2, required=True, metavar=("I", "J"),
                    help="training-set indices of the two images")
    sp.add_argument("--class", dest="cls", type=int, help="class to decode with (default: class of I)")
    sp.add_argument("--steps", type=int, default=8)
    sp.set_defaults(func=cmd_morph)

    sp = common(sub.add_parser("inpaint", help="fill a corrupted patch"), ckpt="required")
    sp.add_argument("--index", type=int, default=0, help="training-set index of the image")
    sp.add_argument("--iterations", type=int, default=10)
    sp.add_argument("--patch", type=int, help="patch side (default scales 50/128 of the image side)")
    sp.add_argument("--top-left", type=int, nargs=2, metavar=("ROW", "COL"))
    sp.set_defaults(func=cmd_inpaint)

    sp = common(sub.add_parser("eval", help="compute metrics for a checkpoint"), ckpt="required")
    sp.add_argument("--metrics", default="", help=f"comma separated subset of {','.join(METRICS)}")
    sp.add_argument("--reference", help="reference classifier file")
    sp.add_argument("--fit-reference", action="store_true",
                    help="train and save the reference classifier if the file is missing")
    sp.add_argument("--per-class", type=int, default=100)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("make-dataset", help="materialize the configured dataset"), config=True)
    sp.add_argument("--count", type=int, default=10_000, help="ring points to write")
    sp.set_defaults(func=cmd_make_dataset)
    return p


def _thread_limit():
    n = os.environ.get("FMGAN_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, UsageError, checkpoint.CheckpointError, FileNotFoundError) as e:
        print(f"fmgan {args.command}: error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"fmgan {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
