"""Batch entry points: ``trj synth | train | infer | eval``.

Every command accepts ``--config FILE`` (JSON object keyed by option name);
flags given on the command line win over the file. Exit codes: 0 success or
convergence, 2 training stopped at the epoch cap, 3 usage error, 4 bad input
data, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data.dataset import load_dataset, load_sequence, read_index, write_index, write_sequence
from .data.formats import FormatError, load_motion, load_obj, save_metrics, save_obj
from .data.preprocess import apply_global_transform, canonicalize
from .data.synth import MOTIONS, PLANS, pad_beta, synth_generate
from .mesh import MeshError, check_faces, check_manifold, n_components
from .model import prepare_shape
from .training import (
    METHODS,
    MAX_EPOCHS,
    TrainConfig,
    aggregate,
    build_method,
    compute_metrics,
    load_method,
    make_item,
    save_method,
    train,
)

EXIT_OK = 0
EXIT_CAPPED = 2
EXIT_USAGE = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

logger = logging.getLogger("trj")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse's own exit status 2 would collide with "epoch-capped"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# Defaults live here rather than in argparse so that a config file can sit
# between them and the command line.
DEFAULTS = {
    "synth": {"plan": "humanoid", "sequences": 5, "frames": 64, "motions": "walk", "seed": 0, "res": 1, "test": 0, "fps": 30.0},
    "train": {
        "baseline": "trj",
        "epochs": MAX_EPOCHS,
        "window": 32,
        "alpha": 0.05,
        "lr": 1e-3,
        "convergence": 3e-4,
        "seed": 0,
        "split": "train",
        "category": None,
        "step": "sequence",
        "resume": False,
        "log": None,
        "cache_dir": None,
    },
    "infer": {"apply_global": False, "height_scale": "auto", "beta": None, "split": None, "cache_dir": None},
    "eval": {"split": None, "category": None, "space": "canonical"},
}


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trj", description="Temporal residual Jacobians: synthesize data, train, infer, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON file of option defaults; flags override it")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    common(s)
    s.add_argument("--out", type=Path, help="output dataset directory")
    s.add_argument("--plan", choices=sorted(PLANS))
    s.add_argument("--sequences", type=int, help="number of body shapes; each gets one sequence per motion")
    s.add_argument("--frames", type=int)
    s.add_argument("--fps", type=float)
    s.add_argument("--motions", help="comma-separated motion categories")
    s.add_argument("--test", type=int, help="mark the last N shapes as the test split")
    s.add_argument("--res", type=int, help="mesh resolution multiplier")
    s.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    t.add_argument("--dataset", type=Path)
    t.add_argument("--checkpoint", type=Path, help="checkpoint to write (and to resume from with --resume)")
    t.add_argument("--baseline", choices=METHODS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--window", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--convergence", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--split")
    t.add_argument("--category", help="train on one motion category")
    t.add_argument("--step", choices=("sequence", "window"))
    t.add_argument("--resume", action="store_true", default=None)
    t.add_argument("--log", type=Path, help="loss log (default: checkpoint path + .log)")
    t.add_argument("--cache-dir", type=Path, help="WKS cache directory")

    i = sub.add_parser("infer", help="animate a mesh with a trained model")
    common(i)
    i.add_argument("--checkpoint", type=Path)
    i.add_argument("--target", type=Path, help="rest mesh (OBJ) to animate")
    i.add_argument("--motion", type=Path, help="motion manifest")
    i.add_argument("--dataset", type=Path, help="predict every sequence of a dataset instead")
    i.add_argument("--split")
    i.add_argument("--out", type=Path)
    i.add_argument("--beta", help="comma-separated shape vector (default: the manifest's)")
    i.add_argument("--apply-global", action="store_true", default=None, help="map output to world space")
    i.add_argument("--height-scale", help="translation scale for --apply-global, or 'auto'")
    i.add_argument("--cache-dir", type=Path)

    e = sub.add_parser("eval", help="score predicted sequences against ground truth")
    common(e)
    e.add_argument("--dataset", type=Path)
    e.add_argument("--pred", action="append", metavar="NAME=DIR", help="predictions of one model (repeatable)")
    e.add_argument("--out", type=Path, help="metrics file")
    e.add_argument("--split")
    e.add_argument("--category")
    e.add_argument("--space", choices=("canonical", "world"))
    return p


def _resolve(command: str, args: argparse.Namespace) -> argparse.Namespace:
    """Merge built-in defaults, the config file and explicit flags."""
    opts = dict(DEFAULTS.get(command, {}))
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as err:
            raise UsageError(f"cannot read config {args.config}: {err}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        known = set(vars(args))
        for k, v in doc.items():
            key = k.replace("-", "_")
            if key not in known or key in ("command", "config"):
                raise UsageError(f"{args.config}: unknown option {k!r} for {command}")
            opts[key] = v
    for k, v in vars(args).items():
        if v is not None:
            opts[k] = v
    for k in vars(args):
        opts.setdefault(k, None)
    return argparse.Namespace(**opts)


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    _require(args, "out")
    if args.sequences < 1 or args.frames < 1:
        raise UsageError("--sequences and --frames must be positive")
    if not 0 <= args.test < args.sequences:
        raise UsageError("--test must leave at least one training sequence")
    plan = PLANS[args.plan]
    motions = [m.strip() for m in str(args.motions).split(",") if m.strip()]
    bad = [m for m in motions if m not in MOTIONS[plan.name]]
    if bad or not motions:
        raise UsageError(f"unknown motion {bad or motions}; choose from {sorted(MOTIONS[plan.name])}")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise FormatError(f"{out}: cannot create output directory ({err.strerror})") from None
    rng = np.random.default_rng(args.seed)
    shapes = rng.uniform(0.8, 1.25, size=(args.sequences, len(plan.beta_keys)))
    entries = []
    for k in range(args.sequences):
        for motion in motions:
            seq = synth_generate(
                plan.name,
                shape_params=shapes[k],
                motion=motion,
                frames=args.frames,
                fps=args.fps,
                seed=args.seed * 1000 + k + 1,
                res=args.res,
                name=f"{plan.name}_{motion}_{k:02d}",
            )
            split = "test" if k >= args.sequences - args.test else "train"
            entries.append(write_sequence(out, seq, category=motion, split=split))
    config = {k: getattr(args, k) for k in DEFAULTS["synth"]}
    write_index(out, entries, config)
    print(f"wrote {len(entries)} sequences x {args.frames} frames to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "dataset", "checkpoint")
    seqs = load_dataset(args.dataset, split=args.split, category=args.category)
    n_joints = {s.manifest.tree.n_joints for s in seqs}
    if len(n_joints) != 1:
        raise FormatError(f"{args.dataset}: sequences use different joint counts {sorted(n_joints)}")
    items = [make_item(s, args.cache_dir) for s in seqs]
    ckpt = Path(args.checkpoint)
    opt, start = None, 0
    if args.resume and ckpt.exists():
        method, cfg, opt = load_method(ckpt)
        start = int(cfg.get("epoch", 0))
        if method.kind != args.baseline:
            raise UsageError(f"{ckpt} holds a {method.kind} model, not {args.baseline}")
        if cfg.get("converged"):
            print(f"{ckpt}: already converged at epoch {start}")
            return EXIT_OK
        logger.info("resuming %s from epoch %d", ckpt, start)
    else:
        method = build_method(args.baseline, n_joints.pop(), args.seed, args.window)
    log = Path(args.log or ckpt.with_name(ckpt.name + ".log"))
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log.parent.mkdir(parents=True, exist_ok=True)
    if start == 0 and log.exists():
        log.unlink()
    config = TrainConfig(
        epochs=args.epochs, lr=args.lr, alpha=args.alpha, convergence=args.convergence, seed=args.seed, log_path=str(log), step=args.step
    )
    result = train(method, items, config, opt, start_epoch=start)
    result.epoch = max(result.epoch, start)
    save_method(ckpt, method, result)
    last = result.history[-1].vertex if result.history else float("nan")
    state = "converged" if result.converged else "stopped at epoch cap"
    print(f"{args.baseline}: {state} after {result.epoch} epochs, L_vertex {last:.3e}; wrote {ckpt}")
    return EXIT_OK if result.converged else EXIT_CAPPED


def _parse_beta(text: str) -> np.ndarray:
    try:
        return pad_beta([float(x) for x in text.split(",")])
    except ValueError as err:
        raise UsageError(f"--beta: {err}") from None


def _predict_to(method, rest, manifest, out: Path, args) -> int:
    check_manifold(rest)
    if n_components(rest) != 1:
        raise MeshError(f"target has {n_components(rest)} connected components")
    beta = _parse_beta(args.beta) if args.beta else manifest.beta
    expected = method.config_dict()["model"]["n_joints"]
    if manifest.tree.n_joints != expected:
        raise FormatError(f"motion has {manifest.tree.n_joints} joints, model expects {expected}")
    canon = canonicalize(manifest.name, rest, manifest, None)
    ctx = prepare_shape(rest, beta, cache_dir=args.cache_dir)
    frames = method.predict(ctx, canon.manifest.angles)
    if not np.all(np.isfinite(frames)):
        raise FloatingPointError("prediction contains non-finite vertices")
    if args.apply_global:
        scale = args.height_scale
        if scale == "auto":
            h = float(np.ptp(rest.vertices[:, 2]))
            scale = h / manifest.source_height if manifest.source_height else 1.0
        frames = apply_global_transform(frames, canon.manifest.global_transforms, float(scale))
    rest_areas = check_faces(rest)
    for k, f in enumerate(frames):
        save_obj(out / f"frame_{k:04d}.obj", f, rest.faces)
    n = np.cross(frames[:, rest.faces[:, 1]] - frames[:, rest.faces[:, 0]], frames[:, rest.faces[:, 2]] - frames[:, rest.faces[:, 0]])
    n0 = np.cross(rest.vertices[rest.faces[:, 1]] - rest.vertices[rest.faces[:, 0]], rest.vertices[rest.faces[:, 2]] - rest.vertices[rest.faces[:, 0]])
    flipped = float((np.einsum("tfc,fc->tf", n, n0) <= 0).mean()) if rest_areas.size else 0.0
    if flipped > 1e-3:
        logger.warning("%s: %.2f%% of faces inverted", out, 100 * flipped)
    return len(frames)


def cmd_infer(args) -> int:
    _require(args, "checkpoint", "out")
    method, _, _ = load_method(args.checkpoint)
    out = Path(args.out)
    if args.dataset is not None:
        entries, _ = read_index(args.dataset)
        entries = [e for e in entries if args.split is None or e.split == args.split]
        if not entries:
            raise FormatError(f"{args.dataset}: no sequences in split {args.split!r}")
        for e in entries:
            seq = load_sequence(args.dataset, e, with_gt=False)
            n = _predict_to(method, seq.rest, load_motion(Path(args.dataset) / e.motion, check_files=False), out / e.name, args)
            print(f"{e.name}: wrote {n} frames")
        return EXIT_OK
    _require(args, "target", "motion")
    rest = load_obj(args.target)
    manifest = load_motion(args.motion, check_files=False)
    n = _predict_to(method, rest, manifest, out, args)
    print(f"wrote {n} frames to {out}")
    return EXIT_OK


def _load_pred(directory: Path, n_frames: int, n_vertices: int) -> np.ndarray:
    frames = []
    for k in range(n_frames):
        p = directory / f"frame_{k:04d}.obj"
        if not p.exists():
            raise FormatError(f"{directory}: missing frame {k} ({p.name})")
        m = load_obj(p)
        if m.n_vertices != n_vertices:
            raise FormatError(f"{p}: {m.n_vertices} vertices, expected {n_vertices}")
        frames.append(m.vertices)
    extra = directory / f"frame_{n_frames:04d}.obj"
    if extra.exists():
        raise FormatError(f"{directory}: more frames than the {n_frames} in the ground truth")
    return np.stack(frames)


def cmd_eval(args) -> int:
    _require(args, "dataset", "out", "pred")
    preds = {}
    for spec in args.pred:
        name, sep, d = spec.partition("=")
        if not sep or not name or not d:
            raise UsageError(f"--pred expects NAME=DIR, got {spec!r}")
        if name in preds:
            raise UsageError(f"--pred name {name!r} given twice")
        preds[name] = Path(d)
    seqs = load_dataset(args.dataset, split=args.split, category=args.category)
    records, per_model = {}, {}
    for model, root in preds.items():
        reports = []
        for s in seqs:
            gt = s.frames
            pred = _load_pred(root / s.name, s.n_frames, s.rest.n_vertices)
            if args.space == "world":
                gt = apply_global_transform(gt, s.manifest.global_transforms)
            ctx = prepare_shape(s.rest, s.manifest.beta)
            r = compute_metrics(pred, gt, ctx)
            records[f"{model}/{s.name}"] = r.as_dict()
            reports.append(r)
        per_model[model] = aggregate(reports)
        records[model] = per_model[model].as_dict()
    single = per_model[next(iter(per_model))].as_dict() if len(per_model) == 1 else None
    save_metrics(args.out, records, single)
    for model in sorted(per_model):
        r = per_model[model]
        print(f"{model}: L2-V {r.l2_v_cm:.4f} cm  L2-J {r.l2_j:.4f}  L2-N {r.l2_n_deg:.3f} deg  jitter {r.jitter:.4f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("TRJ_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        print(f"trj: TRJ_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = _resolve(ns.command, ns)
        with threadpool_limits(limits=limit):
            return COMMANDS[ns.command](args)
    except UsageError as err:
        print(f"trj {ns.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, MeshError, OSError, ValueError) as err:
        print(f"trj {ns.command}: {err}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as err:
        print(f"trj {ns.command}: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
