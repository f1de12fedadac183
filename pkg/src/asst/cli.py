"""Command-line front end: ``asst {synth,train,eval,infer,gradcheck,inspect-attention}``.

Exit codes: 0 success, 1 user error, 2 internal failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .config import Config, ConfigError, load_config
from .io import FormatError, read_annotations, read_predictions, sha256_file, write_predictions

MANIFEST = "manifest.json"
EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    """Bad input from the command line or the files it names."""


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------


def _config(args) -> Config:
    cfg = load_config(getattr(args, "config", None))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UserError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip(), source="cli")
    return cfg


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise UserError(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise UserError(f"{path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _json_dump(obj, path: Path | None = None) -> str:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path is not None:
        path.write_text(text + "\n", encoding="utf-8")
    return text


def verify_manifest(data: Path) -> dict:
    mpath = data / MANIFEST
    if not mpath.exists():
        raise UserError(f"{data} has no {MANIFEST}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    bad = [f["path"] for f in manifest["files"]
           if not (data / f["path"]).exists() or sha256_file(data / f["path"]) != f["sha256"]]
    if bad:
        raise UserError(f"manifest mismatch for {len(bad)} file(s), first: {bad[0]}")
    return manifest


def _pairs_xy(pairs, mode: str):
    from .data import classification_xy, detection_xy
    return classification_xy(pairs) if mode == "classification" else detection_xy(pairs)


def _check_mode(ann, mode: str) -> None:
    if mode == "detection" and ann.mode != "detection":
        raise ConfigError(f"detection mode needs detection annotations, dataset is {ann.mode!r}")
    if mode == "classification":
        missing = [v.video_id for v in ann.videos
                   if any(d.segment_index is None for d in v.descriptions)]
        if missing:
            raise ConfigError(f"classification mode needs segment_index; missing in {missing[0]}")


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synthetic import write_dataset

    cfg = _config(args)
    if args.seed is not None:
        cfg.set("synth.seed", args.seed, source="cli")
    if args.videos is not None:
        if args.videos < 1:
            raise UserError("--videos must be >= 1")
        cfg.set("synth.n_videos", args.videos, source="cli")
    if args.mode is not None:
        cfg.set("synth.mode", args.mode, source="cli")
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    ann, paths = write_dataset(out, cfg.synth)
    manifest = {
        "version": __version__,
        "seed": cfg.synth.seed,
        "mode": cfg.synth.mode,
        "n_videos": len(ann.videos),
        "synth": cfg.to_dict()["synth"],
        "provenance": {k: v for k, v in sorted(cfg.provenance.items()) if k.startswith("synth.")},
        "files": [{"path": p.relative_to(out).as_posix(), "sha256": sha256_file(p)} for p in paths],
    }
    _json_dump(manifest, out / MANIFEST)
    print(f"wrote {len(ann.videos)} videos to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_dataset
    from .estimator import ClipLocalizer

    data = Path(args.data)
    manifest = verify_manifest(data)
    cfg = _config(args)
    if args.mode:
        cfg.set("model.mode", args.mode, source="cli")
    if args.steps is not None:
        cfg.set("training.steps", args.steps, source="cli")
    if args.seed is not None:
        cfg.set("training.seed", args.seed, source="cli")
    ds = load_dataset(data)
    _check_mode(ds.annotations, cfg.model.mode)
    pairs = ds.pairs("train") or ds.pairs()
    X, y = _pairs_xy(pairs, cfg.model.mode)

    out = Path(args.out)
    if args.resume:
        out.mkdir(parents=True, exist_ok=True)
        est = ClipLocalizer.load(args.resume, X, y)
        cfg = est.config_
        done = est.trainer_.step_count
        remaining = max(0, (args.steps if args.steps is not None else cfg.training.steps) - done)
        mode = "a"
    else:
        _prepare_out_dir(out, args.force)
        est = ClipLocalizer(config=cfg, vocabulary=ds.vocabulary)
        remaining, mode = cfg.training.steps, "w"

    every = cfg.training.checkpoint_every

    def checkpoint(step, _trainer):
        if every and step % every == 0:
            est.save(out / f"ckpt_{step:06d}.npz")

    with open(out / "train.log", mode, encoding="utf-8") as log:
        if mode == "w":
            log.write(f"# asst {__version__} seed={cfg.training.seed} mode={cfg.model.mode}"
                      f" data={manifest.get('seed')}\n")
            for key, src in sorted(cfg.provenance.items()):
                log.write(f"# {key}={src}\n")
            est.fit(X, y, log=log, callback=checkpoint)
        else:
            est.continue_fit(remaining, log=log, callback=checkpoint)
    est.save(out / "final.npz")
    _json_dump({"version": __version__, "config": cfg.to_text(), "provenance": cfg.provenance,
                "seed": cfg.training.seed, "steps": est.trainer_.step_count,
                "data_manifest_sha256": sha256_file(data / MANIFEST)}, out / "run.json")
    last = est.loss_curve_[-1] if est.loss_curve_ else float("nan")
    print(f"trained {est.trainer_.step_count} steps, last loss {last:.6f}")
    return EXIT_OK


def _infer(ckpt: Path, data: Path, split: str | None):
    """Predictions ``[(query_id, ScoredWindow)]`` for every pair of ``split``."""
    from .data import load_dataset
    from .estimator import ClipLocalizer
    from .evaluation import ground_truths

    est = ClipLocalizer.load(ckpt)
    ds = load_dataset(data)
    keys = {g.key for g in ground_truths(ds.annotations, split)}
    pairs = [p for p in ds.pairs() if (p.video_id, p.query_id) in keys]
    if not pairs:
        raise UserError("no pairs to run inference on")
    X = [(p.features, p.tokens) for p in pairs]
    ranked = est.predict_windows(X, video_ids=[p.video_id for p in pairs])
    out = []
    for p, r in zip(pairs, ranked):
        out += [(p.query_id, w) for w in r]
    return out


def cmd_infer(args) -> int:
    preds = _infer(Path(args.ckpt), Path(args.data), args.split)
    write_predictions(args.out, [p for _, p in preds], [q for q, _ in preds])
    print(f"wrote {len(preds)} predictions to {args.out}")
    return EXIT_OK


def _parse_fuse(spec: str):
    files, weights = [], []
    for part in spec.split(","):
        path, sep, w = part.rpartition(":")
        if not sep or not path:
            raise UserError(f"--fuse entries are file:weight, got {part!r}")
        try:
            weights.append(float(w))
        except ValueError:
            raise UserError(f"bad fusion weight {w!r}") from None
        files.append(path)
    return files, weights


def cmd_eval(args) -> int:
    from .evaluation import evaluate, fuse_prediction_sets

    ann = read_annotations(Path(args.data) / "annotations.json")
    sources = sum(x is not None for x in (args.ckpt, args.preds, args.fuse))
    if sources != 1:
        raise UserError("give exactly one of --ckpt, --preds, --fuse")
    if args.fuse:
        files, weights = _parse_fuse(args.fuse)
        preds = fuse_prediction_sets([read_predictions(f) for f in files], weights)
    elif args.preds:
        preds = read_predictions(args.preds)
    else:
        preds = _infer(Path(args.ckpt), Path(args.data), args.split)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    try:
        ious = [float(t) for t in args.iou.split(",")]
    except ValueError:
        raise UserError(f"bad --iou list {args.iou!r}") from None
    report = evaluate(preds, ann, metrics, ious, args.nms, args.split, args.ap_mode)
    text = _json_dump(report.to_dict(), Path(args.out) if args.out else None)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_suite

    results = run_suite()
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def cmd_inspect_attention(args) -> int:
    from .data import load_dataset
    from .estimator import ClipLocalizer
    from .language import tokenize

    est = ClipLocalizer.load(args.ckpt)
    ds = load_dataset(args.data)
    if args.video not in ds.features:
        raise UserError(f"unknown video_id {args.video}")
    tokens = tokenize(args.query)
    if not tokens:
        raise UserError("empty query")
    doc = {"video_id": args.video, "query": tokens, "layers": []}
    if est.config_.video.attention_feed == "none":
        print("no attention layers")
    else:
        maps = est.attention_maps([(ds.features[args.video], tokens)])[0]
        doc["layers"] = [{"layer": i, "shape": list(a.shape), "matrix": a.tolist()}
                         for i, a in enumerate(maps)]
        print(f"{len(maps)} attention layers")
    if args.out:
        _json_dump(doc, Path(args.out))
    else:
        print(_json_dump(doc))
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asst", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"asst {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="config file (key = value lines, [section] headers)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one dotted config key; repeatable")

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--spec", dest="config", help="config file holding a [synth] section")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--seed", type=int)
    s.add_argument("--videos", type=int, help="number of training videos")
    s.add_argument("--mode", choices=("classification", "detection"))
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    with_config(t)
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=("classification", "detection"))
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint or prediction file")
    e.add_argument("--ckpt")
    e.add_argument("--preds")
    e.add_argument("--fuse", help='"file:weight,file:weight,..."')
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", default="rank1,rank5,miou,map")
    e.add_argument("--iou", default="0.5")
    e.add_argument("--nms", type=float)
    e.add_argument("--split", help="train, test or all (default: test when present)")
    e.add_argument("--ap-mode", default="every_point", choices=("every_point", "11point"))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="write ranked windows for every pair")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--split")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    g.add_argument("--scale", default="tiny", choices=("tiny",))
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("inspect-attention", help="dump attention matrices for one query")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--video", required=True)
    a.add_argument("--query", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_inspect_attention)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("ASST_THREADS")
    try:
        limit = threadpool_limits(int(threads)) if threads else nullcontext()
    except ValueError:
        print(f"error: ASST_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return EXIT_USER
    with limit:
        try:
            return args.func(args)
        except (UserError, ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USER
        except Exception as exc:  # noqa: BLE001
            print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
