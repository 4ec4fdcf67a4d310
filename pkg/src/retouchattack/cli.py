"""Command-line entry point: ``retouchattack <subcommand> ...``.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from retouchattack import diffnet
from retouchattack.attack import AttackConfig, config_dict, run_attack
from retouchattack.imagecore import ImageError, load_png, save_png
from retouchattack.style import PredictorStyle, build_reference, corpus_images, load_style
from retouchattack.victim import (
    SyntheticDatasetSpec,
    ToyVictim,
    evaluate,
    generate_dataset,
    load_split,
    train_victim,
)

REPORT_SCHEMA = 1
logger = logging.getLogger("retouchattack")


class CommandError(Exception):
    """A runtime failure reported as a one-line diagnostic with exit code 1."""


def _write_json(path, payload) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _emit(payload) -> None:
    print(json.dumps(payload, sort_keys=True))


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args):
    spec = SyntheticDatasetSpec(size=args.size, rho=args.rho, n_train=args.train, n_test=args.test, seed=args.seed)
    manifest = generate_dataset(spec, args.out)
    _emit({"out": str(args.out), "images": len(manifest), "seed": args.seed})


def cmd_train_victim(args):
    model = train_victim(args.data, epochs=args.epochs, lr=args.lr, seed=args.seed)
    model.save(args.out)
    _emit({
        "weights": str(args.out),
        "train_accuracy": model.train_accuracy_,
        "test_accuracy": model.test_accuracy_,
        "loss_history": model.history_,
        "seed": args.seed,
    })  # fmt: skip


def cmd_build_style_ref(args):
    ref = build_reference(corpus_images(args.corpus))
    _write_json(args.out, ref.to_json())
    _emit({"out": str(args.out), "mean": ref.mean.tolist(), "std": ref.std.tolist()})


def cmd_train_style(args):
    images = corpus_images(args.corpus)
    model = PredictorStyle(epochs=args.epochs, lr=args.lr, widths=tuple(args.widths), random_state=args.seed)
    model.fit(images)
    model.save(args.out)
    _emit({"weights": str(args.out), "final_loss": model.history_[-1], "epochs": args.epochs, "seed": args.seed})


def _attack_config(args) -> AttackConfig:
    return AttackConfig(
        k=args.k, m=args.m, persistent_iters=args.i, lambda_drm=args.lambda_drm,
        lr_p=args.lr_p, lr_z=args.lr_z, max_iters=args.iters, tau=args.tau, seed=args.seed,
        style="predictor" if args.style_predictor else ("statistic" if args.style_ref else "none"),
        victim_path=str(args.victim),
    ).validate()  # fmt: skip


def attack_one(image_path, label, victim_path, style_ref, style_predictor, config: AttackConfig, out_png, report_path):
    """Attack one PNG and write the adversarial PNG plus its JSON report."""
    start = time.perf_counter()
    image = load_png(image_path)
    victim = ToyVictim.from_weights(victim_path, image.shape)
    style = load_style(style_ref, style_predictor, image.shape)
    result = run_attack(image, int(label), victim, style, config)
    report = {
        "schema": REPORT_SCHEMA,
        "config": config_dict(config),
        "style_ref": None if style_ref is None else str(style_ref),
        "style_predictor": None if style_predictor is None else str(style_predictor),
        "input": str(image_path),
        "true_label": int(label),
        "predicted_before": result.predicted_before,
        "predicted_after": result.predicted_after,
        "success": result.success,
        "iterations": result.iterations,
        "first_success_iteration": result.first_success,
        "chosen_iteration": result.chosen_iteration,
        "chosen_style_loss": result.chosen_style,
        "losses": result.losses(),
        "plan": result.plan,
        "seed": config.seed,
        "wall_time": time.perf_counter() - start,
    }
    save_png(result.image, out_png)
    _write_json(report_path, report)
    return report


def _attack_job(job):
    return attack_one(*job)


def _manifest_labels(path) -> dict:
    entries = json.loads(Path(path).read_text())
    return {Path(e["file"]).name: int(e["label"]) for e in entries}


def cmd_attack(args):
    config = _attack_config(args)
    image = Path(args.image)
    if not image.is_dir():
        report = attack_one(image, args.label, args.victim, args.style_ref, args.style_predictor,
                            config, args.out, args.report)  # fmt: skip
        _emit({k: report[k] for k in ("success", "iterations", "chosen_iteration", "predicted_after")})
        return

    files = sorted(image.glob("*.png"))
    if not files:
        raise CommandError(f"{image}: no PNG images to attack")
    labels = _manifest_labels(args.manifest) if args.manifest else {}
    out_dir, report_dir = Path(args.out), Path(args.report)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for f in files:
        label = labels.get(f.name, args.label)
        if label is None:
            raise CommandError(f"{f}: no label in manifest and no --label given")
        jobs.append((f, label, args.victim, args.style_ref, args.style_predictor, config,
                     out_dir / f.name, report_dir / f"{f.stem}.json"))  # fmt: skip
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_attack_job, jobs))
    else:
        reports = [_attack_job(j) for j in jobs]
    _emit({"attacked": len(reports), "success_rate": float(np.mean([r["success"] for r in reports]))})


def cmd_eval(args):
    images, labels, _ = load_split(args.data, args.split)
    model = ToyVictim.from_weights(args.victim, images.shape[1:])
    accuracy, confusion = evaluate(model, images, labels)
    _emit({"split": args.split, "accuracy": accuracy, "confusion": confusion.tolist(), "count": int(len(labels))})


def cmd_report(args):
    paths = sorted(Path(args.reports).glob("*.json"))
    reports = []
    for p in paths:
        data = json.loads(p.read_text())
        if isinstance(data, dict) and data.get("schema") == REPORT_SCHEMA and "success" in data:
            reports.append(data)
    if not reports:
        raise CommandError(f"{args.reports}: no attack reports found")
    wins = [r for r in reports if r["success"]]
    _emit({
        "reports": len(reports),
        "success_rate": len(wins) / len(reports),
        "mean_iterations": float(np.mean([r["iterations"] for r in reports])),
        "mean_style_loss": float(np.mean([r["chosen_style_loss"] for r in wins])) if wins else None,
    })  # fmt: skip


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retouchattack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic shape dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho", type=float, default=0.8, help="color-shortcut strength")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--test", type=int, default=500)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-victim", help="train the toy victim classifier")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("build-style-ref", help="compute style statistics of a PNG corpus")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_build_style_ref)

    p = sub.add_parser("train-style", help="train the U-Net style predictor")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--widths", type=int, nargs="+", default=[8, 16, 32])
    p.set_defaults(func=cmd_train_style)

    p = sub.add_parser("attack", help="craft an adversarial retouch of one image or a directory")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--label", type=int)
    p.add_argument("--manifest", type=Path, help="dataset manifest supplying labels in directory mode")
    p.add_argument("--victim", required=True, type=Path)
    p.add_argument("--style-ref", type=Path)
    p.add_argument("--style-predictor", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--m", type=int, default=30)
    p.add_argument("--i", type=int, default=30, help="persistent iterations after first success")
    p.add_argument("--lambda-drm", type=float, default=50.0)
    p.add_argument("--lr-p", type=float, default=1.0)
    p.add_argument("--lr-z", type=float, default=0.0005)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="victim accuracy on a dataset split")
    p.add_argument("--victim", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate a directory of attack reports")
    p.add_argument("--reports", required=True, type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "attack":
        if args.label is None and not (args.image.is_dir() and args.manifest):
            parser.error("attack: --label is required")
        if args.jobs < 1:
            parser.error("attack: --jobs must be >= 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")  # fmt: skip
    try:
        args.func(args)
    except (CommandError, ImageError, diffnet.WeightFileError, diffnet.ShapeError,
            ValueError, OSError, KeyError) as exc:  # fmt: skip
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"retouchattack {args.command}: error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
