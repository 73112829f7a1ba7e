"""Command-line driver: train, eval-knn, eval-linear, mask-preview, attn-viz, gen-synth.

Exit codes: 0 success, 1 internal error, 2 bad arguments or paths,
3 checkpoint format or compatibility errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import HELP, RunConfig, parse_pairs
from .data import gen_synth, load_dataset, read_image
from .distill import TrainState, train
from .evaluation import ProbeConfig, extract_features, knn_classify, linear_probe, top1_accuracy
from .visualize import export_attention, mask_preview

logger = logging.getLogger("rmdino")

EXIT_OK, EXIT_INTERNAL, EXIT_ARGS, EXIT_FORMAT = 0, 1, 2, 3


class UsageError(Exception):
    """Bad arguments or missing paths (exit 2)."""


def _keys_epilog() -> str:
    full, desk = RunConfig(), RunConfig.desk()
    lines = ["config keys (full default | desk default):"]
    for f in fields(RunConfig):
        a, b = getattr(full, f.name), getattr(desk, f.name)
        lines.append(f"  {f.name:<26} {a!s:>12} | {b!s:<10} {HELP.get(f.name, '')}")
    return "\n".join(lines)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--run-dir", help="output directory")
    p.add_argument("--preset", choices=("desk", "full"), default="desk",
                   help="base defaults before --config/--set (default: desk)")


def build_parser() -> argparse.ArgumentParser:
    epilog = _keys_epilog()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="rmdino", description=__doc__.splitlines()[0],
                                     epilog=epilog, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="self-distillation training", epilog=epilog, formatter_class=fmt)
    _common(p)
    p.add_argument("--dataset", help="dataset root (class-per-directory)")
    p.add_argument("--mask-ratio", type=float, help="student global-view mask ratio (default 0.1)")

    for name, what in (("eval-knn", "k-NN top-1"), ("eval-linear", "linear-probe top-1")):
        p = sub.add_parser(name, help=what, epilog=epilog, formatter_class=fmt)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--train-split", default="train")
        p.add_argument("--test-split", default="test",
                       help="query split; falls back to the whole dataset when empty")
        p.add_argument("--branch", choices=("teacher", "student"), default="teacher")
        p.add_argument("--force", action="store_true", help="ignore config fingerprint mismatch")

    p = sub.add_parser("mask-preview", help="write the original/masked-global/clean-local panels",
                       epilog=epilog, formatter_class=fmt)
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("attn-viz", help="export last-block CLS attention maps",
                       epilog=epilog, formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint (omit for a freshly initialised model)")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--head-mode", choices=("all", "mean"), default="all")
    p.add_argument("--branch", choices=("teacher", "student"), default="teacher")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("gen-synth", help="write the synthetic shape dataset", epilog=epilog,
                       formatter_class=fmt)
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    return parser


def resolve_config(args) -> RunConfig:
    try:
        cfg = RunConfig.preset(args.preset)
        if args.config:
            path = Path(args.config)
            if not path.is_file():
                raise UsageError(f"config file not found: {path}")
            cfg = RunConfig.load(path, cfg)
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            overrides.update(parse_pairs(item))
        cfg = cfg.with_overrides(overrides)
        direct = {}
        if args.seed is not None:
            direct["seed"] = str(args.seed)
        if getattr(args, "mask_ratio", None) is not None:
            direct["mask_ratio"] = str(args.mask_ratio)
        if args.run_dir:
            direct["run_dir"] = args.run_dir
        if getattr(args, "dataset", None) and args.command == "train":
            direct["dataset"] = args.dataset
        return cfg.with_overrides(direct).validate()
    except (KeyError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from e


def _write_resolved(cfg: RunConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(cfg.to_text())


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if not cfg.dataset:
        raise UsageError("no dataset given (--dataset or dataset=...)")
    if not Path(cfg.dataset).is_dir():
        raise UsageError(f"dataset path not found: {cfg.dataset}")
    manifest = load_dataset(cfg.dataset)
    images, _ = manifest.arrays("train")
    run_dir = Path(cfg.run_dir)
    _write_resolved(cfg, run_dir)
    result = train(images, cfg, run_dir)
    last = result.metrics[-1]["loss"] if result.metrics else float("nan")
    print(f"steps={result.state.step} final_loss={last:.6f} checkpoint={result.checkpoints[-1]}")
    return EXIT_OK


def _load_params(args, cfg_check: RunConfig | None):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    state, ckpt_cfg = load_checkpoint(path, cfg_check, force=args.force)
    params = state.teacher if args.branch == "teacher" else state.student
    return params, ckpt_cfg


def _eval_banks(args, params, cfg: RunConfig):
    if not Path(args.dataset).is_dir():
        raise UsageError(f"dataset path not found: {args.dataset}")
    manifest = load_dataset(args.dataset)
    vcfg = cfg.vit_config()
    tr_imgs, tr_lab = manifest.arrays(args.train_split)
    te_imgs, te_lab = manifest.arrays(args.test_split)
    if not te_imgs:
        te_imgs, te_lab = manifest.arrays(None)
    if not tr_imgs:
        raise UsageError(f"split {args.train_split!r} is empty")
    try:
        train_bank = extract_features(params, vcfg, tr_imgs, tr_lab, "train")
        test_bank = extract_features(params, vcfg, te_imgs, te_lab, "test")
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"checkpoint incompatible with its config: {e}") from e
    return train_bank, test_bank, len(manifest.classes)


def cmd_eval(args, kind: str) -> int:
    expected = resolve_config(args) if args.config else None
    params, cfg = _load_params(args, expected)
    try:
        overrides = parse_pairs("\n".join(args.set))
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        cfg = cfg.with_overrides(overrides)
    except (KeyError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from e
    train_bank, test_bank, n_cls = _eval_banks(args, params, cfg)
    if kind == "knn":
        k = min(cfg.knn_k, len(train_bank))
        pred = knn_classify(train_bank, test_bank, k, cfg.knn_temp, num_classes=n_cls)
        acc = top1_accuracy(pred, test_bank.labels)
        extra = {"k": k, "temp": cfg.knn_temp}
    else:
        pcfg = ProbeConfig(cfg.probe_epochs, cfg.probe_lr, cfg.probe_momentum, cfg.probe_batch_size, cfg.seed)
        _, acc = linear_probe(train_bank, test_bank, pcfg, num_classes=n_cls)
        extra = {"epochs": pcfg.epochs, "lr": pcfg.lr}
    print(f"metric={kind} top1={acc:.6f}")
    run_dir = Path(args.run_dir) if args.run_dir else Path(args.checkpoint).parent
    run_dir.mkdir(parents=True, exist_ok=True)
    summary = {"metric": kind, "top1": acc, "checkpoint": str(args.checkpoint),
               "n_train": len(train_bank), "n_test": len(test_bank), **extra}
    (run_dir / f"eval_{kind}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _read_input_image(path: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"image not found: {p}")
    return read_image(p)


def cmd_mask_preview(args) -> int:
    cfg = resolve_config(args)
    image = _read_input_image(args.image)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    paths, vs = mask_preview(image, cfg.view_config(), rng, args.out)
    blocks = [plan.k for plan in vs.plans[:2]]
    print(f"panels={len(paths)} masked_blocks={','.join(map(str, blocks))} out={args.out}")
    return EXIT_OK


def cmd_attn_viz(args) -> int:
    if args.checkpoint:
        params, cfg = _load_params(args, resolve_config(args) if args.config else None)
    else:
        cfg = resolve_config(args)
        st = TrainState.init(cfg)
        params = st.teacher if args.branch == "teacher" else st.student
    image = _read_input_image(args.image)
    try:
        res = export_attention(params, cfg.vit_config(), image, args.out, args.head_mode)
    except ValueError as e:
        raise UsageError(str(e)) from e
    print(f"files={len(res.paths)} out={args.out}")
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    cfg = resolve_config(args)
    try:
        gen_synth(args.out, args.classes, args.per_class, args.size, cfg.seed)
    except ValueError as e:
        raise UsageError(str(e)) from e
    print(f"wrote {args.classes * args.per_class} images to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "train": cmd_train,
        "eval-knn": lambda a: cmd_eval(a, "knn"),
        "eval-linear": lambda a: cmd_eval(a, "linear"),
        "mask-preview": cmd_mask_preview,
        "attn-viz": cmd_attn_viz,
        "gen-synth": cmd_gen_synth,
    }
    try:
        return handlers[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARGS
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARGS
    except Exception as e:  # noqa: BLE001
        logger.exception("internal error")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
