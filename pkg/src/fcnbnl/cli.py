"""Command-line entry point: ``fcnbnl synth|train|eval|bench|gradcheck``.

Global flags: ``--config``, ``--seed``, ``--out``, ``--precision``; any
config key can be overridden as ``--section.key value``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, gradcheck
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import (
    PerturbationKind,
    apply_perturbation,
    apply_splits,
    generate_synthetic_dataset,
    load_dataset_dir,
    read_splits,
    rescale_image,
    split_dataset,
    write_dataset_dir,
    write_splits,
)
from .fcn import FcnModel
from .training import evaluate, initial_bank, train, write_history_csv, write_report

log = logging.getLogger("fcnbnl")

CHECKPOINT_NAME = "checkpoint.fcnbnl"


def _overrides(tokens: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for {tok}")
            value = tokens[i + 1]
            i += 2
        out[key] = value
    return out


def build_config(args, extra: list[str]) -> RunConfig:
    overrides = _overrides(extra)
    for flag in ("seed", "out", "precision"):
        value = getattr(args, flag)
        if value is not None:
            overrides[flag] = str(value)
    return RunConfig.load(args.config, overrides)


def _setup_logging(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers = [h for h in root.handlers if not isinstance(h, logging.FileHandler)]
    root.addHandler(handler)
    root.setLevel(logging.INFO)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    synth = cfg.synth_config()
    dataset = generate_synthetic_dataset(synth)
    train_set, test_set = split_dataset(dataset, cfg["dataset.train_fraction"], cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_dataset_dir(dataset, out)
    write_splits(out / "splits.txt", train_set, test_set)
    manifest = "".join(f"{k} = {v}\n" for k, v in synth.to_dict().items())
    manifest += f"train_fraction = {cfg['dataset.train_fraction']}\n"
    (out / "manifest.txt").write_text(manifest)
    print(f"wrote {len(dataset)} images in {synth.k} classes to {out}")
    return 0


def _train_test(cfg: RunConfig):
    path = cfg["dataset.path"]
    if path:
        root = Path(path)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset path does not exist: {root}")
        dataset = load_dataset_dir(root)
        if (root / "splits.txt").is_file():
            return (*apply_splits(dataset, read_splits(root / "splits.txt")), dataset)
        return (*split_dataset(dataset, cfg["dataset.train_fraction"], cfg["seed"]), dataset)
    dataset = generate_synthetic_dataset(cfg.synth_config())
    return (*split_dataset(dataset, cfg["dataset.train_fraction"], cfg["seed"]), dataset)


def cmd_train(cfg: RunConfig, args) -> int:
    train_set, test_set, dataset = _train_test(cfg)
    channels = train_set.images[0].shape[2]
    topology = cfg.topology(channels)
    rng = np.random.default_rng(cfg["seed"])
    model = FcnModel.init(topology, rng, cfg.pyramid(), dtype=cfg.dtype)
    bank = initial_bank(model, train_set, cfg.nbnl_config(dataset.label_set.k), rng)
    out = Path(cfg["out"])
    _setup_logging(out)
    (out / "config.txt").write_text(cfg.dump())
    tcfg = cfg.training_config()
    log.info("training on %d images, testing on %d", len(train_set), len(test_set))
    model, bank, history = train(model, bank, train_set, tcfg)
    save_checkpoint(out / CHECKPOINT_NAME, model, bank, epoch=tcfg.epochs, seed=cfg["seed"])
    write_history_csv(history, out / "history.csv")
    if dataset.paths is not None and train_set.paths is not None:
        write_splits(out / "splits.txt", train_set, test_set)
    report = evaluate(model, bank, test_set)
    write_report(report, out, "test")
    print(
        f"final loss {history[-1].loss:.6f}; test accuracy {report.accuracy:.4f}; checkpoint {out / CHECKPOINT_NAME}"
    )
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.checkpoint is None or args.dataset is None:
        raise ConfigError("eval needs --checkpoint and --dataset")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, bank, _ = load_checkpoint(ckpt)
    root = Path(args.dataset)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset path does not exist: {root}")
    dataset = load_dataset_dir(root)
    if dataset.label_set.k != bank.config.k:
        raise ValueError(f"dataset has {dataset.label_set.k} classes, checkpoint has {bank.config.k}")
    split_file = Path(args.splits) if args.splits else root / "splits.txt"
    test_set = apply_splits(dataset, read_splits(split_file))[1] if split_file.is_file() else dataset
    kinds = list(PerturbationKind) if args.perturb == "all" else [PerturbationKind(args.perturb)]
    out = Path(cfg["out"])
    _setup_logging(out)
    rows = []
    for kind in kinds:
        perturbed = test_set.subset(range(len(test_set)))
        perturbed.images = [apply_perturbation(img, kind) for img in test_set.images]
        report = evaluate(model, bank, perturbed)
        write_report(report, out, f"eval_{kind.value}")
        rows.append((kind.value, report.accuracy))
        print(f"{kind.value:28s} accuracy {report.accuracy:.4f}")
    with open(out / "robustness.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["perturbation", "accuracy"])
        w.writerows([(k, repr(a)) for k, a in rows])
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    rng = np.random.default_rng(cfg["seed"])
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
    else:
        model = FcnModel.init(cfg.topology(3), rng, cfg.pyramid(), dtype=cfg.dtype)
    synth = cfg.synth_config()
    scenes = generate_synthetic_dataset(synth).images[: cfg["bench.images"]]
    images = [rescale_image(img, longest=cfg["bench.image_size"]) for img in scenes]
    rows = bench.run_timing_sweep(
        images, cfg["bench.counts"], model, cfg["bench.repetitions"], cfg["bench.patch_sizes"], cfg["seed"]
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    bench.write_timing_csv(rows, out / "bench.csv")
    for r in rows:
        print(
            f"count {r.count:4d}: patch {r.patch_median * 1e3:8.2f} ms, "
            f"fc {r.fc_median * 1e3:8.2f} ms ({r.fc_count} descriptors)"
        )
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    requested = cfg["gradcheck.components"]
    comps = gradcheck.COMPONENTS if requested == "all" else tuple(c.strip() for c in requested.split(","))
    unknown = [c for c in comps if c not in gradcheck.COMPONENTS]
    if unknown:
        raise ConfigError(f"unknown gradcheck component(s): {', '.join(unknown)}")
    override = cfg.gradcheck_tolerance()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    failed = False
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "max_rel_error", "tolerance", "passed"])
        for comp in comps:
            tol = override if override is not None else gradcheck.DEFAULT_TOLERANCES[comp]
            err = gradcheck.grad_check(comp, cfg["gradcheck.trials"], cfg["seed"])
            ok = err < tol
            failed |= not ok
            w.writerow([comp, repr(err), repr(tol), int(ok)])
            print(f"{comp:12s} max rel error {err:.3e} (tol {tol:.0e}) {'PASS' if ok else 'FAIL'}")
    return 1 if failed else 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (section.key = value lines)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"))
    parser = argparse.ArgumentParser(prog="fcnbnl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset directory")
    sub.add_parser("train", parents=[common], help="train extractor and prototypes end to end")
    ev = sub.add_parser(
        "eval", parents=[common], help="evaluate a checkpoint, optionally under perturbations"
    )
    ev.add_argument("--checkpoint")
    ev.add_argument("--dataset")
    ev.add_argument("--splits", help="splits file (default: <dataset>/splits.txt if present)")
    ev.add_argument("--perturb", default="original", choices=[k.value for k in PerturbationKind] + ["all"])
    b = sub.add_parser("bench", parents=[common], help="time patch-mode vs fully-convolutional extraction")
    b.add_argument("--checkpoint")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = build_config(args, extra)
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"fcnbnl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
