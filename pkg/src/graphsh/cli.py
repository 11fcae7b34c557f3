"""``graphsh`` command line.

Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
Data goes to files or stdout; diagnostics go to stderr.

Datasets ending in ``.csv`` use the CSV layout, anything else the binary
format. ``predict`` writes CSV (``x0,y0,z0,...,x15,y15,z15`` per sample,
root-aligned millimetres) or ``.npy`` when the output name ends in ``.npy``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .config import load_config
from .data import (
    JOINTS,
    PoseDataset,
    fit_normalizer,
    invert_normalizer,
    load_dataset,
    normalize_inputs,
    read_csv,
    synth_generate,
    write_csv,
    write_dataset,
)
from .errors import ConfigError, GraphSHError
from .evaluation import evaluate
from .gradcheck import SUITES, TOLERANCE, run_suites
from .network import build_model, count_params
from .skeleton import SkeletonConfigError, SkeletonSpec, build_default_skeleton, load_skeleton, validate_skeleton
from .training import load_checkpoint, save_checkpoint, train

log = logging.getLogger("graphsh")


def _read_data(path: str) -> PoseDataset:
    return read_csv(path) if path.endswith(".csv") else load_dataset(path)


def _skeleton(path: str | Path | None) -> SkeletonSpec:
    return load_skeleton(path) if path else build_default_skeleton()


def _network_overrides(args) -> dict:
    return {
        "architecture": args.architecture,
        "stacks": args.stacks,
        "channels": args.channels,
        "conv_kind": args.conv_kind,
    }


def cmd_synth(args) -> int:
    ds = synth_generate(args.n, args.seed, n_actions=args.actions)
    if args.out.endswith(".csv"):
        write_csv(ds, args.out)
    else:
        write_dataset(ds, args.out)
    log.info("wrote %d samples to %s", len(ds), args.out)
    return 0


def cmd_train(args) -> int:
    overrides = {
        "network": _network_overrides(args),
        "train": {
            "seed": args.seed,
            "max_iterations": args.max_iterations,
            "batch_size": args.batch_size,
            "learning_rate": args.learning_rate,
            "eval_every": args.eval_every,
        },
    }
    cfg = load_config(args.config, overrides)
    skeleton = _skeleton(args.skeleton or cfg.skeleton_path)
    train_set, val_set = _read_data(args.train), _read_data(args.val)
    model = build_model(cfg.network, skeleton, cfg.train.seed)
    norm = fit_normalizer(train_set)
    log_fh = open(args.log, "w") if args.log else None
    try:
        _, history = train(model, train_set, val_set, cfg.train, norm, args.out, log_fh)
    finally:
        if log_fh is not None:
            log_fh.close()
    if not history:
        # no evaluation ran, so no best checkpoint exists yet
        save_checkpoint(args.out, model, norm)
    else:
        log.info("best validation MPJPE %.3f mm", min(e.val_mpjpe_mm for e in history))
    return 0


def _load(args):
    ckpt = load_checkpoint(args.model, _skeleton(args.skeleton))
    if ckpt.normalizer is None:
        raise ConfigError(f"{args.model} carries no normalizer")
    return ckpt


def cmd_eval(args) -> int:
    ckpt = _load(args)
    report = evaluate(ckpt.model, _read_data(args.data), ckpt.normalizer)
    sys.stdout.write(report.to_text())
    if args.json:
        Path(args.json).write_text(report.to_json())
    return 0


def cmd_predict(args) -> int:
    ckpt = _load(args)
    ds = _read_data(args.data)
    pred = invert_normalizer(ckpt.normalizer, ckpt.model.predict(normalize_inputs(ckpt.normalizer, ds.inputs)))
    if args.out.endswith(".npy"):
        np.save(args.out, pred)
    else:
        header = ",".join(f"{c}{j}" for j in range(JOINTS) for c in "xyz")
        np.savetxt(args.out, pred.reshape(len(pred), -1), delimiter=",", header=header, comments="", fmt="%.17g")
    return 0


def cmd_gradcheck(args) -> int:
    names = [args.module] if args.module else None
    results = run_suites(names, range(args.seeds))
    failed = 0
    for name, err in results.items():
        ok = err < TOLERANCE
        failed += not ok
        print(f"{name}\t{err:.3e}\t{'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_params(args) -> int:
    cfg = load_config(args.config, {"network": _network_overrides(args)})
    print(count_params(build_model(cfg.network, _skeleton(cfg.skeleton_path), 0)))
    return 0


def _skeleton_source(path: str | None) -> Path | None:
    """Skeleton file behind ``path``: itself, or the ``skeleton`` key of a run config."""
    if path is None:
        return None
    raw = yaml.safe_load(Path(path).read_text())
    if isinstance(raw, dict) and "joints" not in raw:
        if "skeleton" in raw:
            return Path(path).parent / raw["skeleton"]
        if raw and set(raw) <= {"network", "train"}:
            return None
    return Path(path)


def cmd_validate_skeleton(args) -> int:
    try:
        violations = validate_skeleton(_skeleton(_skeleton_source(args.config)))
    except SkeletonConfigError as exc:
        violations = list(exc.violations)
    for v in violations:
        print(v)
    if not violations:
        print("ok")
    return 1 if violations else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphsh", description="Graph stacked hourglass 2D-to-3D pose lifting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def net_flags(sp):
        sp.add_argument("--architecture", choices=["graphsh", "seqres"])
        sp.add_argument("--stacks", type=int)
        sp.add_argument("--channels", type=int)
        sp.add_argument("--conv-kind", choices=["vanilla", "semantic", "preaggr"])

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--actions", type=int, default=0, help="number of action labels (0: unlabeled)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model; the best checkpoint goes to --out")
    s.add_argument("--config")
    s.add_argument("--train", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="training log (tab-separated)")
    s.add_argument("--skeleton")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-iterations", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--eval-every", type=int)
    net_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="print MPJPE (overall and per action)")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--json", help="also write the report as JSON")
    s.add_argument("--skeleton")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="write 3D predictions in millimetres")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--skeleton")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--module", choices=sorted(SUITES))
    s.add_argument("--seeds", type=int, default=1)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("params", help="print the parameter count")
    s.add_argument("--config")
    net_flags(s)
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("validate-skeleton", help="list skeleton configuration violations")
    s.add_argument("--config", help="skeleton file, or a run config with a skeleton key (default: built-in)")
    s.set_defaults(func=cmd_validate_skeleton)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (GraphSHError, OSError) as exc:
        print(f"graphsh {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
