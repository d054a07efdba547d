"""Command-line entry point: ``amtidin <subcommand> [flags]``.

Configuration comes from JSON files given with ``--config``; ``--seed``,
``--variant`` and ``--threads`` override the matching fields.  Exit codes:
0 on success, 1 on a user error (bad arguments, config or input file), 2 on
an internal failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from .dataio import DatasetFormatError, SplitError, SplitSpec, load_dataset, save_dataset, stratified_split
from .model import CheckpointError, AmtidinModel, ArchConfig, load_model, save_model
from .siggen import ConfigError, GenConfig, generate_dataset


class UsageError(Exception):
    """Bad command line; reported with the usage text and exit code 1."""


USER_ERRORS = (
    UsageError,
    ConfigError,
    SplitError,
    DatasetFormatError,
    CheckpointError,
    FileNotFoundError,
    json.JSONDecodeError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _read_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    return data


def _from_conf(cls, conf: dict):
    try:
        return cls(**conf)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__} config: {exc}") from None


def _write_json(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _require(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")


# -- subcommands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    _require(args, "out")
    cfg = GenConfig.from_dict(_read_config(args.config)) if args.config else GenConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    ds = generate_dataset(cfg)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} records (N={ds.n}) to {args.out}")
    return 0


def cmd_split(args) -> int:
    _require(args, "data", "out")
    conf = _read_config(args.config)
    if args.seed is not None:
        conf["seed"] = args.seed
    spec = _from_conf(SplitSpec, conf)
    parts = stratified_split(load_dataset(args.data), spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        save_dataset(part, out / f"{name}.sigd")
    print(" ".join(f"{name}={len(p)}" for name, p in zip(("train", "val", "test"), parts)))
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainConfig, Trainer

    _require(args, "data", "out")
    conf = _read_config(args.config)
    arch_conf = conf.pop("arch", {})
    if args.seed is not None:
        conf["seed"] = args.seed
    if args.variant is not None:
        conf["variant"] = args.variant
    if args.epochs is not None:
        conf["epochs"] = args.epochs
    cfg = TrainConfig.from_dict(conf)
    data = Path(args.data)
    train_set = load_dataset(data / "train.sigd")
    val_set = load_dataset(data / "val.sigd")
    out = Path(args.out)
    state = out / "state"
    if args.resume and (state / "manifest.json").exists():
        trainer = Trainer.resume(state, train_set, val_set)
        print(f"resuming at epoch {trainer.epoch}")
    else:
        arch = _from_conf(ArchConfig, {"n": train_set.n, **arch_conf})
        trainer = Trainer(AmtidinModel(arch, cfg.variant, cfg.seed), train_set, val_set, cfg)
    log = trainer.fit(checkpoint_dir=state, verbose=not args.quiet)
    save_model(trainer.model, out / "model", {"train_config": cfg.to_dict()}, {"alpha": trainer.alpha})
    log.write_csv(out / "train_log.csv")
    (out / "train_log.json").write_text(log.to_json())
    print(f"best epoch {log.best_epoch} val={log.best_val:.4f}; model in {out / 'model'}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate

    _require(args, "model", "data")
    model, _, _ = load_model(args.model)
    report = evaluate(model, load_dataset(args.data))
    for t, acc in report.accuracy.items():
        print(f"{t}: {acc:.2f}% on {report.counts[t]} records")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json() + "\n")
    return 0


def cmd_sweep(args) -> int:
    from .evaluate import SweepSpec, run_sweep

    _require(args, "config", "out")
    conf = _read_config(args.config)
    if args.variant is not None:
        conf["variants"] = [args.variant]
    rows = run_sweep(_from_conf(SweepSpec, conf), args.out, workers=args.threads or 1)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_similarity(args) -> int:
    from .evaluate import similarity_cmd

    _require(args, "model", "data", "out")
    report = similarity_cmd(args.model, load_dataset(args.data), args.out, per_snr=args.per_snr)
    print("W1 (logit)\n" + np.array2string(report.w1_logit, precision=4))
    print("W1 (sigmoid)\n" + np.array2string(report.w1_sigmoid, precision=4))
    print("alpha\n" + np.array2string(report.alpha, precision=4))
    return 0


def cmd_bound_check(args) -> int:
    from .boundlab import lemma_property_check, mc_bound_check

    conf = _read_config(args.config)
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    result = {
        "bound": mc_bound_check(trials=conf.get("trials", 200), delta=conf.get("delta", 0.1), seed=seed),
        "lemma1": lemma_property_check("lemma1", cases=conf.get("cases", 10_000), seed=seed),
        "lemma2": lemma_property_check("lemma2", cases=conf.get("cases", 10_000), seed=seed),
    }
    for name, res in result.items():
        count = res.get("trials", res.get("cases"))
        print(f"{name}: {res['violations']} violations in {count}")
    if args.out:
        _write_json(args.out, result)
    return 0


def cmd_gradcheck(args) -> int:
    from .autodiff.gradcheck import run_all

    results = run_all(args.seed or 0)
    for r in results:
        print(f"{r.name:28s} rel.err {r.max_rel_err:.3e}  tol {r.tol:.0e}  {'ok' if r.passed else 'FAIL'}")
    print(f"max rel. err {max(r.max_rel_err for r in results):.3e}")
    if args.out:
        _write_json(args.out, [{"name": r.name, "max_rel_err": r.max_rel_err, "tol": r.tol} for r in results])
    return 0 if all(r.passed for r in results) else 2


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic interference dataset"),
    "split": (cmd_split, "stratified train/val/test split"),
    "train": (cmd_train, "train one model variant"),
    "eval": (cmd_eval, "accuracy report on a dataset"),
    "sweep": (cmd_sweep, "train and score over an SNR, sample-size or length axis"),
    "similarity": (cmd_similarity, "critic W1 matrices and alpha of a trained model"),
    "bound-check": (cmd_bound_check, "Monte Carlo audit of the generalization bound"),
    "gradcheck": (cmd_gradcheck, "finite-difference audit of the autodiff engine"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amtidin", description="Multi-task interference identification toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="seed override (u64)")
        p.add_argument("--out", help="output path")
        p.add_argument("--variant", help="model variant override")
        p.add_argument("--threads", type=int, help="BLAS threads (sweep: worker processes)")
        if name in ("split", "train", "eval", "similarity"):
            p.add_argument("--data", help="dataset file or split directory")
        if name in ("eval", "similarity"):
            p.add_argument("--model", help="model checkpoint directory")
        if name == "train":
            p.add_argument("--epochs", type=int, help="epoch count override")
            p.add_argument("--resume", action="store_true", help="continue from OUT/state if present")
            p.add_argument("--quiet", action="store_true", help="no per-epoch lines")
        if name == "similarity":
            p.add_argument("--per-snr", action="store_true", help="also write per-SNR matrices")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "amtidin: error: a command is required")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        handler = COMMANDS[args.command][0]
        if args.threads is not None and args.command != "sweep":
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                return handler(args)
        return handler(args)
    except USER_ERRORS as exc:
        print(str(exc) if isinstance(exc, UsageError) else f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
