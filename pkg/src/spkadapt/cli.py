"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command
that writes outputs also writes ``resolved_config.ini`` next to them;
``spkadapt <command> --config <that file>`` repeats the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, validate, write_config
from .decoding import evaluate
from .experiments import EXPERIMENTS, UsageError, run_experiment
from .pruning import is_prunable
from .speaker_memory import ConfigurationError
from .synthdata import SPLITS, gen_corpus, read_corpus, write_corpus
from .training import TrainingDiverged, adapt, train_base

OUT_ENV = "SPKADAPT_OUT"
ECHO = "resolved_config.ini"
log = logging.getLogger("spkadapt")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "spkadapt-out")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config (a resolved_config.ini reproduces its run)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, help="seed for every random sub-stream")
    common.add_argument("--threads", type=int, help="worker threads for data generation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="spkadapt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    g.add_argument("--out", help=f"corpus directory (default ${OUT_ENV}/data)")

    t = sub.add_parser("train", parents=[common], help="train a base model")
    t.add_argument("--data", help="corpus directory")
    t.add_argument("--out", help=f"output directory (default ${OUT_ENV}/train)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--prune-mode", choices=["none", "gradual", "onetime_initial",
                                            "onetime_middle", "onetime_final"])
    t.add_argument("--sparsity", type=float, help="final sparsity of prunable tensors")
    t.add_argument("--memory", action=argparse.BooleanOptionalAction, default=None,
                   help="enable the speaker memory")
    t.add_argument("--no-wall-time", action="store_true",
                   help="log wall_time_s as 0 so run logs are byte-reproducible")

    a = sub.add_parser("adapt", parents=[common], help="adapt a checkpoint to the target speaker")
    a.add_argument("--checkpoint", help="source checkpoint")
    a.add_argument("--data", help="corpus directory")
    a.add_argument("--out", help=f"output directory (default ${OUT_ENV}/adapt)")
    a.add_argument("--mode", choices=["masked", "full"])
    a.add_argument("--epochs", type=int)
    a.add_argument("--adapt-size", type=int, help="use the first N adaptation utterances")
    a.add_argument("--no-wall-time", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="decode splits and report WER")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--split", action="append", choices=SPLITS,
                   help="split to score (repeatable; default test_seen)")
    e.add_argument("--beam", type=int, help="beam width (1 = greedy)")
    e.add_argument("--out", help="optional directory for per-speaker CSV")

    x = sub.add_parser("experiment", parents=[common], help="run a named experiment")
    x.add_argument("name", help=f"one of: {', '.join(EXPERIMENTS)}")
    x.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<name>)")
    x.add_argument("--seeds", type=int, help="run seeds 0..N-1")
    x.add_argument("--base-epochs", type=int)
    x.add_argument("--adapt-epochs", type=int)
    x.add_argument("--plot-data", action="store_true", help="also write per-figure tables")

    i = sub.add_parser("inspect-checkpoint", parents=[common], help="summarise a checkpoint")
    i.add_argument("path", nargs="?")
    return p


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.set_seed(args.seed)
    for flag in ("data", "out", "checkpoint", "threads", "adapt_size", "mode", "path"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.run[flag] = str(value)
    return cfg


def _need(cfg: RunConfig, key: str) -> str:
    if key not in cfg.run:
        raise UsageError(f"missing --{key.replace('_', '-')} (or [run] {key} in the config)")
    return cfg.run[key]


def _out_dir(cfg: RunConfig, default: str) -> Path:
    cfg.run.setdefault("out", str(Path(_default_out()) / default))
    out = Path(cfg.run["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg, "data")
    cfg.data.validate()
    corpus = gen_corpus(cfg.data, threads=int(cfg.run.get("threads", 1)))
    write_corpus(corpus, out)
    write_config(cfg, out / ECHO)
    sizes = ", ".join(f"{k}={len(v)}" for k, v in corpus.splits.items())
    print(f"wrote corpus to {out} ({sizes})")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if args.prune_mode is not None:
        cfg.train = replace(cfg.train, prune_mode=args.prune_mode)
    if args.sparsity is not None:
        cfg.train = replace(cfg.train, target_sparsity=args.sparsity)
    if args.memory is not None:
        cfg.model = replace(cfg.model, memory_enabled=args.memory)
    if args.no_wall_time:
        cfg.train = replace(cfg.train, record_wall_time=False)
    cfg.train = replace(cfg.train, mode="base")
    corpus = read_corpus(_need(cfg, "data"))
    cfg.data = corpus.config
    validate(cfg)
    out = _out_dir(cfg, "train")
    ckpt, runlog = train_base(corpus, cfg.model, cfg.train)
    save_checkpoint(ckpt, out / "model.ckpt")
    runlog.to_csv(out / "runlog.csv")
    write_config(cfg, out / ECHO)
    print(f"best epoch {ckpt.meta.get('epoch')}: dev WER {ckpt.meta.get('best_dev_wer', float('nan')):.4f}, "
          f"sparsity {ckpt.mask.sparsity:.4f}; wrote {out / 'model.ckpt'}")
    return 0


def cmd_adapt(args, cfg: RunConfig) -> int:
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if args.no_wall_time:
        cfg.train = replace(cfg.train, record_wall_time=False)
    mode = cfg.run.get("mode", "masked")
    if mode not in ("masked", "full"):
        raise UsageError(f"[run] mode must be masked or full, got {mode!r}")
    cfg.run["mode"] = mode
    cfg.train = replace(cfg.train, mode="adapt_masked" if mode == "masked" else "adapt_full_finetune")
    source = load_checkpoint(_need(cfg, "checkpoint"))
    corpus = read_corpus(_need(cfg, "data"))
    cfg.data = corpus.config
    cfg.model = source.config
    validate(cfg)
    size = int(cfg.run.get("adapt_size", len(corpus.splits["target_speaker_adapt"])))
    adapt_split = corpus.splits["target_speaker_adapt"][:size]
    if size < 1 or len(adapt_split) < size:
        raise ConfigurationError(f"adapt size {size} outside [1, {len(corpus.splits['target_speaker_adapt'])}]")
    out = _out_dir(cfg, "adapt")
    evals = {"target": corpus.splits["target_speaker_test"],
             "nontarget": corpus.splits["test_unseen_speakers"]}
    ckpt, runlog = adapt(source, adapt_split, cfg.train, evals)
    save_checkpoint(ckpt, out / "model.ckpt")
    runlog.to_csv(out / "runlog.csv")
    write_config(cfg, out / ECHO)
    last = max(r.epoch for r in runlog.records)
    t0, t1 = runlog.where("target")[0].wer, runlog.where("target")[-1].wer
    print(f"target WER {t0:.4f} -> {t1:.4f} after {last} epochs; wrote {out / 'model.ckpt'}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.beam is not None:
        cfg.train = replace(cfg.train, eval_beam=args.beam)
    if args.split:
        cfg.run["splits"] = ",".join(args.split)
    splits = cfg.run.setdefault("splits", "test_seen").split(",")
    model = load_checkpoint(_need(cfg, "checkpoint")).to_model()
    corpus = read_corpus(_need(cfg, "data"))
    rows = []
    for name in splits:
        if name not in corpus.splits:
            raise UsageError(f"unknown split {name!r}; valid: {', '.join(SPLITS)}")
        report = evaluate(model, corpus.splits[name], cfg.train.eval_beam)
        a = report.aggregate
        print(f"{name}: WER {report.wer:.4f} (S={a.S} D={a.D} I={a.I} N={a.n_ref})")
        for spk, b in sorted(report.per_speaker.items()):
            rows.append(f"{name},{spk},{b.S},{b.D},{b.I},{b.C},{b.wer!r}")
    if "out" in cfg.run:
        out = _out_dir(cfg, "eval")
        with open(out / "eval.csv", "w") as fh:
            fh.write("split,speaker,S,D,I,C,wer\n" + "".join(r + "\n" for r in rows))
        write_config(cfg, out / ECHO)
    return 0


def cmd_experiment(args, cfg: RunConfig) -> int:
    if args.name not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {args.name!r}; valid names: {', '.join(EXPERIMENTS)}")
    cfg.run["name"] = args.name
    exp = cfg.experiment
    if args.seeds is not None:
        exp = replace(exp, seeds=tuple(range(args.seeds)))
    if args.base_epochs is not None:
        exp = replace(exp, base_epochs=args.base_epochs)
    if args.adapt_epochs is not None:
        exp = replace(exp, adapt_epochs=args.adapt_epochs)
    if args.plot_data:
        exp = replace(exp, plot_data=True)
    cfg.experiment = exp
    validate(cfg)
    out = _out_dir(cfg, args.name)
    write_config(cfg, out / ECHO)
    result = run_experiment(args.name, cfg.experiment_config(), out)
    print(f"wrote {result.csv_path} ({len(result.rows)} rows)")
    return 0


def census(ckpt) -> dict[str, int]:
    groups = {"frontend": 0, "encoder": 0, "decoder": 0, "memory": 0}
    prefix = {"frontend": "frontend", "enc": "encoder", "dec": "decoder", "mem": "memory"}
    for name, v in ckpt.params.items():
        groups[prefix[name.split(".")[0]]] += v.size
    groups["total"] = sum(groups.values())
    groups["prunable"] = sum(v.size for n, v in ckpt.params.items() if is_prunable(n))
    groups["pruned"] = ckpt.mask.count()
    groups["frozen_bank"] = 0 if ckpt.bank_m is None else ckpt.bank_m.size
    return groups


def cmd_inspect(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(_need(cfg, "path"))
    print(f"checkpoint version {ckpt.version}, step {ckpt.step}, epoch {ckpt.meta.get('epoch')}")
    print("config: " + json.dumps(ckpt.config.to_dict(), sort_keys=True))
    print(f"mask sparsity target: {ckpt.mask.sparsity:.4f}")
    print(f"{'tensor':28s} {'shape':>10s} {'numel':>7s} {'pruned':>7s} {'sparsity':>8s}  zeroed")
    for name, m in ckpt.mask.masks.items():
        zeroed = bool(np.all(ckpt.params[name][m] == 0.0))
        shape = "x".join(map(str, m.shape))
        print(f"{name:28s} {shape:>10s} {m.size:7d} {int(m.sum()):7d} {m.mean():8.4f}  {'yes' if zeroed else 'NO'}")
    print("parameter census:")
    for k, v in census(ckpt).items():
        print(f"  {k:12s} {v}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spkadapt: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigurationError, CheckpointError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"spkadapt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
