"""Experiment runners: pruning-rate sweep, gradual vs one-time pruning,
low-resource adaptation and the four-arm adaptation comparison.

Each runner trains (or reuses) the base checkpoints it needs, adapts them
on the target speaker and writes a long-format CSV with the columns in
:data:`CSV_COLUMNS`. Base checkpoints are cached under
``<workdir>/bases`` keyed by a hash of every setting that affects them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .synthdata import Corpus, SynthConfig, gen_corpus
from .training import RunLog, TrainConfig, adapt, train_base
from .transformer import ModelConfig

log = logging.getLogger(__name__)

EXPERIMENTS = ("pruning_rate_sweep", "gradual_vs_onetime", "low_resource", "adapt_compare")
CSV_COLUMNS = ("experiment", "arm", "seed", "sparsity", "adapt_size", "epoch", "split", "wer", "loss")
ARMS = ("finetune", "ivec", "pruning", "pruning_ivec")
TARGET, NONTARGET = "target", "nontarget"


class UsageError(ValueError):
    """Bad command-line or config input (exit code 1)."""


@dataclass
class ExperimentConfig:
    seeds: tuple[int, ...] = (0,)
    base_epochs: int = 20
    adapt_epochs: int = 30
    onetime_adapt_epochs: int = 15
    target_sparsity: float = 0.1
    sparsities: tuple[float, ...] = (0.05, 0.1, 0.2, 0.3, 0.5)
    modes: tuple[str, ...] = ("gradual", "onetime_initial", "onetime_middle", "onetime_final")
    adapt_sizes: tuple[int, ...] = (1, 5, 10)
    arms: tuple[str, ...] = ARMS
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    plot_data: bool = False


@dataclass
class AdaptRun:
    arm: str
    seed: int
    sparsity: float
    adapt_size: int
    runlog: RunLog

    def wer(self, split: str, epoch: int) -> float:
        return next(r.wer for r in self.runlog.where(split) if r.epoch == epoch)

    def base_wer(self, split: str = TARGET) -> float:
        return self.wer(split, 0)

    def best_epoch(self) -> int:
        """Epoch >= 1 with the lowest adapt-split WER, earliest on ties."""
        rows = [r for r in self.runlog.where("adapt") if r.epoch >= 1]
        if not rows:
            return 0
        return min(rows, key=lambda r: (r.wer, r.epoch)).epoch

    def best_wer(self, split: str = TARGET) -> float:
        return self.wer(split, self.best_epoch())

    def min_wer(self, split: str = TARGET, first: int | None = None) -> float:
        rows = [r for r in self.runlog.where(split) if r.epoch >= 1]
        if first is not None:
            rows = [r for r in rows if r.epoch <= first]
        return min(r.wer for r in rows)


@dataclass
class ExperimentResult:
    name: str
    runs: list[AdaptRun]
    rows: list[dict]
    csv_path: Path | None = None

    def by_arm(self, arm: str) -> list[AdaptRun]:
        return [r for r in self.runs if r.arm == arm]


class BaseCache:
    """Trains base checkpoints on demand and memoises them on disk."""

    def __init__(self, workdir: str | os.PathLike | None):
        self.dir = None if workdir is None else Path(workdir) / "bases"
        self._mem: dict[str, Checkpoint] = {}
        self._corpora: dict[str, Corpus] = {}

    def corpus(self, data: SynthConfig) -> Corpus:
        key = json.dumps(asdict(data), sort_keys=True)
        if key not in self._corpora:
            self._corpora[key] = gen_corpus(data)
        return self._corpora[key]

    def get(self, data: SynthConfig, model: ModelConfig, train: TrainConfig) -> Checkpoint:
        blob = json.dumps(
            {"data": asdict(data), "model": model.to_dict(), "train": train.to_dict()},
            sort_keys=True,
        )
        key = hashlib.sha256(blob.encode()).hexdigest()[:20]
        if key in self._mem:
            return self._mem[key]
        path = None if self.dir is None else self.dir / f"{key}.ckpt"
        if path is not None and path.exists():
            ckpt = load_checkpoint(path)
        else:
            log.info("training base %s", key)
            ckpt, runlog = train_base(self.corpus(data), model, train)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(ckpt, path)
                runlog.to_csv(path.with_suffix(".runlog.csv"))
        self._mem[key] = ckpt
        return ckpt


def _arm_settings(arm: str) -> tuple[bool, str, str]:
    """(memory_enabled, prune_mode, adapt mode) for an adaptation arm."""
    return {
        "finetune": (False, "none", "adapt_full_finetune"),
        "ivec": (True, "none", "adapt_full_finetune"),
        "pruning": (False, "gradual", "adapt_masked"),
        "pruning_ivec": (True, "gradual", "adapt_masked"),
    }[arm]


def _base_cfgs(cfg: ExperimentConfig, seed: int, memory: bool, prune_mode: str, sparsity: float):
    data = replace(cfg.data, seed=seed)
    model = replace(cfg.model, memory_enabled=memory)
    train = replace(
        cfg.train, mode="base", seed=seed, epochs=cfg.base_epochs,
        prune_mode=prune_mode, target_sparsity=sparsity,
    )
    return data, model, train


def _adapt_run(
    cache: BaseCache, cfg: ExperimentConfig, seed: int, memory: bool, prune_mode: str,
    sparsity: float, mode: str, epochs: int, adapt_size: int, splits: Sequence[str], arm: str,
) -> AdaptRun:
    data, model, train = _base_cfgs(cfg, seed, memory, prune_mode, sparsity)
    source = cache.get(data, model, train)
    corpus = cache.corpus(data)
    named = {TARGET: "target_speaker_test", NONTARGET: "test_unseen_speakers"}
    eval_splits = {s: corpus.splits[named[s]] for s in splits}
    adapt_cfg = replace(cfg.train, mode=mode, epochs=epochs, seed=seed)
    adapt_split = corpus.splits["target_speaker_adapt"][:adapt_size]
    _, runlog = adapt(source, adapt_split, adapt_cfg, eval_splits)
    return AdaptRun(arm, seed, sparsity, adapt_size, runlog)


def _rows(name: str, run: AdaptRun, splits: Sequence[str], first_epoch: int = 0) -> list[dict]:
    out = []
    for split in splits:
        for r in run.runlog.where(split):
            if r.epoch < first_epoch:
                continue
            out.append(
                dict(experiment=name, arm=run.arm, seed=run.seed, sparsity=run.sparsity,
                     adapt_size=run.adapt_size, epoch=r.epoch, split=split,
                     wer=r.wer, loss=r.loss)
            )
    return out


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in columns})


def _median(values) -> float:
    return float(statistics.median(values))


def pruning_rate_sweep(cfg: ExperimentConfig, cache: BaseCache) -> tuple[list[AdaptRun], list[dict]]:
    runs, rows = [], []
    for seed in cfg.seeds:
        for s in cfg.sparsities:
            run = _adapt_run(cache, cfg, seed, True, "gradual", s, "adapt_masked",
                             cfg.adapt_epochs, cfg.data.adapt_size, [TARGET], f"s={s:g}")
            runs.append(run)
            rows += _rows("pruning_rate_sweep", run, [TARGET], first_epoch=1)
    return runs, rows


def gradual_vs_onetime(cfg: ExperimentConfig, cache: BaseCache) -> tuple[list[AdaptRun], list[dict]]:
    runs, rows = [], []
    for seed in cfg.seeds:
        for mode in cfg.modes:
            run = _adapt_run(cache, cfg, seed, True, mode, cfg.target_sparsity, "adapt_masked",
                             cfg.onetime_adapt_epochs, cfg.data.adapt_size, [TARGET], mode)
            runs.append(run)
            rows += _rows("gradual_vs_onetime", run, [TARGET])
    return runs, rows


def low_resource(cfg: ExperimentConfig, cache: BaseCache) -> tuple[list[AdaptRun], list[dict]]:
    runs, rows = [], []
    for seed in cfg.seeds:
        for size in cfg.adapt_sizes:
            run = _adapt_run(cache, cfg, seed, True, "gradual", cfg.target_sparsity,
                             "adapt_masked", cfg.adapt_epochs, size, [TARGET], f"n={size}")
            runs.append(run)
            rows += _rows("low_resource", run, [TARGET])
    return runs, rows


def adapt_compare(cfg: ExperimentConfig, cache: BaseCache) -> tuple[list[AdaptRun], list[dict]]:
    runs, rows = [], []
    for seed in cfg.seeds:
        for arm in cfg.arms:
            memory, prune_mode, mode = _arm_settings(arm)
            sparsity = cfg.target_sparsity if prune_mode != "none" else 0.0
            run = _adapt_run(cache, cfg, seed, memory, prune_mode, sparsity, mode,
                             cfg.adapt_epochs, cfg.data.adapt_size, [TARGET, NONTARGET], arm)
            runs.append(run)
            rows += _rows("adapt_compare", run, [TARGET, NONTARGET])
    return runs, rows


_RUNNERS = {
    "pruning_rate_sweep": pruning_rate_sweep,
    "gradual_vs_onetime": gradual_vs_onetime,
    "low_resource": low_resource,
    "adapt_compare": adapt_compare,
}


def run_experiment(
    name: str,
    cfg: ExperimentConfig,
    out_dir: str | os.PathLike | None = None,
    cache: BaseCache | None = None,
) -> ExperimentResult:
    """Run one named experiment; write ``<out_dir>/<name>.csv`` when given."""
    if name not in _RUNNERS:
        raise UsageError(f"unknown experiment {name!r}; valid names: {', '.join(EXPERIMENTS)}")
    if cache is None:
        cache = BaseCache(out_dir)
    runs, rows = _RUNNERS[name](cfg, cache)
    result = ExperimentResult(name, runs, rows)
    if out_dir is not None:
        out = Path(out_dir)
        result.csv_path = out / f"{name}.csv"
        _write_csv(result.csv_path, CSV_COLUMNS, rows)
        _write_csv(out / f"{name}_summary.csv", SUMMARY_COLUMNS, summarise(result))
        if cfg.plot_data:
            write_plot_data(result, cfg, cache, out / "plot")
    return result


SUMMARY_COLUMNS = ("experiment", "arm", "seed", "base_wer", "best_epoch", "best_wer",
                   "final_wer", "base_nontarget_wer", "final_nontarget_wer")


def summarise(result: ExperimentResult) -> list[dict]:
    rows = []
    for run in result.runs:
        has_nt = bool(run.runlog.where(NONTARGET))
        last = max(r.epoch for r in run.runlog.where(TARGET))
        rows.append(
            dict(
                experiment=result.name, arm=run.arm, seed=run.seed,
                base_wer=run.base_wer(), best_epoch=run.best_epoch(),
                best_wer=run.best_wer(), final_wer=run.wer(TARGET, last),
                base_nontarget_wer=run.base_wer(NONTARGET) if has_nt else "",
                final_nontarget_wer=run.wer(NONTARGET, last) if has_nt else "",
            )
        )
    return rows


def write_plot_data(result: ExperimentResult, cfg: ExperimentConfig, cache: BaseCache, out: Path) -> None:
    """Seed-median long-format tables for plotting, one set per experiment."""
    from .decoding import evaluate

    def curves(split: str, key):
        groups: dict[tuple, list[float]] = {}
        for run in result.runs:
            for r in run.runlog.where(split):
                groups.setdefault((key(run), r.epoch), []).append(r.wer)
        return [(k, e, _median(v)) for (k, e), v in sorted(groups.items())]

    if result.name == "pruning_rate_sweep":
        _write_csv(out / "wer_by_sparsity_epoch.csv", ("sparsity", "epoch", "target_wer"),
                   [dict(sparsity=k, epoch=e, target_wer=w)
                    for k, e, w in curves(TARGET, lambda r: r.sparsity) if e >= 1])
        rows = []
        for s in (0.0,) + tuple(cfg.sparsities):
            for split in ("test_seen", "test_unseen_speakers"):
                wers = []
                for seed in cfg.seeds:
                    mode = "gradual" if s > 0 else "none"
                    data, model, train = _base_cfgs(cfg, seed, True, mode, s)
                    model_ = cache.get(data, model, train).to_model()
                    wers.append(evaluate(model_, cache.corpus(data).splits[split]).wer)
                rows.append(dict(sparsity=s, split=split, wer=_median(wers)))
        _write_csv(out / "base_wer_by_sparsity.csv", ("sparsity", "split", "wer"), rows)
    elif result.name == "adapt_compare":
        rows = []
        for split in (TARGET, NONTARGET):
            rows += [dict(arm=k, split=split, epoch=e, wer=w)
                     for k, e, w in curves(split, lambda r: r.arm)]
        _write_csv(out / "wer_by_arm_epoch.csv", ("arm", "split", "epoch", "wer"), rows)
    elif result.name == "low_resource":
        _write_csv(out / "wer_by_adapt_size_epoch.csv", ("adapt_size", "epoch", "target_wer"),
                   [dict(adapt_size=k, epoch=e, target_wer=w)
                    for k, e, w in curves(TARGET, lambda r: r.adapt_size)])
    elif result.name == "gradual_vs_onetime":
        rows = []
        for mode in cfg.modes:
            runs = result.by_arm(mode)
            rows.append(dict(mode=mode, base_wer=_median(r.base_wer() for r in runs),
                             best_wer=_median(r.best_wer() for r in runs)))
        _write_csv(out / "best_wer_by_schedule.csv", ("mode", "base_wer", "best_wer"), rows)
