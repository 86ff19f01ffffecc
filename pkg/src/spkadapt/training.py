"""Base training with concurrent pruning, and target-speaker adaptation."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import Checkpoint
from .decoding import collate_tokens, evaluate, split_loss
from .pruning import PruneMask, PruneSchedule, current_sparsity, gate_gradients, prune_event
from .rng import stream
from .speaker_memory import ConfigurationError, build_bank
from .synthdata import Corpus, Utterance
from .transformer import PAD, Model, ModelConfig, pad_features

log = logging.getLogger(__name__)

TRAIN_MODES = ("base", "adapt_masked", "adapt_full_finetune")
RUNLOG_COLUMNS = ("epoch", "split", "loss", "wer", "sparsity", "wall_time_s")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    warmup_steps: int = 400
    lr_factor: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    seed: int = 0
    mode: str = "base"
    prune_mode: str = "none"
    target_sparsity: float = 0.1
    prune_interval: int = 200
    prune_warmup_frac: float = 0.2
    prune_ramp_frac: float = 0.6
    adapt_lr: float = 1e-3
    adapt_batch_size: int = 2
    eval_beam: int = 1
    record_wall_time: bool = True

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigurationError(f"unknown train mode {self.mode!r}; choose from {TRAIN_MODES}")
        if self.epochs < 0 or self.batch_size < 1 or self.adapt_batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch sizes >= 1")

    def schedule(self, total_steps: int) -> PruneSchedule:
        return PruneSchedule.for_training(
            total_steps,
            self.target_sparsity if self.prune_mode != "none" else 0.0,
            self.prune_mode,
            self.prune_interval,
            self.prune_warmup_frac,
            self.prune_ramp_frac,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def noam_lr(step: int, d_model: int, factor: float, warmup: int) -> float:
    step = max(step, 1)
    return factor * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


class Adam:
    """Adam over a name -> array parameter store."""

    def __init__(self, beta1=0.9, beta2=0.98, eps=1e-9):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(
        self,
        params: Mapping[str, Tensor],
        grads: Mapping[str, np.ndarray],
        lr: float,
        only: Mapping[str, np.ndarray] | None = None,
    ) -> None:
        """Apply one update. With ``only``, just the listed tensors change,
        and only at their True entries."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        names = grads if only is None else [n for n in grads if n in only]
        for name in names:
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            data = params[name].data
            if only is None:
                data -= upd
            else:
                sel = only[name]
                data[sel] -= upd[sel]

    def reset_entries(self, mask: PruneMask) -> None:
        for name in mask.names():
            if name in self.m:
                self.m[name][mask[name]] = 0.0
                self.v[name][mask[name]] = 0.0

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v.copy() for k, v in self.m.items()}
        out.update({f"v/{k}": v.copy() for k, v in self.v.items()})
        return out

    def load(self, state: Mapping[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k[2:]: v.copy() for k, v in state.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in state.items() if k.startswith("v/")}


@dataclass
class LogRecord:
    epoch: int
    split: str
    loss: float
    wer: float | None
    sparsity: float
    wall_time_s: float


class RunLog:
    """Per-epoch metrics; serialised as CSV with a fixed column order."""

    def __init__(self, records: Sequence[LogRecord] = ()):
        self.records: list[LogRecord] = list(records)

    def add(self, epoch, split, loss, wer, sparsity, wall_time_s) -> None:
        for r in reversed(self.records):
            if r.split == split:
                if epoch <= r.epoch:
                    raise ValueError(f"epochs must increase per split: {epoch} after {r.epoch}")
                break
        self.records.append(LogRecord(epoch, split, loss, wer, sparsity, wall_time_s))

    def where(self, split: str) -> list[LogRecord]:
        return [r for r in self.records if r.split == split]

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RUNLOG_COLUMNS)
            for r in self.records:
                w.writerow(
                    [
                        r.epoch,
                        r.split,
                        repr(float(r.loss)),
                        "" if r.wer is None else repr(float(r.wer)),
                        repr(float(r.sparsity)),
                        f"{r.wall_time_s:.3f}",
                    ]
                )

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "RunLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            LogRecord(
                int(r["epoch"]),
                r["split"],
                float(r["loss"]),
                None if r["wer"] == "" else float(r["wer"]),
                float(r["sparsity"]),
                float(r["wall_time_s"]),
            )
            for r in rows
        )


def nll_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token NLL over non-PAD targets."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(
            f"logits cover {logits.shape[:-1]} positions but targets have {targets.shape}"
        )
    return ad.cross_entropy(logits, targets, ignore_index=PAD)


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + size] for i in range(0, n, size)]


def _forward_loss(model: Model, utts: Sequence[Utterance], rng) -> tuple[Tape, Tensor]:
    feats, lengths = pad_features([u.features for u in utts])
    tok_in, tok_out = collate_tokens([u.tokens for u in utts])
    with Tape() as tape:
        logits = model.logits(feats, lengths, tok_in, rng=rng)
        loss = nll_loss(logits, tok_out)
    return tape, loss


def _rng_state(**gens: np.random.Generator) -> dict:
    return {k: g.bit_generator.state for k, g in gens.items()}


def _restore(gen: np.random.Generator, state: dict | None) -> None:
    if state:
        gen.bit_generator.state = state


def _grads(model: Model) -> dict[str, np.ndarray]:
    return {k: t.grad for k, t in model.params.items() if t.grad is not None}


def train_base(
    corpus: Corpus,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    dev: Sequence[Utterance] | None = None,
) -> tuple[Checkpoint, RunLog]:
    """Train from scratch, pruning the encoder on ``cfg``'s schedule.

    Every step gates pruned gradients, steps Adam and re-zeroes pruned
    weights. After each epoch the dev split is scored; the returned
    checkpoint is the best-dev epoch among those already at the final
    sparsity.
    """
    if cfg.mode != "base":
        raise ConfigurationError(f"train_base needs mode='base', got {cfg.mode!r}")
    train = corpus.splits["train"]
    dev = corpus.splits["dev"] if dev is None else dev
    bank = None
    if model_cfg.memory_enabled:
        bank = build_bank(
            corpus.train_embeddings(), model_cfg.n_mem, model_cfg.d_k, cfg.seed,
            n_layers=model_cfg.n_enc if model_cfg.memory_per_layer else 1,
        )
    model = Model.create(model_cfg, cfg.seed, bank)
    mask = PruneMask.empty(model.params)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    schedule = cfg.schedule(total)
    final_sparsity = current_sparsity(total, schedule)
    opt = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    shuffle_rng = stream(cfg.seed, "shuffle")
    dropout_rng = stream(cfg.seed, "dropout")
    runlog = RunLog()
    t0 = time.perf_counter()

    def maybe_prune(step):
        nonlocal mask
        s = current_sparsity(step, schedule)
        if s > mask.sparsity:
            mask = prune_event(model.params, mask, s)
            opt.reset_entries(mask)
            log.info("step %d: pruned to sparsity %.4f", step, s)

    def snapshot(step, epoch, extra):
        return Checkpoint.from_model(
            model, mask,
            optimizer=opt.state(),
            step=step,
            rng_state=_rng_state(shuffle=shuffle_rng, dropout=dropout_rng),
            meta={"epoch": epoch, "optimizer_t": opt.t, "schedule": schedule.to_dict(),
                  "train": cfg.to_dict(), **extra},
        )

    maybe_prune(0)
    best: tuple | None = None
    best_ckpt = snapshot(0, 0, {})
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(train), cfg.batch_size, shuffle_rng):
            tape, loss = _forward_loss(model, [train[i] for i in idx], dropout_rng)
            lr = noam_lr(step + 1, model_cfg.d_model, cfg.lr_factor, cfg.warmup_steps)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at step {step + 1} (epoch {epoch}, lr {lr:.3e}, "
                    f"batch ids {idx.tolist()})"
                )
            ad.backward(loss, tape)
            grads = gate_gradients(_grads(model), mask, "base")
            opt.step(model.params, grads, lr)
            for name in mask.names():
                model.params[name].data[mask[name]] = 0.0
            ad.zero_grads(model.params.values())
            losses.append(loss.item())
            step += 1
            maybe_prune(step)
        wall = time.perf_counter() - t0 if cfg.record_wall_time else 0.0
        runlog.add(epoch, "train", float(np.mean(losses)), None, mask.sparsity, wall)
        if dev:
            dev_loss = split_loss(model, dev)
            dev_wer = evaluate(model, dev, cfg.eval_beam).wer
            runlog.add(epoch, "dev", dev_loss, dev_wer, mask.sparsity, wall)
            key = (dev_wer, dev_loss)
        else:
            key = (0.0, -epoch)
        if abs(mask.sparsity - final_sparsity) < 1e-12 and (best is None or key < best):
            best = key
            best_ckpt = snapshot(step, epoch, {"best_dev_wer": key[0]})
        log.info("epoch %d: train loss %.4f, dev %s", epoch, np.mean(losses), key)
    if best is None:
        best_ckpt = snapshot(step, cfg.epochs, {})
    return best_ckpt, runlog


def adapt(
    source: Checkpoint,
    adapt_split: Sequence[Utterance],
    cfg: TrainConfig,
    eval_splits: Mapping[str, Sequence[Utterance]] | None = None,
) -> tuple[Checkpoint, RunLog]:
    """Finetune a trained checkpoint on target-speaker data.

    ``adapt_masked`` trains only the pruned encoder entries; every other
    value, memory projections included, keeps its exact bytes.
    ``adapt_full_finetune`` updates everything. Each epoch (and epoch 0,
    the source) logs the adapt split and every split in ``eval_splits``.
    """
    if cfg.mode not in ("adapt_masked", "adapt_full_finetune"):
        raise ConfigurationError(f"adapt needs an adapt_* mode, got {cfg.mode!r}")
    if not adapt_split:
        raise ConfigurationError("adapt split is empty")
    masked = cfg.mode == "adapt_masked"
    mask = source.mask.copy()
    if masked and mask.is_empty():
        raise ConfigurationError("adapt_masked with an empty prune mask: nothing to adapt")
    model = source.to_model()
    eval_splits = dict(eval_splits or {})
    opt = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    shuffle_rng = stream(cfg.seed, "adapt-shuffle")
    dropout_rng = stream(cfg.seed, "adapt-dropout")
    only = {n: mask[n] for n in mask.names() if mask[n].any()} if masked else None
    runlog = RunLog()
    t0 = time.perf_counter()

    def log_epoch(epoch):
        wall = time.perf_counter() - t0 if cfg.record_wall_time else 0.0
        splits = {"adapt": adapt_split, **eval_splits}
        for name, utts in splits.items():
            runlog.add(
                epoch, name, split_loss(model, utts), evaluate(model, utts, cfg.eval_beam).wer,
                mask.sparsity, wall,
            )

    log_epoch(0)
    for epoch in range(1, cfg.epochs + 1):
        for idx in _batches(len(adapt_split), cfg.adapt_batch_size, shuffle_rng):
            tape, loss = _forward_loss(model, [adapt_split[i] for i in idx], dropout_rng)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite adaptation loss at epoch {epoch} (lr {cfg.adapt_lr:.3e}, "
                    f"batch ids {idx.tolist()})"
                )
            ad.backward(loss, tape)
            grads = _grads(model)
            if masked:
                grads = gate_gradients(grads, mask, "adapt")
            opt.step(model.params, grads, cfg.adapt_lr, only)
            ad.zero_grads(model.params.values())
        log_epoch(epoch)
    ckpt = Checkpoint.from_model(
        model, mask,
        optimizer=opt.state(),
        step=source.step,
        rng_state=_rng_state(shuffle=shuffle_rng, dropout=dropout_rng),
        meta={**source.meta, "adapt": cfg.to_dict(), "optimizer_t": opt.t},
    )
    return ckpt, runlog
