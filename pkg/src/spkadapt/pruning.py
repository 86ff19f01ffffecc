"""Gradual magnitude pruning of encoder weights and mask-gated updates.

During base training the lowest-magnitude encoder weights are zeroed on a
schedule and held at zero. During adaptation the roles flip: only those
pruned entries are trained, everything else is frozen.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .speaker_memory import ConfigurationError

MODES = ("gradual", "onetime_initial", "onetime_middle", "onetime_final", "none")
PHASES = ("base", "adapt")

_PRUNABLE = re.compile(
    r"^(frontend\.(conv1|conv2|out)\.w|enc\.\d+\.attn\.w[qkvo]|enc\.\d+\.ffn\.w[12])$"
)


def is_prunable(name: str) -> bool:
    """Frontend weights and encoder attention/FFN weight matrices."""
    return bool(_PRUNABLE.match(name))


def prunable_names(names) -> list[str]:
    return [n for n in names if is_prunable(n)]


def pruned_count(sparsity: float, numel: int) -> int:
    """``floor(sparsity * numel)``, immune to float noise like 0.29*100."""
    return math.floor(round(sparsity * numel, 9))


class PruneMask:
    """Per-tensor boolean masks, True marking a pruned entry."""

    def __init__(self, masks: Mapping[str, np.ndarray], sparsity: float = 0.0):
        self.masks = {k: np.asarray(v, dtype=bool) for k, v in masks.items()}
        self.sparsity = float(sparsity)

    @classmethod
    def empty(cls, params: Mapping[str, Tensor]) -> "PruneMask":
        return cls(
            {n: np.zeros(params[n].shape, dtype=bool) for n in prunable_names(params)}
        )

    def copy(self) -> "PruneMask":
        return PruneMask({k: v.copy() for k, v in self.masks.items()}, self.sparsity)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.masks[name]

    def __contains__(self, name: str) -> bool:
        return name in self.masks

    def names(self) -> list[str]:
        return list(self.masks)

    def count(self, name: str | None = None) -> int:
        if name is not None:
            return int(self.masks[name].sum())
        return int(sum(m.sum() for m in self.masks.values()))

    def numel(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    def fraction(self, name: str) -> float:
        m = self.masks[name]
        return float(m.sum()) / m.size

    def per_tensor_sparsity(self) -> dict[str, float]:
        return {n: self.fraction(n) for n in self.masks}

    def is_empty(self) -> bool:
        return self.count() == 0


@dataclass
class PruneSchedule:
    """When and how far to prune during base training.

    Gradual mode fires events every ``interval_steps`` after
    ``ramp_start_step``; event ``k`` of ``n`` targets ``s_f * k / n``, and the
    last event lands on ``ramp_end_step``. One-time modes jump straight to
    ``target_sparsity`` at 0%, 50% or 100% of ``total_steps``.
    """

    target_sparsity: float = 0.1
    interval_steps: int = 200
    ramp_start_step: int = 0
    ramp_end_step: int = 0
    mode: str = "gradual"
    total_steps: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown prune mode {self.mode!r}; choose from {MODES}")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigurationError(
                f"target_sparsity must be in [0, 1), got {self.target_sparsity}"
            )
        if self.interval_steps < 1:
            raise ConfigurationError("interval_steps must be >= 1")
        if self.mode == "gradual" and not (
            0 <= self.ramp_start_step <= self.ramp_end_step <= self.total_steps
        ):
            raise ConfigurationError(
                "need 0 <= ramp_start_step <= ramp_end_step <= total_steps, got "
                f"{self.ramp_start_step}, {self.ramp_end_step}, {self.total_steps}"
            )

    @classmethod
    def for_training(
        cls,
        total_steps: int,
        target_sparsity: float = 0.1,
        mode: str = "gradual",
        interval_steps: int = 200,
        warmup_frac: float = 0.2,
        ramp_frac: float = 0.6,
    ) -> "PruneSchedule":
        """Default layout: warm-up, then ramp over the middle of training."""
        start = int(round(warmup_frac * total_steps))
        end = min(total_steps, start + int(round(ramp_frac * total_steps)))
        return cls(target_sparsity, interval_steps, start, end, mode, total_steps)

    @property
    def n_events(self) -> int:
        span = self.ramp_end_step - self.ramp_start_step
        return max(1, math.ceil(span / self.interval_steps))

    def event_steps(self) -> list[int]:
        if self.mode == "none" or self.target_sparsity == 0.0:
            return []
        if self.mode == "gradual":
            n = self.n_events
            steps = [self.ramp_start_step + k * self.interval_steps for k in range(1, n)]
            return steps + [self.ramp_end_step]
        return [self.onetime_step()]

    def onetime_step(self) -> int:
        frac = {"onetime_initial": 0.0, "onetime_middle": 0.5, "onetime_final": 1.0}[self.mode]
        return int(round(frac * self.total_steps))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PruneSchedule":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def current_sparsity(step: int, schedule: PruneSchedule) -> float:
    """Sparsity the mask should have once ``step`` optimizer steps are done."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if schedule.mode == "none":
        return 0.0
    s_f = schedule.target_sparsity
    if schedule.mode != "gradual":
        return s_f if step >= schedule.onetime_step() else 0.0
    if step >= schedule.ramp_end_step:
        return s_f
    if step < schedule.ramp_start_step:
        return 0.0
    k = (step - schedule.ramp_start_step) // schedule.interval_steps
    return s_f * k / schedule.n_events


def magnitude_mask(params: Mapping[str, Tensor | np.ndarray], sparsity: float) -> PruneMask:
    """Mark the ``floor(s * numel)`` smallest-|w| entries of each tensor.

    Ties go to the lowest flat index, which makes masks at increasing
    sparsity nested.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ConfigurationError(f"sparsity must be in [0, 1), got {sparsity}")
    masks = {}
    for name, t in params.items():
        values = t.data if isinstance(t, Tensor) else np.asarray(t)
        flat = np.abs(values).ravel()
        k = pruned_count(sparsity, flat.size)
        order = np.argsort(flat, kind="stable")
        m = np.zeros(flat.size, dtype=bool)
        m[order[:k]] = True
        masks[name] = m.reshape(values.shape)
    return PruneMask(masks, sparsity)


def prune_event(params: Mapping[str, Tensor], mask: PruneMask, sparsity: float) -> PruneMask:
    """Grow ``mask`` to ``sparsity`` and zero the newly pruned weights in place.

    Already-pruned entries stay pruned; the remaining budget goes to the
    smallest-magnitude surviving entries.
    """
    if sparsity + 1e-12 < mask.sparsity:
        raise ValueError(
            f"cannot shrink sparsity from {mask.sparsity} to {sparsity}; masks only grow"
        )
    if not 0.0 <= sparsity < 1.0:
        raise ConfigurationError(f"sparsity must be in [0, 1), got {sparsity}")
    new = {}
    for name in mask.names():
        t = params[name]
        old = mask[name].ravel()
        k = pruned_count(sparsity, old.size)
        if k < old.sum():
            raise ValueError(f"{name}: request keeps {k} pruned but {old.sum()} already are")
        idx = np.arange(old.size)
        order = np.lexsort((idx, np.abs(t.data).ravel(), ~old))
        m = np.zeros(old.size, dtype=bool)
        m[order[:k]] = True
        m = m.reshape(t.shape)
        t.data[m] = 0.0
        new[name] = m
    return PruneMask(new, sparsity)


def gate_gradients(
    grads: Mapping[str, np.ndarray], mask: PruneMask, phase: str
) -> dict[str, np.ndarray]:
    """Zero the gradient entries that must not move in ``phase``.

    ``base``: pruned entries get no gradient. ``adapt``: only pruned entries
    of prunable tensors keep their gradient; every other parameter
    (unpruned weights, decoder, biases, norms, embeddings, memory
    projections) is frozen.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}; expected one of {PHASES}")
    out = {}
    for name, g in grads.items():
        if name in mask:
            if g.shape != mask[name].shape:
                raise ValueError(
                    f"{name}: gradient shape {g.shape} != mask shape {mask[name].shape}"
                )
            keep = ~mask[name] if phase == "base" else mask[name]
            out[name] = np.where(keep, g, 0.0)
        elif phase == "base":
            out[name] = g
        else:
            out[name] = np.zeros_like(g)
    return out

