"""Speaker-aware persistent memory.

A fixed set of speaker vectors ``m_1..m_N`` (sampled from training-speaker
embeddings, projected to the per-head key width) is turned into memory keys
``M_k = [U_k m_i]`` and values ``M_v = [U_v m_i]``. Those rows are appended to
the keys and values of every encoder self-attention head. Only ``U_k`` and
``U_v`` are learned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import stream


class ConfigurationError(ValueError):
    """Raised for infeasible model, memory, pruning or corpus settings."""


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """A ``rows x cols`` matrix with orthonormal columns (``cols <= rows``)."""
    if cols > rows:
        raise ConfigurationError(
            f"cannot project {rows}-dim embeddings onto {cols} orthonormal columns"
        )
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # fix the sign so the factorisation is unique
    return q * np.sign(np.diag(r))


@dataclass
class SpeakerMemoryBank:
    """Frozen speaker vectors plus their learnable key/value projections.

    ``u_k``/``u_v`` hold one matrix when shared across layers (the default)
    or one per encoder layer.
    """

    m: np.ndarray
    u_k: list[Tensor]
    u_v: list[Tensor]
    source_speaker_ids: list[str] = field(default_factory=list)

    @property
    def n_slots(self) -> int:
        return self.m.shape[0]

    @property
    def d_k(self) -> int:
        return self.m.shape[1]

    @property
    def per_layer(self) -> bool:
        return len(self.u_k) > 1

    def named_params(self) -> dict[str, Tensor]:
        if not self.per_layer:
            return {"mem.u_k": self.u_k[0], "mem.u_v": self.u_v[0]}
        out = {}
        for i, (k, v) in enumerate(zip(self.u_k, self.u_v)):
            out[f"mem.{i}.u_k"] = k
            out[f"mem.{i}.u_v"] = v
        return out


def build_bank(
    speaker_embeddings: Mapping[str, np.ndarray],
    n_slots: int,
    d_k: int,
    seed: int,
    projection: np.ndarray | None = None,
    n_layers: int = 1,
) -> SpeakerMemoryBank:
    """Sample ``n_slots`` training speakers and build their memory bank.

    Speakers are drawn without replacement from ``speaker_embeddings`` (in
    sorted id order before shuffling, so dict order does not matter). Each
    embedding is mapped to ``d_k`` by a seeded random projection with
    orthonormal columns unless ``projection`` is given. ``n_layers > 1``
    gives every encoder layer its own ``U_k``/``U_v``.
    """
    if n_slots < 1:
        raise ConfigurationError(f"memory needs at least one slot, got {n_slots}")
    ids = sorted(speaker_embeddings)
    if n_slots > len(ids):
        raise ConfigurationError(
            f"cannot sample {n_slots} memory speakers from {len(ids)} training speakers"
        )
    pick = stream(seed, "memory-bank", "sample").permutation(len(ids))[:n_slots]
    chosen = [ids[i] for i in pick]
    emb = np.stack([np.asarray(speaker_embeddings[s], dtype=np.float64) for s in chosen])
    if projection is None:
        projection = orthonormal_columns(
            stream(seed, "memory-bank", "projection"), emb.shape[1], d_k
        )
    projection = np.asarray(projection, dtype=np.float64)
    if projection.shape != (emb.shape[1], d_k):
        raise ShapeError(
            f"projection shape {projection.shape} does not map {emb.shape[1]} -> {d_k}"
        )
    m = emb @ projection
    m.flags.writeable = False
    init = stream(seed, "memory-bank", "init")
    u_k = [Tensor(xavier_uniform(init, d_k, d_k), requires_grad=True) for _ in range(n_layers)]
    u_v = [Tensor(xavier_uniform(init, d_k, d_k), requires_grad=True) for _ in range(n_layers)]
    return SpeakerMemoryBank(m=m, u_k=u_k, u_v=u_v, source_speaker_ids=chosen)


def project_memory(bank: SpeakerMemoryBank, layer: int = 0) -> tuple[Tensor, Tensor]:
    """Memory keys and values, row ``i`` being ``U m_i``."""
    idx = layer if bank.per_layer else 0
    m = Tensor(bank.m)
    m_k = ad.matmul(m, ad.swap_last(bank.u_k[idx]))
    m_v = ad.matmul(m, ad.swap_last(bank.u_v[idx]))
    return m_k, m_v


def augment_kv(k: Tensor, v: Tensor, m_k: Tensor, m_v: Tensor) -> tuple[Tensor, Tensor]:
    """Append the memory rows after the per-head keys and values.

    ``k``/``v`` may carry leading batch/head axes; the memory rows are
    broadcast over them.
    """
    if m_k.shape[-1] != k.shape[-1] or m_v.shape[-1] != v.shape[-1]:
        raise ShapeError(
            f"memory width {m_k.shape[-1]} does not match key width {k.shape[-1]}"
        )
    if m_k.shape[0] == 0:
        return k, v
    lead = k.shape[:-2]
    if lead:
        m_k = ad.broadcast_to(m_k, lead + m_k.shape)
        m_v = ad.broadcast_to(m_v, lead + m_v.shape)
    return ad.concat_rows(k, m_k), ad.concat_rows(v, m_v)
