"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"SPKCKPT\\0"
    version    u32
    header     u32 length + UTF-8 JSON (config, step, rng state, ...)
    tensors    u32 count, then per tensor:
                 u16 name length, name, u8 dtype (1 = f64), u8 ndim,
                 u32 dims..., little-endian payload
    masks      u32 count, then per mask:
                 u16 name length, name, u8 ndim, u32 dims..., packed bits
    trailer    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .pruning import PruneMask
from .speaker_memory import SpeakerMemoryBank
from .transformer import Model, ModelConfig

MAGIC = b"SPKCKPT\x00"
VERSION = 1
_F64 = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint cannot be read back faithfully."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    mask: PruneMask
    bank_m: np.ndarray | None = None
    bank_speakers: list[str] = field(default_factory=list)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def from_model(cls, model: Model, mask: PruneMask, **kwargs) -> "Checkpoint":
        bank = model.bank
        return cls(
            config=model.config,
            params={k: t.data.copy() for k, t in model.params.items()},
            mask=mask.copy(),
            bank_m=None if bank is None else np.array(bank.m),
            bank_speakers=[] if bank is None else list(bank.source_speaker_ids),
            **kwargs,
        )

    def to_model(self) -> Model:
        base = {
            k: Tensor(v.copy(), requires_grad=True, name=k)
            for k, v in self.params.items()
            if not k.startswith("mem.")
        }
        bank = None
        if self.config.memory_enabled:
            m = np.array(self.bank_m)
            m.flags.writeable = False
            if "mem.u_k" in self.params:
                names = [("mem.u_k", "mem.u_v")]
            else:
                names = [(f"mem.{i}.u_k", f"mem.{i}.u_v") for i in range(self.config.n_enc)]
            bank = SpeakerMemoryBank(
                m=m,
                u_k=[Tensor(self.params[k].copy(), requires_grad=True, name=k) for k, _ in names],
                u_v=[Tensor(self.params[v].copy(), requires_grad=True, name=v) for _, v in names],
                source_speaker_ids=list(self.bank_speakers),
            )
        return Model(self.config, base, bank)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "bank_speakers": ckpt.bank_speakers,
        "mask_sparsity": ckpt.mask.sparsity,
        "meta": ckpt.meta,
    }
    tensors = {f"param/{k}": v for k, v in ckpt.params.items()}
    if ckpt.bank_m is not None:
        tensors["bank/m"] = ckpt.bank_m
    tensors.update({f"opt/{k}": v for k, v in ckpt.optimizer.items()})

    out = bytearray(MAGIC)
    out += struct.pack("<I", ckpt.version)
    hj = json.dumps(header, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(hj)) + hj
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        out += _pack_str(name)
        out += struct.pack("<BB", _F64, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    out += struct.pack("<I", len(ckpt.mask.masks))
    for name, m in ckpt.mask.masks.items():
        out += _pack_str(name)
        out += struct.pack("<B", m.ndim)
        out += struct.pack(f"<{m.ndim}I", *m.shape)
        out += np.packbits(m.ravel(), bitorder="little").tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<H", f"{what} name length")
        return self.take(n, f"{what} name").decode("utf-8")


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 4 + 32:
        raise CheckpointError("truncated checkpoint: shorter than header and checksum")
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a spkadapt checkpoint")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted or truncated")
    r = _Reader(body)
    r.take(len(MAGIC), "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint field 'version' = {version}, expected {VERSION}")
    (hlen,) = r.unpack("<I", "header length")
    header = json.loads(r.take(hlen, "header").decode("utf-8"))

    (n_tensors,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(n_tensors):
        name = r.string("tensor")
        dtype, ndim = r.unpack("<BB", f"tensor {name!r} dtype")
        if dtype != _F64:
            raise CheckpointError(f"tensor {name!r}: unknown field 'dtype' code {dtype}")
        shape = r.unpack(f"<{ndim}I", f"tensor {name!r} shape")
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(8 * count, f"tensor {name!r} payload")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    (n_masks,) = r.unpack("<I", "mask count")
    masks = {}
    for _ in range(n_masks):
        name = r.string("mask")
        (ndim,) = r.unpack("<B", f"mask {name!r} ndim")
        shape = r.unpack(f"<{ndim}I", f"mask {name!r} shape")
        count = int(np.prod(shape)) if shape else 1
        raw = r.take((count + 7) // 8, f"mask {name!r} bits")
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[:count]
        masks[name] = bits.astype(bool).reshape(shape)
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} unexpected trailing bytes before checksum")

    params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    optimizer = {k[len("opt/") :]: v for k, v in tensors.items() if k.startswith("opt/")}
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        mask=PruneMask(masks, header["mask_sparsity"]),
        bank_m=tensors.get("bank/m"),
        bank_speakers=header["bank_speakers"],
        optimizer=optimizer,
        step=header["step"],
        rng_state=header["rng_state"],
        meta=header["meta"],
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    data = to_bytes(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
