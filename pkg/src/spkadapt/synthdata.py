"""Deterministic synthetic multi-speaker transduction corpus.

Each content token owns a short prototype of feature frames. A speaker
renders an utterance by concatenating prototypes, randomly stretching or
compressing them in time, applying its affine distortion ``x -> A x + b``
and adding Gaussian noise. Unseen and target speakers have distortions the
model never saw in training, which is the mismatch adaptation has to fix.
"""

from __future__ import annotations

import base64
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .rng import stream
from .speaker_memory import ConfigurationError
from .transformer import BOS, EOS, N_SPECIAL

SPLITS = (
    "train",
    "dev",
    "test_seen",
    "test_unseen_speakers",
    "target_speaker_adapt",
    "target_speaker_test",
)
EMBEDDING_SEED = 20211  # fixed: embeddings depend on the profile only
MAX_CONDITION = 10.0


@dataclass
class SynthConfig:
    seed: int = 0
    d_feat: int = 8
    vocab_size: int = 24
    proto_len: int = 3
    min_tokens: int = 3
    max_tokens: int = 10
    n_train_speakers: int = 20
    train_utts: int = 100
    dev_utts: int = 5
    test_seen_utts: int = 5
    n_unseen_speakers: int = 4
    unseen_utts: int = 25
    target_utts: int = 40
    target_test_utts: int = 30
    adapt_size: int = 10
    eps: float = 0.6
    target_eps: float = 1.0
    shift_scale: float = 0.5
    noise: float = 0.1
    rate_min: float = 0.75
    rate_max: float = 1.25
    d_ivec: int = 16

    def validate(self) -> None:
        problems = []
        if self.vocab_size <= N_SPECIAL:
            problems.append("vocab_size must leave room for content tokens")
        if not 1 <= self.min_tokens <= self.max_tokens:
            problems.append("need 1 <= min_tokens <= max_tokens")
        if self.proto_len < 1:
            problems.append("proto_len must be >= 1")
        if self.n_train_speakers < 1 or self.train_utts < 1:
            problems.append("need at least one training speaker with one utterance")
        if self.n_unseen_speakers < 0:
            problems.append("n_unseen_speakers must be >= 0")
        if self.target_test_utts < 1:
            problems.append("target_test_utts must be >= 1")
        if not 1 <= self.adapt_size <= self.target_utts - self.target_test_utts:
            problems.append(
                f"adapt_size={self.adapt_size} must lie in [1, target_utts - "
                f"target_test_utts = {self.target_utts - self.target_test_utts}]"
            )
        if not 0.0 < self.rate_min <= 1.0 <= self.rate_max < 2.0:
            problems.append("need 0 < rate_min <= 1 <= rate_max < 2")
        if self.eps < 0 or self.target_eps < 0 or self.noise < 0:
            problems.append("eps, target_eps and noise must be non-negative")
        if problems:
            raise ConfigurationError("infeasible corpus config: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class SpeakerProfile:
    speaker_id: str
    A: np.ndarray
    b: np.ndarray
    rate: float
    noise: float

    @classmethod
    def identity(cls, d_feat: int, speaker_id: str = "identity") -> "SpeakerProfile":
        return cls(speaker_id, np.eye(d_feat), np.zeros(d_feat), 1.0, 0.0)


@dataclass
class Utterance:
    features: np.ndarray
    tokens: list[int]
    speaker_id: str

    @property
    def content(self) -> list[int]:
        return [t for t in self.tokens if t not in (BOS, EOS)]


@dataclass
class Corpus:
    splits: dict[str, list[Utterance]]
    rosters: dict[str, list[str]]
    config: SynthConfig
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)

    def train_embeddings(self) -> dict[str, np.ndarray]:
        return {s: self.embeddings[s] for s in self.rosters["train"]}


# ---------------------------------------------------------------- speakers


def gen_speaker(
    seed: int, speaker_id: str, cfg: SynthConfig | None = None, eps: float | None = None
) -> SpeakerProfile:
    """Seeded speaker: ``A = I + eps*R`` (cond(A) <= 10), shift, rate, noise."""
    cfg = cfg or SynthConfig()
    eps = cfg.eps if eps is None else eps
    d = cfg.d_feat
    rng = stream(seed, "speaker", speaker_id)
    r = rng.standard_normal((d, d)) / np.sqrt(d)
    shift = rng.standard_normal(d)
    u_rate, u_noise = rng.random(2)
    delta = eps * r
    a = np.eye(d) + delta
    while np.linalg.cond(a) > MAX_CONDITION:
        delta *= 0.8
        a = np.eye(d) + delta
    rate = cfg.rate_min + (cfg.rate_max - cfg.rate_min) * u_rate
    noise = cfg.noise * (0.75 + 0.5 * u_noise)
    return SpeakerProfile(speaker_id, a, eps * cfg.shift_scale * shift, float(rate), float(noise))


def speaker_embedding(profile: SpeakerProfile, d_ivec: int = 16) -> np.ndarray:
    """Unit-norm surrogate i-vector of a profile.

    The profile is flattened as ``[vec(A - I), b, rate - 1, 0.05]`` (the
    constant keeps the identity speaker's embedding well defined) and
    projected by a fixed seeded matrix.
    """
    d = profile.A.shape[0]
    phi = np.concatenate(
        [(profile.A - np.eye(d)).ravel(), profile.b, [profile.rate - 1.0, 0.05]]
    )
    proj = stream(EMBEDDING_SEED, "ivector-projection", d, d_ivec).standard_normal(
        (phi.size, d_ivec)
    )
    v = phi @ proj
    return v / np.linalg.norm(v)


# --------------------------------------------------------------- rendering


def codebook(seed: int, vocab_size: int, proto_len: int, d_feat: int) -> np.ndarray:
    """Prototype frames per token id; rows for reserved ids are NaN."""
    rng = stream(seed, "codebook")
    protos = rng.standard_normal((vocab_size, proto_len, d_feat)).astype(np.float32)
    protos = protos.astype(np.float64)
    protos[:N_SPECIAL] = np.nan
    return protos


def render_utterance(
    tokens, profile: SpeakerProfile, seed: int, protos: np.ndarray
) -> Utterance:
    """Render content tokens into frames as spoken by ``profile``.

    Frames other than the middle one of each prototype are dropped with
    probability ``1 - rate`` (fast speakers) or duplicated with probability
    ``rate - 1`` (slow ones). Short results are padded to 4 frames by
    repeating the last frame. Output is rounded to float32 precision so the
    serialised corpus is lossless.
    """
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ValueError("render_utterance needs at least one token")
    for t in tokens:
        if not N_SPECIAL <= t < protos.shape[0]:
            raise ValueError(f"unknown token id {t}")
    rng = stream(seed, "render")
    p_drop = max(0.0, 1.0 - profile.rate)
    p_dup = max(0.0, profile.rate - 1.0)
    mid = protos.shape[1] // 2
    frames = []
    for t in tokens:
        for j, frame in enumerate(protos[t]):
            u_drop, u_dup = rng.random(2)
            if j != mid and u_drop < p_drop:
                continue
            frames.append(frame)
            if u_dup < p_dup:
                frames.append(frame)
    while len(frames) < 4:
        frames.append(frames[-1])
    x = np.stack(frames)
    x = x @ profile.A.T + profile.b
    if profile.noise > 0:
        x = x + profile.noise * rng.standard_normal(x.shape)
    x = x.astype(np.float32).astype(np.float64)
    return Utterance(x, [BOS] + tokens + [EOS], profile.speaker_id)


def _token_sequence(cfg: SynthConfig, speaker_id: str, idx: int) -> list[int]:
    rng = stream(cfg.seed, "tokens", speaker_id, idx)
    n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
    return [int(t) for t in rng.integers(N_SPECIAL, cfg.vocab_size, size=n)]


def _speaker_utterances(cfg, profile, protos, count, offset=0):
    out = []
    for i in range(offset, offset + count):
        toks = _token_sequence(cfg, profile.speaker_id, i)
        seed = int(stream(cfg.seed, "utt-seed", profile.speaker_id, i).integers(2**31))
        out.append(render_utterance(toks, profile, seed, protos))
    return out


def gen_corpus(cfg: SynthConfig, threads: int = 1) -> Corpus:
    """Generate all six splits.

    Training speakers contribute train/dev/test_seen utterances; unseen
    speakers only the unseen test split; the single target speaker's first
    ``adapt_size`` utterances form the adapt split and the last
    ``target_test_utts`` the target test split.
    """
    cfg.validate()
    protos = codebook(cfg.seed, cfg.vocab_size, cfg.proto_len, cfg.d_feat)
    train_ids = [f"spk{i:03d}" for i in range(cfg.n_train_speakers)]
    unseen_ids = [f"unseen{i:02d}" for i in range(cfg.n_unseen_speakers)]
    target_id = "target"

    def train_job(sid):
        prof = gen_speaker(cfg.seed, sid, cfg)
        n_tr, n_dev = cfg.train_utts, cfg.dev_utts
        utts = _speaker_utterances(cfg, prof, protos, n_tr + n_dev + cfg.test_seen_utts)
        return prof, utts[:n_tr], utts[n_tr : n_tr + n_dev], utts[n_tr + n_dev :]

    def unseen_job(sid):
        prof = gen_speaker(cfg.seed, sid, cfg)
        return prof, _speaker_utterances(cfg, prof, protos, cfg.unseen_utts)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        train_res = list(pool.map(train_job, train_ids))
        unseen_res = list(pool.map(unseen_job, unseen_ids))
    target = gen_speaker(cfg.seed, target_id, cfg, eps=cfg.target_eps)
    target_utts = _speaker_utterances(cfg, target, protos, cfg.target_utts)

    splits = {name: [] for name in SPLITS}
    embeddings = {}
    for prof, tr, dev, test in train_res:
        splits["train"] += tr
        splits["dev"] += dev
        splits["test_seen"] += test
        embeddings[prof.speaker_id] = speaker_embedding(prof, cfg.d_ivec)
    for prof, utts in unseen_res:
        splits["test_unseen_speakers"] += utts
        embeddings[prof.speaker_id] = speaker_embedding(prof, cfg.d_ivec)
    embeddings[target_id] = speaker_embedding(target, cfg.d_ivec)
    splits["target_speaker_adapt"] = target_utts[: cfg.adapt_size]
    splits["target_speaker_test"] = target_utts[cfg.target_utts - cfg.target_test_utts :]
    rosters = {
        "train": train_ids,
        "dev": train_ids if cfg.dev_utts else [],
        "test_seen": train_ids if cfg.test_seen_utts else [],
        "test_unseen_speakers": unseen_ids,
        "target_speaker_adapt": [target_id],
        "target_speaker_test": [target_id],
    }
    return Corpus(splits, rosters, cfg, embeddings)


# ----------------------------------------------------------- serialisation


def _encode_frames(x: np.ndarray) -> tuple[str, str]:
    payload = x.astype("<f4").tobytes()
    return f"{x.shape[0]}x{x.shape[1]}", base64.b64encode(payload).decode("ascii")


def _decode_frames(shape: str, payload: str) -> np.ndarray:
    t, d = (int(v) for v in shape.split("x"))
    raw = base64.b64decode(payload.encode("ascii"), validate=True)
    if len(raw) != 4 * t * d:
        raise ValueError(f"frame payload holds {len(raw)} bytes, header says {t}x{d}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(t, d)


def write_corpus(corpus: Corpus, directory: str | os.PathLike) -> None:
    """One ``<split>.tsv`` per split plus ``manifest.json``.

    Record columns: speaker id, space-separated token ids, ``TxD`` shape,
    base64 little-endian float32 frames.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        with open(out / f"{name}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for u in corpus.splits[name]:
                shape, payload = _encode_frames(u.features)
                toks = " ".join(str(t) for t in u.tokens)
                fh.write(f"{u.speaker_id}\t{toks}\t{shape}\t{payload}\n")
    manifest = {
        "format": "spkadapt-corpus/1",
        "seed": corpus.config.seed,
        "config": asdict(corpus.config),
        "rosters": corpus.rosters,
        "embeddings": {k: [float(x) for x in v] for k, v in sorted(corpus.embeddings.items())},
    }
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_corpus(directory: str | os.PathLike) -> Corpus:
    src = Path(directory)
    with open(src / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    splits = {}
    for name in SPLITS:
        utts = []
        with open(src / f"{name}.tsv", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 4:
                    raise ValueError(f"{name}.tsv:{lineno}: expected 4 columns")
                spk, toks, shape, payload = parts
                utts.append(
                    Utterance(_decode_frames(shape, payload), [int(t) for t in toks.split()], spk)
                )
        splits[name] = utts
    embeddings = {k: np.asarray(v) for k, v in manifest["embeddings"].items()}
    return Corpus(splits, manifest["rosters"], SynthConfig.from_dict(manifest["config"]), embeddings)
