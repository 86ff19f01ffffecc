"""Attention-only greedy/beam decoding and corpus-level WER evaluation."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scoring import WerBreakdown, wer
from .synthdata import Utterance
from .transformer import BOS, EOS, PAD, Model, decode_forward_batch, pad_features, subsampled_length


def default_max_len(n_frames: int) -> int:
    """Output budget (EOS included): twice the encoder length."""
    return max(2, 2 * subsampled_length(n_frames))


def _next_log_probs(model: Model, tokens: np.ndarray, enc: Tensor, enc_pad) -> np.ndarray:
    logits = decode_forward_batch(tokens, enc, enc_pad, model.params, model.config).data[:, -1]
    logits = logits.copy()
    logits[:, [BOS, PAD]] = -np.inf
    m = logits.max(axis=1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


def greedy_decode(
    model: Model, utterances: Sequence[Utterance], max_len: int | None = None, batch_size: int = 64
) -> list[list[int]]:
    """Stepwise argmax for many utterances at once (ties -> lowest id)."""
    out: list[list[int]] = []
    for lo in range(0, len(utterances), batch_size):
        chunk = utterances[lo : lo + batch_size]
        feats, lengths = pad_features([u.features for u in chunk])
        enc, pad = model.encode(feats, lengths)
        limits = np.array(
            [max_len or default_max_len(int(n)) for n in lengths]
        )
        b = len(chunk)
        tokens = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        hyps: list[list[int]] = [[] for _ in range(b)]
        for step in range(int(limits.max())):
            nxt = _next_log_probs(model, tokens, enc, pad).argmax(axis=1)
            for i in range(b):
                if done[i]:
                    continue
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    hyps[i].append(int(nxt[i]))
                    if len(hyps[i]) >= limits[i]:
                        done[i] = True
            if done.all():
                break
            col = np.where(done, PAD, nxt)[:, None]
            tokens = np.concatenate([tokens, col], axis=1)
        out.extend(hyps)
    return out


@dataclass(order=True)
class _Hyp:
    key: tuple
    tokens: tuple = field(compare=False)
    logp: float = field(compare=False)


def beam_search(
    model: Model, utterance: Utterance, beam_width: int, max_len: int | None = None
) -> tuple[list[int], float]:
    """Length-normalised beam search from BOS.

    Scores are ``sum log p / len`` with ``len`` counting emitted tokens
    (EOS included). Ties break on the token sequence. Hypotheses that reach
    ``max_len`` tokens without EOS are finalised as they are. Returns the
    best content sequence and its normalised score.
    """
    if beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    feats = utterance.features[None]
    enc, pad = model.encode(feats)
    limit = max_len or default_max_len(feats.shape[1])
    live = [((), 0.0)]
    finished: list[_Hyp] = []
    for step in range(1, limit + 1):
        toks = np.array([(BOS,) + t for t, _ in live], dtype=np.int64)
        enc_b = Tensor(np.broadcast_to(enc.data, (len(live),) + enc.shape[1:]))
        logp = _next_log_probs(model, toks, enc_b, None)
        cands = []
        for (t, lp), row in zip(live, logp):
            for v in np.flatnonzero(np.isfinite(row)):
                total = lp + float(row[v])
                seq = t + (int(v),)
                cands.append(_Hyp((-total / step, seq), seq, total))
        cands.sort()
        live = []
        for h in cands[:beam_width]:
            if h.tokens[-1] == EOS or step == limit:
                finished.append(h)
            else:
                live.append((h.tokens, h.logp))
        if not live:
            break
    best = min(finished)
    content = [t for t in best.tokens if t != EOS]
    return content, -best.key[0]


def decode(model: Model, utterance: Utterance, beam_width: int = 4, max_len: int | None = None) -> list[int]:
    if beam_width == 1:
        return greedy_decode(model, [utterance], max_len)[0]
    return beam_search(model, utterance, beam_width, max_len)[0]


def sequence_score(model: Model, utterance: Utterance, content: Sequence[int], eos: bool = True) -> float:
    """Length-normalised log-probability of a hypothesis under the model."""
    seq = list(content) + ([EOS] if eos else [])
    toks = np.array([[BOS] + seq[:-1]], dtype=np.int64)
    enc, pad = model.encode(utterance.features[None])
    logits = decode_forward_batch(toks, enc, pad, model.params, model.config).data[0]
    logits = logits.copy()
    logits[:, [BOS, PAD]] = -np.inf
    m = logits.max(axis=1, keepdims=True)
    lp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return float(sum(lp[i, t] for i, t in enumerate(seq)) / len(seq))


@dataclass
class EvalReport:
    aggregate: WerBreakdown
    per_speaker: dict[str, WerBreakdown]
    per_utterance: list[WerBreakdown]
    beam_width: int

    @property
    def wer(self) -> float:
        return self.aggregate.wer

    def speaker_wer(self) -> dict[str, float]:
        return {k: v.wer for k, v in self.per_speaker.items()}


def evaluate(model: Model, split: Sequence[Utterance], beam_width: int = 1) -> EvalReport:
    """Decode every utterance and micro-average the WER counts."""
    if not split:
        raise ValueError("cannot evaluate an empty split")
    if beam_width == 1:
        hyps = greedy_decode(model, list(split))
    else:
        hyps = [beam_search(model, u, beam_width)[0] for u in split]
    per_utt = [wer(u.content, h) for u, h in zip(split, hyps)]
    total = WerBreakdown()
    per_spk: dict[str, WerBreakdown] = defaultdict(WerBreakdown)
    for u, b in zip(split, per_utt):
        total = total + b
        per_spk[u.speaker_id] = per_spk[u.speaker_id] + b
    return EvalReport(total, dict(per_spk), per_utt, beam_width)


def split_loss(model: Model, split: Sequence[Utterance], batch_size: int = 64) -> float:
    """Token-weighted teacher-forced NLL over a split (no dropout)."""
    total, count = 0.0, 0
    for lo in range(0, len(split), batch_size):
        chunk = split[lo : lo + batch_size]
        feats, lengths = pad_features([u.features for u in chunk])
        tok_in, tok_out = collate_tokens([u.tokens for u in chunk])
        logits = model.logits(feats, lengths, tok_in)
        n = int((tok_out != PAD).sum())
        total += ad.cross_entropy(logits, tok_out, ignore_index=PAD).item() * n
        count += n
    return total / count


def collate_tokens(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Decoder inputs (BOS ...) and targets (... EOS), PAD-filled."""
    width = max(len(s) for s in seqs) - 1
    tok_in = np.full((len(seqs), width), PAD, dtype=np.int64)
    tok_out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        tok_in[i, : len(s) - 1] = s[:-1]
        tok_out[i, : len(s) - 1] = s[1:]
    return tok_in, tok_out
