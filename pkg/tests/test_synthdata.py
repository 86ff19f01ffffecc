import filecmp

import numpy as np
import pytest

from spkadapt.speaker_memory import ConfigurationError
from spkadapt.synthdata import (
    MAX_CONDITION,
    SPLITS,
    SpeakerProfile,
    SynthConfig,
    codebook,
    gen_corpus,
    gen_speaker,
    read_corpus,
    render_utterance,
    speaker_embedding,
    write_corpus,
)
from spkadapt.transformer import BOS, EOS, N_SPECIAL

SMALL = SynthConfig(n_train_speakers=4, train_utts=6, dev_utts=2, test_seen_utts=2,
                    n_unseen_speakers=2, unseen_utts=3)


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(SMALL)


def test_split_sizes(corpus):
    sizes = {k: len(v) for k, v in corpus.splits.items()}
    assert sizes == {"train": 24, "dev": 8, "test_seen": 8, "test_unseen_speakers": 6,
                     "target_speaker_adapt": 10, "target_speaker_test": 30}
    assert set(corpus.splits) == set(SPLITS)


def test_default_corpus_shape():
    cfg = SynthConfig()
    assert cfg.n_train_speakers * cfg.train_utts == 2000
    assert cfg.target_utts - cfg.target_test_utts == cfg.adapt_size == 10


def test_speakers_are_disjoint(corpus):
    train = {u.speaker_id for u in corpus.splits["train"]}
    unseen = {u.speaker_id for u in corpus.splits["test_unseen_speakers"]}
    assert not train & unseen
    assert {u.speaker_id for u in corpus.splits["target_speaker_test"]} == {"target"}
    assert "target" not in train | unseen


def test_tokens_and_lengths(corpus):
    for utts in corpus.splits.values():
        for u in utts:
            assert u.tokens[0] == BOS and u.tokens[-1] == EOS
            assert SMALL.min_tokens <= len(u.content) <= SMALL.max_tokens
            assert all(N_SPECIAL <= t < SMALL.vocab_size for t in u.content)
            assert u.features.shape[0] >= 4 and u.features.shape[1] == SMALL.d_feat


def test_features_are_float32_exact(corpus):
    for u in corpus.splits["train"][:10]:
        np.testing.assert_array_equal(u.features, u.features.astype(np.float32).astype(np.float64))


def test_deterministic_and_thread_invariant(tmp_path, corpus):
    write_corpus(corpus, tmp_path / "a")
    write_corpus(gen_corpus(SMALL, threads=4), tmp_path / "b")
    names = [f"{s}.tsv" for s in SPLITS] + ["manifest.json"]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == []


def test_round_trip_is_lossless(tmp_path, corpus):
    write_corpus(corpus, tmp_path)
    back = read_corpus(tmp_path)
    assert back.config == corpus.config
    assert back.rosters == corpus.rosters
    for name in SPLITS:
        for a, b in zip(corpus.splits[name], back.splits[name], strict=True):
            np.testing.assert_array_equal(a.features, b.features)
            assert a.tokens == b.tokens and a.speaker_id == b.speaker_id
    for k, v in corpus.embeddings.items():
        np.testing.assert_array_equal(v, back.embeddings[k])


def test_seed_changes_corpus():
    a = gen_corpus(SMALL)
    b = gen_corpus(SynthConfig(**{**SMALL.__dict__, "seed": 1}))
    assert not np.array_equal(a.splits["train"][0].features, b.splits["train"][0].features)


def test_adapt_split_is_nested_prefix():
    small = gen_corpus(SynthConfig(**{**SMALL.__dict__, "adapt_size": 1}))
    full = gen_corpus(SMALL)
    np.testing.assert_array_equal(small.splits["target_speaker_adapt"][0].features,
                                  full.splits["target_speaker_adapt"][0].features)
    np.testing.assert_array_equal(small.splits["target_speaker_test"][0].features,
                                  full.splits["target_speaker_test"][0].features)


@pytest.mark.parametrize("sid", [f"spk{i:03d}" for i in range(30)])
def test_speaker_conditioning(sid):
    p = gen_speaker(0, sid, SynthConfig(eps=3.0))
    assert np.linalg.cond(p.A) <= MAX_CONDITION
    assert 0.75 <= p.rate <= 1.25


def test_target_is_harder_than_training_speakers():
    cfg = SynthConfig()
    spread = [np.linalg.norm(gen_speaker(0, f"spk{i:03d}", cfg).A - np.eye(8)) for i in range(20)]
    target = gen_speaker(0, "target", cfg, eps=cfg.target_eps)
    assert np.linalg.norm(target.A - np.eye(8)) > np.median(spread)


def test_embeddings_unit_norm_and_distinct(corpus):
    embs = np.stack(list(corpus.embeddings.values()))
    np.testing.assert_allclose(np.linalg.norm(embs, axis=1), 1.0, atol=1e-12)
    assert len({tuple(np.round(e, 12)) for e in embs}) == len(embs)
    ident = speaker_embedding(SpeakerProfile.identity(8))
    assert np.isfinite(ident).all()


def test_identity_speaker_renders_prototypes():
    protos = codebook(0, 24, 3, 8)
    u = render_utterance([5, 7], SpeakerProfile.identity(8), 0, protos)
    np.testing.assert_array_equal(u.features, np.concatenate([protos[5], protos[7]]))


def test_short_utterance_padded_to_four_frames():
    protos = codebook(0, 24, 1, 8)
    u = render_utterance([5], SpeakerProfile.identity(8), 0, protos)
    assert u.features.shape == (4, 8)
    np.testing.assert_array_equal(u.features, np.repeat(protos[5], 4, axis=0))


def test_unknown_token_rejected():
    protos = codebook(0, 24, 3, 8)
    with pytest.raises(ValueError):
        render_utterance([24], SpeakerProfile.identity(8), 0, protos)
    with pytest.raises(ValueError):
        render_utterance([EOS], SpeakerProfile.identity(8), 0, protos)


@pytest.mark.parametrize("kw", [{"adapt_size": 11}, {"adapt_size": 0}, {"min_tokens": 5, "max_tokens": 4},
                                {"vocab_size": 3}, {"rate_min": 1.1}])
def test_infeasible_config(kw):
    with pytest.raises(ConfigurationError):
        gen_corpus(SynthConfig(**{**SMALL.__dict__, **kw}))
