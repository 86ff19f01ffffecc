import numpy as np
import pytest

from spkadapt import autodiff as ad
from spkadapt.autodiff import ShapeError, Tape, Tensor, backward
from spkadapt.speaker_memory import (
    ConfigurationError,
    augment_kv,
    build_bank,
    orthonormal_columns,
    project_memory,
)


def embeddings(n=12, d=16, seed=0):
    rng = np.random.default_rng(seed)
    return {f"spk{i:03d}": rng.normal(size=d) for i in range(n)}


def test_bank_shape_and_determinism():
    a = build_bank(embeddings(), 8, 4, seed=3)
    b = build_bank(embeddings(), 8, 4, seed=3)
    assert a.m.shape == (8, 4) and a.n_slots == 8 and a.d_k == 4
    np.testing.assert_array_equal(a.m, b.m)
    assert a.source_speaker_ids == b.source_speaker_ids
    assert len(set(a.source_speaker_ids)) == 8


def test_bank_ignores_dict_order():
    emb = embeddings()
    rev = dict(reversed(list(emb.items())))
    np.testing.assert_array_equal(build_bank(emb, 5, 4, 1).m, build_bank(rev, 5, 4, 1).m)


def test_bank_rows_are_projected_embeddings():
    emb = embeddings()
    proj = orthonormal_columns(np.random.default_rng(9), 16, 4)
    bank = build_bank(emb, 6, 4, 2, projection=proj)
    want = np.stack([emb[s] for s in bank.source_speaker_ids]) @ proj
    np.testing.assert_array_equal(bank.m, want)


def test_orthonormal_columns():
    q = orthonormal_columns(np.random.default_rng(0), 16, 4)
    np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-12)


def test_bank_is_frozen():
    bank = build_bank(embeddings(), 4, 4, 0)
    with pytest.raises(ValueError):
        bank.m[0, 0] = 1.0
    with Tape() as tape:
        mk, mv = project_memory(bank)
        loss = ad.add(ad.sum_all(mk), ad.sum_all(mv))
    backward(loss, tape)
    # only the projections receive gradients
    assert bank.u_k[0].grad is not None and np.abs(bank.u_k[0].grad).sum() > 0
    assert set(bank.named_params()) == {"mem.u_k", "mem.u_v"}


def test_per_layer_names():
    bank = build_bank(embeddings(), 4, 4, 0, n_layers=3)
    assert bank.per_layer
    assert sorted(bank.named_params()) == sorted(
        f"mem.{i}.{w}" for i in range(3) for w in ("u_k", "u_v")
    )


def test_project_memory_formula():
    bank = build_bank(embeddings(), 4, 4, 0)
    mk, mv = project_memory(bank)
    np.testing.assert_allclose(mk.data, bank.m @ bank.u_k[0].data.T, atol=1e-15)
    np.testing.assert_allclose(mv.data, bank.m @ bank.u_v[0].data.T, atol=1e-15)


def test_too_many_slots():
    with pytest.raises(ConfigurationError):
        build_bank(embeddings(n=3), 4, 4, 0)
    with pytest.raises(ConfigurationError):
        build_bank(embeddings(), 0, 4, 0)


def test_augment_kv_appends_after_sequence():
    rng = np.random.default_rng(0)
    k, v = Tensor(rng.normal(size=(2, 3, 5, 4))), Tensor(rng.normal(size=(2, 3, 5, 4)))
    mk, mv = Tensor(rng.normal(size=(7, 4))), Tensor(rng.normal(size=(7, 4)))
    kk, vv = augment_kv(k, v, mk, mv)
    assert kk.shape == (2, 3, 12, 4)
    np.testing.assert_array_equal(kk.data[:, :, :5], k.data)
    np.testing.assert_array_equal(kk.data[1, 2, 5:], mk.data)
    np.testing.assert_array_equal(vv.data[0, 1, 5:], mv.data)


def test_augment_kv_zero_slots_is_identity():
    k, v = Tensor(np.ones((1, 2, 3))), Tensor(np.zeros((1, 2, 3)))
    kk, vv = augment_kv(k, v, Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))))
    assert kk is k and vv is v


def test_augment_kv_width_mismatch():
    k = Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        augment_kv(k, k, Tensor(np.ones((1, 4))), Tensor(np.ones((1, 3))))
