from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spkadapt.scoring import WerBreakdown, align, wer


def oracle(ref, hyp):
    """Memoised recursion over (i, j) prefixes.

    Returns (S, D, I) of the alignment with fewest edits, breaking ties
    toward more substitutions.
    """
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def best(i, j):
        if i == 0:
            return (0, 0, j)
        if j == 0:
            return (0, i, 0)
        options = []
        s, d, ins = best(i - 1, j - 1)
        options.append((s + (ref[i - 1] != hyp[j - 1]), d, ins))
        s, d, ins = best(i - 1, j)
        options.append((s, d + 1, ins))
        s, d, ins = best(i, j - 1)
        options.append((s, d, ins + 1))
        return min(options, key=lambda c: (sum(c), -c[0]))

    return best(len(ref), len(hyp))


def all_alignments(ref, hyp):
    """Every monotone alignment's (S, D, I) by exhaustive enumeration."""
    if not ref:
        return {(0, 0, len(hyp))}
    if not hyp:
        return {(0, len(ref), 0)}
    out = set()
    for s, d, i in all_alignments(ref[1:], hyp[1:]):
        out.add((s + (ref[0] != hyp[0]), d, i))
    for s, d, i in all_alignments(ref[1:], hyp):
        out.add((s, d + 1, i))
    for s, d, i in all_alignments(ref, hyp[1:]):
        out.add((s, d, i + 1))
    return out


def test_worked_example():
    b = wer("the cat sat on the mat".split(), "the cat sit on mat now".split())
    assert b.errors == 3 and b.n_ref == 6 and b.wer == 0.5


def test_matches_recursive_oracle_on_1000_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        ref = list(rng.integers(0, 5, rng.integers(1, 11)))
        hyp = list(rng.integers(0, 5, rng.integers(0, 11)))
        b = wer(ref, hyp)
        assert (b.S, b.D, b.I) == oracle(ref, hyp), (ref, hyp)
        assert b.C == len(ref) - b.S - b.D


def test_matches_exhaustive_enumeration_on_short_pairs():
    rng = np.random.default_rng(7)
    for _ in range(300):
        ref = tuple(rng.integers(0, 3, rng.integers(1, 6)))
        hyp = tuple(rng.integers(0, 3, rng.integers(0, 6)))
        cands = all_alignments(ref, hyp)
        fewest = min(sum(c) for c in cands)
        top = {c for c in cands if sum(c) == fewest}
        most_subs = max(c[0] for c in top)
        winners = {c for c in top if c[0] == most_subs}
        assert len(winners) == 1
        b = wer(ref, hyp)
        assert {(b.S, b.D, b.I)} == winners


def test_substitution_preferred_over_delete_insert():
    b = wer([1, 2, 3], [1, 9, 3])
    assert (b.S, b.D, b.I, b.C) == (1, 0, 0, 2)


def test_all_deletions():
    b = wer([1, 2, 3], [])
    assert (b.S, b.D, b.I) == (0, 3, 0) and b.wer == 1.0


def test_empty_reference_rejected():
    with pytest.raises(ValueError):
        wer([], [1])
    with pytest.raises(ValueError):
        WerBreakdown().wer


@given(st.lists(st.integers(0, 4), min_size=1, max_size=12))
def test_identity(ref):
    b = wer(ref, ref)
    assert b.errors == 0 and b.C == len(ref)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=12), st.data())
def test_single_substitution(ref, data):
    pos = data.draw(st.integers(0, len(ref) - 1))
    hyp = list(ref)
    hyp[pos] = 5
    b = wer(ref, hyp)
    assert (b.S, b.D, b.I) == (1, 0, 0)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=8), st.lists(st.integers(0, 3), min_size=1, max_size=8))
def test_edit_count_is_symmetric(a, b):
    assert wer(a, b).errors == wer(b, a).errors


def test_align_ops_cover_both_sequences():
    ref, hyp = [1, 2, 3, 4], [2, 3, 5, 4, 6]
    ops = align(ref, hyp)
    assert [r for _, r, _ in ops if r is not None] == list(range(4))
    assert [h for _, _, h in ops if h is not None] == list(range(5))


def test_breakdown_addition():
    a, b = WerBreakdown(1, 2, 3, 4), WerBreakdown(1, 0, 0, 5)
    assert a + b == WerBreakdown(2, 2, 3, 9)
    assert (a + b).wer == 7 / 13
