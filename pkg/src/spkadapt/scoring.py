"""Word error rate with substitution/deletion/insertion breakdown."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class WerBreakdown:
    S: int = 0
    D: int = 0
    I: int = 0  # noqa: E741
    C: int = 0

    @property
    def n_ref(self) -> int:
        return self.S + self.D + self.C

    @property
    def errors(self) -> int:
        return self.S + self.D + self.I

    @property
    def wer(self) -> float:
        if self.n_ref == 0:
            raise ValueError("WER is undefined for an empty reference")
        return self.errors / self.n_ref

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(
            self.S + other.S, self.D + other.D, self.I + other.I, self.C + other.C
        )


def align(ref: Sequence, hyp: Sequence) -> list[tuple[str, int | None, int | None]]:
    """Minimum-edit alignment as ``(op, ref_index, hyp_index)`` triples.

    ``op`` is one of ``"C"``, ``"S"``, ``"D"``, ``"I"``. Among alignments with
    the fewest edits the one with the most substitutions is chosen, i.e. a
    substitution is preferred over a deletion+insertion pair. Under that
    rule the S/D/I/C counts are unique.
    """
    n, m = len(ref), len(hyp)
    w = n + m + 1  # cost key = edits * w - substitutions
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i * w
    for j in range(1, m + 1):
        cost[0][j] = j * w
    for i in range(1, n + 1):
        row, prev = cost[i], cost[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] if ref[i - 1] == hyp[j - 1] else prev[j - 1] + w - 1
            row[j] = min(diag, prev[j] + w, row[j - 1] + w)

    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        here = cost[i][j]
        if i > 0 and j > 0:
            same = ref[i - 1] == hyp[j - 1]
            if here == cost[i - 1][j - 1] + (0 if same else w - 1):
                ops.append(("C" if same else "S", i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
        if i > 0 and here == cost[i - 1][j] + w:
            ops.append(("D", i - 1, None))
            i -= 1
        else:
            ops.append(("I", None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def wer(ref: Sequence, hyp: Sequence) -> WerBreakdown:
    """Levenshtein breakdown of ``hyp`` against a non-empty ``ref``."""
    if len(ref) == 0:
        raise ValueError("reference is empty; WER is undefined (N_r = 0)")
    counts = {"C": 0, "S": 0, "D": 0, "I": 0}
    for op, _, _ in align(ref, hyp):
        counts[op] += 1
    return WerBreakdown(counts["S"], counts["D"], counts["I"], counts["C"])
