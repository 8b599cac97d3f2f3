"""SemER and IE of a hypothesis against its reference annotation."""

from __future__ import annotations

from typing import Hashable, Sequence

from .schema import Annotation


def levenshtein(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Unit-cost edit distance between two item sequences."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def slot_sequence(intent: str, slots) -> tuple:
    """Intent label followed by (entity type, surface value) pairs; domain is left out."""
    return (intent, *(s.key for s in slots))


def semer(hyp, truth: Annotation) -> float:
    """Edit distance between hypothesis and reference sequences over the reference length.

    ``hyp`` is anything with ``intent`` and ``slots`` (a Hypothesis or an
    Annotation). Values above 1 are possible when the hypothesis has extra slots.
    """
    ref = slot_sequence(truth.intent, truth.slots)
    return levenshtein(slot_sequence(hyp.intent, hyp.slots), ref) / len(ref)


def ie(semer_value: float) -> int:
    if semer_value < 0:
        raise ValueError(f"SemER cannot be negative: {semer_value}")
    return 0 if semer_value == 0 else 1
