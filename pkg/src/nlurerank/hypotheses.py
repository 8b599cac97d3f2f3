"""Domain hypothesis lists: the beam-limited product of IC and NER outputs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

from .components import ComponentScores
from .schema import Slot


class EmptyInputError(ValueError):
    pass


@dataclass
class Hypothesis:
    domain: str
    intent: str
    slots: tuple[Slot, ...]
    l: np.ndarray
    index: int
    s: float | None = None


def build_hypotheses(cs: ComponentScores) -> list[Hypothesis]:
    """Cartesian product, intent-major; the three component scores are copied as-is."""
    if not cs.ic or not cs.ner:
        raise EmptyInputError(f"domain {cs.domain!r}: need at least one intent and one slot sequence")
    out = []
    for intent, ic_lp in cs.ic:
        for slots, ner_lp in cs.ner:
            out.append(
                Hypothesis(
                    domain=cs.domain,
                    intent=intent,
                    slots=slots,
                    l=np.array([cs.dc_logprob, ic_lp, ner_lp]),
                    index=len(out),
                )
            )
    return out


def hypothesis_record(utt_id: str, h: Hypothesis) -> dict:
    return {
        "utterance": utt_id,
        "domain": h.domain,
        "index": h.index,
        "intent": h.intent,
        "slots": [[s.entity_type, s.start, s.end, s.value] for s in h.slots],
        "l": [float(x) for x in h.l],
        "s": None if h.s is None else float(h.s),
    }


def hypothesis_from_record(rec: dict) -> tuple[str, Hypothesis]:
    h = Hypothesis(
        domain=rec["domain"],
        intent=rec["intent"],
        slots=tuple(Slot(et, a, b, v) for et, a, b, v in rec["slots"]),
        l=np.array(rec["l"], dtype=float),
        index=rec["index"],
        s=rec["s"],
    )
    return rec["utterance"], h


def dump_hypotheses(items: Iterable[tuple[str, Hypothesis]], fh: IO[str]) -> None:
    for utt_id, h in items:
        fh.write(json.dumps(hypothesis_record(utt_id, h)) + "\n")


def load_hypotheses(fh: IO[str]) -> list[tuple[str, Hypothesis]]:
    return [hypothesis_from_record(json.loads(line)) for line in fh if line.strip()]
