"""Cross-domain decoding: per-domain hypotheses, scored and merged into one n-best list."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .components import ComponentScores, DomainComponents
from .corpus import MiscalibrationConfig
from .hypotheses import Hypothesis, build_hypotheses
from .metrics import ie, semer
from .reranker import WeightVector, score, sigmoid
from .schema import ConfigurationError, Slot, Utterance


@dataclass
class NBestEntry:
    hypothesis: Hypothesis
    s: float
    r: float


@dataclass
class NBest:
    utterance_id: str
    entries: list[NBestEntry]
    rejected: bool = False

    @property
    def top(self) -> NBestEntry:
        return self.entries[0]

    def to_dict(self) -> dict:
        return {
            "utterance": self.utterance_id,
            "rejected": self.rejected,
            "entries": [
                {
                    "domain": e.hypothesis.domain,
                    "intent": e.hypothesis.intent,
                    "slots": [[s.entity_type, s.start, s.end, s.value] for s in e.hypothesis.slots],
                    "index": e.hypothesis.index,
                    "l": [float(x) for x in e.hypothesis.l],
                    "s": e.s,
                    "r": e.r,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NBest":
        entries = []
        for e in d["entries"]:
            h = Hypothesis(
                e["domain"], e["intent"], tuple(Slot(*x) for x in e["slots"]),
                np.array(e["l"], dtype=float), e["index"], e["s"],
            )
            entries.append(NBestEntry(h, e["s"], e["r"]))
        return cls(d["utterance"], entries, d.get("rejected", False))


def merge(per_domain: Mapping[str, list[Hypothesis]], weights: Mapping[str, WeightVector], n: int) -> list[NBestEntry]:
    """Score each domain's hypotheses with its own weights and sort them jointly.

    Order: score descending, then domain label, then hypothesis index.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    entries = []
    for domain, hyps in per_domain.items():
        if not hyps:
            continue
        scores = np.atleast_1d(score(weights[domain], np.array([h.l for h in hyps])))
        for h, s in zip(hyps, scores):
            entries.append(NBestEntry(replace(h, s=float(s)), float(s), float(sigmoid(s))))
    entries.sort(key=lambda e: (-e.s, e.hypothesis.domain, e.hypothesis.index))
    return entries[:n]


@dataclass
class DecodeConfig:
    beam_ic: int = 3
    beam_ner: int = 3
    n: int = 10
    skew: MiscalibrationConfig = field(default_factory=MiscalibrationConfig)
    # rejection on the top hypothesis's confidence; a float applies to all domains
    reject_threshold: float | dict[str, float] | None = None

    def threshold(self, domain: str) -> float | None:
        if isinstance(self.reject_threshold, dict):
            return self.reject_threshold.get(domain)
        return self.reject_threshold


def domain_hypotheses(
    utterances: Sequence[Utterance],
    components: Mapping[str, DomainComponents],
    cfg: DecodeConfig,
) -> list[dict[str, list[Hypothesis]]]:
    """Per-utterance map domain -> hypothesis list, domains in sorted order."""
    if not components:
        raise ConfigurationError("no domains configured")
    out: list[dict[str, list[Hypothesis]]] = [{} for _ in utterances]
    for domain in sorted(components):
        scored: list[ComponentScores] = components[domain].score(utterances, cfg.beam_ic, cfg.beam_ner, cfg.skew)
        for slot, cs in zip(out, scored):
            slot[domain] = build_hypotheses(cs)
    return out


def decode_from_hypotheses(
    utt_id: str,
    per_domain: Mapping[str, list[Hypothesis]],
    weights: Mapping[str, WeightVector],
    cfg: DecodeConfig,
) -> NBest:
    missing = set(per_domain) - set(weights)
    if missing:
        raise ConfigurationError(f"no re-ranker weights for {sorted(missing)}")
    entries = merge(per_domain, weights, cfg.n)
    top = entries[0]
    thr = cfg.threshold(top.hypothesis.domain)
    return NBest(utt_id, entries, rejected=thr is not None and top.r < thr)


def decode(
    u: Utterance,
    components: Mapping[str, DomainComponents],
    weights: Mapping[str, WeightVector],
    cfg: DecodeConfig | None = None,
) -> NBest:
    cfg = cfg or DecodeConfig()
    return decode_from_hypotheses(u.id, domain_hypotheses([u], components, cfg)[0], weights, cfg)


def decode_batch(
    utterances: Sequence[Utterance],
    components: Mapping[str, DomainComponents],
    weights: Mapping[str, WeightVector],
    cfg: DecodeConfig | None = None,
) -> list[NBest]:
    cfg = cfg or DecodeConfig()
    hyps = domain_hypotheses(utterances, components, cfg)
    return [decode_from_hypotheses(u.id, h, weights, cfg) for u, h in zip(utterances, hyps)]


@dataclass
class EvaluationReport:
    n: int
    semer: float
    ie_rate: float
    per_domain: dict[str, dict]
    rejected: int = 0
    false_rejects: int = 0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "semer": self.semer,
            "ie_rate": self.ie_rate,
            "rejected": self.rejected,
            "false_rejects": self.false_rejects,
            "per_domain": {d: dict(v) for d, v in sorted(self.per_domain.items())},
        }


def evaluate(utterances: Sequence[Utterance], nbests: Sequence[NBest]) -> EvaluationReport:
    """Top-1 SemER / IE; the per-domain breakdown is keyed by the domain of the top hypothesis."""
    if not utterances:
        raise ConfigurationError("empty test set")
    if len(utterances) != len(nbests) or any(u.id != nb.utterance_id for u, nb in zip(utterances, nbests)):
        raise ConfigurationError("n-best lists do not line up with the test utterances")
    errs = []
    by_domain: dict[str, list[float]] = {}
    rejected = false_rejects = 0
    for u, nb in zip(utterances, nbests):
        e = semer(nb.top.hypothesis, u.truth)
        errs.append(e)
        by_domain.setdefault(nb.top.hypothesis.domain, []).append(e)
        if nb.rejected:
            rejected += 1
            false_rejects += ie(e) == 0
    errs_arr = np.array(errs)
    per_domain = {
        d: {"n": len(v), "semer": float(np.mean(v)), "ie_rate": float(np.mean([ie(x) for x in v]))}
        for d, v in by_domain.items()
    }
    return EvaluationReport(
        n=len(errs),
        semer=float(errs_arr.mean()),
        ie_rate=float(np.mean([ie(x) for x in errs])),
        per_domain=per_domain,
        rejected=rejected,
        false_rejects=int(false_rejects),
    )
