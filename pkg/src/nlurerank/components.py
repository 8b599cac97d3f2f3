"""Per-domain DC / IC / NER stand-ins and their scored outputs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import MiscalibrationConfig
from .maxent import FeatureIndex, MaxEntModel, NotTrainedError, ngram_features, token_features, train_maxent
from .schema import DomainSchema, Slot, Utterance

NULL_TAG = "O"


@dataclass
class ComponentScores:
    domain: str
    dc_logprob: float
    ic: list[tuple[str, float]]
    ner: list[tuple[tuple[Slot, ...], float]]


@dataclass
class DomainComponents:
    schema: DomainSchema
    dc: MaxEntModel | None = None
    ic: MaxEntModel | None = None
    ner: MaxEntModel | None = None

    @property
    def trained(self) -> bool:
        return self.dc is not None and self.ic is not None and self.ner is not None

    def score(
        self,
        utterances: Sequence[Utterance],
        beam_ic: int = 3,
        beam_ner: int = 3,
        skew: MiscalibrationConfig | None = None,
    ) -> list[ComponentScores]:
        """Score a batch of utterances against this domain."""
        if not self.trained:
            raise NotTrainedError(f"components for {self.schema.name!r} are not trained")
        if beam_ic < 1 or beam_ner < 1:
            raise ValueError("beam widths must be >= 1")
        skew = skew or MiscalibrationConfig()
        name = self.schema.name
        sent_bags = [ngram_features(u.tokens) for u in utterances]
        dc_lp = self.dc.log_proba(sent_bags, skew.temperature(name, "dc"))[:, self.dc.label_index(True)]
        ic_lp = self.ic.log_proba(sent_bags, skew.temperature(name, "ic"))

        tok_bags = [token_features(u.tokens, i) for u in utterances for i in range(len(u.tokens))]
        tag_lp = self.ner.log_proba(tok_bags, skew.temperature(name, "ner"))
        bounds = np.cumsum([0] + [len(u.tokens) for u in utterances])

        out = []
        for j, u in enumerate(utterances):
            order = np.argsort(-ic_lp[j], kind="stable")[:beam_ic]
            ic = [(self.ic.labels[k], float(ic_lp[j, k])) for k in order]
            ner = kbest_tag_sequences(tag_lp[bounds[j]:bounds[j + 1]], self.ner.labels, u.tokens, beam_ner)
            out.append(ComponentScores(name, float(dc_lp[j]), ic, ner))
        return out


def chunks(tags: Sequence[str], tokens: Sequence[str]) -> tuple[Slot, ...]:
    """Group maximal runs of one non-null tag into slots."""
    slots = []
    i = 0
    while i < len(tags):
        if tags[i] == NULL_TAG:
            i += 1
            continue
        j = i
        while j + 1 < len(tags) and tags[j + 1] == tags[i]:
            j += 1
        slots.append(Slot(tags[i], i, j + 1, " ".join(tokens[i:j + 1])))
        i = j + 1
    return tuple(slots)


def kbest_tag_sequences(tag_lp: np.ndarray, tags: Sequence[str], tokens: Sequence[str], k: int):
    """Top-k slot sequences under independent per-token tag distributions.

    Sequence log-probability is the sum of per-token log-probabilities. Tag
    sequences that chunk to the same (type, value) list are merged, keeping
    the best one.
    """
    width = k + 4
    beam = [(0.0, ())]
    for row in tag_lp:
        cand = [(lp + float(row[t]), seq + (t,)) for lp, seq in beam for t in range(len(tags))]
        cand.sort(key=lambda c: -c[0])
        beam = cand[:width]
    out = []
    seen = set()
    for lp, seq in beam:
        slots = chunks([tags[t] for t in seq], tokens)
        key = tuple(s.key for s in slots)
        if key in seen:
            continue
        seen.add(key)
        out.append((slots, lp))
        if len(out) == k:
            break
    return out


def score_components(
    u: Utterance,
    schema: DomainSchema,
    models: DomainComponents,
    beam_ic: int = 3,
    beam_ner: int = 3,
    skew: MiscalibrationConfig | None = None,
) -> ComponentScores:
    if models.schema.name != schema.name:
        raise ValueError(f"models are for {models.schema.name!r}, not {schema.name!r}")
    return models.score([u], beam_ic, beam_ner, skew)[0]


def token_tags(u: Utterance) -> list[str]:
    tags = [NULL_TAG] * len(u.tokens)
    for s in u.truth.slots:
        for i in range(s.start, s.end):
            tags[i] = s.entity_type
    return tags


def train_components(
    schema: DomainSchema,
    corpus: Sequence[Utterance],
    l2: float = 0.0,
    epochs: int = 200,
    step: float = 0.5,
    optimizer: str = "lbfgs",
) -> DomainComponents:
    """DC one-vs-all on the whole corpus; IC and NER on in-domain utterances only."""
    name = schema.name
    dc = train_maxent(
        [(ngram_features(u.tokens), u.truth.domain == name) for u in corpus],
        l2=l2, epochs=epochs, step=step, optimizer=optimizer, labels=[False, True],
    )
    own = [u for u in corpus if u.truth.domain == name]
    ic = train_maxent(
        [(ngram_features(u.tokens), u.truth.intent) for u in own],
        l2=l2, epochs=epochs, step=step, optimizer=optimizer, labels=schema.intents,
    )
    ner = train_maxent(
        [(token_features(u.tokens, i), tag) for u in own for i, tag in enumerate(token_tags(u))],
        l2=l2, epochs=epochs, step=step, optimizer=optimizer, labels=[NULL_TAG, *schema.entity_types],
    )
    return DomainComponents(schema, dc, ic, ner)


def save_components(comp: DomainComponents, path: str | Path) -> None:
    arrays = {}
    meta = {"domain": comp.schema.name}
    for part in ("dc", "ic", "ner"):
        m: MaxEntModel = getattr(comp, part)
        arrays[f"{part}_W"] = m.W
        arrays[f"{part}_b"] = m.b
        meta[part] = {"labels": m.labels, "features": m.features.names}
    np.savez_compressed(path, meta=np.array(json.dumps(meta)), **arrays)


def load_components(schema: DomainSchema, path: str | Path) -> DomainComponents:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta["domain"] != schema.name:
            raise ValueError(f"{path} holds components for {meta['domain']!r}")
        parts = {
            part: MaxEntModel(
                labels=meta[part]["labels"],
                features=FeatureIndex(meta[part]["features"]),
                W=z[f"{part}_W"],
                b=z[f"{part}_b"],
            )
            for part in ("dc", "ic", "ner")
        }
    return DomainComponents(schema, **parts)
