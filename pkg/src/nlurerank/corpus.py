"""Seeded synthetic corpus: carrier templates filled from domain gazetteers."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .schema import Annotation, ConfigurationError, DomainSchema, Slot, Utterance, validate_schemas

COMPONENTS = ("dc", "ic", "ner")

PREFIXES = ("", "", "", "alexa", "please", "can you")
SUFFIXES = ("", "", "", "please", "now")


@dataclass
class MiscalibrationConfig:
    """Per-domain temperatures applied to component logits before normalization.

    ``temperatures[domain]`` is either one float for all three components or a
    mapping ``{"dc": T, "ic": T, "ner": T}``; missing entries default to 1.
    T < 1 makes a component overconfident, T > 1 underconfident.
    """

    temperatures: dict[str, float | dict[str, float]] = field(default_factory=dict)

    def temperature(self, domain: str, component: str) -> float:
        t = self.temperatures.get(domain, 1.0)
        if isinstance(t, dict):
            t = t.get(component, 1.0)
        return float(t)

    def validate(self, schemas: list[DomainSchema]) -> None:
        names = {s.name for s in schemas}
        for domain, t in self.temperatures.items():
            if domain not in names:
                raise ConfigurationError(f"temperature given for unknown domain {domain!r}")
            values = t.values() if isinstance(t, dict) else [t]
            if isinstance(t, dict) and set(t) - set(COMPONENTS):
                raise ConfigurationError(f"unknown component in temperatures for {domain!r}: {sorted(set(t) - set(COMPONENTS))}")
            if any(not float(v) > 0 for v in values):
                raise ConfigurationError(f"temperatures for {domain!r} must be positive")

    def to_dict(self) -> dict:
        return {"temperatures": self.temperatures}

    @classmethod
    def from_dict(cls, data: dict | None) -> "MiscalibrationConfig":
        return cls(dict((data or {}).get("temperatures", {})))


_PLACEHOLDER = re.compile(r"^\{(\w+)\}$")


def _fill(template: str, schema: DomainSchema, rng: np.random.Generator):
    tokens: list[str] = []
    slots: list[Slot] = []
    for piece in template.split():
        m = _PLACEHOLDER.match(piece)
        if m is None:
            tokens.append(piece)
            continue
        et = m.group(1)
        phrases = schema.gazetteer[et]
        phrase = phrases[rng.integers(len(phrases))]
        words = phrase.split()
        slots.append(Slot(et, len(tokens), len(tokens) + len(words), phrase))
        tokens.extend(words)
    return tokens, slots


def _templates(schema: DomainSchema, intent: str) -> list[str]:
    temps = schema.templates.get(intent)
    if temps:
        return temps
    words = re.sub(r"(?<!^)([A-Z])", r" \1", intent).lower()
    return [f"{words} {{{schema.entity_types[0]}}}"]


def generate_corpus(
    schemas: list[DomainSchema],
    n: int,
    seed: int,
    skew: MiscalibrationConfig | None = None,
    id_prefix: str = "u",
) -> list[Utterance]:
    """Draw ``n`` utterances; domains by schema weight, intents and templates uniformly.

    ``skew`` is only checked against the schemas here; the temperatures act
    when components score utterances.
    """
    validate_schemas(schemas)
    if n <= 0:
        raise ConfigurationError(f"corpus size must be positive, got {n}")
    if skew is not None:
        skew.validate(schemas)
    rng = np.random.default_rng(seed)
    weights = np.array([s.weight for s in schemas], dtype=float)
    weights /= weights.sum()
    out = []
    width = max(6, len(str(n)))
    for i in range(n):
        schema = schemas[rng.choice(len(schemas), p=weights)]
        intent = schema.intents[rng.integers(len(schema.intents))]
        temps = _templates(schema, intent)
        tokens, slots = _fill(temps[rng.integers(len(temps))], schema, rng)
        prefix = PREFIXES[rng.integers(len(PREFIXES))].split()
        suffix = SUFFIXES[rng.integers(len(SUFFIXES))].split()
        shift = len(prefix)
        slots = [Slot(s.entity_type, s.start + shift, s.end + shift, s.value) for s in slots]
        out.append(
            Utterance(
                id=f"{id_prefix}{i:0{width}d}",
                tokens=tuple(prefix + tokens + suffix),
                truth=Annotation(schema.name, intent, tuple(slots)),
            )
        )
    return out


def ambiguous_phrases(schemas: list[DomainSchema]) -> dict[str, list[str]]:
    """Gazetteer phrases listed under more than one domain, mapped to those domains."""
    owners: dict[str, list[str]] = {}
    for s in schemas:
        for phrases in s.gazetteer.values():
            for p in phrases:
                if s.name not in owners.setdefault(p, []):
                    owners[p].append(s.name)
    return {p: d for p, d in owners.items() if len(d) > 1}


def utterance_to_dict(u: Utterance) -> dict:
    return {
        "id": u.id,
        "tokens": list(u.tokens),
        "truth": {
            "domain": u.truth.domain,
            "intent": u.truth.intent,
            "slots": [[s.entity_type, s.start, s.end, s.value] for s in u.truth.slots],
        },
    }


def utterance_from_dict(d: dict) -> Utterance:
    t = d["truth"]
    return Utterance(
        id=d["id"],
        tokens=tuple(d["tokens"]),
        truth=Annotation(t["domain"], t["intent"], tuple(Slot(et, a, b, v) for et, a, b, v in t["slots"])),
    )


def save_corpus(utterances: list[Utterance], path: str | Path) -> None:
    with open(path, "w") as fh:
        for u in utterances:
            fh.write(json.dumps(utterance_to_dict(u)) + "\n")


def load_corpus(path: str | Path) -> list[Utterance]:
    with open(path) as fh:
        return [utterance_from_dict(json.loads(line)) for line in fh if line.strip()]
