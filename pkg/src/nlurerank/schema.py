"""Domain schemas and annotated utterances."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

SCHEMA_VERSION = 1


class ConfigurationError(ValueError):
    """Raised for invalid schemas, corpora or experiment configurations."""


@dataclass(frozen=True)
class Slot:
    """A labelled token span ``tokens[start:end]`` with its surface text."""

    entity_type: str
    start: int
    end: int
    value: str

    @property
    def key(self) -> tuple[str, str]:
        return (self.entity_type, self.value)


@dataclass(frozen=True)
class Annotation:
    domain: str
    intent: str
    slots: tuple[Slot, ...] = ()


@dataclass(frozen=True)
class Utterance:
    id: str
    tokens: tuple[str, ...]
    truth: Annotation

    def __post_init__(self):
        if not self.tokens:
            raise ConfigurationError(f"utterance {self.id!r} has no tokens")
        prev_end = 0
        for s in self.truth.slots:
            if not (prev_end <= s.start < s.end <= len(self.tokens)):
                raise ConfigurationError(f"utterance {self.id!r}: bad or overlapping span {s}")
            if " ".join(self.tokens[s.start:s.end]) != s.value:
                raise ConfigurationError(f"utterance {self.id!r}: slot value does not match span {s}")
            prev_end = s.end

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class DomainSchema:
    """Label inventories and generation resources for one domain.

    ``templates`` maps each intent to carrier phrases with ``{EntityType}``
    placeholders; ``weight`` is the relative traffic share of the domain.
    """

    name: str
    intents: list[str]
    entity_types: list[str]
    gazetteer: dict[str, list[str]]
    templates: dict[str, list[str]] = field(default_factory=dict)
    weight: float = 1.0

    def validate(self) -> None:
        if not self.intents or not self.entity_types:
            raise ConfigurationError(f"domain {self.name!r} needs at least one intent and entity type")
        for et in self.entity_types:
            if not self.gazetteer.get(et):
                raise ConfigurationError(f"domain {self.name!r}: no gazetteer phrases for {et!r}")
        for intent, temps in self.templates.items():
            if intent not in self.intents:
                raise ConfigurationError(f"domain {self.name!r}: template for unknown intent {intent!r}")
            for t in temps:
                for et in _placeholders(t):
                    if et not in self.entity_types:
                        raise ConfigurationError(f"domain {self.name!r}: unknown placeholder {et!r} in {t!r}")
        if self.weight <= 0:
            raise ConfigurationError(f"domain {self.name!r}: weight must be positive")


def _placeholders(template: str) -> list[str]:
    return [tok[1:-1] for tok in template.split() if tok.startswith("{") and tok.endswith("}")]


def validate_schemas(schemas: list[DomainSchema]) -> None:
    if not schemas:
        raise ConfigurationError("empty schema set")
    seen: dict[str, str] = {}
    names = set()
    for sch in schemas:
        if sch.name in names:
            raise ConfigurationError(f"duplicate domain {sch.name!r}")
        names.add(sch.name)
        sch.validate()
        for label in [*sch.intents, *sch.entity_types]:
            if label in seen:
                raise ConfigurationError(
                    f"label {label!r} used by both {seen[label]!r} and {sch.name!r}; "
                    "label inventories must be disjoint across domains"
                )
            seen[label] = sch.name


def schemas_to_dict(schemas: list[DomainSchema]) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "domains": [
            {
                "name": s.name,
                "weight": s.weight,
                "intents": list(s.intents),
                "entity_types": list(s.entity_types),
                "gazetteer": {k: list(v) for k, v in s.gazetteer.items()},
                "templates": {k: list(v) for k, v in s.templates.items()},
            }
            for s in schemas
        ],
    }


def schemas_from_dict(data: dict) -> list[DomainSchema]:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported schema_version {version!r}")
    schemas = [
        DomainSchema(
            name=d["name"],
            intents=list(d["intents"]),
            entity_types=list(d["entity_types"]),
            gazetteer={k: list(v) for k, v in d["gazetteer"].items()},
            templates={k: list(v) for k, v in d.get("templates", {}).items()},
            weight=float(d.get("weight", 1.0)),
        )
        for d in data["domains"]
    ]
    validate_schemas(schemas)
    return schemas


def load_schemas(path: str | Path) -> list[DomainSchema]:
    with open(path) as fh:
        return schemas_from_dict(json.load(fh))


def save_schemas(schemas: list[DomainSchema], path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(schemas_to_dict(schemas), fh, indent=2)
        fh.write("\n")


def default_schemas() -> list[DomainSchema]:
    """The bundled three-domain benchmark (Music, Books, Video)."""
    text = resources.files("nlurerank").joinpath("data/default_schemas.json").read_text()
    return schemas_from_dict(json.loads(text))
