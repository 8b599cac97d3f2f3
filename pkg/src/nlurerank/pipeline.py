"""End-to-end experiment: corpus, components, hypotheses, re-rankers, evaluation.

Every stage writes into ``<output_dir>/<stage>-<key>/`` where ``key`` hashes
the stage's own settings together with the keys of the stages it reads from.
A stage directory holding a ``DONE`` marker is reused as is.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .calibration import compare_schemes, format_curves
from .components import DomainComponents, load_components, save_components, train_components
from .corpus import MiscalibrationConfig, generate_corpus, load_corpus, save_corpus
from .decode import DecodeConfig, NBest, decode_from_hypotheses, domain_hypotheses, evaluate
from .hypotheses import Hypothesis, dump_hypotheses, load_hypotheses
from .reranker import (
    DomainTrainingSet,
    LossConfig,
    OptimizerSettings,
    Scheme,
    WeightVector,
    load_weights,
    make_training_set,
    save_weights,
    train,
)
from .schema import ConfigurationError, DomainSchema, Utterance, default_schemas, load_schemas, schemas_to_dict

log = logging.getLogger(__name__)

ALL_SCHEMES = [s.value for s in Scheme]

# Re-ranker loss settings used when a config does not override them. The L2
# pull toward the uniform start keeps the weights finite: the expected-SemER
# term alone is minimized at infinite scale, the expected-CE term alone can
# drive every score to minus infinity.
DEFAULT_LOSS = {"k1": 1.0, "k2": 1.0, "autoscale": True, "use_bias": True, "ce_sign": "standard", "l2": 1e-2,
                "nonnegative": True}


@dataclass
class ExperimentConfig:
    seed: int = 0
    schema_path: str | None = None
    n_train: int = 20000
    n_dev: int = 4000
    n_test: int = 4000
    beam_ic: int = 3
    beam_ner: int = 3
    nbest: int = 10
    schemes: list[str] = field(default_factory=lambda: list(ALL_SCHEMES))
    loss: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    component_l2: float = 1e-4
    component_epochs: int = 300
    skew: dict = field(default_factory=dict)
    k_grid: list[list[float]] = field(default_factory=lambda: [[1.0, 0.5], [1.0, 1.0], [1.0, 2.0]])
    tune_fraction: float = 0.2
    desync_fraction: float = 0.9
    output_dir: str = "runs/default"
    workers: int = 1

    def validate(self) -> None:
        for name in ("n_train", "n_dev", "n_test", "beam_ic", "beam_ner", "nbest", "component_epochs", "workers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.desync_fraction <= 1:
            raise ConfigurationError(f"desync_fraction must be in (0, 1], got {self.desync_fraction}")
        if not 0 < self.tune_fraction < 1:
            raise ConfigurationError(f"tune_fraction must be in (0, 1), got {self.tune_fraction}")
        if round(self.n_dev * self.tune_fraction) < 1 or round(self.n_dev * self.tune_fraction) >= self.n_dev:
            raise ConfigurationError("dev split too small for the tuning hold-out")
        if not self.schemes:
            raise ConfigurationError("no schemes selected")
        for s in self.schemes:
            try:
                Scheme(s)
            except ValueError:
                raise ConfigurationError(f"unknown scheme {s!r}; choose from {ALL_SCHEMES}") from None
        if len(set(self.schemes)) != len(self.schemes):
            raise ConfigurationError("duplicate schemes")
        unknown = set(self.loss) - set(DEFAULT_LOSS)
        if unknown:
            raise ConfigurationError(f"unknown loss settings {sorted(unknown)}")
        unknown = set(self.optimizer) - {f.name for f in fields(OptimizerSettings)}
        if unknown:
            raise ConfigurationError(f"unknown optimizer settings {sorted(unknown)}")
        if not self.k_grid or any(len(k) != 2 for k in self.k_grid):
            raise ConfigurationError("k_grid must be a non-empty list of [k1, k2] pairs")
        try:
            self.loss_config()
            for k1, k2 in self.k_grid:
                LossConfig(**{**self.loss_dict(), "k1": k1, "k2": k2})
        except ValueError as e:
            raise ConfigurationError(str(e)) from None

    def loss_dict(self) -> dict:
        return {**DEFAULT_LOSS, **self.loss}

    def loss_config(self) -> LossConfig:
        return LossConfig(**self.loss_dict())

    def optimizer_settings(self) -> OptimizerSettings:
        return OptimizerSettings(**self.optimizer)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(self.beam_ic, self.beam_ner, self.nbest, MiscalibrationConfig(dict(self.skew)))

    def schemas(self) -> list[DomainSchema]:
        return load_schemas(self.schema_path) if self.schema_path else default_schemas()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**dict(d))


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def relative_improvement(baseline: float, scheme: float) -> float:
    """Percent reduction of ``scheme`` SemER relative to ``baseline``."""
    if not baseline > 0:
        raise ZeroDivisionError(f"relative improvement needs a positive baseline SemER, got {baseline}")
    return 100.0 * (baseline - scheme) / baseline


def write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


# --- stages -----------------------------------------------------------------


class Stage:
    """A content-addressed output directory."""

    def __init__(self, root: Path, name: str, key_material: dict):
        self.key = digest(key_material)
        self.dir = root / f"{name}-{self.key}"
        self.material = key_material

    @property
    def done(self) -> bool:
        return (self.dir / "DONE").exists()

    def run(self, build: Callable[[Path], None]) -> Path:
        if self.done:
            log.info("reusing %s", self.dir)
            return self.dir
        self.dir.mkdir(parents=True, exist_ok=True)
        write_json(self.material, self.dir / "inputs.json")
        build(self.dir)
        (self.dir / "DONE").write_text(self.key + "\n")
        return self.dir


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


@dataclass
class Experiment:
    """One seed's pipeline with lazily built, cached stages."""

    cfg: ExperimentConfig

    def __post_init__(self):
        self.cfg.validate()
        self.root = Path(self.cfg.output_dir)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigurationError(f"cannot create output directory {self.root}: {e}") from None
        if not os.access(self.root, os.W_OK):
            raise ConfigurationError(f"output directory {self.root} is not writable")
        self.schemas = self.cfg.schemas()
        self.domains = sorted(s.name for s in self.schemas)
        MiscalibrationConfig(dict(self.cfg.skew)).validate(self.schemas)
        self._splits = self._components = None
        self._hyps: dict[str, list] = {}

    # corpus
    def corpus_stage(self) -> Stage:
        c = self.cfg
        return Stage(self.root, "corpus", {
            "schemas": schemas_to_dict(self.schemas), "seed": c.seed,
            "n_train": c.n_train, "n_dev": c.n_dev, "n_test": c.n_test,
        })

    def splits(self) -> dict[str, list[Utterance]]:
        if self._splits is None:
            c = self.cfg
            stage = self.corpus_stage()

            def build(d: Path):
                corpus = generate_corpus(self.schemas, c.n_train + c.n_dev + c.n_test, c.seed)
                parts = {
                    "train": corpus[: c.n_train],
                    "dev": corpus[c.n_train: c.n_train + c.n_dev],
                    "test": corpus[c.n_train + c.n_dev:],
                }
                for name, part in parts.items():
                    save_corpus(part, d / f"{name}.jsonl")

            d = stage.run(build)
            self._splits = {name: load_corpus(d / f"{name}.jsonl") for name in ("train", "dev", "test")}
            ids = [set(u.id for u in v) for v in self._splits.values()]
            if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
                raise ConfigurationError("corpus splits overlap")
        return self._splits

    # components
    def components_stage(self) -> Stage:
        return Stage(self.root, "components", {
            "corpus": self.corpus_stage().key, "l2": self.cfg.component_l2, "epochs": self.cfg.component_epochs,
        })

    def components(self) -> dict[str, DomainComponents]:
        if self._components is None:
            stage = self.components_stage()
            by_name = {s.name: s for s in self.schemas}

            def build(d: Path):
                train_split = self.splits()["train"]

                def fit(name):
                    comp = train_components(
                        by_name[name], train_split, l2=self.cfg.component_l2, epochs=self.cfg.component_epochs
                    )
                    save_components(comp, d / f"{name}.npz")

                _map(fit, self.domains, self.cfg.workers)

            d = stage.run(build)
            self._components = {name: load_components(by_name[name], d / f"{name}.npz") for name in self.domains}
        return self._components

    # hypotheses
    def hypotheses_stage(self) -> Stage:
        c = self.cfg
        return Stage(self.root, "hypotheses", {
            "components": self.components_stage().key, "beam_ic": c.beam_ic, "beam_ner": c.beam_ner,
            "skew": c.skew,
        })

    def hypotheses(self, split: str) -> list[dict[str, list[Hypothesis]]]:
        if split not in self._hyps:
            stage = self.hypotheses_stage()

            def build(d: Path):
                for name in ("dev", "test"):
                    utts = self.splits()[name]
                    per_utt = domain_hypotheses(utts, self.components(), self.cfg.decode_config())
                    with open(d / f"{name}.jsonl", "w") as fh:
                        dump_hypotheses(
                            ((u.id, h) for u, hd in zip(utts, per_utt) for dom in sorted(hd) for h in hd[dom]), fh
                        )

            d = stage.run(build)
            with open(d / f"{split}.jsonl") as fh:
                records = load_hypotheses(fh)
            grouped: dict[str, dict[str, list[Hypothesis]]] = {}
            for uid, h in records:
                grouped.setdefault(uid, {}).setdefault(h.domain, []).append(h)
            utts = self.splits()[split]
            if set(grouped) != {u.id for u in utts}:
                raise ConfigurationError(f"hypothesis file for {split} does not match the corpus split")
            self._hyps[split] = [grouped[u.id] for u in utts]
        return self._hyps[split]

    def training_sets(self, utt_idx: Sequence[int] | None = None) -> dict[str, DomainTrainingSet]:
        dev = self.splits()["dev"]
        hyps = self.hypotheses("dev")
        idx = range(len(dev)) if utt_idx is None else utt_idx
        return {d: make_training_set(d, [(dev[i], hyps[i][d]) for i in idx]) for d in self.domains}

    # re-rankers
    def tuning_split(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.cfg.n_dev
        perm = np.random.default_rng([self.cfg.seed, 80, 20]).permutation(n)
        n_val = int(round(n * self.cfg.tune_fraction))
        return np.sort(perm[n_val:]), np.sort(perm[:n_val])

    def _train_all(self, scheme: str, sets: Mapping[str, DomainTrainingSet], loss: LossConfig) -> dict[str, WeightVector]:
        opt = self.cfg.optimizer_settings()
        out = _map(lambda d: train(scheme, sets[d], loss, opt), self.domains, self.cfg.workers)
        return dict(zip(self.domains, out))

    def _decode(self, split: str, weights: Mapping[str, WeightVector], idx: Sequence[int] | None = None) -> list[NBest]:
        utts = self.splits()[split]
        hyps = self.hypotheses(split)
        idx = range(len(utts)) if idx is None else idx
        dc = self.cfg.decode_config()
        return [decode_from_hypotheses(utts[i].id, hyps[i], weights, dc) for i in idx]

    def tune_k(self) -> dict:
        """Pick (k1, k2) for R3 by top-1 SemER on the held-out part of the dev split."""
        fit_idx, val_idx = self.tuning_split()
        fit_sets = self.training_sets(fit_idx)
        dev = self.splits()["dev"]
        val_utts = [dev[i] for i in val_idx]
        grid = []
        for k1, k2 in self.cfg.k_grid:
            loss = LossConfig(**{**self.cfg.loss_dict(), "k1": k1, "k2": k2})
            w = self._train_all(Scheme.R3.value, fit_sets, loss)
            rep = evaluate(val_utts, self._decode("dev", w, val_idx))
            grid.append({"k1": k1, "k2": k2, "semer": rep.semer})
        best = min(grid, key=lambda g: g["semer"])  # first of equal entries wins
        return {"fit_utterances": len(fit_idx), "heldout_utterances": len(val_idx), "grid": grid,
                "chosen": [best["k1"], best["k2"]]}

    def rerankers_stage(self) -> Stage:
        c = self.cfg
        return Stage(self.root, "rerankers", {
            "hypotheses": self.hypotheses_stage().key, "schemes": c.schemes, "loss": c.loss_dict(),
            "optimizer": asdict(c.optimizer_settings()), "k_grid": c.k_grid, "tune_fraction": c.tune_fraction,
            "seed": c.seed,
        })

    def rerankers(self) -> tuple[dict[str, dict[str, WeightVector]], dict | None]:
        stage = self.rerankers_stage()

        def build(d: Path):
            tuning = self.tune_k() if Scheme.R3.value in self.cfg.schemes else None
            write_json(tuning, d / "tuning.json")
            sets = self.training_sets()
            for scheme in self.cfg.schemes:
                loss = self.cfg.loss_config()
                if scheme == Scheme.R3.value:
                    k1, k2 = tuning["chosen"]
                    loss = LossConfig(**{**self.cfg.loss_dict(), "k1": k1, "k2": k2})
                weights = self._train_all(scheme, sets, loss)
                (d / scheme).mkdir(exist_ok=True)
                for dom, w in weights.items():
                    save_weights(w, dom, d / scheme / f"{dom}.json", seed=self.cfg.seed)

        d = stage.run(build)
        out = {}
        for scheme in self.cfg.schemes:
            out[scheme] = {}
            for dom in self.domains:
                name, w = load_weights(d / scheme / f"{dom}.json")
                out[scheme][name] = w
        tuning = json.loads((d / "tuning.json").read_text())
        return out, tuning

    # evaluation
    def evaluate(self) -> dict:
        """Decode the test split with every scheme; writes report.json and curves.tsv."""
        weights, tuning = self.rerankers()
        test = self.splits()["test"]
        outputs = {s: self._decode("test", weights[s]) for s in self.cfg.schemes}
        rows, curves = compare_schemes(test, outputs, self.domains)
        base = next((r["semer"] for r in rows if r["scheme"] == Scheme.BASELINE.value), None)
        for r in rows:
            r["relative_improvement"] = None if base is None else relative_improvement(base, r["semer"])
        # where the run lives and how many threads it used do not change results
        config = {k: v for k, v in self.cfg.to_dict().items() if k not in ("output_dir", "workers")}
        report = {
            "config": config,
            "config_hash": self.rerankers_stage().key,
            "sizes": {k: len(v) for k, v in self.splits().items()},
            "tuning": tuning,
            "schemes": rows,
            "per_domain": {s: evaluate(test, outputs[s]).to_dict()["per_domain"] for s in self.cfg.schemes},
            "weights": {
                s: {d: {"w": [float(x) for x in w.w], "bias": w.bias,
                        "iterations": w.meta.get("iterations"), "converged": w.meta.get("converged")}
                    for d, w in sorted(ws.items())}
                for s, ws in weights.items()
            },
        }
        write_json(report, self.root / "report.json")
        (self.root / "curves.tsv").write_text(
            "scheme\t" + format_curves(curves[self.cfg.schemes[0]]).splitlines()[0] + "\n"
            + "".join(
                f"{s}\t{line}\n"
                for s in self.cfg.schemes
                for line in format_curves(curves[s]).splitlines()[1:]
            )
        )
        return report

    def desync(self) -> dict:
        """Train each domain's R3 re-ranker on its own random share of the dev split.

        Components, hypotheses, the test split and (k1, k2) are shared with the
        full-data R3 run; only the re-ranker training subsets change.
        """
        weights, tuning = self.rerankers()
        if Scheme.R3.value not in weights:
            raise ConfigurationError("desync experiment needs R3 in the scheme list")
        k1, k2 = tuning["chosen"]
        loss = LossConfig(**{**self.cfg.loss_dict(), "k1": k1, "k2": k2})
        n_dev = self.cfg.n_dev
        n_keep = max(1, int(round(self.cfg.desync_fraction * n_dev)))
        full_sets = self.training_sets()
        samples = {}
        desync_w = {}
        for j, dom in enumerate(self.domains):
            idx = np.sort(np.random.default_rng([self.cfg.seed, 6, j]).choice(n_dev, size=n_keep, replace=False))
            samples[dom] = idx
            desync_w[dom] = train(Scheme.R3, full_sets[dom].subset(idx), loss, self.cfg.optimizer_settings())
        test = self.splits()["test"]
        full = evaluate(test, self._decode("test", weights[Scheme.R3.value])).semer
        part = evaluate(test, self._decode("test", desync_w)).semer
        first, second = self.domains[0], self.domains[-1]
        report = {
            "fraction": self.cfg.desync_fraction,
            "k": [k1, k2],
            "sample_sizes": {d: int(len(v)) for d, v in samples.items()},
            "sample_overlap": int(len(np.intersect1d(samples[first], samples[second]))),
            "full_semer": full,
            "desync_semer": part,
            "relative_degradation": -relative_improvement(full, part),
        }
        write_json(report, self.root / "desync.json")
        return report


def run_seeds(base: ExperimentConfig, seeds: Sequence[int], desync: bool = True) -> dict:
    """Run the experiment for every seed and aggregate mean and stdev per scheme.

    Wall-clock seconds per seed go to ``timings.json`` so ``summary.json`` stays
    reproducible byte for byte.
    """
    if not seeds:
        raise ConfigurationError("no seeds given")
    per_seed = []
    timings = {}
    for seed in seeds:
        t0 = time.perf_counter()
        cfg = ExperimentConfig.from_dict({**base.to_dict(), "seed": seed,
                                          "output_dir": str(Path(base.output_dir) / f"seed{seed}")})
        exp = Experiment(cfg)
        rep = exp.evaluate()
        entry = {"seed": seed, "schemes": {r["scheme"]: r for r in rep["schemes"]}}
        if desync:
            entry["desync"] = exp.desync()
        per_seed.append(entry)
        timings[str(seed)] = time.perf_counter() - t0

    def stats(values):
        values = [float(v) for v in values]
        return {"mean": statistics.fmean(values), "stdev": statistics.stdev(values) if len(values) > 1 else 0.0,
                "values": values}

    summary = {"seeds": list(seeds), "schemes": {}}
    for scheme in base.schemes:
        rows = [e["schemes"][scheme] for e in per_seed]
        summary["schemes"][scheme] = {k: stats([r[k] for r in rows]) for k in ("semer", "ie_rate", "ece")}
    if Scheme.BASELINE.value in base.schemes:
        b = summary["schemes"][Scheme.BASELINE.value]["semer"]["mean"]
        for scheme, s in summary["schemes"].items():
            s["relative_improvement_of_mean"] = relative_improvement(b, s["semer"]["mean"])
    if desync:
        summary["desync"] = {
            k: stats([e["desync"][k] for e in per_seed])
            for k in ("full_semer", "desync_semer", "relative_degradation")
        }
        full_mean = summary["desync"]["full_semer"]["mean"]
        summary["desync"]["relative_degradation_of_mean"] = -relative_improvement(
            full_mean, summary["desync"]["desync_semer"]["mean"]
        )
    Path(base.output_dir).mkdir(parents=True, exist_ok=True)
    write_json(summary, Path(base.output_dir) / "summary.json")
    write_json(timings, Path(base.output_dir) / "timings.json")
    return summary
