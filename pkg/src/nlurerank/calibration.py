"""Reliability bins and expected calibration error over top-hypothesis confidences."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .decode import NBest, evaluate
from .metrics import ie, semer
from .schema import ConfigurationError, Utterance

N_BINS = 10
CROSS_DOMAIN = "cross-domain"


@dataclass
class Bin:
    low: float
    high: float
    count: int
    mean_conf: float  # nan when count == 0
    frac_correct: float  # nan when count == 0


@dataclass
class ReliabilityReport:
    scope: str
    bins: list[Bin]
    ece: float

    @property
    def total(self) -> int:
        return sum(b.count for b in self.bins)

    def curve_rows(self) -> list[tuple]:
        return [(self.scope, b.low, b.high, b.count, b.mean_conf, b.frac_correct) for b in self.bins]


def bin_index(r: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Equal-width bins [k/n, (k+1)/n); 1.0 falls in the last bin."""
    return np.minimum((np.asarray(r) * n_bins).astype(int), n_bins - 1)


def reliability(entries: Sequence[tuple[float, int]], scope: str = CROSS_DOMAIN, n_bins: int = N_BINS) -> ReliabilityReport:
    """Bin (confidence, IE) pairs; a hypothesis counts as correct when IE == 0."""
    if len(entries) == 0:
        r = np.zeros(0)
        correct = np.zeros(0)
    else:
        arr = np.asarray(entries, dtype=float)
        r, correct = arr[:, 0], (arr[:, 1] == 0).astype(float)
    if np.any((r < 0) | (r > 1)) or np.any(np.isnan(r)):
        raise ValueError("confidences must lie in [0, 1]")
    idx = bin_index(r, n_bins)
    bins = []
    ece = 0.0
    for k in range(n_bins):
        m = idx == k
        c = int(m.sum())
        if c:
            conf, acc = float(r[m].mean()), float(correct[m].mean())
            ece += c * abs(conf - acc)
        else:
            conf = acc = math.nan
        bins.append(Bin(k / n_bins, (k + 1) / n_bins, c, conf, acc))
    ece = ece / len(r) if len(r) else 0.0
    return ReliabilityReport(scope, bins, ece)


def top_entries(utterances: Sequence[Utterance], nbests: Sequence[NBest], domain: str | None = None):
    """(r, IE) of each top hypothesis, optionally only where the top came from ``domain``."""
    out = []
    for u, nb in zip(utterances, nbests):
        top = nb.top
        if domain is not None and top.hypothesis.domain != domain:
            continue
        out.append((top.r, ie(semer(top.hypothesis, u.truth))))
    return out


def reliability_reports(utterances: Sequence[Utterance], nbests: Sequence[NBest], domains: Sequence[str]) -> list[ReliabilityReport]:
    reports = [reliability(top_entries(utterances, nbests), CROSS_DOMAIN)]
    for d in sorted(domains):
        reports.append(reliability(top_entries(utterances, nbests, d), d))
    return reports


def compare_schemes(
    utterances: Sequence[Utterance],
    outputs: Mapping[str, Sequence[NBest]],
    domains: Sequence[str] = (),
) -> tuple[list[dict], dict[str, list[ReliabilityReport]]]:
    """One row (scheme, SemER, IE rate, ECE) per scheme plus per-scheme curve data.

    Every scheme must have decoded exactly the given test utterances.
    """
    if not utterances:
        raise ConfigurationError("empty test set")
    ids = [u.id for u in utterances]
    rows, curves = [], {}
    for name, nbests in outputs.items():
        if [nb.utterance_id for nb in nbests] != ids:
            raise ConfigurationError(f"scheme {name!r} was decoded on a different test set")
        rep = evaluate(utterances, nbests)
        curves[name] = reliability_reports(utterances, nbests, domains)
        rows.append({"scheme": name, "semer": rep.semer, "ie_rate": rep.ie_rate, "ece": curves[name][0].ece})
    return rows, curves


def format_curves(reports: Sequence[ReliabilityReport]) -> str:
    lines = ["scope\tbin_low\tbin_high\tcount\tmean_conf\tfrac_correct"]
    for rep in reports:
        for scope, lo, hi, c, conf, acc in rep.curve_rows():
            lines.append(f"{scope}\t{lo:.1f}\t{hi:.1f}\t{c}\t{_fmt(conf)}\t{_fmt(acc)}")
    return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"
