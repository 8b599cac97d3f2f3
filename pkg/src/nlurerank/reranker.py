"""Per-domain linear re-ranker: scoring, expected-SemER / expected-CE losses, training."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .hypotheses import EmptyInputError, Hypothesis
from .maxent import DegenerateTrainingError
from .metrics import ie, semer
from .schema import Utterance

WEIGHT_FORMAT_VERSION = 1
N_FEATURES = 3


class ShapeError(ValueError):
    pass


class ContractViolation(ValueError):
    pass


class Scheme(str, enum.Enum):
    BASELINE = "Baseline"
    R1 = "R1"
    R2 = "R2"
    R3 = "R3"


@dataclass
class WeightVector:
    w: np.ndarray
    bias: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != (N_FEATURES,):
            raise ShapeError(f"expected {N_FEATURES} weights, got shape {self.w.shape}")
        if not np.all(np.isfinite(self.w)) or (self.bias is not None and not np.isfinite(self.bias)):
            raise ValueError("weights must be finite")

    @property
    def theta(self) -> np.ndarray:
        return self.w.copy() if self.bias is None else np.append(self.w, self.bias)

    @classmethod
    def from_theta(cls, theta: np.ndarray, use_bias: bool, meta: dict | None = None) -> "WeightVector":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:N_FEATURES].copy(), float(theta[N_FEATURES]) if use_bias else None, meta or {})

    @classmethod
    def uniform(cls) -> "WeightVector":
        return cls(np.ones(N_FEATURES), None, {"scheme": Scheme.BASELINE.value})


@dataclass
class LossConfig:
    """Loss weights; ``k1`` scales E-SemER and ``k2`` E-CE.

    With ``autoscale`` each term is divided by its value at the initial
    weights before ``k1``/``k2`` apply. ``ce_sign="printed"`` keeps the
    log-likelihood sign of the expected cross-entropy term, which is then
    unbounded below; it exists for comparison only. ``l2`` adds
    ``l2/2 * ||theta - theta0||^2`` around the uniform starting weights.
    ``nonnegative`` keeps the component weights (not the bias) at or above
    zero, so a better component score never lowers a hypothesis's score.
    """

    k1: float = 1.0
    k2: float = 1.0
    autoscale: bool = True
    use_bias: bool = True
    ce_sign: str = "standard"
    l2: float = 0.0
    nonnegative: bool = True

    def __post_init__(self):
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.k1 < 0 or self.k2 < 0 or self.k1 + self.k2 <= 0:
            raise ValueError(f"need k1, k2 >= 0 with k1 + k2 > 0, got {self.k1}, {self.k2}")
        if self.ce_sign not in ("standard", "printed"):
            raise ValueError(f"ce_sign must be 'standard' or 'printed', got {self.ce_sign!r}")


@dataclass
class OptimizerSettings:
    init_step: float = 1.0
    max_iter: int = 5000
    tol: float = 1e-8


def score(w: WeightVector, l: np.ndarray) -> float | np.ndarray:
    """w . l (+ bias); ``l`` may be one feature vector or a stack of them."""
    l = np.asarray(l, dtype=float)
    if l.shape[-1] != N_FEATURES:
        raise ShapeError(f"feature vectors must have {N_FEATURES} entries, got {l.shape}")
    s = l @ w.w
    if w.bias is not None:
        s = s + w.bias
    return float(s) if np.ndim(s) == 0 else s


def hypothesis_softmax(scores: Sequence[float]) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise EmptyInputError("softmax of an empty score list")
    e = np.exp(s - s.max())
    return e / e.sum()


def _design(L: np.ndarray, use_bias: bool) -> np.ndarray:
    L = np.atleast_2d(np.asarray(L, dtype=float))
    return np.hstack([L, np.ones((len(L), 1))]) if use_bias else L


def _softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(s, dtype=float)))


def esemer_loss(w: WeightVector, L, semer_values, lam1: float, in_domain: bool = True):
    """Expected SemER of one in-domain utterance and its gradient w.r.t. ``w.theta``."""
    if not in_domain:
        raise ContractViolation("expected-SemER loss is only defined for in-domain utterances")
    A = _design(L, w.bias is not None)
    err = np.asarray(semer_values, dtype=float)
    p = hypothesis_softmax(A @ w.theta)
    expected = float(p @ err)
    grad = lam1 * ((p * (err - expected)) @ A)
    return lam1 * expected, grad


def _ce_terms(s, ie_values):
    # -[(1-IE) log r + IE log(1-r)] with r = sigmoid(s), and its derivative in s
    ie_values = np.asarray(ie_values, dtype=float)
    c = (1.0 - ie_values) * _softplus(-s) + ie_values * _softplus(s)
    dc = sigmoid(s) - (1.0 - ie_values)
    return c, dc


def ece_loss(w: WeightVector, L, ie_values, lam2: float, sign: str = "standard"):
    """Softmax-weighted sigmoid cross-entropy against IE targets for one utterance."""
    A = _design(L, w.bias is not None)
    if len(A) == 0:
        raise EmptyInputError("no hypotheses")
    s = A @ w.theta
    p = hypothesis_softmax(s)
    c, dc = _ce_terms(s, ie_values)
    expected = float(p @ c)
    grad = lam2 * ((p * (c - expected) + p * dc) @ A)
    if sign == "printed":
        return -lam2 * expected, -grad
    return lam2 * expected, grad


@dataclass
class DomainTrainingSet:
    """All of one domain's hypotheses over a re-ranker training set, stacked.

    Hypotheses of utterance ``k`` occupy rows ``starts[k]:starts[k + 1]``.
    """

    domain: str
    L: np.ndarray
    starts: np.ndarray
    semer: np.ndarray
    ie: np.ndarray
    in_domain: np.ndarray

    @property
    def n_utterances(self) -> int:
        return len(self.in_domain)

    @property
    def n_in_domain(self) -> int:
        return int(self.in_domain.sum())

    @property
    def lam1(self) -> float:
        return 1.0 / self.n_in_domain if self.n_in_domain else 0.0

    @property
    def lam2(self) -> float:
        return 1.0 / self.n_utterances

    def subset(self, utterance_idx: Sequence[int]) -> "DomainTrainingSet":
        bounds = np.append(self.starts, len(self.L))
        rows = np.concatenate([np.arange(bounds[k], bounds[k + 1]) for k in utterance_idx])
        sizes = np.array([bounds[k + 1] - bounds[k] for k in utterance_idx])
        return DomainTrainingSet(
            self.domain,
            self.L[rows],
            np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64),
            self.semer[rows],
            self.ie[rows],
            self.in_domain[np.asarray(utterance_idx)],
        )


def make_training_set(domain: str, items: Sequence[tuple[Utterance, list[Hypothesis]]]) -> DomainTrainingSet:
    """Stack each utterance's hypotheses for ``domain`` with their SemER / IE targets."""
    if not items:
        raise EmptyInputError(f"no training utterances for {domain!r}")
    L, errs, ies, starts, in_dom = [], [], [], [], []
    for u, hyps in items:
        if not hyps:
            raise EmptyInputError(f"utterance {u.id!r} has no {domain!r} hypotheses")
        starts.append(len(L))
        in_dom.append(u.truth.domain == domain)
        for h in hyps:
            if h.domain != domain:
                raise ContractViolation(f"hypothesis from {h.domain!r} in {domain!r} training set")
            e = semer(h, u.truth)
            L.append(h.l)
            errs.append(e)
            ies.append(ie(e))
    return DomainTrainingSet(
        domain, np.array(L, dtype=float), np.array(starts, dtype=np.int64),
        np.array(errs), np.array(ies, dtype=float), np.array(in_dom, dtype=bool),
    )


class Objective:
    """k1 * sum_u S^u (in-domain) + k2 * sum_u C^u (all), vectorized over a DomainTrainingSet."""

    def __init__(self, data: DomainTrainingSet, cfg: LossConfig, k1: float, k2: float):
        self.data = data
        self.cfg = cfg
        self.k1, self.k2 = k1, k2
        self.A = _design(data.L, cfg.use_bias)
        sizes = np.diff(np.append(data.starts, len(data.L)))
        self.seg = np.repeat(np.arange(data.n_utterances), sizes)
        self.hyp_in_domain = data.in_domain[self.seg]
        self.scale_s = self.scale_c = 1.0
        self.theta0 = np.append(np.ones(N_FEATURES), 0.0)[: self.A.shape[1]]

    def terms(self, theta: np.ndarray):
        d = self.data
        s = self.A @ theta
        m = np.maximum.reduceat(s, d.starts)
        e = np.exp(s - m[self.seg])
        p = e / np.add.reduceat(e, d.starts)[self.seg]

        exp_err = np.add.reduceat(p * d.semer, d.starts)
        mask = self.hyp_in_domain
        S = d.lam1 * float(exp_err[d.in_domain].sum())
        gS = d.lam1 * ((mask * p * (d.semer - exp_err[self.seg])) @ self.A)

        c, dc = _ce_terms(s, d.ie)
        exp_c = np.add.reduceat(p * c, d.starts)
        C = d.lam2 * float(exp_c.sum())
        gC = d.lam2 * ((p * (c - exp_c[self.seg]) + p * dc) @ self.A)
        if self.cfg.ce_sign == "printed":
            C, gC = -C, -gC
        return S, gS, C, gC

    def calibrate_scale(self, theta: np.ndarray) -> None:
        if not self.cfg.autoscale:
            return
        S, _, C, _ = self.terms(theta)
        self.scale_s = abs(S) if S != 0 else 1.0
        self.scale_c = abs(C) if C != 0 else 1.0

    def __call__(self, theta: np.ndarray):
        S, gS, C, gC = self.terms(theta)
        f = 0.0
        g = np.zeros_like(theta)
        if self.k1:
            f += self.k1 * S / self.scale_s
            g += self.k1 * gS / self.scale_s
        if self.k2:
            f += self.k2 * C / self.scale_c
            g += self.k2 * gC / self.scale_c
        if self.cfg.l2:
            d = theta - self.theta0
            f += 0.5 * self.cfg.l2 * float(d @ d)
            g += self.cfg.l2 * d
        return f, g


def gradient_descent(fun, theta0: np.ndarray, opt: OptimizerSettings, project=None):
    """Full-batch descent; the step halves until the objective does not increase.

    After an accepted step the trial step doubles, so the step size tracks the
    local curvature. Stops when the objective changes by less than ``opt.tol``.
    ``project`` maps each trial point back onto a feasible set.
    """
    project = project or (lambda t: t)
    theta = project(np.array(theta0, dtype=float))
    f, g = fun(theta)
    history = [f]
    step = opt.init_step
    converged = False
    it = 0
    for it in range(1, opt.max_iter + 1):
        while True:
            cand = project(theta - step * g)
            f_new, g_new = fun(cand)
            if f_new <= f:
                break
            step *= 0.5
            if step < 1e-20:
                return theta, history, True, it
        delta = f - f_new
        theta, f, g = cand, f_new, g_new
        history.append(f)
        if delta < opt.tol:
            converged = True
            break
        step *= 2.0
    return theta, history, converged, it


def train(
    scheme: Scheme | str,
    data: DomainTrainingSet,
    cfg: LossConfig | None = None,
    opt: OptimizerSettings | None = None,
) -> WeightVector:
    """Fit one domain's weights under a training scheme, starting from the uniform weights."""
    scheme = Scheme(scheme)
    cfg = cfg or LossConfig()
    opt = opt or OptimizerSettings()
    if scheme is Scheme.BASELINE:
        return WeightVector.uniform()
    if data.n_utterances == 0:
        raise EmptyInputError("empty training set")
    k1, k2 = {Scheme.R1: (1.0, 0.0), Scheme.R2: (0.0, 1.0), Scheme.R3: (cfg.k1, cfg.k2)}[scheme]
    if k1 > 0 and data.n_in_domain == 0:
        raise DegenerateTrainingError(f"no in-domain utterances for {data.domain!r}; expected SemER is undefined")
    obj = Objective(data, cfg, k1, k2)
    theta0 = obj.theta0.copy()
    obj.calibrate_scale(theta0)
    project = None
    if cfg.nonnegative:
        def project(t):
            t = t.copy()
            t[:N_FEATURES] = np.maximum(t[:N_FEATURES], 0.0)
            return t
    theta, history, converged, iters = gradient_descent(obj, theta0, opt, project)
    meta = {
        "scheme": scheme.value,
        "k1": k1,
        "k2": k2,
        "iterations": iters,
        "converged": converged,
        "initial_objective": history[0],
        "final_objective": history[-1],
        "n_utterances": data.n_utterances,
        "n_in_domain": data.n_in_domain,
    }
    return WeightVector.from_theta(theta, cfg.use_bias, meta)


def top_hypothesis(w: WeightVector, hypotheses: Sequence[Hypothesis]) -> Hypothesis:
    """Highest-scoring hypothesis; ties go to the lowest index. Sets ``s`` on every hypothesis."""
    if not hypotheses:
        raise EmptyInputError("no hypotheses to choose from")
    scores = score(w, np.array([h.l for h in hypotheses]))
    for h, s in zip(hypotheses, scores):
        h.s = float(s)
    return hypotheses[int(np.argmax(scores))]


def save_weights(w: WeightVector, domain: str, path: str | Path, seed: int | None = None) -> None:
    rec = {
        "format_version": WEIGHT_FORMAT_VERSION,
        "domain": domain,
        "scheme": w.meta.get("scheme"),
        "w": [float(x) for x in w.w],
        "bias": w.bias,
        "seed": seed,
        "training": {k: v for k, v in w.meta.items() if k != "scheme"},
    }
    with open(path, "w") as fh:
        json.dump(rec, fh, indent=2)
        fh.write("\n")


def load_weights(path: str | Path) -> tuple[str, WeightVector]:
    with open(path) as fh:
        rec = json.load(fh)
    if rec.get("format_version") != WEIGHT_FORMAT_VERSION:
        raise ValueError(f"unsupported weight file version {rec.get('format_version')!r}")
    meta = dict(rec.get("training", {}))
    meta["scheme"] = rec.get("scheme")
    return rec["domain"], WeightVector(np.array(rec["w"]), rec["bias"], meta)
