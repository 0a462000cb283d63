"""Describe retained features and score the descriptions (Clarity, Purity, Responsiveness).

Descriptions come from an explainer client given max-activating exemplars; an
auditor client then writes synthetic examples for a description and rates real
examples against it.  Deterministic stub clients stand in for external models;
:class:`HttpExplainer` / :class:`HttpAuditor` talk JSON over HTTP.
"""

from __future__ import annotations

import json
import math
import re
import time
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.stats import rankdata

from .attribution import UniqueFeatureSet
from .model import ReplacementModel, forward


class ClientError(RuntimeError):
    pass


class UndefinedMetric(ValueError):
    """The metric has no value on this input (e.g. no positives)."""


# ---------------------------------------------------------------------------
# exemplars


@dataclass
class Exemplar:
    index: int
    tokens: list[int]
    activations: list[float]
    max_activation: float
    highlighted: list[int]  # positions


@dataclass
class ExemplarSet:
    feature: tuple[int, int]
    exemplars: list[Exemplar]
    threshold: float = 0.65

    @property
    def empty(self) -> bool:
        return not self.exemplars

    def highlighted_tokens(self) -> list[int]:
        return [ex.tokens[t] for ex in self.exemplars for t in ex.highlighted]


class ActivationCache:
    """Per-token activations of every feature on a fixed list of sequences."""

    def __init__(self, model: ReplacementModel, sequences: Sequence[Sequence[int]]):
        self.model = model
        self.sequences = [list(map(int, s)) for s in sequences]
        self._acts = [forward(model, s).acts for s in self.sequences]  # each (L, T, F)

    def __len__(self) -> int:
        return len(self.sequences)

    def token_acts(self, i: int, feature: tuple[int, int]) -> np.ndarray:
        l, f = feature
        return self._acts[i][l, :, f]

    def max_acts(self, feature: tuple[int, int]) -> np.ndarray:
        l, f = feature
        return np.array([a[l, :, f].max() for a in self._acts])


def _highlight(acts: np.ndarray, threshold: float) -> list[int]:
    peak = acts.max()
    if peak <= 0:
        return []
    return [int(t) for t in np.nonzero(acts >= threshold * peak)[0]]


def extract_exemplars(
    model: ReplacementModel,
    corpus: Sequence[Sequence[int]] | ActivationCache,
    feature: tuple[int, int],
    limit: int = 40,
    threshold: float = 0.65,
) -> ExemplarSet:
    """Top-``limit`` corpus sequences by the feature's peak activation.

    Tokens at or above ``threshold`` times the sequence peak are highlighted.
    Sequences where the feature never fires are skipped, so a dead feature
    yields an empty set rather than an error.
    """
    cache = corpus if isinstance(corpus, ActivationCache) else ActivationCache(model, corpus)
    if len(cache) == 0:
        raise ValueError("corpus is empty")
    if limit < 1 or not 0 < threshold <= 1:
        raise ValueError("limit must be >= 1 and threshold in (0, 1]")
    peaks = cache.max_acts(feature)
    order = np.argsort(-peaks, kind="stable")
    out = []
    for i in order[:limit]:
        if peaks[i] <= 0:
            break
        acts = cache.token_acts(int(i), feature)
        out.append(Exemplar(int(i), cache.sequences[i], acts.tolist(), float(peaks[i]), _highlight(acts, threshold)))
    return ExemplarSet(tuple(feature), out, threshold)


# ---------------------------------------------------------------------------
# metrics


def auc(pos: Sequence[float], neg: Sequence[float]) -> float:
    """P(pos > neg) + 0.5 P(pos == neg), via the Mann-Whitney rank sum."""
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetric("both groups need at least one example")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2
    return float(u / (len(pos) * len(neg)))


def gini(pos: Sequence[float], neg: Sequence[float]) -> float:
    """Rank Gini 2*AUC - 1 in [-1, 1]."""
    return 2.0 * auc(pos, neg) - 1.0


def _clip01(x: float) -> float:
    return min(1.0, max(0.0, x))


def _peak_acts(model: ReplacementModel, feature: tuple[int, int], seqs) -> np.ndarray:
    return ActivationCache(model, seqs).max_acts(feature)


def score_clarity(model: ReplacementModel, feature: tuple[int, int], synthetic_pos, control) -> float:
    if len(synthetic_pos) == 0 or len(control) == 0:
        raise ValueError("clarity needs non-empty positive and control sets")
    return _clip01(gini(_peak_acts(model, feature, synthetic_pos), _peak_acts(model, feature, control)))


def score_responsiveness(model: ReplacementModel, feature: tuple[int, int], rated_natural) -> float:
    """``rated_natural`` is a list of (sequence, matches_description) pairs."""
    acts = _peak_acts(model, feature, [s for s, _ in rated_natural])
    labels = np.array([bool(m) for _, m in rated_natural])
    return _clip01(gini(acts[labels], acts[~labels]))


def high_activation_labels(activations: Sequence[float], high_quantile: float = 0.25) -> np.ndarray:
    """Top ``ceil(q * n)`` activations (ties at the cut included), never the minimum value."""
    a = np.asarray(activations, float)
    if not 0 < high_quantile <= 1:
        raise ValueError("high_quantile must lie in (0, 1]")
    k = math.ceil(high_quantile * len(a))
    cut = np.sort(a)[::-1][k - 1]
    return (a >= cut) & (a > a.min())


def average_precision(labels: Sequence[bool], relevance: Sequence[float]) -> float:
    """Mean precision at the rank of each positive, ranking by relevance
    (descending; equal relevance keeps input order)."""
    y = np.asarray(labels, bool)
    if not y.any():
        raise UndefinedMetric("no positive examples")
    order = np.argsort(-np.asarray(relevance, float), kind="stable")
    hits = y[order]
    prec = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(prec[hits].mean())


def score_purity(activations: Sequence[float], auditor_relevance: Sequence[float], high_quantile: float = 0.25) -> float:
    if len(activations) < 2 or len(activations) != len(auditor_relevance):
        raise ValueError("purity needs >= 2 examples with one relevance each")
    return average_precision(high_activation_labels(activations, high_quantile), auditor_relevance)


# ---------------------------------------------------------------------------
# clients


@dataclass
class FeatureDescription:
    feature: tuple[int, int]
    text: str
    explainer: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ClientError(f"empty description for feature {self.feature}")


class ExplainerClient(Protocol):
    def explain(self, exemplars: ExemplarSet) -> FeatureDescription: ...


class AuditorClient(Protocol):
    def synthesize(self, description: FeatureDescription, n: int, seed: int) -> tuple[list[list[int]], list[list[int]]]: ...

    def rate(self, description: FeatureDescription, examples: list[list[int]]) -> list[float]: ...


_TOKEN_RE = re.compile(r"\b(\d+)\b")


class StubExplainer:
    """Names the (up to) three most frequently highlighted token ids."""

    name = "stub"

    def __init__(self, fail_on: Sequence[tuple[int, int]] = ()):
        self.fail_on = {tuple(f) for f in fail_on}

    def explain(self, exemplars: ExemplarSet) -> FeatureDescription:
        if exemplars.feature in self.fail_on:
            raise ClientError(f"injected explainer failure for {exemplars.feature}")
        counts = Counter(exemplars.highlighted_tokens())
        top = sorted(counts, key=lambda t: (-counts[t], t))[:3]
        if top:
            text = "fires on tokens " + ", ".join(str(t) for t in top)
        else:
            text = "no activating exemplars"
        return FeatureDescription(exemplars.feature, text, self.name, {"tokens": top, "n_exemplars": len(exemplars.exemplars)})


class StubAuditor:
    """Writes sequences containing the described tokens and rates token overlap."""

    name = "stub"

    def __init__(self, vocab_size: int, seq_len: int = 10):
        self.vocab_size = vocab_size
        self.seq_len = seq_len

    @staticmethod
    def tokens_of(description: FeatureDescription) -> list[int]:
        return [int(x) for x in _TOKEN_RE.findall(description.text)]

    def synthesize(self, description, n, seed):
        rng = np.random.default_rng(seed)
        toks = self.tokens_of(description)
        others = [t for t in range(self.vocab_size) if t not in toks] or list(range(self.vocab_size))
        pos, ctrl = [], []
        for _ in range(n):
            seq = rng.choice(others, size=self.seq_len).tolist()
            if toks:
                where = rng.choice(self.seq_len, size=min(len(toks), self.seq_len), replace=False)
                for w, t in zip(where, toks):
                    seq[int(w)] = int(t)
            pos.append([int(x) for x in seq])
            ctrl.append([int(x) for x in rng.choice(others, size=self.seq_len)])
        return pos, ctrl

    def rate(self, description, examples):
        toks = set(self.tokens_of(description))
        return [float(sum(t in toks for t in ex)) for ex in examples]


def _post_json(url: str, payload: dict, timeout: float, attempts: int = 3, backoff: float = 0.5) -> dict:
    body = json.dumps(payload).encode()
    last: Exception | None = None
    for i in range(attempts):
        req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                return json.loads(resp.read().decode())
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError, OSError) as exc:
            last = exc
            if i + 1 < attempts:
                time.sleep(backoff * 2**i)
    raise ClientError(f"{url}: {last}")


class HttpExplainer:
    """POST {"feature": [l, f], "threshold": x, "exemplars": [{"tokens", "activations"}]}
    and expect {"description": str}."""

    name = "http"

    def __init__(self, url: str, timeout: float = 30.0, attempts: int = 3, backoff: float = 0.5):
        self.url, self.timeout, self.attempts, self.backoff = url, timeout, attempts, backoff

    def explain(self, exemplars: ExemplarSet) -> FeatureDescription:
        payload = {
            "feature": list(exemplars.feature),
            "threshold": exemplars.threshold,
            "exemplars": [{"tokens": e.tokens, "activations": e.activations} for e in exemplars.exemplars],
        }
        resp = _post_json(self.url, payload, self.timeout, self.attempts, self.backoff)
        if not isinstance(resp.get("description"), str):
            raise ClientError(f"{self.url}: response lacks a 'description' string")
        return FeatureDescription(exemplars.feature, resp["description"], self.name, {"url": self.url})


class HttpAuditor:
    """Two operations on one endpoint:

    {"op": "synthesize", "description", "n", "seed"} -> {"positives": [[int]], "controls": [[int]]}
    {"op": "rate", "description", "examples": [[int]]} -> {"relevance": [float]}
    """

    name = "http"

    def __init__(self, url: str, timeout: float = 30.0, attempts: int = 3, backoff: float = 0.5):
        self.url, self.timeout, self.attempts, self.backoff = url, timeout, attempts, backoff

    def synthesize(self, description, n, seed):
        resp = _post_json(
            self.url, {"op": "synthesize", "description": description.text, "n": n, "seed": seed},
            self.timeout, self.attempts, self.backoff,
        )
        try:
            return [list(map(int, s)) for s in resp["positives"]], [list(map(int, s)) for s in resp["controls"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ClientError(f"{self.url}: malformed synthesize response ({exc})") from None

    def rate(self, description, examples):
        resp = _post_json(
            self.url, {"op": "rate", "description": description.text, "examples": examples},
            self.timeout, self.attempts, self.backoff,
        )
        rel = resp.get("relevance")
        if not isinstance(rel, list) or len(rel) != len(examples):
            raise ClientError(f"{self.url}: relevance list missing or wrong length")
        return [float(r) for r in rel]


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class InterpretConfig:
    limit: int = 40
    threshold: float = 0.65
    n_synthetic: int = 15
    n_eval: int = 250
    high_quantile: float = 0.25
    seed: int = 0

    auditor_calls = 2  # synthesize + rate


@dataclass
class FeatureReport:
    feature: tuple[int, int]
    description: str | None = None
    clarity: float | None = None
    purity: float | None = None
    responsiveness: float | None = None
    n_eval: int = 0
    n_exemplars: int = 0
    failures: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "feature": list(self.feature),
            "description": self.description,
            "clarity": self.clarity,
            "purity": self.purity,
            "responsiveness": self.responsiveness,
            "n_eval": self.n_eval,
            "n_exemplars": self.n_exemplars,
            "failures": list(self.failures),
        }


@dataclass
class InterpretationReport:
    features: list[FeatureReport]
    client_calls: int

    @property
    def n_features(self) -> int:
        return len(self.features)

    def aggregates(self) -> dict:
        out = {}
        for name in ("clarity", "purity", "responsiveness"):
            vals = [getattr(r, name) for r in self.features if getattr(r, name) is not None]
            out[name] = {
                "mean": float(np.mean(vals)) if vals else None,
                "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None),
                "n": len(vals),
            }
        return out


def run_interpretation(
    model: ReplacementModel,
    unique_features: UniqueFeatureSet,
    corpus: Sequence[Sequence[int]],
    explainer: ExplainerClient,
    auditor: AuditorClient,
    config: InterpretConfig = InterpretConfig(),
) -> InterpretationReport:
    """Exemplars, description, and quality scores for every unique feature.

    Client failures and undefined metrics are recorded per feature; the run
    always continues.
    """
    features = unique_features.features
    if not features:
        return InterpretationReport([], 0)
    cache = ActivationCache(model, corpus)
    rng = np.random.default_rng(config.seed)
    n_eval = min(config.n_eval, len(cache))
    eval_idx = np.sort(rng.choice(len(cache), size=n_eval, replace=False))
    eval_seqs = [cache.sequences[i] for i in eval_idx]
    calls = 0
    reports = []
    for j, feat in enumerate(features):
        rep = FeatureReport(tuple(feat), n_eval=n_eval)
        reports.append(rep)
        ex = extract_exemplars(model, cache, feat, config.limit, config.threshold)
        rep.n_exemplars = len(ex.exemplars)
        if ex.empty:
            rep.failures.append("no activating exemplars in corpus")
        try:
            calls += 1
            desc = explainer.explain(ex)
        except ClientError as exc:
            rep.failures.append(f"explainer: {exc}")
            continue
        rep.description = desc.text
        try:
            calls += 1
            pos, ctrl = auditor.synthesize(desc, config.n_synthetic, config.seed * 1_000_003 + j)
            rep.clarity = score_clarity(model, feat, pos, ctrl)
        except (ClientError, ValueError) as exc:
            rep.failures.append(f"clarity: {exc}")
        try:
            calls += 1
            relevance = auditor.rate(desc, eval_seqs)
        except ClientError as exc:
            rep.failures.append(f"auditor rate: {exc}")
            continue
        acts = cache.max_acts(feat)[eval_idx]
        try:
            rep.purity = score_purity(acts, relevance, config.high_quantile)
        except (UndefinedMetric, ValueError) as exc:
            rep.failures.append(f"purity: {exc}")
        try:
            matches = np.asarray(relevance) > 0
            rep.responsiveness = _clip01(gini(acts[matches], acts[~matches]))
        except UndefinedMetric as exc:
            rep.failures.append(f"responsiveness: {exc}")
    return InterpretationReport(reports, calls)


def make_corpus(vocab_size: int, n: int, length: int, seed: int) -> list[list[int]]:
    """Uniform random token sequences standing in for a natural-text corpus."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=(n, length)).tolist()
