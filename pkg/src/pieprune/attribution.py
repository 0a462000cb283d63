"""Per-occurrence importance scores and budgeted circuit selection."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import (
    Metric,
    Occurrence,
    ReplacementModel,
    RunTrace,
    _run,
    backward,
    forward,
    frozen_override,
    relevance_coefficients,
    subject_forward,
)
from .tasks import PromptPair

GRADIENT_RUNS = ("clean", "corrupted")


@dataclass
class PairRuns:
    """Cached traces for one prompt pair.

    ``subject`` is the subject model on the clean prompt; ``clean`` and
    ``corrupted`` are replacement-model runs (in ``frozen_error`` mode both
    carry the error terms recorded on the clean subject run).
    """

    pair: PromptPair
    subject: RunTrace
    clean: RunTrace
    corrupted: RunTrace

    @property
    def errors(self) -> np.ndarray | None:
        return self.subject.errors if self.clean.errors.any() else None

    @property
    def delta_acts(self) -> np.ndarray:
        return self.clean.acts - self.corrupted.acts

    def universe_mask(self) -> np.ndarray:
        """Occurrences active in the clean OR corrupted run."""
        return (self.clean.acts != 0) | (self.corrupted.acts != 0)

    def run_frozen(self, model: ReplacementModel, tokens, reference: RunTrace, mask: np.ndarray) -> RunTrace:
        errs = self.subject.errors if model.config.error_mode == "frozen_error" else None
        return _run(model, np.asarray(tokens), override=frozen_override(reference, mask), errors=errs)


def prepare_runs(model: ReplacementModel, pair: PromptPair) -> PairRuns:
    subject = subject_forward(model, pair.clean, prompt_id=pair.id)
    errs = subject.errors if model.config.error_mode == "frozen_error" else None
    clean = forward(model, pair.clean, errors=errs, prompt_id=pair.id)
    corrupted = forward(model, pair.corrupted, errors=errs, prompt_id=pair.id)
    return PairRuns(pair, subject, clean, corrupted)


def make_metric(kind: str, runs: PairRuns) -> Metric:
    if kind == "logit_difference":
        return Metric("logit_difference", runs.pair.target, runs.pair.distractor)
    return Metric("negative_kl", reference=runs.subject.last_probs)


def _occ_array(mask: np.ndarray) -> np.ndarray:
    """Occurrences under ``mask`` (indexed [l, t, f]) as rows (l, f, t), lexicographic."""
    l, t, f = np.nonzero(mask)
    occ = np.stack([l, f, t], axis=1) if len(l) else np.zeros((0, 3), dtype=int)
    order = np.lexsort((occ[:, 2], occ[:, 1], occ[:, 0])) if len(occ) else np.arange(0)
    return occ[order].astype(int)


@dataclass
class ScoreTable:
    prompt_id: str
    method: str
    occurrences: np.ndarray  # (n, 3) rows (layer, feature, position), lexicographic
    scores: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.scores)):
            raise FloatingPointError(f"{self.method}: non-finite scores on {self.prompt_id}")

    def __len__(self) -> int:
        return len(self.scores)

    def as_dict(self) -> dict[Occurrence, float]:
        return {Occurrence(*map(int, o)): float(s) for o, s in zip(self.occurrences, self.scores)}

    def ranking(self) -> np.ndarray:
        """Indices by |score| descending; ties keep lexicographic order."""
        return np.argsort(-np.abs(self.scores), kind="stable")

    def score_of(self, occ: Occurrence) -> float:
        return self.as_dict()[Occurrence(*occ)]

    def n_nonzero(self) -> int:
        return int(np.count_nonzero(self.scores))

    def to_records(self) -> list[dict]:
        return [
            {"prompt": self.prompt_id, "method": self.method, "l": int(o[0]), "f": int(o[1]), "t": int(o[2]), "score": float(s)}
            for o, s in zip(self.occurrences, self.scores)
        ]


def _table(runs: PairRuns, method: str, per_occ: np.ndarray, **meta) -> ScoreTable:
    occ = _occ_array(runs.universe_mask())
    vals = per_occ[occ[:, 0], occ[:, 2], occ[:, 1]] if len(occ) else np.zeros(0)
    return ScoreTable(runs.pair.id, method, occ, np.asarray(vals, dtype=float), meta)


def _aggregate_writes(model: ReplacementModel, delta: np.ndarray, site_vectors: np.ndarray) -> np.ndarray:
    """sum over sites s >= l of (delta_a * D[l, s, f]) . v[s, t], shape (L, T, F)."""
    L = model.n_layers
    out = np.zeros_like(delta)
    for l in range(L):
        contracted = np.einsum("sfd,std->tf", model.decoders[l, l:], site_vectors[l:])
        out[l] = delta[l] * contracted
    return out


def score_fap(
    model: ReplacementModel,
    pair: PromptPair | PairRuns,
    metric: str = "logit_difference",
    gradient_run: str = "clean",
) -> ScoreTable:
    """Feature Attribution Patching: activation difference times decoder write,
    contracted with the metric gradient at every receiver site."""
    runs = pair if isinstance(pair, PairRuns) else prepare_runs(model, pair)
    if gradient_run not in GRADIENT_RUNS:
        raise ValueError(f"gradient_run must be one of {GRADIENT_RUNS}")
    m = make_metric(metric, runs)
    trace = runs.clean if gradient_run == "clean" else runs.corrupted
    cache = backward(model, trace, m, run=gradient_run)
    per_occ = _aggregate_writes(model, runs.delta_acts, cache.site_grads)
    return _table(runs, "fap", per_occ, metric=metric, gradient_run=gradient_run)


def score_activation_magnitude(model: ReplacementModel, pair: PromptPair | PairRuns) -> ScoreTable:
    runs = pair if isinstance(pair, PairRuns) else prepare_runs(model, pair)
    return _table(runs, "activation_magnitude", np.abs(runs.clean.acts))


def score_factp(model: ReplacementModel, pair: PromptPair | PairRuns, metric: str = "logit_difference") -> ScoreTable:
    """Single-occurrence patching: metric drop when one occurrence is frozen to
    its corrupted value on the clean run.  One forward per occurrence."""
    runs = pair if isinstance(pair, PairRuns) else prepare_runs(model, pair)
    m = make_metric(metric, runs)
    base = m.value(runs.clean.logits[-1])
    occ = _occ_array(runs.universe_mask())
    delta = runs.delta_acts
    scores = np.zeros(len(occ))
    for i, (l, f, t) in enumerate(occ):
        if delta[l, t, f] == 0:
            continue
        mask = np.zeros(runs.clean.acts.shape, dtype=bool)
        mask[l, t, f] = True
        patched = runs.run_frozen(model, runs.pair.clean, runs.corrupted, mask)
        scores[i] = base - m.value(patched.logits[-1])
    table = ScoreTable(runs.pair.id, "factp", occ, scores, {"metric": metric})
    table.metadata["n_nonzero"] = table.n_nonzero()
    return table


def score_relp(
    model: ReplacementModel,
    pair: PromptPair | PairRuns,
    metric: str = "logit_difference",
    eps: float = 1e-6,
    gradient_run: str = "clean",
) -> ScoreTable:
    """Relevance patching: the FAP aggregation with LRP epsilon-rule
    coefficients in place of gradients."""
    if eps <= 0:
        raise ValueError("epsilon must be > 0")
    runs = pair if isinstance(pair, PairRuns) else prepare_runs(model, pair)
    m = make_metric(metric, runs)
    trace = runs.clean if gradient_run == "clean" else runs.corrupted
    coeffs = relevance_coefficients(model, trace, m, eps=eps)
    per_occ = _aggregate_writes(model, runs.delta_acts, coeffs)
    return _table(runs, "relp", per_occ, metric=metric, eps=eps, gradient_run=gradient_run)


# ---------------------------------------------------------------------------
# circuits


@dataclass
class Circuit:
    prompt_id: str
    retained: tuple[Occurrence, ...]
    budget: int
    method: str
    scores: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.retained = tuple(sorted(Occurrence(*map(int, o)) for o in self.retained))

    def __len__(self) -> int:
        return len(self.retained)

    def __contains__(self, occ) -> bool:
        return Occurrence(*occ) in set(self.retained)

    def mask(self, shape: tuple[int, int, int]) -> np.ndarray:
        """Boolean (L, T, F) mask of retained occurrences."""
        m = np.zeros(shape, dtype=bool)
        for l, f, t in self.retained:
            m[l, t, f] = True
        return m

    def to_record(self) -> dict:
        return {
            "prompt": self.prompt_id,
            "method": self.method,
            "K": self.budget,
            "occurrences": [
                {"l": o.layer, "f": o.feature, "t": o.position, "score": float(self.scores.get(o, 0.0))}
                for o in self.retained
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Circuit":
        occs = [Occurrence(o["l"], o["f"], o["t"]) for o in rec["occurrences"]]
        scores = {Occurrence(o["l"], o["f"], o["t"]): o.get("score", 0.0) for o in rec["occurrences"]}
        return cls(rec["prompt"], tuple(occs), int(rec["K"]), rec["method"], scores)


def select_topk(scores: ScoreTable, K: int) -> Circuit:
    if K < 1:
        raise ValueError("K must be >= 1")
    idx = scores.ranking()[:K]
    occs = [Occurrence(*map(int, scores.occurrences[i])) for i in idx]
    return Circuit(scores.prompt_id, tuple(occs), K, scores.method, {o: float(scores.scores[i]) for o, i in zip(occs, idx)})


RANDOM_POOLS = ("clean", "scoreable")


def select_random_active(
    model: ReplacementModel, pair: PromptPair | PairRuns, K: int, seed: int, pool: str = "clean"
) -> Circuit:
    """Uniform sample without replacement from occurrences active on the clean
    prompt (``pool="clean"``) or on either prompt (``pool="scoreable"``)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if pool not in RANDOM_POOLS:
        raise ValueError(f"pool must be one of {RANDOM_POOLS}")
    runs = pair if isinstance(pair, PairRuns) else prepare_runs(model, pair)
    active = _occ_array(runs.clean.acts != 0 if pool == "clean" else runs.universe_mask())
    rng = np.random.default_rng(seed)
    n = min(K, len(active))
    pick = rng.choice(len(active), size=n, replace=False) if n else np.zeros(0, dtype=int)
    return Circuit(runs.pair.id, tuple(Occurrence(*map(int, active[i])) for i in pick), K, "random_active")


def full_circuit(runs: PairRuns, method: str = "full") -> Circuit:
    occ = _occ_array(runs.universe_mask())
    return Circuit(runs.pair.id, tuple(Occurrence(*map(int, o)) for o in occ), len(occ), method)


@dataclass
class UniqueFeatureSet:
    counts: Counter = field(default_factory=Counter)

    @property
    def features(self) -> list[tuple[int, int]]:
        return sorted(self.counts)

    def __len__(self) -> int:
        return len(self.counts)

    def to_record(self) -> dict:
        return {"features": [{"l": l, "f": f, "count": self.counts[(l, f)]} for l, f in self.features]}

    @classmethod
    def from_record(cls, rec: dict) -> "UniqueFeatureSet":
        return cls(Counter({(int(r["l"]), int(r["f"])): int(r["count"]) for r in rec["features"]}))


def unique_union(circuits: Iterable[Circuit]) -> UniqueFeatureSet:
    counts: Counter = Counter()
    for c in circuits:
        for o in c.retained:
            counts[(o.layer, o.feature)] += 1
    return UniqueFeatureSet(counts)


# ---------------------------------------------------------------------------
# JSON-lines I/O


def write_jsonl(path: str | Path, records: Sequence[dict], header: dict | None = None) -> None:
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> tuple[dict | None, list[dict]]:
    header = None
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "header" in rec and len(rec) == 1:
                header = rec["header"]
            else:
                records.append(rec)
    return header, records


def save_circuits(path: str | Path, circuits: Sequence[Circuit], header: dict | None = None) -> None:
    write_jsonl(path, [c.to_record() for c in circuits], header)


def load_circuits(path: str | Path) -> list[Circuit]:
    _, recs = read_jsonl(path)
    return [Circuit.from_record(r) for r in recs]
