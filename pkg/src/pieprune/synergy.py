"""FAP-Synergy: rerank the occurrences just around the top-K cutoff.

The FAP ranking is split into a confident core prefix and a boundary window.
Each boundary candidate gets

    S' = z_base + lam * max(0, z_syn)

where ``z_base`` is its |FAP| relative to the median core |FAP| and ``z_syn``
is the median pairwise synergy with sampled core partners divided by those
partners' median individual recovery.  The free slots go to the best S'.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .attribution import Circuit, PairRuns, ScoreTable, make_metric, prepare_runs
from .model import Occurrence, ReplacementModel
from .tasks import PromptPair

Z_BASE_MODES = ("median_ratio", "zscore")


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class SynergyConfig:
    lam: float = 3.0
    bp: float = 25.0
    partners: int = 8
    seed: int = 0
    z_base_mode: str = "median_ratio"

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 < self.bp <= 50:
            raise ValueError("boundary percent must lie in (0, 50]")
        if self.partners < 1:
            raise ValueError("partners must be >= 1")
        if self.z_base_mode not in Z_BASE_MODES:
            raise ValueError(f"z_base_mode must be one of {Z_BASE_MODES}")


@dataclass
class BoundaryPartition:
    core: list[Occurrence]
    boundary: list[Occurrence]
    K: int


@dataclass
class SynergyScore:
    candidate: Occurrence
    z_base: float
    z_syn: float
    z_syn_plus: float
    s_prime: float
    partners: list[Occurrence] = field(default_factory=list)
    pair_synergies: list[float] = field(default_factory=list)
    selected: bool = False

    def to_record(self, prompt_id: str = "") -> dict:
        return {
            "prompt": prompt_id,
            "occurrence": list(self.candidate),
            "z_base": self.z_base,
            "z_syn": self.z_syn,
            "z_syn_plus": self.z_syn_plus,
            "S_prime": self.s_prime,
            "partners": [list(p) for p in self.partners],
            "pair_synergy": self.pair_synergies,
            "decision": "kept" if self.selected else "dropped",
        }


def _window(K: int, bp: float) -> tuple[int, int]:
    frac = Fraction(str(bp)) / 100
    n_core = math.ceil((1 - frac) * K)
    upper = math.ceil((1 + frac) * K)
    return n_core, upper


def partition_boundary(scores: ScoreTable, K: int, config: SynergyConfig = SynergyConfig()) -> BoundaryPartition:
    if K < 2:
        raise PartitionError("K must be >= 2 for a boundary partition")
    n_core, upper = _window(K, config.bp)
    if n_core < 1:
        raise PartitionError("boundary percent leaves an empty core")
    total = len(scores)
    if total <= n_core:
        raise PartitionError(f"{total} scoreable occurrences leave no boundary beyond a core of {n_core}")
    order = scores.ranking()
    occ = [Occurrence(*map(int, scores.occurrences[i])) for i in order]
    return BoundaryPartition(core=occ[:n_core], boundary=occ[n_core : min(upper, total)], K=K)


class _Recovery:
    """Metric recovery M(S) = metric(corrupted run, S restored to clean) - metric(corrupted run)."""

    def __init__(self, model: ReplacementModel, runs: PairRuns, metric: str) -> None:
        self.model = model
        self.runs = runs
        self.metric = make_metric(metric, runs)
        self.base = self.metric.value(runs.corrupted.logits[-1])
        self._cache: dict[frozenset, float] = {}

    def __call__(self, occs) -> float:
        key = frozenset(Occurrence(*o) for o in occs)
        if key not in self._cache:
            mask = np.zeros(self.runs.clean.acts.shape, dtype=bool)
            for l, f, t in key:
                mask[l, t, f] = True
            tr = self.runs.run_frozen(self.model, self.runs.pair.corrupted, self.runs.clean, mask)
            self._cache[key] = self.metric.value(tr.logits[-1]) - self.base
        return self._cache[key]


def pairwise_synergy(
    model: ReplacementModel,
    pair: PromptPair | PairRuns,
    f_b: Occurrence,
    f_c: Occurrence,
    metric: str = "logit_difference",
) -> float:
    """Syn(b, c) = M({b, c}) - M({b}) - M({c})."""
    if tuple(f_b) == tuple(f_c):
        raise ValueError("synergy needs two distinct occurrences")
    runs = pair if isinstance(pair, PairRuns) else prepare_runs(model, pair)
    rec = _Recovery(model, runs, metric)
    return rec([f_b, f_c]) - rec([f_b]) - rec([f_c])


def synergy_scores(
    model: ReplacementModel,
    runs: PairRuns,
    partition: BoundaryPartition,
    scores: ScoreTable,
    config: SynergyConfig,
    metric: str = "logit_difference",
) -> list[SynergyScore]:
    lookup = scores.as_dict()
    core_mag = np.array([abs(lookup[o]) for o in partition.core])
    med_core = float(np.median(core_mag))
    rec = _Recovery(model, runs, metric)
    rng = np.random.default_rng(config.seed)
    n_partners = min(config.partners, len(partition.core))
    out = []
    for cand in partition.boundary:
        mag = abs(lookup[cand])
        if config.z_base_mode == "median_ratio":
            z_base = mag / med_core if med_core > 0 else 0.0
        else:
            sd = float(np.std(core_mag))
            z_base = (mag - med_core) / sd if sd > 0 else 0.0
        pick = rng.choice(len(partition.core), size=n_partners, replace=False)
        partners = [partition.core[i] for i in sorted(pick)]
        syn = [rec([cand, c]) - rec([cand]) - rec([c]) for c in partners]
        indiv = float(np.median([abs(rec([c])) for c in partners]))
        z_syn = float(np.median(syn)) / indiv if indiv >= 1e-12 else 0.0
        z_plus = max(0.0, z_syn)
        out.append(SynergyScore(cand, z_base, z_syn, z_plus, z_base + config.lam * z_plus, partners, syn))
    return out


def choose_from_scores(partition: BoundaryPartition, syn: list[SynergyScore], K: int) -> list[Occurrence]:
    """Core plus the best boundary candidates by S' (ties: lexicographic)."""
    slots = max(0, K - len(partition.core))
    ranked = sorted(syn, key=lambda s: (-s.s_prime, tuple(s.candidate)))
    chosen = [s.candidate for s in ranked[:slots]]
    for s in syn:
        s.selected = s.candidate in chosen
    return list(partition.core) + chosen


def rerank_boundary(
    model: ReplacementModel,
    pair: PromptPair | PairRuns,
    partition: BoundaryPartition,
    scores: ScoreTable,
    config: SynergyConfig = SynergyConfig(),
    metric: str = "logit_difference",
) -> tuple[Circuit, list[SynergyScore]]:
    runs = pair if isinstance(pair, PairRuns) else prepare_runs(model, pair)
    syn = synergy_scores(model, runs, partition, scores, config, metric)
    kept = choose_from_scores(partition, syn, partition.K)
    lookup = scores.as_dict()
    circuit = Circuit(scores.prompt_id, tuple(kept), partition.K, "fap_synergy", {o: lookup[o] for o in kept})
    return circuit, syn


def select_fap_synergy(
    model: ReplacementModel,
    runs: PairRuns,
    fap_scores: ScoreTable,
    K: int,
    config: SynergyConfig = SynergyConfig(),
    metric: str = "logit_difference",
) -> tuple[Circuit, list[SynergyScore]]:
    """Top-K with synergy reranking; falls back to plain top-K when no boundary exists."""
    from .attribution import select_topk

    if K < 2 or len(fap_scores) <= _window(K, config.bp)[0]:
        c = select_topk(fap_scores, K)
        c.method = "fap_synergy"
        return c, []
    part = partition_boundary(fap_scores, K, config)
    return rerank_boundary(model, runs, part, fap_scores, config, metric)
