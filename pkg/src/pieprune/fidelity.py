"""Behavioral fidelity of pruned circuits, budget sweeps, and interpretation cost.

A circuit is evaluated by running the clean prompt with every occurrence
outside it frozen to its corrupted-run value.  The empty circuit is therefore
the clean prompt with all features substituted, which also serves as the
faithfulness baseline.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

from .attribution import (
    Circuit,
    PairRuns,
    ScoreTable,
    make_metric,
    prepare_runs,
    score_activation_magnitude,
    score_factp,
    score_fap,
    score_relp,
    select_random_active,
    select_topk,
)
from .model import ConfigError, ReplacementModel, RunTrace, kl_divergence
from .synergy import SynergyConfig, SynergyScore, select_fap_synergy
from .tasks import PromptPair, TaskDataset

METHODS = ("fap", "fap_synergy", "activation_magnitude", "factp", "relp", "random_active")
DEFAULT_BUDGETS = (8, 16, 32, 64, 128)
DEGENERATE_GAP = 1e-9
SWEEP_COLUMNS = ("task", "model-config-hash", "method", "K", "mean_kl", "std_kl", "mean_faith", "std_faith", "pcr")


class DegeneratePairError(ValueError):
    """Clean and fully substituted runs give (nearly) the same metric."""


def restricted_run(model: ReplacementModel, runs: PairRuns, circuit: Circuit) -> RunTrace:
    keep = circuit.mask(runs.clean.acts.shape)
    return runs.run_frozen(model, runs.pair.clean, runs.corrupted, ~keep)


def _runs(model, pair) -> PairRuns:
    return pair if isinstance(pair, PairRuns) else prepare_runs(model, pair)


def eval_kl(model: ReplacementModel, pair: PromptPair | PairRuns, circuit: Circuit) -> float:
    """Last-token KL(subject || restricted) in nats."""
    runs = _runs(model, pair)
    tr = restricted_run(model, runs, circuit)
    return kl_divergence(runs.subject.last_probs, tr.last_probs)


def eval_faithfulness(
    model: ReplacementModel, pair: PromptPair | PairRuns, circuit: Circuit, metric: str = "logit_difference"
) -> float:
    runs = _runs(model, pair)
    m = make_metric(metric, runs)
    empty = Circuit(runs.pair.id, (), 0, "empty")
    l_full = m.value(runs.clean.logits[-1])
    l_empty = m.value(restricted_run(model, runs, empty).logits[-1])
    gap = l_full - l_empty
    if abs(gap) < DEGENERATE_GAP:
        raise DegeneratePairError(f"pair {runs.pair.id}: |L(M) - L(empty)| = {abs(gap):.3g}")
    if not circuit.retained:
        return 0.0
    l_c = m.value(restricted_run(model, runs, circuit).logits[-1])
    return (l_c - l_empty) / gap


def eval_prediction_change(model: ReplacementModel, pair: PromptPair | PairRuns, circuit: Circuit) -> bool:
    runs = _runs(model, pair)
    tr = restricted_run(model, runs, circuit)
    return int(np.argmax(runs.subject.logits[-1])) != int(np.argmax(tr.logits[-1]))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for fewer than two values)."""
    if len(values) == 0:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


@dataclass
class PromptFidelity:
    prompt: str
    kl: float
    faithfulness: float | None
    prediction_changed: bool
    n_retained: int


@dataclass
class FidelityReport:
    method: str
    K: int
    prompts: list[PromptFidelity] = field(default_factory=list)

    @property
    def n_degenerate(self) -> int:
        return sum(p.faithfulness is None for p in self.prompts)

    def aggregates(self) -> dict:
        mean_kl, std_kl = mean_std([p.kl for p in self.prompts])
        mean_f, std_f = mean_std([p.faithfulness for p in self.prompts if p.faithfulness is not None])
        pcr = float(np.mean([p.prediction_changed for p in self.prompts])) if self.prompts else float("nan")
        return {
            "mean_kl": mean_kl,
            "std_kl": std_kl,
            "mean_faith": mean_f,
            "std_faith": std_f,
            "pcr": pcr,
            "n_prompts": len(self.prompts),
            "n_degenerate": self.n_degenerate,
        }


def evaluate_circuit(model: ReplacementModel, runs: PairRuns, circuit: Circuit, metric: str = "logit_difference") -> PromptFidelity:
    tr = restricted_run(model, runs, circuit)
    kl = kl_divergence(runs.subject.last_probs, tr.last_probs)
    changed = int(np.argmax(runs.subject.logits[-1])) != int(np.argmax(tr.logits[-1]))
    try:
        faith = eval_faithfulness(model, runs, circuit, metric)
    except DegeneratePairError:
        faith = None
    return PromptFidelity(runs.pair.id, kl, faith, changed, len(circuit))


# ---------------------------------------------------------------------------
# pruning driver


@dataclass
class PruneConfig:
    metric: str = "logit_difference"
    gradient_run: str = "clean"
    synergy: SynergyConfig = field(default_factory=SynergyConfig)
    relp_eps: float = 1e-6
    seed: int = 0


class Pruner:
    """Caches per-prompt runs and score tables so several budgets share work."""

    def __init__(self, model: ReplacementModel, config: PruneConfig = PruneConfig()):
        self.model = model
        self.config = config
        self._runs: dict[str, PairRuns] = {}
        self._scores: dict[tuple[str, str], ScoreTable] = {}

    def runs(self, pair: PromptPair) -> PairRuns:
        if pair.id not in self._runs:
            self._runs[pair.id] = prepare_runs(self.model, pair)
        return self._runs[pair.id]

    def scores(self, pair: PromptPair, method: str) -> ScoreTable:
        base = "fap" if method == "fap_synergy" else method
        key = (pair.id, base)
        if key not in self._scores:
            runs, cfg = self.runs(pair), self.config
            if base == "fap":
                table = score_fap(self.model, runs, cfg.metric, cfg.gradient_run)
            elif base == "activation_magnitude":
                table = score_activation_magnitude(self.model, runs)
            elif base == "factp":
                table = score_factp(self.model, runs, cfg.metric)
            elif base == "relp":
                table = score_relp(self.model, runs, cfg.metric, cfg.relp_eps, cfg.gradient_run)
            else:
                raise ConfigError(f"method {method!r} has no score table")
            self._scores[key] = table
        return self._scores[key]

    def circuit(
        self, pair: PromptPair, method: str, K: int, synergy: SynergyConfig | None = None
    ) -> tuple[Circuit, list[SynergyScore]]:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
        if method == "random_active":
            return select_random_active(self.model, self.runs(pair), K, self.config.seed), []
        table = self.scores(pair, method)
        if method == "fap_synergy":
            return select_fap_synergy(
                self.model, self.runs(pair), table, K, synergy or self.config.synergy, self.config.metric
            )
        return select_topk(table, K), []


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    task: str
    config_hash: str
    reports: dict[tuple[str, int], FidelityReport] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for (method, K), rep in self.reports.items():
            agg = rep.aggregates()
            out.append({"task": self.task, "model-config-hash": self.config_hash, "method": method, "K": K, **agg})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows():
            w.writerow([r["task"], r["model-config-hash"], r["method"], r["K"]] + [_fmt(r[c]) for c in SWEEP_COLUMNS[4:]])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "task": self.task,
            "model-config-hash": self.config_hash,
            "rows": self.rows(),
            "prompts": {
                f"{m}:{k}": [asdict(p) for p in rep.prompts] for (m, k), rep in self.reports.items()
            },
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.10g}"


def _task_tag(dataset: TaskDataset) -> str:
    tags = sorted({p.task for p in dataset})
    return "+".join(tags) if tags else "none"


def run_budget_sweep(
    model: ReplacementModel,
    dataset: TaskDataset,
    methods: Sequence[str] = ("fap",),
    budgets: Sequence[int] = DEFAULT_BUDGETS,
    config: PruneConfig = PruneConfig(),
    pruner: Pruner | None = None,
) -> SweepResult:
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
    if any(k < 1 for k in budgets):
        raise ConfigError("budgets must be positive")
    pruner = pruner or Pruner(model, config)
    result = SweepResult(_task_tag(dataset), model.config.config_hash())
    for m in methods:
        for K in budgets:
            rep = FidelityReport(m, K)
            for pair in dataset:
                c, _ = pruner.circuit(pair, m, K)
                rep.prompts.append(evaluate_circuit(model, pruner.runs(pair), c, config.metric))
            result.reports[(m, K)] = rep
    return result


@dataclass
class CompressionCurve:
    K_ref: int
    fap_mean_kl: float
    points: list[tuple[int, float, float]]  # (K, mean KL, std KL over seeds*prompts)
    n_seeds: int

    @property
    def k_cross(self) -> int | None:
        """Smallest random budget whose mean KL is at or below FAP at K_ref."""
        for k, mean, _ in self.points:
            if mean <= self.fap_mean_kl:
                return k
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("k", "mean_kl", "std_kl"))
        for k, mean, std in self.points:
            w.writerow((k, _fmt(mean), _fmt(std)))
        return buf.getvalue()


def run_compression_curve(
    model: ReplacementModel,
    dataset: TaskDataset,
    K_ref: int,
    random_budgets: Sequence[int],
    seed: int | Iterable[int] = 0,
    config: PruneConfig = PruneConfig(),
    pool: str = "scoreable",
) -> CompressionCurve:
    """Mean KL of random active-set circuits per budget, against FAP at ``K_ref``.

    The default pool includes occurrences active only on the corrupted prompt,
    so the largest budget reproduces the full circuit.
    """
    seeds = [seed] if isinstance(seed, int) else list(seed)
    pruner = Pruner(model, config)
    fap_kl = [evaluate_circuit(model, pruner.runs(p), pruner.circuit(p, "fap", K_ref)[0]).kl for p in dataset]
    points = []
    for K in sorted(random_budgets):
        kls = []
        for s in seeds:
            for i, p in enumerate(dataset):
                c = select_random_active(model, pruner.runs(p), K, seed=s * 100_003 + i, pool=pool)
                kls.append(evaluate_circuit(model, pruner.runs(p), c).kl)
        points.append((K, *mean_std(kls)))
    return CompressionCurve(K_ref, float(np.mean(fap_kl)), points, len(seeds))


def run_synergy_sweep(
    model: ReplacementModel,
    dataset: TaskDataset,
    K: int,
    lambdas: Sequence[float],
    bps: Sequence[float],
    config: PruneConfig = PruneConfig(),
) -> dict:
    """Mean KL per (lambda, bp) cell as milli-KL deltas against lambda=0."""
    pruner = Pruner(model, config)

    def kl_stats(syn_cfg: SynergyConfig) -> tuple[float, float]:
        kls = []
        for p in dataset:
            c, _ = pruner.circuit(p, "fap_synergy", K, syn_cfg)
            kls.append(evaluate_circuit(model, pruner.runs(p), c).kl)
        return mean_std(kls)

    base_cfg = config.synergy
    b_mean, b_std = kl_stats(SynergyConfig(0.0, base_cfg.bp, base_cfg.partners, base_cfg.seed, base_cfg.z_base_mode))
    cells = []
    for lam in lambdas:
        for bp in bps:
            cfg = SynergyConfig(float(lam), float(bp), base_cfg.partners, base_cfg.seed, base_cfg.z_base_mode)
            mean, std = (b_mean, b_std) if lam == 0 else kl_stats(cfg)
            cells.append(
                {
                    "lambda": float(lam),
                    "bp": float(bp),
                    "mean_kl": mean,
                    "std_kl": std,
                    "delta_mean_mkl": 1000.0 * (mean - b_mean),
                    "delta_std_mkl": 1000.0 * (std - b_std),
                }
            )
    best = min(cells, key=lambda c: (c["mean_kl"], c["lambda"], c["bp"]))
    return {
        "K": K,
        "baseline": {"mean_kl": b_mean, "std_kl": b_std},
        "cells": cells,
        "argmin": {"lambda": best["lambda"], "bp": best["bp"]},
    }


# ---------------------------------------------------------------------------
# cost model

C_FEAT = Decimal("0.0235")
_CENT = Decimal("0.01")


def dollars(n_features: int, c_feat: Decimal | str | float = C_FEAT) -> Decimal:
    """Cost of interpreting ``n_features`` features, rounded half-up to cents."""
    if n_features < 0:
        raise ValueError("feature count must be >= 0")
    return (Decimal(n_features) * Decimal(str(c_feat))).quantize(_CENT, rounding=ROUND_HALF_UP)


def ratio_3sf(num: int, den: int) -> Decimal:
    if den <= 0:
        raise ValueError("denominator must be > 0")
    q = Decimal(num) / Decimal(den)
    if q == 0:
        return Decimal(0)
    exp = q.adjusted() - 2
    return q.quantize(Decimal(1).scaleb(exp), rounding=ROUND_HALF_UP)


@dataclass
class CostEstimate:
    c_feat: Decimal
    counts: dict[str, int]
    totals: dict[str, Decimal]
    ratios: dict[str, Decimal]

    def to_dict(self) -> dict:
        return {
            "c_feat": str(self.c_feat),
            "counts": dict(self.counts),
            "totals": {k: str(v) for k, v in self.totals.items()},
            "ratios": {k: str(v) for k, v in self.ratios.items()},
        }


def estimate_cost(counts: dict[str, int], c_feat: Decimal | str | float = C_FEAT) -> CostEstimate:
    """Interpretation cost for each named count.

    Recognised keys give the standard ratios: ``active_per_prompt`` over
    ``budget_per_prompt`` and ``full_dictionary`` over ``unique_kept``.
    """
    c = Decimal(str(c_feat))
    totals = {k: dollars(v, c) for k, v in counts.items()}
    ratios = {}
    if counts.get("budget_per_prompt") and "active_per_prompt" in counts:
        ratios["prompt_level"] = ratio_3sf(counts["active_per_prompt"], counts["budget_per_prompt"])
    if counts.get("unique_kept") and "full_dictionary" in counts:
        ratios["global"] = ratio_3sf(counts["full_dictionary"], counts["unique_kept"])
    return CostEstimate(c, dict(counts), totals, ratios)
