import csv
import io
import json
import math
from dataclasses import replace
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pieprune.attribution import Circuit, full_circuit, prepare_runs, select_random_active
from pieprune.fidelity import (
    SWEEP_COLUMNS,
    DegeneratePairError,
    Pruner,
    dollars,
    estimate_cost,
    eval_faithfulness,
    eval_kl,
    eval_prediction_change,
    evaluate_circuit,
    mean_std,
    ratio_3sf,
    restricted_run,
    run_budget_sweep,
    run_compression_curve,
    run_synergy_sweep,
)
from pieprune.fixtures import and_gate, planted_synergy_dataset
from pieprune.model import ConfigError, Occurrence, Patch, PatchAction, forward, kl_divergence, softmax
from pieprune.tasks import TaskDataset


def _empty(pair_id):
    return Circuit(pair_id, (), 0, "empty")


def test_full_circuit_kl_zero_and_faithfulness_one(default_model, ioi32):
    for pair in ioi32.pairs[:8]:
        runs = prepare_runs(default_model, pair)
        full = full_circuit(runs)
        assert abs(eval_kl(default_model, runs, full)) <= 1e-9
        assert eval_faithfulness(default_model, runs, full) == pytest.approx(1.0, abs=1e-9)
        assert eval_faithfulness(default_model, runs, _empty(pair.id)) == 0.0
        assert not eval_prediction_change(default_model, runs, full)


def test_empty_circuit_kl_matches_corrupted_substitution(default_model, ioi32):
    pair = ioi32.pairs[0]
    runs = prepare_runs(default_model, pair)
    L, T, F = runs.clean.acts.shape
    patch = {Occurrence(l, f, t): Patch(PatchAction.FREEZE_TO_CORRUPTED) for l in range(L) for t in range(T) for f in range(F)}
    sub = forward(default_model, pair.clean, patch, runs.corrupted)
    expected = kl_divergence(runs.subject.last_probs, sub.last_probs)
    assert expected > 0
    assert eval_kl(default_model, runs, _empty(pair.id)) == pytest.approx(expected, rel=1e-12)


def test_kl_permutation_invariant(default_model, ioi32):
    runs = prepare_runs(default_model, ioi32.pairs[1])
    c = select_random_active(default_model, runs, 12, seed=3)
    rev = Circuit(c.prompt_id, tuple(reversed(c.retained)), c.budget, c.method)
    assert eval_kl(default_model, runs, rev) == eval_kl(default_model, runs, c)


def test_random_k1_faithfulness_against_patch_reimplementation(default_model, ioi32):
    pair = ioi32.pairs[2]
    runs = prepare_runs(default_model, pair)
    c = select_random_active(default_model, runs, 1, seed=7)
    value = eval_faithfulness(default_model, runs, c)
    assert math.isfinite(value)
    assert value == eval_faithfulness(default_model, runs, select_random_active(default_model, runs, 1, seed=7))

    # oracle: build the three runs through explicit per-occurrence patches
    L, T, F = runs.clean.acts.shape
    everything = [Occurrence(l, f, t) for l in range(L) for t in range(T) for f in range(F)]

    def ld(keep):
        patch = {o: Patch(PatchAction.FREEZE_TO_CORRUPTED) for o in everything if o not in keep}
        logits = forward(default_model, pair.clean, patch, runs.corrupted).logits[-1]
        return logits[pair.target] - logits[pair.distractor]

    l_m = forward(default_model, pair.clean).logits[-1]
    l_m = l_m[pair.target] - l_m[pair.distractor]
    l_0 = ld(set())
    l_c = ld(set(c.retained))
    assert value == pytest.approx((l_c - l_0) / (l_m - l_0), rel=1e-9, abs=1e-12)


def test_degenerate_pair_raises_and_is_counted(default_model, ioi32):
    pair = ioi32.pairs[0]
    same = replace(pair, id="same", corrupted=pair.clean)
    runs = prepare_runs(default_model, same)
    with pytest.raises(DegeneratePairError):
        eval_faithfulness(default_model, runs, full_circuit(runs))
    rec = evaluate_circuit(default_model, runs, _empty("same"))
    assert rec.faithfulness is None and rec.kl == pytest.approx(0.0, abs=1e-12)


def test_prediction_change_constructed_flip():
    fx = and_gate(n_prompts=1)
    runs = prepare_runs(fx.model, fx.pairs[0])
    # clean argmax is the target; with every feature frozen to its corrupted
    # value (all zero) the logits tie at 0 and argmax falls to token 0
    assert int(np.argmax(runs.subject.logits[-1])) == fx.pairs[0].target
    sub = forward(fx.model, fx.pairs[0].corrupted)
    assert int(np.argmax(sub.logits[-1])) != fx.pairs[0].target
    assert eval_prediction_change(fx.model, runs, _empty(fx.pairs[0].id))


@pytest.mark.parametrize("scale", [0.5, 3.0, 40.0])
def test_prediction_change_invariant_to_unembedding_scale(default_model, ioi32, scale):
    scaled = replace(default_model, unembedding=default_model.unembedding * scale)
    for pair in ioi32.pairs[:6]:
        for k in (1, 4, 16):
            c = select_random_active(default_model, prepare_runs(default_model, pair), k, seed=k)
            assert eval_prediction_change(default_model, pair, c) == eval_prediction_change(scaled, pair, c)


def test_mean_std_sample_definition():
    assert mean_std([2.0]) == (2.0, 0.0)
    m, s = mean_std([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5 and s == pytest.approx(np.sqrt(5 / 3))


def test_single_cell_sweep_equals_prompt_values(default_model, ioi32):
    ds = TaskDataset(ioi32.pairs[:1], ioi32.vocab)
    res = run_budget_sweep(default_model, ds, ["fap"], [8])
    row = res.rows()[0]
    p = res.reports[("fap", 8)].prompts[0]
    assert row["mean_kl"] == p.kl and row["std_kl"] == 0.0
    assert row["mean_faith"] == p.faithfulness and row["std_faith"] == 0.0
    assert row["pcr"] == float(p.prediction_changed)


def test_sweep_grid_and_csv(default_model, ioi32):
    ds = TaskDataset(ioi32.pairs[:3], ioi32.vocab)
    res = run_budget_sweep(default_model, ds, ["fap", "relp"], [4, 8])
    assert set(res.reports) == {("fap", 4), ("fap", 8), ("relp", 4), ("relp", 8)}
    rows = list(csv.reader(io.StringIO(res.to_csv())))
    assert tuple(rows[0]) == SWEEP_COLUMNS and len(rows) == 5
    assert all(r[1] == default_model.config.config_hash() for r in rows[1:])
    doc = json.loads(res.to_json())
    assert len(doc["rows"]) == 4 and len(doc["prompts"]["fap:4"]) == 3


def test_unknown_method_is_config_error(default_model, ioi32):
    with pytest.raises(ConfigError):
        run_budget_sweep(default_model, ioi32, ["magic"], [8])
    with pytest.raises(ConfigError):
        Pruner(default_model).circuit(ioi32.pairs[0], "magic", 8)


def test_fap_kl_decreases_with_budget(default_model, ioi32):
    res = run_budget_sweep(default_model, ioi32, ["fap"], [8, 64])
    assert res.reports[("fap", 64)].aggregates()["mean_kl"] <= res.reports[("fap", 8)].aggregates()["mean_kl"]


def test_synergy_not_worse_on_planted_dataset():
    model, ds = planted_synergy_dataset(32, 0)
    res = run_budget_sweep(model, ds, ["fap", "fap_synergy"], [5])
    syn = res.reports[("fap_synergy", 5)].aggregates()["mean_kl"]
    fap = res.reports[("fap", 5)].aggregates()["mean_kl"]
    assert syn <= fap


def test_synergy_sweep_structure():
    model, ds = planted_synergy_dataset(8, 0)
    out = run_synergy_sweep(model, ds, 5, [0, 3], [25])
    zero = [c for c in out["cells"] if c["lambda"] == 0]
    assert zero and all(c["delta_mean_mkl"] == 0 and c["delta_std_mkl"] == 0 for c in zero)
    assert len(out["cells"]) == 2
    one = run_synergy_sweep(model, ds, 5, [3], [25])
    assert one["argmin"] == {"lambda": 3.0, "bp": 25.0}


def test_compression_curve_endpoints(default_model, ioi32):
    ds = TaskDataset(ioi32.pairs[:4], ioi32.vocab)
    n_scoreable = max(int(prepare_runs(default_model, p).universe_mask().sum()) for p in ds)
    curve = run_compression_curve(default_model, ds, 8, [n_scoreable], seed=range(2))
    assert curve.points[0][1] <= 1e-9
    assert curve.to_csv().splitlines()[0] == "k,mean_kl,std_kl"


def test_compression_curve_monotone_and_crossover(default_model, ioi32):
    ds = TaskDataset(ioi32.pairs[:8], ioi32.vocab)
    budgets = [8, 16, 32, 64, 128, 256, 512]
    curve = run_compression_curve(default_model, ds, 8, budgets, seed=range(10))
    n = curve.n_seeds * len(ds)
    # non-increase in expectation: each step may rise by at most two standard errors
    for (_, ma, sa), (_, mb, sb) in zip(curve.points, curve.points[1:]):
        assert mb <= ma + 2 * math.hypot(sa, sb) / math.sqrt(n) + 1e-12
    assert curve.points[-1][1] < curve.points[0][1]
    assert curve.k_cross is not None and curve.k_cross > curve.K_ref


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 7), st.integers(0, 40), st.integers(0, 10_000))
def test_full_circuit_dominates_every_subset_linear(small_linear, small_pairs, i, k, seed):
    runs = prepare_runs(small_linear, small_pairs.pairs[i])
    n = int(runs.universe_mask().sum())
    a = select_random_active(small_linear, runs, max(1, min(k, n)), seed, pool="scoreable")
    assert eval_kl(small_linear, runs, full_circuit(runs)) <= eval_kl(small_linear, runs, a) + 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 7), st.integers(1, 40), st.integers(0, 10_000), st.lists(st.floats(0, 1), min_size=2, max_size=6))
def test_kl_nonincreasing_on_segment_to_full_logits(small_linear, small_pairs, i, k, seed, ts):
    # KL(p || softmax(z)) is convex in z and zero at the full logits, so it
    # cannot increase while moving along the segment toward them
    runs = prepare_runs(small_linear, small_pairs.pairs[i])
    n = int(runs.universe_mask().sum())
    a = select_random_active(small_linear, runs, min(k, n), seed, pool="scoreable")
    z_a = restricted_run(small_linear, runs, a).logits[-1]
    z_full = runs.subject.logits[-1]
    p = runs.subject.last_probs
    kls = [kl_divergence(p, softmax(z_a + t * (z_full - z_a))) for t in sorted(ts)]
    assert all(b <= a_ + 1e-12 for a_, b in zip(kls, kls[1:]))


def test_set_inclusion_does_not_imply_lower_kl(small_linear, small_pairs):
    # counterexample: adding occurrences can overshoot the clean logits
    runs = prepare_runs(small_linear, small_pairs.pairs[5])
    a = Circuit(runs.pair.id, (Occurrence(1, 11, 2),), 1, "a")
    b = Circuit(runs.pair.id, (Occurrence(1, 11, 2), Occurrence(0, 0, 9), Occurrence(0, 14, 5)), 3, "b")
    assert eval_kl(small_linear, runs, b) > eval_kl(small_linear, runs, a) + 0.1


@pytest.mark.parametrize(
    "n, expected",
    [(4188, "98.42"), (5190, "121.97"), (524288, "12320.77"), (425984, "10010.62"), (4400, "103.40"), (4000, "94.00"), (100, "2.35"), (0, "0.00")],
)
def test_cost_table(n, expected):
    assert dollars(n) == Decimal(expected)


def test_cost_exact_before_rounding():
    assert Decimal(4188) * Decimal("0.0235") == Decimal("98.4180")
    assert Decimal(524288) * Decimal("0.0235") == Decimal("12320.7680")


def test_half_up_rounding():
    assert dollars(1, "0.005") == Decimal("0.01")
    assert dollars(1, "0.015") == Decimal("0.02")
    with pytest.raises(ValueError):
        dollars(-1)


@pytest.mark.parametrize("num, den, expected", [(4188, 100, "41.9"), (5190, 100, "51.9"), (524288, 4400, "119"), (425984, 4000, "106")])
def test_reduction_ratios(num, den, expected):
    assert ratio_3sf(num, den) == Decimal(expected)


def test_estimate_cost():
    est = estimate_cost({"active_per_prompt": 4188, "budget_per_prompt": 100, "unique_kept": 4400, "full_dictionary": 524288})
    d = est.to_dict()
    assert d["totals"] == {"active_per_prompt": "98.42", "budget_per_prompt": "2.35", "unique_kept": "103.40", "full_dictionary": "12320.77"}
    assert d["ratios"] == {"prompt_level": "41.9", "global": "119"}
    assert estimate_cost({"unique_kept": 0}).totals["unique_kept"] == Decimal("0.00")


@settings(max_examples=200)
@given(st.integers(0, 10**7))
def test_cost_matches_integer_oracle(n):
    # cents = round_half_up(n * 235 / 100); work entirely in integers
    tenth_mills = n * 235
    cents, rem = divmod(tenth_mills, 100)
    cents += rem >= 50
    assert dollars(n) == Decimal(cents) / 100
