"""Independent oracles and shared fixtures for the test suite."""

from __future__ import annotations

import time
from contextlib import contextmanager

import numpy as np

from pieprune.attribution import make_metric
from pieprune.model import ModelConfig, Occurrence, backward, forward_with_site_delta, model_from_weights

TOKEN_X = 5

GOLDEN_CFG = {
    "model": {},
    "dataset": {"generator": "ioi_like", "n": 4, "seed": 0},
    "methods": ["fap", "fap_synergy", "random_active"],
    "budgets": [8, 16],
    "interpret": {"corpus_n": 40, "n_eval": 40},
}

SWEEP_CFG = {"preset": "planted_synergy", "preset_n": 8, "budgets": [5], "sweep": {"K": 5, "lambdas": [0, 1, 3], "bps": [20, 25]}}


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def exact_patch_effects(model, runs, metric="logit_difference"):
    """Brute force: freeze each scoreable occurrence to its corrupted value on
    the clean run and re-measure."""
    m = make_metric(metric, runs)
    base = m.value(runs.clean.logits[-1])
    l, t, f = np.nonzero(runs.universe_mask())
    out = {}
    for li, ti, fi in zip(l, t, f):
        mask = np.zeros(runs.clean.acts.shape, bool)
        mask[li, ti, fi] = True
        tr = runs.run_frozen(model, runs.pair.clean, runs.corrupted, mask)
        out[Occurrence(int(li), int(fi), int(ti))] = base - m.value(tr.logits[-1])
    return out


def fd_probes(model, trace, metric, n, rng, step=1e-5):
    """Relative error of analytic site gradients against central differences."""
    grads = backward(model, trace, metric).site_grads
    L, T, d = grads.shape
    errs = []
    for _ in range(n):
        s, t, k = rng.integers(L), rng.integers(T), rng.integers(d)
        delta = np.zeros((L, T, d))
        delta[s, t, k] = step
        up = metric.value(forward_with_site_delta(model, trace, delta).logits[-1])
        down = metric.value(forward_with_site_delta(model, trace, -delta).logits[-1])
        errs.append(float(rel_err((up - down) / (2 * step), grads[s, t, k])))
    return errs


def token_feature_model():
    """Layer-0 feature 0 fires (act = 1) only on TOKEN_X; every other feature is dead."""
    V, d, F = 8, 4, 2
    cfg = ModelConfig(n_layers=2, d_model=d, vocab_size=V, n_features=F, attention="none", n_ctx=16)
    rng = np.random.default_rng(0)
    emb = np.zeros((V, d))
    emb[:, 1:] = rng.standard_normal((V, d - 1))
    emb[TOKEN_X, 0] = 1.0
    enc = np.zeros((2, F, d))
    enc[0, 0, 0] = 1.0
    bias = np.array([[0.0, -5.0], [-5.0, -5.0]])
    return model_from_weights(
        cfg, embedding=emb, unembedding=rng.standard_normal((d, V)), encoders=enc, biases=bias, decoders=np.zeros((2, 2, F, d))
    )


def brute_ap(labels, relevance):
    """Average precision by explicit rank counting (ties keep input order)."""
    n = len(labels)
    order = sorted(range(n), key=lambda i: (-relevance[i], i))
    rank = {i: r + 1 for r, i in enumerate(order)}
    pos = [i for i in range(n) if labels[i]]
    return sum(sum(rank[j] <= rank[i] for j in pos) / rank[i] for i in pos) / len(pos)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    """Record one PASS/FAIL line; measurements go in ``rec["detail"]``."""
    rec = {"detail": ""}
    t0 = time.perf_counter()
    ok = False
    try:
        yield rec
        ok = True
    finally:
        dt = time.perf_counter() - t0
        ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] AC{number:<2d} {title}: {rec['detail']} ({dt:.2f} s)")
