import itertools
import json
import math
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pieprune.attribution import UniqueFeatureSet
from pieprune.interpret import (
    ClientError,
    ExemplarSet,
    FeatureDescription,
    HttpAuditor,
    HttpExplainer,
    InterpretConfig,
    StubAuditor,
    StubExplainer,
    UndefinedMetric,
    auc,
    average_precision,
    extract_exemplars,
    gini,
    high_activation_labels,
    make_corpus,
    run_interpretation,
    score_clarity,
    score_purity,
    score_responsiveness,
)
from helpers import TOKEN_X as X, brute_ap, token_feature_model


@pytest.fixture(scope="module")
def token_model():
    return token_feature_model()


# -- exemplars ---------------------------------------------------------------


def test_three_sequence_corpus(token_model):
    corpus = [[1, X, 2], [X, X, 3], [0, 1, 2, X]]
    ex = extract_exemplars(token_model, corpus, (0, 0), limit=40)
    assert len(ex.exemplars) == 3
    peaks = [e.max_activation for e in ex.exemplars]
    assert peaks == sorted(peaks, reverse=True)


def test_feature_reads_only_token_x(default_model, token_model):
    corpus = make_corpus(8, 30, 8, seed=1)
    ex = extract_exemplars(token_model, corpus, (0, 0))
    assert ex.exemplars and set(ex.highlighted_tokens()) == {X}


def test_threshold_one_highlights_only_peak(default_model):
    corpus = make_corpus(32, 20, 10, seed=2)
    feature = (1, int(np.argmax(default_model.encoders[1].sum(axis=1))))
    for feat in [feature, (0, 3), (2, 7)]:
        ex = extract_exemplars(default_model, corpus, feat, threshold=1.0)
        for e in ex.exemplars:
            acts = np.array(e.activations)
            assert e.highlighted == [int(t) for t in np.flatnonzero(acts == acts.max())]


def test_dead_feature_gives_empty_set(token_model):
    ex = extract_exemplars(token_model, [[1, 2, 3]], (0, 1))
    assert ex.empty


def test_exemplar_limit(token_model):
    corpus = [[X, t] for t in range(8)] * 10
    assert len(extract_exemplars(token_model, corpus, (0, 0), limit=40).exemplars) == 40


# -- closed forms ------------------------------------------------------------


def _pairwise_auc(pos, neg):
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg) / (len(pos) * len(neg))


def test_auc_hand_example():
    assert auc([3, 1], [2, 0]) == 0.75
    assert gini([3, 1], [2, 0]) == 0.5


def test_gini_anchors():
    assert gini([5, 6, 7], [1, 2]) == 1.0
    assert gini([1, 2, 3], [1, 2, 3]) == 0.0
    assert gini([2], [1, 3]) == 0.0
    with pytest.raises(UndefinedMetric):
        gini([], [1])


@settings(max_examples=300)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=12), st.lists(st.integers(-5, 5), min_size=1, max_size=12))
def test_auc_matches_pair_enumeration(pos, neg):
    assert auc(pos, neg) == pytest.approx(_pairwise_auc(pos, neg), abs=1e-12)


def test_clarity_on_constructed_model(token_model):
    pos = [[X, 1, 2], [3, X], [X]]
    ctrl = [[1, 2, 3], [4, 6], [7]]
    assert score_clarity(token_model, (0, 0), pos, ctrl) == 1.0
    assert score_clarity(token_model, (0, 0), pos, pos) == 0.0
    # clipped at 0 when controls activate more
    assert score_clarity(token_model, (0, 0), ctrl, pos) == 0.0


def test_responsiveness_on_constructed_model(token_model):
    rated = [([X, 1], True), ([X, 2], True), ([1, 2], False), ([3, 4], False)]
    assert score_responsiveness(token_model, (0, 0), rated) == 1.0
    same = [([X, 1], True), ([X, 1], False)]
    assert score_responsiveness(token_model, (0, 0), same) == 0.0


def test_ap_hand_examples():
    assert average_precision([1, 0, 1, 0], [4, 3, 2, 1]) == pytest.approx((1 + 2 / 3) / 2)
    for n in range(1, 9):
        labels = [0] * (n - 1) + [1]
        assert average_precision(labels, list(range(n, 0, -1))) == pytest.approx(1 / n)
    with pytest.raises(UndefinedMetric):
        average_precision([0, 0], [1, 2])


def test_ap_exhaustive_small_n():
    rng = np.random.default_rng(0)
    checked = 0
    for n in range(1, 9):
        for labels in itertools.product([0, 1], repeat=n):
            if not any(labels):
                continue
            for relevance in (rng.permutation(n).tolist(), rng.integers(0, 3, n).tolist()):
                assert average_precision(labels, relevance) == pytest.approx(brute_ap(labels, relevance), abs=1e-12)
                checked += 1
    assert checked == 2 * sum(2**n - 1 for n in range(1, 9))


def test_purity_identity_ordering_is_one():
    acts = [9, 7, 5, 3, 2, 1, 0.5, 0.1]
    assert score_purity(acts, acts) == 1.0
    assert high_activation_labels(acts).tolist() == [True, True] + [False] * 6


def test_high_activation_labels_ties_and_minimum():
    assert high_activation_labels([3, 3, 3, 1]).tolist() == [True, True, True, False]
    assert not high_activation_labels([2, 2, 2, 2]).any()
    with pytest.raises(UndefinedMetric):
        score_purity([2, 2, 2, 2], [1, 2, 3, 4])


_TRANSFORMS = [lambda a: 3 * a + 1, lambda a: a**3, lambda a: np.exp(a / 10), lambda a: np.arctan(a) * 100]


@settings(max_examples=500, deadline=None)
@given(
    st.lists(st.integers(-20, 20), min_size=2, max_size=20),
    st.lists(st.integers(-20, 20), min_size=2, max_size=20),
    st.integers(0, len(_TRANSFORMS) - 1),
    st.data(),
)
def test_metrics_rank_invariant(a, b, which, data):
    f = _TRANSFORMS[which]
    a_, b_ = np.array(a, float), np.array(b, float)
    assert gini(f(a_), f(b_)) == pytest.approx(gini(a_, b_), abs=1e-12)
    rel = data.draw(st.lists(st.integers(0, 5), min_size=len(a), max_size=len(a)))
    labels = high_activation_labels(a_)
    assert (labels == high_activation_labels(f(a_))).all()
    if labels.any():
        assert score_purity(f(a_), rel) == score_purity(a_, rel)


# -- clients -----------------------------------------------------------------


def test_stub_clients_roundtrip():
    ex = ExemplarSet((0, 0), [], 0.65)
    d = StubExplainer().explain(ex)
    assert d.text == "no activating exemplars"
    desc = FeatureDescription((0, 0), "fires on tokens 5, 2", "stub")
    aud = StubAuditor(8, seq_len=6)
    pos, ctrl = aud.synthesize(desc, 4, seed=0)
    assert all({5, 2} <= set(s) for s in pos) and all(not {5, 2} & set(s) for s in ctrl)
    assert aud.rate(desc, [[5, 5, 2], [1, 3]]) == [3.0, 0.0]
    with pytest.raises(ClientError):
        FeatureDescription((0, 0), "  ", "stub")


class _Handler(BaseHTTPRequestHandler):
    fail_first = 0
    requests: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).requests.append(body)
        if type(self).fail_first > 0:
            type(self).fail_first -= 1
            self.send_response(503)
            self.end_headers()
            return
        if "exemplars" in body:
            out = {"description": f"fires on tokens {X}"}
        elif body["op"] == "synthesize":
            out = {"positives": [[X, 1]] * body["n"], "controls": [[1, 2]] * body["n"]}
        else:
            out = {"relevance": [float(X in e) for e in body["examples"]]}
        data = json.dumps(out).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.fail_first = 0
    _Handler.requests = []
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield f"http://127.0.0.1:{srv.server_port}/", _Handler
    srv.shutdown()


def test_http_clients_schema(server, token_model):
    url, handler = server
    ex = extract_exemplars(token_model, [[X, 1], [2, X]], (0, 0))
    d = HttpExplainer(url, backoff=0).explain(ex)
    assert d.text == f"fires on tokens {X}"
    req = handler.requests[0]
    assert req["feature"] == [0, 0] and req["threshold"] == 0.65 and {"tokens", "activations"} <= set(req["exemplars"][0])
    aud = HttpAuditor(url, backoff=0)
    pos, ctrl = aud.synthesize(d, 3, 0)
    assert pos == [[X, 1]] * 3 and ctrl == [[1, 2]] * 3
    assert aud.rate(d, [[X], [1]]) == [1.0, 0.0]
    assert handler.requests[-1] == {"op": "rate", "description": d.text, "examples": [[X], [1]]}


def test_http_retry_then_success(server, token_model):
    url, handler = server
    handler.fail_first = 2
    d = HttpExplainer(url, backoff=0).explain(ExemplarSet((0, 0), []))
    assert d.text and len(handler.requests) == 3


def test_http_gives_up_after_attempts(server):
    url, handler = server
    handler.fail_first = 10
    with pytest.raises(ClientError):
        HttpExplainer(url, attempts=3, backoff=0).explain(ExemplarSet((0, 0), []))
    assert len(handler.requests) == 3


# -- pipeline ----------------------------------------------------------------


def _union(*feats):
    return UniqueFeatureSet(Counter({f: 1 for f in feats}))


def test_run_interpretation_deterministic(default_model):
    corpus = make_corpus(32, 80, 10, seed=0)
    feats = _union((0, 1), (1, 4), (2, 9), (3, 2))
    cfg = InterpretConfig(n_eval=60)
    r1 = run_interpretation(default_model, feats, corpus, StubExplainer(), StubAuditor(32), cfg)
    r2 = run_interpretation(default_model, feats, corpus, StubExplainer(), StubAuditor(32), cfg)
    assert [f.to_record() for f in r1.features] == [f.to_record() for f in r2.features]
    assert r1.n_features == 4 and r1.client_calls == 4 * (1 + InterpretConfig.auditor_calls)
    assert all(f.n_eval == 60 for f in r1.features)


def test_run_interpretation_constructed_feature_is_clean(token_model):
    corpus = make_corpus(8, 100, 8, seed=3)
    rep = run_interpretation(token_model, _union((0, 0)), corpus, StubExplainer(), StubAuditor(8, 8), InterpretConfig(n_eval=100))
    f = rep.features[0]
    assert f.description == f"fires on tokens {X}"
    assert f.clarity == 1.0 and f.responsiveness == 1.0 and f.purity == 1.0


def test_empty_union_makes_no_calls(default_model):
    rep = run_interpretation(default_model, UniqueFeatureSet(), [[1, 2]], StubExplainer(), StubAuditor(32))
    assert rep.features == [] and rep.client_calls == 0


def test_failure_injection_continues(default_model):
    corpus = make_corpus(32, 40, 10, seed=0)
    feats = _union((0, 1), (1, 4), (2, 9))
    rep = run_interpretation(default_model, feats, corpus, StubExplainer(fail_on=[(1, 4)]), StubAuditor(32), InterpretConfig(n_eval=40))
    bad = next(f for f in rep.features if f.feature == (1, 4))
    assert bad.description is None and any("explainer" in m for m in bad.failures)
    assert rep.client_calls == 1 + 2 * 3
    good = [f for f in rep.features if f.feature != (1, 4)]
    assert all(f.description for f in good)
    agg = rep.aggregates()
    assert all(agg[m]["n"] <= 2 for m in ("clarity", "purity", "responsiveness"))


def test_feature_report_record_keys(default_model):
    rep = run_interpretation(default_model, _union((0, 1)), make_corpus(32, 10, 6, 0), StubExplainer(), StubAuditor(32))
    rec = rep.features[0].to_record()
    assert {"feature", "description", "clarity", "purity", "responsiveness", "n_eval", "failures"} <= set(rec)
    json.dumps(rec)
    assert rec["n_eval"] == 10
    assert rec["clarity"] is None or math.isfinite(rec["clarity"])
