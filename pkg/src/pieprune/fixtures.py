"""Hand-wired models with known interaction structure.

Every fixture uses explicit weights so the expected attribution scores,
synergies and reranking outcomes can be computed by hand.  Residual
dimensions are named channels:

    OUT   read by the target-token unembedding column
    GATE  read by the layer-1 gate features
    KEY   carries the clean key token
    XKEY  carries the corrupted key token (no feature reads it)
    JUNK  written by background features, read by nothing
    rest  filler-token channels
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, Occurrence, ReplacementModel, model_from_weights
from .tasks import PromptPair, TaskDataset

OUT, GATE, KEY, XKEY, JUNK = 0, 1, 2, 3, 4
N_FILLER_DIMS = 5
D_MODEL = 5 + N_FILLER_DIMS
N_FEATURES = 16
N_CTX = 8

# token ids
BOS = 0
XTOK = 1
TARGET = 2
DISTRACTOR = 3
KEY_TOKENS = (4, 5, 6, 7)
KEY_SCALES = (1.0, 1.03, 1.06, 1.1)
FILLERS = tuple(range(8, 16))
VOCAB = 16


@dataclass
class Fixture:
    model: ReplacementModel
    names: dict[str, Occurrence]
    pairs: list[PromptPair] = field(default_factory=list)

    def occ(self, name: str) -> Occurrence:
        return self.names[name]


class _Builder:
    def __init__(self, n_layers: int = 2, activation: str = "relu", seed: int = 0):
        self.cfg = ModelConfig(
            n_layers=n_layers,
            d_model=D_MODEL,
            vocab_size=VOCAB,
            n_features=N_FEATURES,
            activation=activation,
            attention="none",
            seed=seed,
            n_ctx=N_CTX,
        )
        L, F, d = n_layers, N_FEATURES, D_MODEL
        self.enc = np.zeros((L, F, d))
        self.bias = np.full((L, F), -1.0)  # unused slots stay dormant
        self.dec = np.zeros((L, L, F, d))
        self.emb = np.zeros((VOCAB, d))
        self.emb[XTOK, XKEY] = 1.0
        for tok, s in zip(KEY_TOKENS, KEY_SCALES):
            self.emb[tok, KEY] = s
        rng = np.random.default_rng(seed)
        for tok in FILLERS:
            v = rng.standard_normal(N_FILLER_DIMS)
            self.emb[tok, 5:] = v / np.linalg.norm(v)
        self.unemb = np.zeros((d, VOCAB))
        self.unemb[OUT, TARGET] = 1.0
        self.next_slot = [0] * L
        self.names: dict[str, tuple[int, int]] = {}

    def feature(self, name: str, layer: int, reads: dict[int, float], writes: dict[int, float], bias: float = 0.0) -> None:
        f = self.next_slot[layer]
        self.next_slot[layer] += 1
        for ch, w in reads.items():
            self.enc[layer, f, ch] = w
        self.bias[layer, f] = bias
        for ch, w in writes.items():
            self.dec[layer, layer, f, ch] = w
        self.names[name] = (layer, f)

    def background(self, n: int, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for i in range(n):
            v = rng.standard_normal(N_FILLER_DIMS)
            v /= np.linalg.norm(v)
            self.feature(f"bg{i}", 0, {5 + j: v[j] for j in range(N_FILLER_DIMS)}, {JUNK: 0.5}, bias=-0.3)

    def build(self, position: int) -> tuple[ReplacementModel, dict[str, Occurrence]]:
        model = model_from_weights(
            self.cfg,
            embedding=self.emb,
            unembedding=self.unemb,
            encoders=self.enc,
            biases=self.bias,
            decoders=self.dec,
        )
        names = {k: Occurrence(l, f, position) for k, (l, f) in self.names.items()}
        return model, names


def _pair(pid: str, fillers: tuple[int, ...], key: int) -> PromptPair:
    clean = (BOS, *fillers, key)
    corrupted = (BOS, *fillers, XTOK)
    return PromptPair(pid, clean, corrupted, TARGET, DISTRACTOR, "custom")


def disjoint_paths(seed: int = 0) -> Fixture:
    """Two ReLU chains that share nothing until the (linear) unembedding.

    ``a`` reads KEY and writes channel 5; layer-1 ``a2`` reads channel 5 and
    writes OUT.  ``b`` likewise via channel 6 and GATE, and GATE is added to
    the target logit.  Restoring either chain cannot change the other.
    """
    b = _Builder(seed=seed)
    b.emb[:, 5:] = 0.0
    b.feature("a", 0, {KEY: 1.0}, {5: 1.0})
    b.feature("b", 0, {KEY: 1.0}, {6: 1.0})
    b.feature("a2", 1, {5: 1.0}, {OUT: 1.3}, bias=-0.2)
    b.feature("b2", 1, {6: 1.0}, {GATE: 0.7}, bias=-0.1)
    b.unemb[GATE, TARGET] = 1.0
    model, names = b.build(position=1)
    return Fixture(model, names, [PromptPair("disjoint-0", (BOS, KEY_TOKENS[0]), (BOS, XTOK), TARGET, DISTRACTOR)])


def and_gate(n_prompts: int = 32, seed: int = 0, n_background: int = 6) -> Fixture:
    """Saturating AND gate with a weak synergistic partner ``fb``.

    Layer 0 (key position, key scale s):
        c1, c2   act s,    write 1.0 OUT + 0.5 GATE
        fb       act 0.1s, write 2.0 OUT + 5.0 GATE   (FAP 0.2s)
        fx       act 1.6s, write 0.2 OUT              (FAP 0.32s)
        t1..t3   act 2s,   write 0.05 OUT + 0.25 GATE (FAP 0.1s)
    Layer 1 gates read GATE: g1 = relu(x - 0.8) writes +OUT, g2 = relu(x - 1.5)
    writes -OUT.  On the clean prompt x = 3s and both gates fire, so the
    gradient through GATE cancels and FAP sees only the direct OUT writes.
    Restoring ``fb`` next to a core ``c`` lifts x past 0.8, which neither does
    alone: positive synergy that first-order scores miss.

    With K=5 and bp=25 the core is {g1, g2, c1, c2} and the boundary is
    {fx, fb, t1}; at s=1, S'(fb) = 0.16 + 3 * 0.08 = 0.40 beats S'(fx) = 0.256.
    """
    b = _Builder(seed=seed)
    b.feature("c1", 0, {KEY: 1.0}, {OUT: 1.0, GATE: 0.5})
    b.feature("c2", 0, {KEY: 1.0}, {OUT: 1.0, GATE: 0.5})
    b.feature("fb", 0, {KEY: 0.1}, {OUT: 2.0, GATE: 5.0})
    b.feature("fx", 0, {KEY: 1.6}, {OUT: 0.2})
    for i in range(1, 4):
        b.feature(f"t{i}", 0, {KEY: 2.0}, {OUT: 0.05, GATE: 0.25})
    b.background(n_background, seed + 1)
    b.feature("g1", 1, {GATE: 1.0}, {OUT: 1.0}, bias=-0.8)
    b.feature("g2", 1, {GATE: 1.0}, {OUT: -1.0}, bias=-1.5)
    T = 6
    model, names = b.build(position=T - 1)
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_prompts):
        fillers = tuple(int(x) for x in rng.choice(FILLERS, size=T - 2))
        key = KEY_TOKENS[i % len(KEY_TOKENS)]
        pairs.append(_pair(f"planted-{seed}-{i}", fillers, key))
    return Fixture(model, names, pairs)


def duplicate_feature(seed: int = 0) -> Fixture:
    """Two features writing the same GATE direction into a soft clip.

    d2 (act 1) and d1 (act 0.9) both write 1.0 GATE.  Layer 1: g = relu(x)
    writes +OUT, gc = relu(x - 1.5) writes -0.5 OUT, so the response flattens
    above 1.5 and restoring both duplicates recovers less than the sum of
    each alone.  p1 and p2 write OUT directly (1.0 and 0.4).

    FAP ranking: g 1.9, p1 1.0, d2 0.5, d1 0.45, p2 0.4, gc -0.2.  With K=4,
    bp=25 the core is {g, p1, d2} and the boundary {d1, p2}; d1's synergies
    are all <= 0, so the clamp leaves the lambda=0 choice (d1) in place.
    """
    b = _Builder(seed=seed)
    b.feature("d2", 0, {KEY: 1.0}, {GATE: 1.0})
    b.feature("d1", 0, {KEY: 0.9}, {GATE: 1.0})
    b.feature("p1", 0, {KEY: 1.0}, {OUT: 1.0})
    b.feature("p2", 0, {KEY: 0.4}, {OUT: 1.0})
    b.feature("g", 1, {GATE: 1.0}, {OUT: 1.0}, bias=0.0)
    b.feature("gc", 1, {GATE: 1.0}, {OUT: -0.5}, bias=-1.5)
    model, names = b.build(position=1)
    pair = PromptPair("duplicate-0", (BOS, KEY_TOKENS[0]), (BOS, XTOK), TARGET, DISTRACTOR)
    return Fixture(model, names, [pair])


def planted_synergy_dataset(n_prompts: int = 32, seed: int = 0) -> tuple[ReplacementModel, TaskDataset]:
    fx = and_gate(n_prompts, seed)
    return fx.model, TaskDataset(fx.pairs, {"size": VOCAB}, f"and_gate(n={n_prompts}, seed={seed})")
