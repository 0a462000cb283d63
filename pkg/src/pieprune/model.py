"""Desk-scale subject model with a cross-layer transcoder (CLT) replacement.

The residual stream at position ``t`` starts as ``token_embedding + positional``.
Each layer ``l`` reads its residual (optionally mixed across positions by a
fixed, input-independent attention pattern) through an encoder, producing
sparse feature activations ``a[l, t, f]``.  Feature ``f`` of layer ``l`` writes
``a * D[l, s, f]`` into the residual after layer ``s`` for every ``s >= l``.

Receiver sites are indexed ``s = 0 .. L-1``; site ``s`` is the residual stream
right after layer ``s`` has written, so site ``L-1`` is the final
pre-unembedding stream.  Attention only feeds the encoders; it never writes
into the residual, which keeps the write decomposition exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

ACTIVATIONS = ("relu", "jumprelu", "identity")
ATTENTION_KINDS = ("none", "single_head")
ERROR_MODES = ("synthetic_exact", "frozen_error")
METRIC_KINDS = ("logit_difference", "negative_kl")


class ConfigError(ValueError):
    """Invalid model or pipeline configuration."""


class ShapeError(ValueError):
    """Token sequences and reference traces do not line up."""


class MetricArgumentError(ValueError):
    """A metric was requested without the tokens or reference it needs."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    vocab_size: int = 32
    n_features: int = 64
    activation: str = "relu"
    jumprelu_threshold: float = 0.0
    attention: str = "single_head"
    error_mode: str = "synthetic_exact"
    seed: int = 0
    n_ctx: int = 32
    # fraction of (position, feature) pairs that fire on random token streams
    density: float = 0.05
    # fraction of layer-0 features that detect a single token
    detector_fraction: float = 0.5
    detector_gain: float = 10.0
    unembed_tie: float = 4.0
    write_scale: float = 0.5
    attn_sharpness: float = 0.3

    def validate(self) -> None:
        if self.n_layers < 2:
            raise ConfigError(f"n_layers must be >= 2, got {self.n_layers}")
        if self.d_model < 2:
            raise ConfigError(f"d_model must be >= 2, got {self.d_model}")
        if self.n_features < 1:
            raise ConfigError(f"n_features must be >= 1, got {self.n_features}")
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.n_ctx < 1:
            raise ConfigError(f"n_ctx must be >= 1, got {self.n_ctx}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.jumprelu_threshold < 0:
            raise ConfigError("jumprelu_threshold must be >= 0")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.error_mode not in ERROR_MODES:
            raise ConfigError(f"error_mode must be one of {ERROR_MODES}, got {self.error_mode!r}")
        if not 0.0 < self.density < 1.0:
            raise ConfigError("density must lie in (0, 1)")
        if not 0.0 <= self.detector_fraction <= 1.0:
            raise ConfigError("detector_fraction must lie in [0, 1]")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


class Occurrence(NamedTuple):
    """One feature at one token position: the unit of pruning."""

    layer: int
    feature: int
    position: int


class PatchAction(str, Enum):
    FREEZE_TO_CORRUPTED = "freeze_to_corrupted"
    FREEZE_TO_CLEAN = "freeze_to_clean"
    ZERO = "zero"
    AMPLIFY = "amplify"


@dataclass(frozen=True)
class Patch:
    action: PatchAction
    scale: float = 1.0


# A PatchSpec maps each occurrence to at most one action (dict keys are unique).
PatchSpec = Mapping[Occurrence, Patch]


@dataclass
class ReplacementModel:
    config: ModelConfig
    embedding: np.ndarray  # (vocab, d)
    positional: np.ndarray  # (n_ctx, d)
    unembedding: np.ndarray  # (d, vocab)
    encoders: np.ndarray  # (L, F, d)
    biases: np.ndarray  # (L, F)
    decoders: np.ndarray  # (L_src, L_site, F, d); zero where site < src
    attn_scores: np.ndarray | None = None  # (L, n_ctx, n_ctx) pre-softmax, causal-masked later
    attn_ov: np.ndarray | None = None  # (L, d, d)
    # frozen_error mode: the subject adds a small dense tanh residue per layer
    residue_in: np.ndarray | None = None  # (L, d, h)
    residue_out: np.ndarray | None = None  # (L, h, d)

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def n_features(self) -> int:
        return self.config.n_features

    def decoder_pairs(self) -> list[tuple[int, int]]:
        """(source layer, receiver site) pairs that carry a decoder."""
        L = self.n_layers
        return [(l, s) for l in range(L) for s in range(l, L)]

    def attention_pattern(self, layer: int, T: int) -> np.ndarray:
        scores = self.attn_scores[layer, :T, :T]
        mask = np.tril(np.ones((T, T), dtype=bool))
        scores = np.where(mask, scores, -np.inf)
        scores = scores - scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        return w / w.sum(axis=1, keepdims=True)

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for arr in _weight_arrays(self).values():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:12]


@dataclass
class RunTrace:
    """Everything one forward pass produced.

    ``residuals[s]`` is site ``s`` (the stream after layer ``s`` wrote);
    ``stream_in[l]`` is the residual read by layer ``l`` (``stream_in[0]`` is
    the embedding path).
    """

    tokens: np.ndarray
    stream_in: np.ndarray  # (L, T, d)
    enc_inputs: np.ndarray  # (L, T, d)
    pre_acts: np.ndarray  # (L, T, F)
    acts: np.ndarray  # (L, T, F)
    writes: np.ndarray  # (L, T, d) total write into each site
    residuals: np.ndarray  # (L, T, d)
    errors: np.ndarray  # (L, T, d)
    logits: np.ndarray  # (T, vocab)
    frozen: np.ndarray  # (L, T, F) bool, occurrences held fixed by a patch
    prompt_id: str = ""

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def last_probs(self) -> np.ndarray:
        return softmax(self.logits[-1])

    @property
    def embedding_path(self) -> np.ndarray:
        return self.stream_in[0]


@dataclass(frozen=True)
class Metric:
    kind: str = "logit_difference"
    target: int | None = None
    distractor: int | None = None
    reference: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in METRIC_KINDS:
            raise MetricArgumentError(f"unknown metric kind {self.kind!r}")
        if self.kind == "logit_difference" and (self.target is None or self.distractor is None):
            raise MetricArgumentError("logit_difference needs target and distractor tokens")
        if self.kind == "negative_kl" and self.reference is None:
            raise MetricArgumentError("negative_kl needs a reference distribution")

    def scaled(self, factor: float) -> "ScaledMetric":
        return ScaledMetric(self, factor)

    def value(self, last_logits: np.ndarray) -> float:
        if self.kind == "logit_difference":
            return float(last_logits[self.target] - last_logits[self.distractor])
        return -kl_divergence(self.reference, softmax(last_logits))

    def grad(self, last_logits: np.ndarray) -> np.ndarray:
        """d(metric)/d(last-position logits)."""
        g = np.zeros_like(last_logits)
        if self.kind == "logit_difference":
            g[self.target] += 1.0
            g[self.distractor] -= 1.0
            return g
        # -KL(ref || softmax(z)) has gradient ref - softmax(z)
        return self.reference - softmax(last_logits)


@dataclass(frozen=True)
class ScaledMetric:
    base: Metric
    factor: float

    @property
    def kind(self) -> str:
        return self.base.kind

    def value(self, last_logits: np.ndarray) -> float:
        return self.factor * self.base.value(last_logits)

    def grad(self, last_logits: np.ndarray) -> np.ndarray:
        return self.factor * self.base.grad(last_logits)


@dataclass
class GradientCache:
    """d(metric)/d(site residual), shape (L, T, d)."""

    site_grads: np.ndarray
    metric_kind: str
    run: str = "clean"

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.site_grads)):
            raise FloatingPointError("non-finite gradient entries")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats; terms with p == 0 contribute nothing."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    val = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
    return max(val, 0.0)


def _activate(pre: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if cfg.activation == "identity":
        return pre.copy()
    if cfg.activation == "relu":
        return np.maximum(pre, 0.0)
    return np.where(pre > cfg.jumprelu_threshold, pre, 0.0)


def _activation_slope(pre: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if cfg.activation == "identity":
        return np.ones_like(pre)
    if cfg.activation == "relu":
        return (pre > 0).astype(float)
    return (pre > cfg.jumprelu_threshold).astype(float)


# ---------------------------------------------------------------------------
# construction


def build_model(config: ModelConfig) -> ReplacementModel:
    """Draw a synthetic CLT replacement model deterministically from ``config.seed``.

    Layer 0 contains token-detector features whose encoders read one token's
    embedding (through the attention mix) and whose decoders write that same
    direction back; the unembedding is negatively tied to the embedding, so a
    token repeated in context is suppressed more strongly than one seen once.
    Biases are calibrated on random token streams so that each feature fires on
    roughly ``config.density`` of positions.
    """
    config.validate()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    L, d, F, V = cfg.n_layers, cfg.d_model, cfg.n_features, cfg.vocab_size

    embedding = rng.standard_normal((V, d))
    embedding /= np.linalg.norm(embedding, axis=1, keepdims=True)
    positional = 0.1 * rng.standard_normal((cfg.n_ctx, d)) / np.sqrt(d)

    encoders = rng.standard_normal((L, F, d))
    encoders /= np.linalg.norm(encoders, axis=2, keepdims=True)
    decoders = np.zeros((L, L, F, d))
    for l in range(L):
        n_sites = L - l
        for s in range(l, L):
            decoders[l, s] = cfg.write_scale * rng.standard_normal((F, d)) / np.sqrt(d * n_sites)

    n_det = min(int(round(cfg.detector_fraction * F)), F)
    det_tokens = rng.permutation(V)[: min(n_det, V)]
    for j, tok in enumerate(det_tokens):
        encoders[0, j] = embedding[tok]
        decoders[0, :, j] = 0.0
        decoders[0, 0, j] = cfg.detector_gain * embedding[tok]

    unembedding = -cfg.unembed_tie * embedding.T + rng.standard_normal((d, V)) / np.sqrt(d)

    attn_scores = attn_ov = None
    if cfg.attention == "single_head":
        q = rng.standard_normal((L, cfg.n_ctx, d)) * cfg.attn_sharpness
        k = rng.standard_normal((L, cfg.n_ctx, d)) * cfg.attn_sharpness
        attn_scores = np.einsum("lid,ljd->lij", q, k) / np.sqrt(d)
        attn_ov = np.stack([np.eye(d) for _ in range(L)])
        attn_ov[1:] += 0.2 * rng.standard_normal((L - 1, d, d)) / np.sqrt(d)

    residue_in = residue_out = None
    if cfg.error_mode == "frozen_error":
        h = max(2, d // 2)
        residue_in = rng.standard_normal((L, d, h)) / np.sqrt(d)
        residue_out = 0.1 * rng.standard_normal((L, h, d)) / np.sqrt(h)

    model = ReplacementModel(
        config=cfg,
        embedding=embedding,
        positional=positional,
        unembedding=unembedding,
        encoders=encoders,
        biases=np.zeros((L, F)),
        decoders=decoders,
        attn_scores=attn_scores,
        attn_ov=attn_ov,
        residue_in=residue_in,
        residue_out=residue_out,
    )
    _calibrate_biases(model, rng)
    return model


def _calibrate_biases(model: ReplacementModel, rng: np.random.Generator, n_seqs: int = 48) -> None:
    cfg = model.config
    T = min(cfg.n_ctx, 12)
    toks = rng.integers(0, cfg.vocab_size, size=(n_seqs, T))
    q = 100.0 * (1.0 - cfg.density)
    for l in range(cfg.n_layers):
        pres = []
        for seq in toks:
            tr = _run(model, seq, stop_after_layer=l, collect_pre=True)
            pres.append(tr)
        pre = np.concatenate(pres, axis=0)  # (n*T, F)
        model.biases[l] = -np.percentile(pre, q, axis=0)


def model_from_weights(config: ModelConfig, **weights: np.ndarray) -> ReplacementModel:
    """Assemble a model from explicit arrays (fixtures, deserialization)."""
    config.validate()
    L, d, F, V = config.n_layers, config.d_model, config.n_features, config.vocab_size
    expected = {
        "embedding": (V, d),
        "positional": (config.n_ctx, d),
        "unembedding": (d, V),
        "encoders": (L, F, d),
        "biases": (L, F),
        "decoders": (L, L, F, d),
    }
    arrays = {}
    for name, shape in expected.items():
        if name not in weights:
            if name == "positional":
                arrays[name] = np.zeros(shape)
                continue
            raise ConfigError(f"missing weight array {name!r}")
        arr = np.asarray(weights[name], dtype=float)
        if arr.shape != shape:
            raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
        arrays[name] = arr.copy()
    for l in range(L):
        if np.any(arrays["decoders"][l, :l]):
            raise ConfigError(f"decoders from layer {l} may not write to earlier sites")
    optional = {}
    for name in ("attn_scores", "attn_ov", "residue_in", "residue_out"):
        if weights.get(name) is not None:
            optional[name] = np.asarray(weights[name], dtype=float).copy()
    if config.attention == "single_head" and "attn_scores" not in optional:
        raise ConfigError("single_head attention needs attn_scores and attn_ov")
    if config.error_mode == "frozen_error" and "residue_in" not in optional:
        raise ConfigError("frozen_error mode needs residue_in and residue_out")
    return ReplacementModel(config=config, **arrays, **optional)


# ---------------------------------------------------------------------------
# forward


@dataclass
class _Override:
    mask: np.ndarray  # (L, T, F) bool: value held fixed
    values: np.ndarray  # (L, T, F)
    scale: np.ndarray  # (L, T, F) multiplier on freely computed values


def compile_patch(
    model: ReplacementModel,
    T: int,
    patch: PatchSpec | None,
    reference: "RunTrace | Mapping[str, RunTrace] | None" = None,
) -> _Override | None:
    if not patch:
        return None
    L, F = model.n_layers, model.n_features
    mask = np.zeros((L, T, F), dtype=bool)
    values = np.zeros((L, T, F))
    scale = np.ones((L, T, F))
    for occ, p in patch.items():
        l, f, t = occ
        if not (0 <= l < L and 0 <= f < F and 0 <= t < T):
            raise ShapeError(f"occurrence {tuple(occ)} outside model/prompt bounds")
        action = PatchAction(p.action)
        if action is PatchAction.ZERO:
            mask[l, t, f] = True
            values[l, t, f] = 0.0
        elif action is PatchAction.AMPLIFY:
            scale[l, t, f] = p.scale
        else:
            ref = _pick_reference(reference, action)
            if ref.acts.shape[1] != T:
                raise ShapeError(f"reference trace has length {ref.acts.shape[1]}, tokens have {T}")
            mask[l, t, f] = True
            values[l, t, f] = ref.acts[l, t, f]
    return _Override(mask, values, scale)


def _pick_reference(reference, action: PatchAction) -> RunTrace:
    if reference is None:
        raise ShapeError(f"{action.value} needs a reference trace")
    if isinstance(reference, RunTrace):
        return reference
    key = "corrupted" if action is PatchAction.FREEZE_TO_CORRUPTED else "clean"
    if key not in reference:
        raise ShapeError(f"{action.value} needs a {key!r} reference trace")
    return reference[key]


def frozen_override(reference: RunTrace, mask: np.ndarray) -> _Override:
    """Hold every occurrence in ``mask`` at the reference run's activation."""
    mask = np.asarray(mask, dtype=bool)
    return _Override(mask, np.where(mask, reference.acts, 0.0), np.ones(mask.shape))


def forward(
    model: ReplacementModel,
    tokens: Sequence[int],
    patch: PatchSpec | None = None,
    reference: "RunTrace | Mapping[str, RunTrace] | None" = None,
    errors: np.ndarray | None = None,
    prompt_id: str = "",
) -> RunTrace:
    """Run the replacement model, optionally with feature patches.

    Patched occurrences hold their patched value for every downstream write;
    all other activations are recomputed from the (possibly altered) stream.
    In ``frozen_error`` mode ``errors`` are added to each site unconditionally;
    use :func:`subject_forward` to record them from a reference run.
    """
    tokens = np.asarray(tokens, dtype=int)
    override = compile_patch(model, len(tokens), patch, reference)
    return _run(model, tokens, override=override, errors=errors, prompt_id=prompt_id)


def subject_forward(model: ReplacementModel, tokens: Sequence[int], prompt_id: str = "") -> RunTrace:
    """Run the subject model.

    In ``synthetic_exact`` mode the subject is the replacement model itself.  In
    ``frozen_error`` mode the subject adds a dense residue the dictionary does
    not capture; the returned trace's ``errors`` hold that residue per site, so
    passing them to :func:`forward` reproduces the subject run exactly.
    """
    tokens = np.asarray(tokens, dtype=int)
    return _run(model, tokens, subject=True, prompt_id=prompt_id)


def _run(
    model: ReplacementModel,
    tokens: np.ndarray,
    override: _Override | None = None,
    errors: np.ndarray | None = None,
    site_delta: np.ndarray | None = None,
    subject: bool = False,
    stop_after_layer: int | None = None,
    collect_pre: bool = False,
    prompt_id: str = "",
):
    cfg = model.config
    tokens = np.asarray(tokens, dtype=int)
    T = len(tokens)
    if T == 0 or T > cfg.n_ctx:
        raise ShapeError(f"sequence length {T} outside [1, {cfg.n_ctx}]")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ShapeError("token id outside vocabulary")
    L, F, d = cfg.n_layers, cfg.n_features, cfg.d_model
    use_errors = cfg.error_mode == "frozen_error"
    if errors is not None and errors.shape != (L, T, d):
        raise ShapeError(f"errors shape {errors.shape}, expected {(L, T, d)}")

    stream_in = np.zeros((L, T, d))
    enc_inputs = np.zeros((L, T, d))
    pre_acts = np.zeros((L, T, F))
    acts = np.zeros((L, T, F))
    writes = np.zeros((L, T, d))
    residuals = np.zeros((L, T, d))
    err = np.zeros((L, T, d))
    frozen = np.zeros((L, T, F), dtype=bool) if override is None else override.mask

    r = model.embedding[tokens] + model.positional[:T]
    for l in range(L):
        stream_in[l] = r
        x = r
        if model.attn_scores is not None:
            A = model.attention_pattern(l, T)
            x = r + A @ r @ model.attn_ov[l]
        enc_inputs[l] = x
        pre = x @ model.encoders[l].T + model.biases[l]
        pre_acts[l] = pre
        if stop_after_layer is not None and l == stop_after_layer and collect_pre:
            return pre
        a = _activate(pre, cfg)
        if override is not None:
            a = np.where(override.mask[l], override.values[l], a * override.scale[l])
        acts[l] = a
        w = np.einsum("ktf,kfd->td", acts[: l + 1], model.decoders[: l + 1, l])
        writes[l] = w
        if use_errors:
            if subject:
                err[l] = np.tanh(x @ model.residue_in[l]) @ model.residue_out[l]
            elif errors is not None:
                err[l] = errors[l]
        r = r + w + err[l]
        if site_delta is not None:
            r = r + site_delta[l]
        residuals[l] = r
    logits = r @ model.unembedding
    return RunTrace(
        tokens=tokens,
        stream_in=stream_in,
        enc_inputs=enc_inputs,
        pre_acts=pre_acts,
        acts=acts,
        writes=writes,
        residuals=residuals,
        errors=err,
        logits=logits,
        frozen=frozen.copy(),
        prompt_id=prompt_id,
    )


def forward_with_site_delta(
    model: ReplacementModel, trace: RunTrace, site_delta: np.ndarray
) -> RunTrace:
    """Re-run ``trace`` with an additive perturbation at every site.

    Frozen occurrences stay at the values they held in ``trace``.  Used by
    finite-difference checks of :func:`backward`.
    """
    override = _Override(trace.frozen, np.where(trace.frozen, trace.acts, 0.0), np.ones(trace.acts.shape))
    errors = trace.errors if model.config.error_mode == "frozen_error" else None
    return _run(model, trace.tokens, override=override, errors=errors, site_delta=site_delta)


# ---------------------------------------------------------------------------
# backward


def backward(model: ReplacementModel, trace: RunTrace, metric: Metric, run: str = "clean") -> GradientCache:
    """Exact gradient of ``metric`` with respect to every site residual.

    Gradients are total derivatives: perturbing site ``s`` at position ``t``
    flows through the residual chain and through every later encoder that is
    not frozen in ``trace``.
    """
    site_grads = _backprop(model, trace, metric.grad(trace.logits[-1]))
    return GradientCache(site_grads=site_grads, metric_kind=metric.kind, run=run)


def _backprop(model: ReplacementModel, trace: RunTrace, dlogits_last: np.ndarray, eps: float | None = None) -> np.ndarray:
    """Shared reverse pass.

    With ``eps=None`` this is plain backpropagation.  With ``eps > 0`` every
    linear node multiplies its incoming coefficient by ``z / (z + eps*sign(z))``,
    which is the coefficient form of the LRP epsilon rule.
    """
    cfg = model.config
    L, T, d = cfg.n_layers, len(trace.tokens), cfg.d_model

    def damp(z: np.ndarray) -> np.ndarray:
        if eps is None:
            return 1.0
        sgn = np.where(z >= 0, 1.0, -1.0)
        return z / (z + eps * sgn)

    site_grads = np.zeros((L, T, d))
    g = np.zeros((T, d))
    z_logits = trace.logits[-1]
    g[-1] = model.unembedding @ (dlogits_last * damp(z_logits))

    # coefficient arriving at each layer's activations from later sites
    g_acts = np.zeros((L, T, model.n_features))
    slope = _activation_slope(trace.pre_acts, cfg) * (~trace.frozen)
    for s in range(L - 1, -1, -1):
        site_grads[s] = g
        g_node = g * damp(trace.residuals[s])
        g_write = g_node * damp(trace.writes[s])
        for l in range(s + 1):
            g_acts[l] += g_write @ model.decoders[l, s].T
        # layer s's own features have now received every write they make
        g_pre = g_acts[s] * slope[s]
        g_x = (g_pre * damp(trace.pre_acts[s])) @ model.encoders[s]
        g_in = g_node
        if model.attn_scores is not None:
            A = model.attention_pattern(s, T)
            g_xn = g_x * damp(trace.enc_inputs[s])
            mixed = A @ trace.stream_in[s] @ model.attn_ov[s]
            g_in = g_in + g_xn + A.T @ (g_xn * damp(mixed)) @ model.attn_ov[s].T
        else:
            g_in = g_in + g_x
        g = g_in
    return site_grads


def relevance_coefficients(model: ReplacementModel, trace: RunTrace, metric: Metric, eps: float = 1e-6) -> np.ndarray:
    """Per-site LRP epsilon-rule coefficients, shape (L, T, d)."""
    if eps <= 0:
        raise ValueError("epsilon must be > 0")
    return _backprop(model, trace, metric.grad(trace.logits[-1]), eps=eps)


def lrp_epsilon(x: np.ndarray, weight: np.ndarray, relevance_out: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Redistribute output relevance of ``z = weight @ x`` onto the inputs."""
    if eps <= 0:
        raise ValueError("epsilon must be > 0")
    z = weight @ x
    sgn = np.where(z >= 0, 1.0, -1.0)
    s = relevance_out / (z + eps * sgn)
    return x * (weight.T @ s)


def write_decomposition(model: ReplacementModel, trace: RunTrace) -> np.ndarray:
    """Rebuild every site from the embedding path, feature writes and errors."""
    L = model.n_layers
    out = np.zeros_like(trace.residuals)
    acc = trace.embedding_path.copy()
    for s in range(L):
        for l in range(s + 1):
            acc = acc + np.einsum("tf,fd->td", trace.acts[l], model.decoders[l, s])
        acc = acc + trace.errors[s]
        out[s] = acc
    return out


# ---------------------------------------------------------------------------
# serialization


def _weight_arrays(model: ReplacementModel) -> dict[str, np.ndarray]:
    out = {
        "embedding": model.embedding,
        "positional": model.positional,
        "unembedding": model.unembedding,
        "encoders": model.encoders,
        "biases": model.biases,
        "decoders": model.decoders,
    }
    for name in ("attn_scores", "attn_ov", "residue_in", "residue_out"):
        arr = getattr(model, name)
        if arr is not None:
            out[name] = arr
    return out


def save_model(model: ReplacementModel, path: str | Path, include_weights: bool = True) -> None:
    """Write config (and by default every weight) to a single JSON file.

    Without weights the file is rebuilt from config and seed on load, which is
    only valid for models produced by :func:`build_model`.
    """
    doc: dict = {"format": "pieprune-model/1", "config": asdict(model.config)}
    if include_weights:
        doc["weights"] = {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in _weight_arrays(model).items()
        }
    Path(path).write_text(json.dumps(doc))


def load_model(path: str | Path) -> ReplacementModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "pieprune-model/1":
        raise ConfigError(f"{path}: not a pieprune model file")
    config = ModelConfig(**doc["config"])
    if "weights" not in doc:
        return build_model(config)
    arrays = {
        name: np.asarray(spec["data"], dtype=float).reshape(spec["shape"])
        for name, spec in doc["weights"].items()
    }
    return model_from_weights(config, **arrays)


def with_config(model: ReplacementModel, **changes) -> ReplacementModel:
    """Copy of ``model`` sharing weights but with a modified config."""
    return replace(model, config=replace(model.config, **changes))
