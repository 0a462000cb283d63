"""Clean/corrupted prompt pairs over a small role-tagged synthetic vocabulary."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TASK_TAGS = ("ioi_like", "docstring_like", "custom")

SPECIAL_TOKENS = ("BOS", "AND", "GAVE", "TO", "DEF", "COMMA", "RPAREN", "DOC", "PARAM")


class GenerationError(ValueError):
    pass


class DatasetParseError(ValueError):
    pass


@dataclass(frozen=True)
class PromptPair:
    id: str
    clean: tuple[int, ...]
    corrupted: tuple[int, ...]
    target: int
    distractor: int
    task: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "clean", tuple(int(x) for x in self.clean))
        object.__setattr__(self, "corrupted", tuple(int(x) for x in self.corrupted))
        if len(self.clean) != len(self.corrupted):
            raise ValueError(f"pair {self.id}: clean and corrupted lengths differ")
        if self.target == self.distractor:
            raise ValueError(f"pair {self.id}: target equals distractor")
        if self.task not in TASK_TAGS:
            raise ValueError(f"pair {self.id}: unknown task tag {self.task!r}")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "clean": list(self.clean),
            "corrupted": list(self.corrupted),
            "target": self.target,
            "distractor": self.distractor,
            "task": self.task,
        }


@dataclass(frozen=True)
class Vocab:
    """Role-tagged integer vocabulary.

    Special tokens take the lowest ids, then the remaining ids are split into
    names (first half) and filler/object words (second half).
    """

    size: int
    special: dict = field(default_factory=dict)
    names: tuple[int, ...] = ()
    fillers: tuple[int, ...] = ()

    @classmethod
    def default(cls, size: int) -> "Vocab":
        n_special = len(SPECIAL_TOKENS)
        if size < n_special + 4:
            raise GenerationError(f"vocabulary of {size} tokens is too small (need >= {n_special + 4})")
        special = {name: i for i, name in enumerate(SPECIAL_TOKENS)}
        rest = list(range(n_special, size))
        half = len(rest) // 2
        return cls(size=size, special=special, names=tuple(rest[:half]), fillers=tuple(rest[half:]))

    def describe(self) -> dict:
        return {"size": self.size, "special": dict(self.special), "names": list(self.names), "fillers": list(self.fillers)}


@dataclass
class TaskDataset:
    pairs: list[PromptPair]
    vocab: dict = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self) -> None:
        seen = set()
        for p in self.pairs:
            if p.id in seen:
                raise DatasetParseError(f"duplicate prompt id {p.id!r}")
            seen.add(p.id)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def by_id(self) -> dict[str, PromptPair]:
        return {p.id: p for p in self.pairs}


def _vocab(vocab: Vocab | int) -> Vocab:
    return Vocab.default(vocab) if isinstance(vocab, int) else vocab


def generate_ioi_like(n: int, seed: int, vocab: Vocab | int) -> TaskDataset:
    """``BOS A AND B w w B GAVE obj TO`` with answer ``A``.

    The corrupted prompt repeats ``A`` instead of ``B`` at the second subject
    mention, so the indirect object is no longer the name seen once.
    """
    if n < 1:
        raise GenerationError("n must be >= 1")
    v = _vocab(vocab)
    if len(v.names) < 2:
        raise GenerationError("vocabulary has fewer than two name tokens")
    if len(v.fillers) < 1:
        raise GenerationError("vocabulary has no filler tokens")
    rng = np.random.default_rng(seed)
    sp = v.special
    pairs = []
    for i in range(n):
        io, s = (int(x) for x in rng.choice(v.names, size=2, replace=False))
        w1, w2, obj = (int(x) for x in rng.choice(v.fillers, size=3, replace=True))
        clean = (sp["BOS"], io, sp["AND"], s, w1, w2, s, sp["GAVE"], obj, sp["TO"])
        corrupted = (sp["BOS"], io, sp["AND"], s, w1, w2, io, sp["GAVE"], obj, sp["TO"])
        pairs.append(PromptPair(f"ioi-{seed}-{i}", clean, corrupted, io, s, "ioi_like"))
    return TaskDataset(pairs, v.describe(), f"generate_ioi_like(n={n}, seed={seed})")


def generate_docstring_like(n: int, seed: int, vocab: Vocab | int) -> TaskDataset:
    """``DEF a , b , c ) DOC PARAM a PARAM b PARAM`` with answer ``c``.

    The corrupted prompt documents ``a`` and ``c`` instead of ``a`` and ``b``,
    so the next undocumented argument becomes ``b``.
    """
    if n < 1:
        raise GenerationError("n must be >= 1")
    v = _vocab(vocab)
    if len(v.names) < 3:
        raise GenerationError("vocabulary has fewer than three argument-name tokens")
    rng = np.random.default_rng(seed)
    sp = v.special
    pairs = []
    for i in range(n):
        a, b, c = (int(x) for x in rng.choice(v.names, size=3, replace=False))
        head = (sp["DEF"], a, sp["COMMA"], b, sp["COMMA"], c, sp["RPAREN"], sp["DOC"], sp["PARAM"], a, sp["PARAM"])
        clean = head + (b, sp["PARAM"])
        corrupted = head + (c, sp["PARAM"])
        pairs.append(PromptPair(f"doc-{seed}-{i}", clean, corrupted, c, b, "docstring_like"))
    return TaskDataset(pairs, v.describe(), f"generate_docstring_like(n={n}, seed={seed})")


def generate_random_pairs(n: int, seed: int, vocab_size: int, length: int = 10, n_changed: int = 5) -> TaskDataset:
    """Uniform random token sequences; the corrupted copy resamples ``n_changed``
    positions before the last one.  Target and distractor are random distinct ids."""
    if n < 1 or vocab_size < 2 or not 0 < n_changed < length:
        raise GenerationError("need n >= 1, vocab_size >= 2 and 0 < n_changed < length")
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        clean = rng.integers(0, vocab_size, size=length)
        corrupted = clean.copy()
        where = rng.choice(length - 1, size=n_changed, replace=False)
        corrupted[where] = rng.integers(0, vocab_size, size=n_changed)
        target, distractor = (int(x) for x in rng.choice(vocab_size, size=2, replace=False))
        pairs.append(PromptPair(f"rand-{seed}-{i}", tuple(clean), tuple(corrupted), target, distractor, "custom"))
    return TaskDataset(pairs, {"size": vocab_size}, f"generate_random_pairs(n={n}, seed={seed})")


def save_dataset(dataset: TaskDataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        for p in dataset.pairs:
            fh.write(json.dumps(p.to_record()) + "\n")


_FIELDS = ("id", "clean", "corrupted", "target", "distractor", "task")


def load_dataset(path: str | Path) -> TaskDataset:
    """Read a JSON-lines dataset; every malformed record names its id and field."""
    pairs = []
    seen: set[str] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            rid = rec.get("id", f"<line {lineno}>")
            for name in _FIELDS:
                if name not in rec:
                    raise DatasetParseError(f"record {rid!r}: missing field {name!r}")
            for name in ("clean", "corrupted"):
                seq = rec[name]
                if not isinstance(seq, list) or not all(isinstance(x, int) for x in seq):
                    raise DatasetParseError(f"record {rid!r}: field {name!r} must be a list of token ids")
            for name in ("target", "distractor"):
                if not isinstance(rec[name], int):
                    raise DatasetParseError(f"record {rid!r}: field {name!r} must be a token id")
            if len(rec["clean"]) != len(rec["corrupted"]):
                raise DatasetParseError(f"record {rid!r}: field 'corrupted' length differs from 'clean'")
            if rec["target"] == rec["distractor"]:
                raise DatasetParseError(f"record {rid!r}: field 'distractor' equals 'target'")
            if rec["task"] not in TASK_TAGS:
                raise DatasetParseError(f"record {rid!r}: field 'task' has unknown tag {rec['task']!r}")
            if rid in seen:
                raise DatasetParseError(f"record {rid!r}: field 'id' is duplicated")
            seen.add(rid)
            pairs.append(PromptPair(**{k: rec[k] for k in _FIELDS}))
    return TaskDataset(pairs, provenance=str(path))
