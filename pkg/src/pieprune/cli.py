"""Command-line driver: prune, evaluate, interpret, sweep, cost (and run = all stages).

Configuration is one JSON file; command-line flags override it.  Every output
file starts with the hash of the resolved configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .attribution import (
    Circuit,
    UniqueFeatureSet,
    load_circuits,
    read_jsonl,
    save_circuits,
    unique_union,
    write_jsonl,
)
from .fidelity import (
    DEFAULT_BUDGETS,
    METHODS,
    FidelityReport,
    PruneConfig,
    Pruner,
    SweepResult,
    estimate_cost,
    evaluate_circuit,
    run_compression_curve,
    run_synergy_sweep,
)
from .fixtures import planted_synergy_dataset
from .interpret import (
    HttpAuditor,
    HttpExplainer,
    InterpretConfig,
    StubAuditor,
    StubExplainer,
    make_corpus,
    run_interpretation,
)
from .model import ConfigError, ModelConfig, ReplacementModel, build_model, load_model
from .synergy import Z_BASE_MODES, SynergyConfig
from .tasks import TaskDataset, generate_docstring_like, generate_ioi_like, load_dataset

GENERATORS = ("ioi_like", "docstring_like")
PRESETS = ("planted_synergy",)
METRICS = ("logit_difference", "negative_kl")


class FieldError(ConfigError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    model: dict = field(default_factory=dict)
    model_file: str | None = None
    preset: str | None = None
    preset_n: int = 32
    dataset: dict = field(default_factory=lambda: {"generator": "ioi_like", "n": 64, "seed": 0})
    methods: list[str] = field(default_factory=lambda: ["fap"])
    budgets: list[int] = field(default_factory=lambda: list(DEFAULT_BUDGETS))
    synergy: dict = field(default_factory=dict)
    metric: str = "logit_difference"
    gradient_run: str = "clean"
    seed: int = 0
    out: str = "out"
    interpret: dict = field(default_factory=dict)
    compression: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)
    base_dir: str = "."

    def hash(self) -> str:
        doc = {k: v for k, v in asdict(self).items() if k not in ("out", "base_dir")}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path


_TOP_KEYS = {f.name for f in fields(PipelineConfig)} - {"base_dir"}
_SYNERGY_KEYS = {"lambda": "lam", "bp": "bp", "partners": "partners", "seed": "seed", "z_base_mode": "z_base_mode"}
_INTERPRET_KEYS = {
    "enabled", "explainer_url", "auditor_url", "corpus_n", "corpus_length", "corpus_seed",
    "limit", "threshold", "n_synthetic", "n_eval", "high_quantile", "fail_on", "timeout",
}
_COMPRESSION_KEYS = {"enabled", "K_ref", "budgets", "seeds", "pool"}
_SWEEP_KEYS = {"K", "lambdas", "bps"}
_COST_KEYS = {"c_feat", "counts", "budget_per_prompt"}


def _check_keys(doc: dict, allowed: set, prefix: str) -> None:
    for k in doc:
        if k not in allowed:
            raise FieldError(f"{prefix}{k}", "unknown field")


def _int_list(val, path: str) -> list[int]:
    if not isinstance(val, list) or not val or not all(isinstance(x, int) and not isinstance(x, bool) for x in val):
        raise FieldError(path, "must be a non-empty list of integers")
    return val


def validate(cfg: PipelineConfig) -> None:
    if cfg.preset is not None and cfg.preset not in PRESETS:
        raise FieldError("preset", f"unknown preset {cfg.preset!r}; expected one of {PRESETS}")
    if cfg.preset is None:
        if cfg.model_file is not None:
            if not cfg.resolve(cfg.model_file).exists():
                raise FieldError("model_file", f"file not found: {cfg.model_file}")
        else:
            known = {f.name for f in fields(ModelConfig)}
            _check_keys(cfg.model, known, "model.")
            try:
                ModelConfig(**cfg.model).validate()
            except ConfigError as exc:
                raise FieldError("model", str(exc)) from None
            except TypeError as exc:
                raise FieldError("model", str(exc)) from None
        ds = cfg.dataset
        if "path" in ds:
            _check_keys(ds, {"path"}, "dataset.")
            if not cfg.resolve(ds["path"]).exists():
                raise FieldError("dataset.path", f"file not found: {ds['path']}")
        else:
            _check_keys(ds, {"generator", "n", "seed", "vocab_size"}, "dataset.")
            if ds.get("generator") not in GENERATORS:
                raise FieldError("dataset.generator", f"expected one of {GENERATORS}, got {ds.get('generator')!r}")
            if not isinstance(ds.get("n", 64), int) or ds.get("n", 64) < 1:
                raise FieldError("dataset.n", "must be a positive integer")
    for i, m in enumerate(cfg.methods):
        if m not in METHODS:
            raise FieldError(f"methods[{i}]", f"unknown method {m!r}; expected one of {METHODS}")
    _int_list(cfg.budgets, "budgets")
    if any(k < 1 for k in cfg.budgets):
        raise FieldError("budgets", "budgets must be positive")
    if cfg.budgets != sorted(set(cfg.budgets)):
        raise FieldError("budgets", "budgets must be strictly increasing")
    if cfg.metric not in METRICS:
        raise FieldError("metric", f"expected one of {METRICS}")
    if cfg.gradient_run not in ("clean", "corrupted"):
        raise FieldError("gradient_run", "expected 'clean' or 'corrupted'")
    _check_keys(cfg.synergy, set(_SYNERGY_KEYS), "synergy.")
    try:
        synergy_config(cfg)
    except ValueError as exc:
        raise FieldError("synergy", str(exc)) from None
    if cfg.synergy.get("z_base_mode", "median_ratio") not in Z_BASE_MODES:
        raise FieldError("synergy.z_base_mode", f"expected one of {Z_BASE_MODES}")
    _check_keys(cfg.interpret, _INTERPRET_KEYS, "interpret.")
    _check_keys(cfg.compression, _COMPRESSION_KEYS, "compression.")
    if "budgets" in cfg.compression:
        _int_list(cfg.compression["budgets"], "compression.budgets")
    _check_keys(cfg.sweep, _SWEEP_KEYS, "sweep.")
    _check_keys(cfg.cost, _COST_KEYS, "cost.")


def synergy_config(cfg: PipelineConfig) -> SynergyConfig:
    kw = {_SYNERGY_KEYS[k]: v for k, v in cfg.synergy.items() if k in _SYNERGY_KEYS}
    return SynergyConfig(**kw)


def _csv_list(text: str, cast) -> list:
    return [cast(x) for x in text.split(",") if x.strip()]


def load_config(path: str | None, args: argparse.Namespace | None = None) -> PipelineConfig:
    doc: dict[str, Any] = {}
    base = "."
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FieldError("--config", f"file not found: {path}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise FieldError("--config", f"invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise FieldError("--config", "top level must be an object")
        base = str(p.parent)
        _check_keys(doc, _TOP_KEYS, "")
    cfg = PipelineConfig(**doc, base_dir=base)
    if args is not None:
        _apply_flags(cfg, args)
    validate(cfg)
    return cfg


def _apply_flags(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    if getattr(args, "method", None):
        cfg.methods = _csv_list(args.method, str)
    if getattr(args, "k", None):
        try:
            cfg.budgets = _csv_list(args.k, int)
        except ValueError:
            raise FieldError("--k", "expected comma-separated integers") from None
    try:
        if getattr(args, "lam", None):
            lams = _csv_list(args.lam, float)
            cfg.sweep["lambdas"] = lams
            cfg.synergy["lambda"] = lams[0]
        if getattr(args, "bp", None):
            bps = _csv_list(args.bp, float)
            cfg.sweep["bps"] = bps
            cfg.synergy["bp"] = bps[0]
    except ValueError:
        raise FieldError("--lambda/--bp", "expected comma-separated numbers") from None
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "metric", None):
        cfg.metric = args.metric
    if getattr(args, "gradient_run", None):
        cfg.gradient_run = args.gradient_run


# ---------------------------------------------------------------------------
# shared loading


def load_inputs(cfg: PipelineConfig) -> tuple[ReplacementModel, TaskDataset]:
    if cfg.preset == "planted_synergy":
        return planted_synergy_dataset(cfg.preset_n, cfg.seed)
    if cfg.model_file is not None:
        model = load_model(cfg.resolve(cfg.model_file))
    else:
        model = build_model(ModelConfig(**cfg.model))
    ds = cfg.dataset
    if "path" in ds:
        dataset = load_dataset(cfg.resolve(ds["path"]))
    else:
        gen = generate_ioi_like if ds["generator"] == "ioi_like" else generate_docstring_like
        dataset = gen(ds.get("n", 64), ds.get("seed", cfg.seed), ds.get("vocab_size", model.config.vocab_size))
    return model, dataset


def prune_config(cfg: PipelineConfig) -> PruneConfig:
    return PruneConfig(cfg.metric, cfg.gradient_run, synergy_config(cfg), seed=cfg.seed)


def _header(cfg: PipelineConfig, stage: str, model: ReplacementModel | None = None) -> dict:
    h = {"config_hash": cfg.hash(), "stage": stage}
    if model is not None:
        h["model_config_hash"] = model.config.config_hash()
    return h


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _csv_with_header(cfg: PipelineConfig, body: str) -> str:
    return f"# config_hash={cfg.hash()}\n{body}"


# ---------------------------------------------------------------------------
# commands


def cmd_prune(cfg: PipelineConfig) -> dict[str, Path]:
    model, dataset = load_inputs(cfg)
    pruner = Pruner(model, prune_config(cfg))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    circuits: list[Circuit] = []
    audit: list[dict] = []
    score_recs: list[dict] = []
    unions = []
    for m in cfg.methods:
        for K in cfg.budgets:
            group = []
            for pair in dataset:
                c, syn = pruner.circuit(pair, m, K)
                group.append(c)
                for s in syn:
                    audit.append({"K": K, **s.to_record(pair.id)})
            circuits.extend(group)
            unions.append({"method": m, "K": K, **unique_union(group).to_record()})
    scored = dict.fromkeys("fap" if m == "fap_synergy" else m for m in cfg.methods if m != "random_active")
    for m in scored:
        for pair in dataset:
            score_recs.extend(pruner.scores(pair, m).to_records())
    paths = {
        "circuits": out / "circuits.jsonl",
        "scores": out / "scores.jsonl",
        "synergy_audit": out / "synergy_audit.jsonl",
        "union": out / "union.jsonl",
    }
    head = _header(cfg, "prune", model)
    save_circuits(paths["circuits"], circuits, head)
    write_jsonl(paths["scores"], score_recs, head)
    write_jsonl(paths["synergy_audit"], audit, head)
    write_jsonl(paths["union"], unions, head)
    return paths


def _check_ids(dataset: TaskDataset, circuits: list[Circuit]) -> None:
    known = set(dataset.by_id())
    bad = sorted({c.prompt_id for c in circuits} - known)
    if bad:
        raise FieldError("circuits", f"prompt ids not in dataset: {', '.join(bad)}")


def cmd_evaluate(cfg: PipelineConfig, circuits_path: str | None = None) -> dict[str, Path]:
    model, dataset = load_inputs(cfg)
    out = Path(cfg.out)
    cpath = Path(circuits_path) if circuits_path else out / "circuits.jsonl"
    if not cpath.exists():
        raise FieldError("circuits", f"file not found: {cpath}")
    circuits = load_circuits(cpath)
    _check_ids(dataset, circuits)
    pruner = Pruner(model, prune_config(cfg))
    by_id = dataset.by_id()
    result = SweepResult("+".join(sorted({p.task for p in dataset})), model.config.config_hash())
    for c in circuits:
        key = (c.method, c.budget)
        rep = result.reports.setdefault(key, FidelityReport(c.method, c.budget))
        rep.prompts.append(evaluate_circuit(model, pruner.runs(by_id[c.prompt_id]), c, cfg.metric))
    result.reports = dict(sorted(result.reports.items(), key=lambda kv: (cfg_order(cfg, kv[0][0]), kv[0][1])))
    paths = {"fidelity_csv": out / "fidelity.csv", "fidelity_json": out / "fidelity.json"}
    _write(paths["fidelity_csv"], _csv_with_header(cfg, result.to_csv()))
    doc = json.loads(result.to_json())
    doc["header"] = _header(cfg, "evaluate", model)
    _write(paths["fidelity_json"], json.dumps(doc, indent=1, sort_keys=True) + "\n")
    comp = cfg.compression
    if comp.get("enabled", False) and len(dataset):
        curve = run_compression_curve(
            model,
            dataset,
            comp.get("K_ref", cfg.budgets[0]),
            comp.get("budgets", [8, 16, 32, 64, 128, 256]),
            seed=range(comp.get("seeds", 10)),
            config=prune_config(cfg),
            pool=comp.get("pool", "scoreable"),
        )
        paths["compression"] = out / "compression.csv"
        _write(paths["compression"], _csv_with_header(cfg, curve.to_csv()))
        meta = {"K_ref": curve.K_ref, "fap_mean_kl": curve.fap_mean_kl, "k_cross": curve.k_cross, "n_seeds": curve.n_seeds}
        meta["k_cross_over_k_ref"] = None if curve.k_cross is None else curve.k_cross / curve.K_ref
        paths["compression_meta"] = out / "compression.json"
        _write(paths["compression_meta"], json.dumps({"header": _header(cfg, "evaluate"), **meta}, sort_keys=True) + "\n")
    return paths


def cfg_order(cfg: PipelineConfig, method: str) -> int:
    return cfg.methods.index(method) if method in cfg.methods else len(cfg.methods)


def _load_union(path: Path, method: str | None = None, K: int | None = None) -> UniqueFeatureSet:
    """Merge union records, optionally only those for one (method, K)."""
    _, recs = read_jsonl(path)
    if method is not None:
        recs = [r for r in recs if r.get("method") == method and r.get("K") == K]
    merged = UniqueFeatureSet()
    for rec in recs:
        merged.counts.update(UniqueFeatureSet.from_record(rec).counts)
    return merged


def cmd_interpret(cfg: PipelineConfig, union_path: str | None = None) -> dict[str, Path]:
    model, dataset = load_inputs(cfg)
    out = Path(cfg.out)
    upath = Path(union_path) if union_path else out / "union.jsonl"
    if not upath.exists():
        raise FieldError("union", f"file not found: {upath}")
    union = _load_union(upath)
    ic = cfg.interpret
    icfg = InterpretConfig(
        limit=ic.get("limit", 40),
        threshold=ic.get("threshold", 0.65),
        n_synthetic=ic.get("n_synthetic", 15),
        n_eval=ic.get("n_eval", 250),
        high_quantile=ic.get("high_quantile", 0.25),
        seed=cfg.seed,
    )
    if ic.get("explainer_url"):
        explainer = HttpExplainer(ic["explainer_url"], timeout=ic.get("timeout", 30.0))
    else:
        explainer = StubExplainer(fail_on=[tuple(f) for f in ic.get("fail_on", [])])
    if ic.get("auditor_url"):
        auditor = HttpAuditor(ic["auditor_url"], timeout=ic.get("timeout", 30.0))
    else:
        auditor = StubAuditor(model.config.vocab_size)
    corpus = [list(p.clean) for p in dataset] + make_corpus(
        model.config.vocab_size, ic.get("corpus_n", 300), ic.get("corpus_length", 10), ic.get("corpus_seed", 1)
    )
    report = run_interpretation(model, union, corpus, explainer, auditor, icfg)
    head = _header(cfg, "interpret", model)
    head.update({"n_features": report.n_features, "client_calls": report.client_calls, "aggregates": report.aggregates()})
    path = out / "interpretation.jsonl"
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(path, [r.to_record() for r in report.features], head)
    return {"interpretation": path}


def cmd_sweep(cfg: PipelineConfig) -> dict[str, Path]:
    model, dataset = load_inputs(cfg)
    sw = cfg.sweep
    K = sw.get("K", cfg.budgets[0])
    res = run_synergy_sweep(
        model,
        dataset,
        K,
        sw.get("lambdas", [0, 1, 2, 3, 4, 5]),
        sw.get("bps", [20, 25, 30, 35, 40, 45]),
        prune_config(cfg),
    )
    out = Path(cfg.out)
    lines = ["lambda,bp,mean_kl,std_kl,delta_mean_mkl,delta_std_mkl"]
    for c in res["cells"]:
        lines.append(
            f"{c['lambda']:g},{c['bp']:g},{c['mean_kl']:.10g},{c['std_kl']:.10g},"
            f"{c['delta_mean_mkl']:.10g},{c['delta_std_mkl']:.10g}"
        )
    paths = {"sweep_csv": out / "sweep.csv", "sweep_json": out / "sweep.json"}
    _write(paths["sweep_csv"], _csv_with_header(cfg, "\n".join(lines) + "\n"))
    _write(paths["sweep_json"], json.dumps({"header": _header(cfg, "sweep", model), **res}, indent=1, sort_keys=True) + "\n")
    return paths


def cmd_cost(cfg: PipelineConfig, union_path: str | None = None) -> dict[str, Path]:
    c = cfg.cost
    counts = dict(c.get("counts", {}))
    if not counts:
        model, dataset = load_inputs(cfg)
        out = Path(cfg.out)
        upath = Path(union_path) if union_path else out / "union.jsonl"
        if not upath.exists():
            raise FieldError("union", f"file not found: {upath} (or give cost.counts)")
        pruner = Pruner(model)
        active = [int(np.count_nonzero(pruner.runs(p).clean.acts)) for p in dataset]
        budget = c.get("budget_per_prompt", cfg.budgets[0])
        counts = {
            "unique_kept": len(_load_union(upath, cfg.methods[0], budget)),
            "active_per_prompt": int(round(float(np.mean(active)))) if active else 0,
            "budget_per_prompt": budget,
            "full_dictionary": model.n_layers * model.n_features,
        }
    for k, v in counts.items():
        if not isinstance(v, int) or v < 0:
            raise FieldError(f"cost.counts.{k}", "must be a non-negative integer")
    est = estimate_cost(counts, c.get("c_feat", "0.0235"))
    path = Path(cfg.out) / "cost.json"
    _write(path, json.dumps({"header": _header(cfg, "cost"), **est.to_dict()}, indent=1, sort_keys=True) + "\n")
    return {"cost": path}


def cmd_run(cfg: PipelineConfig) -> dict[str, Path]:
    paths = cmd_prune(cfg)
    paths.update(cmd_evaluate(cfg))
    if cfg.interpret.get("enabled", True):
        paths.update(cmd_interpret(cfg))
    return paths


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pieprune", description="Prune feature circuits, then describe and evaluate what survives.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--method", help="comma-separated methods: " + ",".join(METHODS))
        p.add_argument("--k", help="comma-separated budgets")
        p.add_argument("--lambda", dest="lam", help="synergy weight (comma list for sweep)")
        p.add_argument("--bp", help="boundary percent (comma list for sweep)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--metric", choices=METRICS)
        p.add_argument("--gradient-run", dest="gradient_run", choices=("clean", "corrupted"))

    for name, help_ in [
        ("prune", "score occurrences and write per-prompt circuits"),
        ("evaluate", "fidelity report for a circuit file"),
        ("interpret", "describe and score the unique retained features"),
        ("sweep", "lambda/bp grid relative to lambda=0"),
        ("cost", "interpretation cost estimate"),
        ("run", "prune, evaluate and interpret in sequence"),
    ]:
        p = sub.add_parser(name, help=help_)
        common(p)
        if name == "evaluate":
            p.add_argument("--circuits", help="circuit file (default: OUT/circuits.jsonl)")
        if name in ("interpret", "cost"):
            p.add_argument("--union", help="union file (default: OUT/union.jsonl)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args)
        cmd = args.command
        if cmd == "prune":
            paths = cmd_prune(cfg)
        elif cmd == "evaluate":
            paths = cmd_evaluate(cfg, args.circuits)
        elif cmd == "interpret":
            paths = cmd_interpret(cfg, args.union)
        elif cmd == "sweep":
            paths = cmd_sweep(cfg)
        elif cmd == "cost":
            paths = cmd_cost(cfg, args.union)
        else:
            paths = cmd_run(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
