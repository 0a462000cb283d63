"""Prune the default synthetic model on IOI-like prompts, compare methods
across budgets, and price the interpretation stage.

    python3 demos/budget_sweep.py
"""

import numpy as np

from pieprune.attribution import unique_union
from pieprune.fidelity import Pruner, estimate_cost, run_budget_sweep, run_compression_curve
from pieprune.model import ModelConfig, build_model
from pieprune.tasks import generate_ioi_like

model = build_model(ModelConfig())
ds = generate_ioi_like(32, 0, model.config.vocab_size)
methods = ["fap", "fap_synergy", "relp", "activation_magnitude", "random_active"]
budgets = [8, 16, 32]

pruner = Pruner(model)
res = run_budget_sweep(model, ds, methods, budgets, pruner=pruner)
print(f"{'method':>22} " + " ".join(f"{'K=' + str(k):>10}" for k in budgets) + "   (mean last-token KL)")
for m in methods:
    row = [res.reports[(m, k)].aggregates()["mean_kl"] for k in budgets]
    print(f"{m:>22} " + " ".join(f"{v:10.2e}" for v in row))

curve = run_compression_curve(model, ds, 8, [8, 32, 128, 192, 256], seed=range(10))
print(f"\nrandom active sets need K = {curve.k_cross} to match FAP at K = 8")

union = unique_union(pruner.circuit(p, "fap", 8)[0] for p in ds)
active = int(np.mean([np.count_nonzero(pruner.runs(p).clean.acts) for p in ds]))
cost = estimate_cost(
    {
        "unique_kept": len(union),
        "active_per_prompt": active,
        "budget_per_prompt": 8,
        "full_dictionary": model.n_layers * model.n_features,
    }
)
print("\ninterpretation cost at $0.0235 per feature")
for k, v in cost.to_dict()["totals"].items():
    print(f"  {k:>18}: ${v}")
print("  reduction ratios:", cost.to_dict()["ratios"])
