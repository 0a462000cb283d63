"""Walk through the planted AND-gate: first-order scores miss a weak partner
that the boundary reranker recovers.

    python3 demos/synergy_rescue.py
"""

from pieprune.attribution import prepare_runs, score_activation_magnitude, score_fap, select_topk
from pieprune.fidelity import eval_kl
from pieprune.fixtures import and_gate
from pieprune.synergy import SynergyConfig, partition_boundary, rerank_boundary

fx = and_gate(n_prompts=1)
pair = fx.pairs[0]
runs = prepare_runs(fx.model, pair)
fap = score_fap(fx.model, runs)
mag = score_activation_magnitude(fx.model, runs).as_dict()
by_occ = {o: name for name, o in fx.names.items()}

print("occurrence scores on the key position")
print(f"{'name':>5} {'FAP':>8} {'|act|':>8}")
for occ, s in sorted(fap.as_dict().items(), key=lambda kv: -abs(kv[1])):
    if occ in by_occ and not by_occ[occ].startswith("bg"):
        print(f"{by_occ[occ]:>5} {s:8.3f} {mag.get(occ, 0.0):8.3f}")

K = 5
part = partition_boundary(fap, K, SynergyConfig(bp=25))
print("\ncore    :", [by_occ[o] for o in part.core])
print("boundary:", [by_occ[o] for o in part.boundary])

for lam in (0.0, 3.0):
    circuit, syn = rerank_boundary(fx.model, runs, part, fap, SynergyConfig(lam=lam))
    print(f"\nlambda = {lam:g}")
    for s in syn:
        print(f"  {by_occ[s.candidate]:>3}  z_base {s.z_base:.3f}  z_syn {s.z_syn:+.3f}  S' {s.s_prime:.3f}  {'kept' if s.selected else ''}")
    print(f"  KL(subject || circuit) = {eval_kl(fx.model, runs, circuit):.4f}")

print(f"\nplain top-{K} by FAP: KL = {eval_kl(fx.model, runs, select_topk(fap, K)):.4f}")
