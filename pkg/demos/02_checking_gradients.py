"""
Checking gradients against finite differences
=============================================

Every analytic adjoint of the autodiff engine is compared with a central
difference (L(t+h) - L(t-h)) / 2h on a small two-type model in double
precision.  A deliberately broken backward rule shows what a failure
looks like.
"""
from multiner.cli import toy_gradcheck

res = toy_gradcheck("full", seed=0)
print(f"full model: max rel error {res.max_rel_error:.2e} over {res.n_coords} coordinates, "
      f"{len(res.covered())}/{len(res.counts)} tensors, passed={res.passed()}")

worst = sorted(res.per_param.items(), key=lambda kv: -kv[1])[:5]
for name, err in worst:
    print(f"  {name:28s} {err:.2e}")

# the fault hook scales one operation's backward pass by a wrong factor
bad = toy_gradcheck("full", seed=0, fault="gelu")
print(f"\nwith a broken gelu backward: max rel error {bad.max_rel_error:.2e}, "
      f"passed={bad.passed()}")
