"""
Checking the coefficient gradient
=================================

The balancer differentiates the alignment loss through a DDIM step and two
attention maps.  Compare it against central differences on small instances.
"""

from compbalance.balancer import BalancerConfig
from compbalance.gradcheck import check_coe_gradient, make_instance, run_gradcheck

for line in run_gradcheck(size=6, steps=(20,)):
    print(line.line())

# the cheaper gradient drops the softmax cross term, so it only points the right way
inst = make_instance("analytic", size=6, t=20)
for mode in ("paper", "full"):
    res = check_coe_gradient(inst, BalancerConfig(gradient_mode=mode))
    print(mode, [f"{r.max_rel_error:.2e}" for r in res])

# with stochastic steps only the exact Jacobian scalar keeps the gradient right
noisy = make_instance("micro", size=6, t=20, eta=1.0)
for jac in ("paper", "consistent"):
    res = check_coe_gradient(noisy, BalancerConfig(gradient_mode="full", jacobian_mode=jac))
    print("eta=1", jac, "passes" if all(r.passed for r in res) else "fails")
