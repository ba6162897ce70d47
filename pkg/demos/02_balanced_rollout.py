"""
One balanced rollout
====================

Runs the two-phase procedure with balancing below t0 and prints how the
influence of the text branch and the gradient norms evolve.
"""

from pathlib import Path

import numpy as np

from compbalance import io
from compbalance.pipeline import config_from_dict, run

out = Path("demo_out/02")
out.mkdir(parents=True, exist_ok=True)

config = config_from_dict({"seed": 3, "t0": 30, "balancer": {"gradient_mode": "full", "rho": 100.0}})
result = run(config, record_grids=True)

print(f"{'t':>3} {'loss':>8} {'|g_text|':>10} {'|g_spat|':>10} {'mean xi_text':>12}")
for rec in result.trajectory[::5]:
    print(f"{rec.t:3d} {rec.loss:8.4f} {rec.grad_norm_text:10.3e} {rec.grad_norm_spatial:10.3e} {rec.mean_xi_text:12.6f}")

io.plot_grad_norms([r.to_json() for r in result.trajectory], out / "grad_norms.png")
last = result.grids[-1]
xi_text = 1 / (1 + np.exp(last["coe_spatial"] - last["coe_text"]))
io.save_heatmap_png(xi_text, out / "xi_text_final.png")
io.save_sample_png(result.sample, out / "sample.png")
print(result.metrics.to_json())
