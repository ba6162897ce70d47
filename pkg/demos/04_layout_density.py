"""
Layout density against realism
==============================

Open the layout gate step by step.  Objects land in their boxes more often
while the samples drift away from the text-conditioned data.
"""

from compbalance.pipeline import config_from_dict, sweep_beta, sweep_spearman

rows = sweep_beta(config_from_dict({}), [0.0, 0.25, 0.5, 0.75, 1.0], range(10))
print(f"{'beta':>5} {'in-box mass':>12} {'realism':>10}")
for r in rows:
    print(f"{r['beta']:5.2f} {r['in_box_mass']:12.3f} {r['realism_proxy']:10.1f}")
print("rank correlation:", sweep_spearman(rows))
