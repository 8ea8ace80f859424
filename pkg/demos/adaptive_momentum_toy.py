"""
Adaptive momentum on the two-task toy
=====================================

CAGrad + Adam on the toy2d problem from its five standard starting points,
once with the curvature-adaptive first moment and once with beta1 = 0.
Each run stops as soon as the min-norm certificate drops below 1e-3.

Takes about a minute. Trajectories go to ``runs/`` (or ``$APTMTL_OUT``); try
``aptmtl export-plot --trajectory runs/toy-apt.jsonl --what traj`` afterwards.
"""

from pathlib import Path

import numpy as np

from aptmtl import RunConfig, run

here = Path(__file__).parent / "configs"
results = {}
for name in ("toy2d_apt", "toy2d_beta0"):
    cfg = RunConfig.load(here / f"{name}.toml")
    results[name] = run(cfg).summary

# %%
# Steps to reach the front, final certificate, and how smoothly the update
# direction turns (mean cosine between consecutive recorded updates).

for name, rows in results.items():
    print(name)
    for row in rows:
        print(f"  {row['run_id']:16s} steps {row['steps']:6d}  min-norm {row['pareto_min_norm']:.2e}"
              f"  update cos {row['mean_update_cos']:.4f}")
    print("  mean update cos", round(float(np.mean([r["mean_update_cos"] for r in rows])), 4))
