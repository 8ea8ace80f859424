"""
A small beta1 sweep
===================

Static beta1 in {default, 0.6, 0.2, 0.0} crossed with MGDA / CAGrad and
Adam / Muon on a seeded three-task quadratic ensemble with a 4x4 weight block.
The score is the final delta-m% against the single-task optima, averaged over
seeds; lower is better.

Equivalent CLI call::

    aptmtl sweep-beta --config demos/configs/beta_sweep.toml \\
        --betas default,0.6,0.2,0.0 --seeds 1,2,3
"""

from pathlib import Path

from aptmtl import RunConfig, sweep_beta

cfg = RunConfig.load(Path(__file__).parent / "configs" / "beta_sweep.toml")
table = sweep_beta(cfg, ["default", "0.6", "0.2", "0.0"], [1, 2, 3])

columns = [(a, o) for a in ("mgda", "cagrad") for o in ("adam", "muon")]
print(f"{'beta1':>6s}" + "".join(f"{a + '+' + o:>22s}" for a, o in columns))
for beta in sorted({row["beta"] for row in table}, reverse=True):
    cells = {(r["aggregator"], r["optimizer"]): r["cell"] for r in table if r["beta"] == beta}
    print(f"{beta:6.1f}" + "".join(f"{cells[c]:>22s}" for c in columns))
