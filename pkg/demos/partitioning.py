"""Polynomial partitioning of a Gaussian-mixture cloud for D = 2, 3, 4.

Run: python3 demos/partitioning.py
"""
from wplab import harness as H
from wplab.partition import partition

R = 4096.0
X = H._mixture(1, R, 50_000)
for D in (2, 3, 4):
    P, cs = partition(X, D, R=R, delta=0.05, seed=1)
    masses = sorted(c.mass for c in cs.cells)
    print(f"D={D}: degree {P.total_degree}, {len(cs.cells)} cells, {len(cs.retained)} retained, "
          f"ratio {cs.ratio:.2f}, wall fraction {cs.wall_mask.mean():.3f}, largest cell {masses[-1]:.0f}")
