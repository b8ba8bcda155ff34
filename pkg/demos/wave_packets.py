"""Decompose seeded Gaussian data into wave packets and inspect the result.

Run: python3 demos/wave_packets.py
"""
import numpy as np

from wplab import harness as H
from wplab.wavepackets import decompose, reconstruction_residual

r = 64.0
f = H._gauss_atoms(0, r, 1 / (4 * r))
w = decompose(f, r, 0.05)
norms = w.packet_norms()
total = sum(v ** 2 for v in norms.values())
print(f"{len(w)} packets, relative residual {reconstruction_residual(f, w):.2e}")
print(f"sum of packet masses / |f|^2 = {total / f.l2() ** 2:.3f}")
print("largest packets (cap centre, translate, norm):")
for k in sorted(norms, key=lambda k: -norms[k])[:5]:
    c, v = w.caps[k[0]].cap.center, w.v_of[k[1]]
    print(f"  {np.round(c, 3)}  {np.round(v, 1)}  {norms[k]:.3e}")
