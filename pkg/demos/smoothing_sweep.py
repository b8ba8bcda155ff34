"""Short local smoothing sweep for n = 2, p = 4 and three values of alpha.

Run: python3 demos/smoothing_sweep.py
"""
from wplab import harness as H

for alpha in (0.5, 2.0, 3.0):
    cfg = H.SweepConfig(R_list=(16.0, 32.0, 64.0, 128.0), alpha=alpha, trials_per_R=2)
    rows = H.run_sweep(cfg)
    mx = [r for r in rows if r["kind"] == "max"]
    print(f"alpha={alpha}: " + ", ".join(f"R={r['R']:.0f}:{r['ratio']:.3f}" for r in mx)
          + f"; slope {rows[-1]['slope']:.3f} (predicted {cfg.predicted_exponent})")
