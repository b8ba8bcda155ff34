"""Compare the kernel K_t(t x) with its leading stationary-phase term as t grows.

Run: python3 demos/stationary_phase.py
"""
import numpy as np

from wplab.pseudoconformal import KernelSpec, kernel_Kt, main_term, stationary_phase_check

spec = KernelSpec(alpha=2.0, n=3)
x = np.array([2.0, 0.0])
for t in (10.0, 100.0, 1000.0):
    K, m = kernel_Kt(t * x, t, spec), main_term(x, t, spec)
    print(f"t={t:7.0f}  |K|={abs(K):.3e}  |main|={abs(m):.3e}  |K-main|={abs(K - m):.3e}")
slope = stationary_phase_check(x, 10 ** np.arange(2, 4.01, 0.5), spec)
print(f"fitted slope of the remainder: {slope:.2f}")
