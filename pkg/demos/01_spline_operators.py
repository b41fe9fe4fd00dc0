"""Spline operators on one grid: Gram matrix, the lift NP^t, and the constants the estimates rely on."""

import numpy as np

from kawasaki_twoscale.norms import inverse_sobolev_constant, norm_equivalence_extremes
from kawasaki_twoscale.operators import apply_ANPt, fiber_poincare_constant, get_cache, sigma_constant

cache = get_cache(N=256, M=8)
print("Gram row 0 times M:", np.round(cache.gram[0] * 8, 6))

rng = np.random.default_rng(0)
y = rng.standard_normal(8)
y -= y.mean()
print("A NP^t y on the first block:", np.round(apply_ANPt(cache, y)[:32:4], 4))

print(f"defect |PNP^t - id| = {cache.defect:.3e}")
print(f"sigma = {sigma_constant(cache):.4f}, gamma = {fiber_poincare_constant(cache):.4f}, "
      f"inverse Sobolev c = {inverse_sobolev_constant(8):.4f}")
for name, (lo, hi) in norm_equivalence_extremes(cache).items():
    print(f"{name}: [{lo:.5f}, {hi:.5f}]")
