"""
Dose-response curves and their support
======================================

Fit at a known number of clusters, then trace each cluster's average
dose-response. Outside a cluster's observed doses the curve is an
extrapolation; the in_support flag says where.
"""

import numpy as np

from cldrf import FitOptions, ScenarioConfig, estimate_adrf, fit, generate
from cldrf.adrf import default_grid

ld = generate(ScenarioConfig("linear-c4", n=800, seed=3))
res = fit(ld.data, FitOptions(C=4, spec=ld.spec))
print("converged:", res.converged, "after", res.iterations, "iterations")
print("objective per iteration:", np.round(res.objective_trace, 1))

for c in range(res.C):
    grid = default_grid(ld.data, res, c, points=50)
    curve = estimate_adrf(ld.data, res, c, grid)
    slope = np.polyfit(grid, curve.mu, 1)[0]
    lo, hi = curve.support
    print(f"cluster {c + 1}: {res.assignment.counts()[c]} units, doses [{lo:.2f}, {hi:.2f}], slope {slope:+.3f}")

# the same cluster over every dose seen in the sample
grid = default_grid(ld.data, res, 0, points=9, extended=True)
curve = estimate_adrf(ld.data, res, 0, grid)
for g, m, inside in zip(curve.grid, curve.mu, curve.in_support):
    print(f"  t={g:6.2f}  mu={m:8.3f}  {'observed' if inside else 'extrapolated'}")
