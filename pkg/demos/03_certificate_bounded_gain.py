"""
A state-dependent gain with a finite pairing certificate
========================================================

dx/dt = -x + (1 + 0.5 sin x) u has an input gain bounded away from zero,
so unlike the vanishing-authority counterexample its certificate psi
stays finite on the whole domain.  The strong conditions do *not* hold
here (the gain varies, so H is nonzero), which is exactly the situation
the certificate was built for.
"""

import numpy as np

from ccmkit import (
    bundled_spec_path,
    compute_H,
    compute_Q,
    construct_psi,
    load_spec_file,
    plant_for,
    verify,
)

sf = load_spec_file(bundled_spec_path("bounded-gain"))
print(f"system: dx/dt = -x + (1 + 0.5 sin x) u on "
      f"[{sf.grid.x_ranges[0][0]}, {sf.grid.x_ranges[0][1]}], "
      f"lambda = {sf.metric.lam}")

# ---------------------------------------------------------------------
# 1. full verification: everything passes, but not for trivial reasons
report = verify(sf.system, sf.metric, sf.grid)
print(f"\nverdict: {'POSITIVE' if report.verdict else 'NEGATIVE'}")
print(f"  kernel contraction: {report.contraction.vacuous_points}/"
      f"{report.contraction.checked_points} points vacuous -- the single "
      f"input never loses rank, so there is nothing to check on the kernel")
print(f"  strong conditions: c1={report.strong.c1_passed} "
      f"c2={report.strong.c2_passed} -> psi = 0 shortcut unavailable")
print(f"  certificate sweep: max psi = {report.condition1.max_psi:.6f} "
      f"(finite everywhere, cap {report.condition1.psi_cap:g})")

# 2. the certificate against its analytic value
#    psi(x) = |cos x| / (1 + 0.5 sin x)^2 for the identity metric
plant = plant_for(sf.system, sf.metric)
print("\n   x      psi (constructed)   |cos x|/(1+0.5 sin x)^2")
for x in (-3.0, -1.5, 0.0, 0.7, 1.5708, 3.0):
    raw = plant.raw(np.array([x]), 0.0)
    cert = construct_psi(compute_Q(raw), compute_H(raw))
    analytic = abs(np.cos(x)) / (1.0 + 0.5 * np.sin(x)) ** 2
    print(f"  {x:+.4f}   {cert.psi:<18.12f}  {analytic:.12f}")

# 3. the same number by brute force: max over tangent directions of
#    |d' H d| / (d' Q d) -- in one dimension every direction agrees
rng = np.random.default_rng(3)
x = np.array([float(rng.uniform(-3, 3))])
raw = plant.raw(x, 0.0)
H = compute_H(raw)
Q = compute_Q(raw)
cert = construct_psi(Q, H)
ratios = []
for _ in range(100):
    d = rng.normal(size=1)
    ratios.append(abs(float(d @ H[0] @ d)) / float(d @ Q @ d))
print(f"\nbrute force at x = {x[0]:+.4f}: max ratio "
      f"{max(ratios):.12f} vs constructed {cert.psi:.12f}")
