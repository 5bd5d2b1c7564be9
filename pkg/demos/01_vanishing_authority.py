"""
A metric that contracts but cannot be realized by feedback
===========================================================

The scalar plant dx/dt = -x + x^2 u carries the identity metric, which
certifies contraction at rate 0.5 for every direction the input cannot
reach.  That is not enough: the input gain x^2 dies at the origin, the
pairing certificate psi must grow like 4/|x|^3, and a plant started at
x = 0 never moves no matter what the controller asks for.
"""

import numpy as np

from ccmkit import (
    ControllerConfig,
    Infeasible,
    bundled_spec_path,
    integrate,
    load_spec_file,
    tracking_feedback,
    verify,
)

sf = load_spec_file(bundled_spec_path("counterexample"))
print(f"system: dx/dt = -x + x^2 u, metric M = 1, lambda = {sf.metric.lam}")

# ---------------------------------------------------------------------
# 1. the kernel condition holds: at x = 0 the input direction collapses,
#    the kernel is the whole tangent line, and the margin is 2*0.5 - 2
report = verify(sf.system, sf.metric, sf.grid)
c = report.contraction
print(f"\nkernel contraction over {c.checked_points} grid points: "
      f"{'pass' if c.passed else 'fail'}")
print(f"  worst margin {c.worst_margin:+.3f} at x = {c.worst_at['x']}, "
      f"{c.vacuous_points} points vacuous (input spans the tangent line)")

# 2. ... but the certificate that would make the feedback Lipschitz
#    blows up: psi(x) = 4/|x|^3 toward the origin
c1 = report.condition1
print(f"\ncertificate sweep: {'pass' if c1.passed else 'FAIL'} "
      f"({c1.invalid_count} points with no certificate, "
      f"max finite psi {c1.max_psi:.3g})")
pl = c1.power_law
print(f"  psi along the ray toward x = 0 fits slope {pl.exponent:.3f}:")
for s, p in zip(pl.scales, pl.psi_values):
    print(f"    |x| = {s:<8.4g} psi = {p:.6g}")

# 3. the physical reading: (x* = 1, u* = 1) is a perfectly valid target,
#    yet from x0 = 0 the plant has zero authority and stays put
run = integrate(sf.system, np.array([1.0]), np.array([0.0]), horizon=10.0)
print(f"\nopen loop from x0 = 0 under u = 1: max |x| over 10 s "
      f"= {np.max(np.abs(run.states)):.2e}  (an equilibrium)")

# 4. the controller is honest about it: asked to track x* = 1 from the
#    origin, the gain denominator underflows and it refuses
cfg = ControllerConfig(lam=sf.metric.lam, path_segments=256)
try:
    tracking_feedback(np.array([0.0]), np.array([1.0]), np.array([1.0]),
                      sf.system, sf.metric, cfg)
except Infeasible as err:
    print(f"\ntracking from the origin: {err}")

print("\nverdict:", "POSITIVE" if report.verdict else
      "NEGATIVE (valid metric, no realizable feedback)")
