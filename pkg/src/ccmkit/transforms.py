"""Dual-coordinate checks and input-side feedback transformations.

Dual form: with W = M^{-1} and eta = M delta, the pairing bound
|delta' H_i delta| <= psi delta' Q delta becomes

    |eta' (W J_i' + J_i W - d_{b_i} W) eta| <= psi eta' B B' eta,

J_i = db_i/dx.  The left side is affine in the pair (W, dW/dx) and the
right side is affine in psi, so feasible (W, psi) pairs form a convex
set; convexity_probe tests that numerically on convex combinations.

Input transformation: u = alpha(x) + beta(x) v maps the system to
ftilde = f + B alpha, Btilde = B beta (computed symbolically here).
For nonsingular beta the certificate transports with
psibar = kappa psi / gamma, where kappa is the largest l1 row norm of
beta and gamma the smallest eigenvalue of beta beta'; invariance_probe
verifies the transported bound and margin coherence pointwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr
from .differential import compute_A, compute_H, compute_Mdot, compute_Q
from .model import (
    GridSpec,
    MetricSpec,
    RawEval,
    SpecFile,
    SystemSpec,
    metric_evaluator,
    plant_for,
    raw_slice,
)
from .verifier import CertificateInvalid, check_ccm_point, construct_psi

BETA_DET_TOL = 1e-12
DUAL_TOL = 1e-9


@dataclass
class DualPoint:
    """Dual coordinates at one evaluation point.

    dWdx holds the state derivative of the W field (needed so convex
    combinations stay linear); dual_point derives it from M as
    dW/dx_k = -W (dM/dx_k) W.
    """

    W: np.ndarray                 # (n, n) SPD
    eta: np.ndarray               # (n,)
    dWdx: np.ndarray | None = None  # (n, n, n)


def dual_point(raw: RawEval, delta: np.ndarray) -> DualPoint:
    """W = M^{-1}, eta = M delta, dWdx from the inverse-derivative rule."""
    W = np.linalg.inv(raw.M)
    W = 0.5 * (W + W.T)
    d = np.asarray(delta, dtype=float)
    dW = np.empty_like(raw.dMdx)
    for k in range(raw.M.shape[0]):
        dW[k] = -W @ raw.dMdx[k] @ W
    return DualPoint(W=W, eta=raw.M @ d, dWdx=dW)


def dual_constraint_residual(dp: DualPoint, raw: RawEval, psi: float) -> float:
    """max_i [ |eta'(W J_i' + J_i W - d_{b_i}W) eta| - psi eta' B B' eta ].

    Nonpositive means (W, psi) is feasible at this point for the tested
    eta.  A missing dWdx is derived from raw (valid only when W is the
    pointwise inverse of M).
    """
    W = dp.W
    eta = dp.eta
    dWdx = dp.dWdx
    if dWdx is None:
        dWdx = dual_point(raw, np.zeros(raw.M.shape[0])).dWdx
    rhs = psi * float((raw.B.T @ eta) @ (raw.B.T @ eta))
    worst = -math.inf
    m = raw.B.shape[1]
    for i in range(m):
        Ji = raw.dBdx[i]
        dbiW = np.tensordot(raw.B[:, i], dWdx, axes=(0, 0))
        T = W @ Ji.T + Ji @ W - dbiW
        lhs = abs(float(eta @ T @ eta))
        worst = max(worst, lhs - rhs)
    return worst


@dataclass
class ConvexityResult:
    feasible: bool
    worst_residual: float
    thetas: tuple
    samples: int

    def to_dict(self) -> dict:
        return {"feasible": bool(self.feasible),
                "worst_residual": float(self.worst_residual),
                "thetas": [float(t) for t in self.thetas],
                "samples": int(self.samples)}


def convexity_probe(duals1: list[DualPoint], duals2: list[DualPoint],
                    raws: list[RawEval], psi1: float, psi2: float,
                    thetas: tuple = (0.25, 0.5, 0.75),
                    tol: float = DUAL_TOL) -> ConvexityResult:
    """Test convex combinations of two feasible dual certificates.

    Both inputs must be feasible at every sample against both sampled
    eta vectors (checked first; infeasible input raises ValueError --
    combinations are only guaranteed to inherit feasibility at an eta
    where both endpoints hold).  Each combination
    (theta W1 + (1-theta) W2, theta psi1 + (1-theta) psi2) is then
    tested at the same sample points against both eta vectors.
    """
    if not (len(duals1) == len(duals2) == len(raws)):
        raise ValueError("sample lists must have equal length")
    for which, duals, psi in (("first", duals1, psi1), ("second", duals2, psi2)):
        for dp, other, raw in zip(duals, duals2 if duals is duals1 else duals1,
                                  raws):
            for eta in (dp.eta, other.eta):
                r = dual_constraint_residual(
                    DualPoint(W=dp.W, eta=eta, dWdx=dp.dWdx), raw, psi
                )
                if r > tol:
                    raise ValueError(
                        f"{which} certificate is not feasible: residual {r:.3e}"
                    )
    worst = -math.inf
    for th in thetas:
        psi_c = th * psi1 + (1.0 - th) * psi2
        for d1, d2, raw in zip(duals1, duals2, raws):
            W = th * d1.W + (1.0 - th) * d2.W
            dW = th * d1.dWdx + (1.0 - th) * d2.dWdx
            for eta in (d1.eta, d2.eta):
                r = dual_constraint_residual(
                    DualPoint(W=W, eta=eta, dWdx=dW), raw, psi_c
                )
                worst = max(worst, r)
    return ConvexityResult(feasible=worst <= tol, worst_residual=worst,
                           thetas=thetas, samples=len(raws))


# ---------------------------------------------------------------------------
# input-side feedback transformation

@dataclass
class FeedbackTransform:
    """u = alpha(x, t) + beta(x, t) v with beta nonsingular pointwise."""

    n: int
    alpha: list                       # m Expressions
    beta: list                        # m x m Expressions
    _alpha_fn: object = field(default=None, repr=False, compare=False)
    _beta_fn: object = field(default=None, repr=False, compare=False)

    @property
    def m(self) -> int:
        return len(self.alpha)

    def _compiled(self):
        if self._beta_fn is None:
            self._alpha_fn = expr.compile_matrix([[e] for e in self.alpha], self.n)
            self._beta_fn = expr.compile_matrix(self.beta, self.n)
        return self._alpha_fn, self._beta_fn

    def at(self, x: np.ndarray, t: float = 0.0):
        """(alpha, beta, kappa, gamma) at a point; raises ValueError when
        beta is singular there (|det| <= 1e-12 or gamma <= 0)."""
        alpha_fn, beta_fn = self._compiled()
        a = alpha_fn(x, t)[..., :, 0]
        b = beta_fn(x, t)
        det = float(np.linalg.det(b))
        kappa = float(np.max(np.sum(np.abs(b), axis=-1)))
        gamma = float(np.min(np.linalg.eigvalsh(b @ b.T)))
        if abs(det) <= BETA_DET_TOL or gamma <= 0.0:
            raise ValueError(
                f"beta is singular at x={np.asarray(x).tolist()}, t={t}: "
                f"det={det:.3e}, gamma={gamma:.3e}"
            )
        return a, b, kappa, gamma

    @staticmethod
    def identity(n: int, m: int) -> "FeedbackTransform":
        zero = expr.Num(0.0)
        one = expr.Num(1.0)
        return FeedbackTransform(
            n=n,
            alpha=[zero for _ in range(m)],
            beta=[[one if i == j else zero for j in range(m)] for i in range(m)],
        )

    @staticmethod
    def from_spec(sf: SpecFile) -> "FeedbackTransform":
        if sf.transform is None:
            raise ValueError(f"spec {sf.name!r} carries no transform block")
        return FeedbackTransform(n=sf.system.n, alpha=sf.transform["alpha"],
                                 beta=sf.transform["beta"])


def apply_feedback_transform(sys: SystemSpec, tf: FeedbackTransform) -> SystemSpec:
    """Symbolically build the transformed system (f + B alpha, B beta)."""
    if tf.m != sys.m or tf.n != sys.n:
        raise ValueError(
            f"transform is {tf.n} states / {tf.m} inputs, system is "
            f"{sys.n} / {sys.m}"
        )
    f_new = []
    for k in range(sys.n):
        e = sys.f[k]
        for j in range(sys.m):
            e = expr.add(e, expr.mul(sys.B[k][j], tf.alpha[j]))
        f_new.append(e)
    B_new = []
    for k in range(sys.n):
        row = []
        for i in range(sys.m):
            e = expr.Num(0.0)
            for j in range(sys.m):
                e = expr.add(e, expr.mul(sys.B[k][j], tf.beta[j][i]))
            row.append(e)
        B_new.append(row)
    return SystemSpec(n=sys.n, m=sys.m, f=f_new, B=B_new)


@dataclass
class InvarianceResult:
    passed: bool
    checked_points: int
    skipped_invalid: int
    min_slack: float
    kappa_max: float
    gamma_min: float
    psibar_max: float
    fd_checked: int = 0
    fd_max_err: float = 0.0
    margin_max_diff: float = 0.0
    margins_match: bool = True

    def to_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "checked_points": int(self.checked_points),
            "skipped_invalid": int(self.skipped_invalid),
            "min_slack": float(self.min_slack),
            "kappa_max": float(self.kappa_max),
            "gamma_min": float(self.gamma_min),
            "psibar_max": float(self.psibar_max),
            "fd_checked": int(self.fd_checked),
            "fd_max_err": float(self.fd_max_err),
            "margin_max_diff": float(self.margin_max_diff),
            "margins_match": bool(self.margins_match),
        }


def _vdot_quadratic(raw: RawEval, u: np.ndarray, delta: np.ndarray) -> float:
    """delta'(Mdot + A'M + MA) delta at the given input."""
    A = compute_A(raw, u)
    Mdot = compute_Mdot(raw, u)
    Md = raw.M @ delta
    return float(delta @ Mdot @ delta + 2.0 * (A @ delta) @ Md)


def invariance_probe(sys: SystemSpec, met: MetricSpec, tf: FeedbackTransform,
                     grid: GridSpec, slack_tol: float = 1e-8,
                     margin_tol: float = 1e-9, fd_points: int = 8,
                     fd_step: float = 1e-5) -> InvarianceResult:
    """Certify that the transported bound survives u = alpha + beta v.

    At every grid (x, t) with a valid certificate psi and every sampled
    tangent delta, checks

        max_i |dVdot/dv_i| <= psibar * (dV/ddelta) B beta beta' B' (dV/ddelta)'

    with psibar = kappa psi / gamma, where dVdot/dv = (delta'H delta) beta.
    The v-gradient is cross-checked by central differences through the
    symbolically transformed system at the first fd_points points.  Also
    compares the kernel contraction margins of the original and the
    transformed system pointwise (both vacuous counts as a match).
    """
    plant = plant_for(sys, met)
    sys_t = apply_feedback_transform(sys, tf)
    plant_t = plant_for(sys_t, met)
    X = grid.x_points()
    deltas = grid.deltas(sys.n)

    checked = 0
    skipped = 0
    min_slack = math.inf
    kappa_max = 0.0
    gamma_min = math.inf
    psibar_max = 0.0
    fd_checked = 0
    fd_max_err = 0.0
    margin_max_diff = 0.0
    margins_ok = True

    for t in grid.t_samples:
        t = float(t)
        rb = plant.raw_batch(X, t)
        rb_t = plant_t.raw_batch(X, t)
        for idx in range(X.shape[0]):
            raw = raw_slice(rb, idx)
            raw_t = raw_slice(rb_t, idx)
            H = compute_H(raw)
            try:
                cert = construct_psi(compute_Q(raw), H)
            except CertificateInvalid:
                skipped += 1
                continue
            _a, beta, kappa, gamma = tf.at(X[idx], t)
            psibar = kappa * cert.psi / gamma
            kappa_max = max(kappa_max, kappa)
            gamma_min = min(gamma_min, gamma)
            psibar_max = max(psibar_max, psibar)

            m1 = check_ccm_point(raw, met.lam)
            m2 = check_ccm_point(raw_t, met.lam)
            if math.isinf(m1) and math.isinf(m2):
                diff = 0.0
            else:
                diff = abs(m1 - m2)
            margin_max_diff = max(margin_max_diff, diff)
            if diff > margin_tol:
                margins_ok = False

            do_fd = fd_checked < fd_points
            for d in deltas:
                p = np.array([float(d @ Hi @ d) for Hi in H])
                grad_v = beta.T @ p
                lhs = float(np.max(np.abs(grad_v)))
                w = beta.T @ (raw.B.T @ (raw.M @ d))
                rhs = psibar * 4.0 * float(w @ w)
                min_slack = min(min_slack, rhs - lhs)
                checked += 1
                if do_fd:
                    for i in range(sys.m):
                        vp = np.zeros(sys.m)
                        vp[i] = fd_step
                        fd = (_vdot_quadratic(raw_t, vp, d)
                              - _vdot_quadratic(raw_t, -vp, d)) / (2.0 * fd_step)
                        err = abs(fd - grad_v[i]) / (1.0 + abs(grad_v[i]))
                        fd_max_err = max(fd_max_err, err)
            if do_fd:
                fd_checked += 1

    if not math.isfinite(min_slack):
        min_slack = 0.0
    passed = (min_slack >= -slack_tol) and margins_ok and (
        fd_checked == 0 or fd_max_err <= 1e-6
    )
    return InvarianceResult(
        passed=passed, checked_points=checked, skipped_invalid=skipped,
        min_slack=min_slack, kappa_max=kappa_max,
        gamma_min=gamma_min if math.isfinite(gamma_min) else 0.0,
        psibar_max=psibar_max, fd_checked=fd_checked, fd_max_err=fd_max_err,
        margin_max_diff=margin_max_diff, margins_match=margins_ok,
    )
