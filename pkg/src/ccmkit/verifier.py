"""Grid verification of a candidate contraction metric.

Three layers, each a bounded-domain surrogate for the corresponding
universally quantified condition (reports always carry the checked
domain; a pass certifies the grid, never the whole state space):

* metric bounds: eigenvalues of M against [alpha1, alpha2];
* kernel contraction:  for tangents delta with delta' M B = 0, require
  delta' (Mdot + A'M + MA + 2 lambda M) delta < 0, evaluated through an
  orthonormal basis N of ker (MB)';
* weak-pairing certificate: a scalar psi(x, t) >= 0 with
  |delta' H_i delta| <= psi * delta' Q delta for every tangent, built
  from the nonzero eigenspace of Q.  The certificate degenerates (psi
  blowing up, or H_i leaking outside range Q) exactly where feedback
  design breaks down, and the verifier reports that as a Condition-1
  failure with a power-law growth diagnostic.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .differential import compute_H, compute_Q
from .model import (
    GridSpec,
    MetricBoundsResult,
    MetricSpec,
    RawEval,
    SystemSpec,
    check_metric_bounds,
    plant_for,
    raw_slice,
)

TAU_RANK = 1e-9      # relative singular-value cutoff for ker (MB)'
TAU_EIG = 1e-8       # relative eigenvalue cutoff for range Q
EPS_ORTH = 1e-8      # orthogonality / certificate residual scale
PSI_CAP = 1e6        # psi above this is treated as blow-up
C2_TOL = 1e-8        # H_i considered identically zero below this

SCOPE_NOTE = (
    "checked on the bounded grid below; a pass certifies these samples, "
    "not the full state space"
)


class CertificateInvalid(Exception):
    """H_i has components outside range(Q): no finite psi can work here."""

    def __init__(self, message: str, residual: float = math.nan):
        super().__init__(message)
        self.residual = residual


def kernel_basis(MB: np.ndarray, tau_rank: float = TAU_RANK) -> np.ndarray:
    """Orthonormal basis (n x k) of {delta : delta' M B = 0}.

    Computed from the SVD of (MB)'; singular values below
    tau_rank * sigma_max count as zero.  MB = 0 gives the full space.
    """
    A = np.asarray(MB, dtype=float).T
    _, s, vh = np.linalg.svd(A, full_matrices=True)
    if s.size == 0 or s[0] <= 0.0:
        rank = 0
    else:
        rank = int(np.sum(s > tau_rank * s[0]))
    return vh[rank:].T.copy()


@dataclass
class OrthogonalityResult:
    passed: bool
    residual: float          # max_i ||N' H_i N||_F
    tol: float

    def to_dict(self) -> dict:
        return {"passed": bool(self.passed), "residual": float(self.residual),
                "tol": float(self.tol)}


def check_orthogonality(H: np.ndarray, N: np.ndarray,
                        eps: float = EPS_ORTH) -> OrthogonalityResult:
    """Does every H_i vanish on the kernel spanned by N?

    Per input i the tolerance is eps * (1 + ||H_i||_F); the reported
    residual is the largest ||N' H_i N||_F.
    """
    if N.shape[1] == 0:
        return OrthogonalityResult(True, 0.0, eps)
    worst = 0.0
    worst_tol = eps
    ok = True
    for Hi in H:
        ri = float(np.linalg.norm(N.T @ Hi @ N))
        tol_i = eps * (1.0 + float(np.linalg.norm(Hi)))
        if ri > worst:
            worst, worst_tol = ri, tol_i
        if ri > tol_i:
            ok = False
    return OrthogonalityResult(ok, worst, worst_tol)


def eps_margin(M: np.ndarray) -> float:
    """Strictness threshold for the kernel contraction margin."""
    norm2 = float(np.max(np.abs(np.linalg.eigvalsh(M))))
    return 1e-7 * (1.0 + norm2)


def check_ccm_point(raw: RawEval, lam: float) -> float:
    """Largest eigenvalue of N'(Mdot + A'M + MA + 2 lambda M)N at u = 0.

    Returns -inf when the kernel is empty (nothing to check: every
    tangent is controlled).  Negative margin means contraction on the
    kernel at this point.  Callers are expected to have confirmed
    orthogonality first; without it the margin is still computed but a
    contraction claim is unsound.
    """
    N = kernel_basis(raw.M @ raw.B)
    if N.shape[1] == 0:
        return -math.inf
    A0 = raw.dfdx
    Mdot0 = raw.dMdt + np.tensordot(raw.f, raw.dMdx, axes=(0, 0))
    MA = raw.M @ A0
    S = Mdot0 + MA + MA.T + 2.0 * lam * raw.M
    SN = N.T @ S @ N
    return float(np.max(np.linalg.eigvalsh(0.5 * (SN + SN.T))))


# ---------------------------------------------------------------------------
# psi certificate

@dataclass
class PsiCertificate:
    """Factorized witness for |delta' H_i delta| <= psi delta' Q delta.

    Vtilde spans range(Q) (n x r, orthonormal), Dtilde holds the r
    positive eigenvalues in descending order, Htilde[i] = Vtilde' H_i
    Vtilde, and psi = max_i sigma_max(Htilde[i]) / Dtilde[-1] (zero when
    r = 0 and every H_i vanishes).  residual is the largest Frobenius
    mass of any H_i outside range(Q).
    """

    Vtilde: np.ndarray
    Dtilde: np.ndarray
    Htilde: np.ndarray
    psi: float
    residual: float


def construct_psi(Q: np.ndarray, H: np.ndarray, tau_eig: float = TAU_EIG,
                  eps_orth: float = EPS_ORTH) -> PsiCertificate:
    """Build the eigenspace certificate at one point.

    Raises CertificateInvalid when some H_i does not vanish on the
    kernel of Q (residual above eps_orth * (1 + ||H_i||_F)): then no
    finite psi satisfies the pairing bound at this point.
    """
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    cutoff = tau_eig * max(1.0, float(w[-1]) if w.size else 1.0)
    nz = w > cutoff
    order = np.argsort(w[nz])[::-1]
    D = w[nz][order]
    Vt = V[:, nz][:, order]
    r = int(D.size)

    m = H.shape[0]
    Ht = np.zeros((m, r, r))
    worst_res = 0.0
    for i in range(m):
        Hi = H[i]
        norm_i = float(np.linalg.norm(Hi))
        if r:
            Ht[i] = Vt.T @ Hi @ Vt
            res = float(np.linalg.norm(Hi - Vt @ Ht[i] @ Vt.T))
        else:
            res = norm_i
        worst_res = max(worst_res, res)
        if res > eps_orth * (1.0 + norm_i):
            raise CertificateInvalid(
                f"H[{i}] leaks outside range(Q): residual {res:.3e} "
                f"exceeds {eps_orth * (1.0 + norm_i):.3e}",
                residual=res,
            )
    if r == 0:
        psi = 0.0
    else:
        sig = max(float(np.max(np.abs(np.linalg.eigvalsh(Ht[i])))) for i in range(m))
        psi = sig / float(D[-1])
    return PsiCertificate(Vtilde=Vt, Dtilde=D, Htilde=Ht, psi=psi,
                          residual=worst_res)


# ---------------------------------------------------------------------------
# grid sweeps

def _grid_raws(sys: SystemSpec, met: MetricSpec, grid: GridSpec):
    """Yield (x, t, RawEval) over the full x grid and t samples."""
    plant = plant_for(sys, met)
    X = grid.x_points()
    for t in grid.t_samples:
        rb = plant.raw_batch(X, float(t))
        for i in range(X.shape[0]):
            yield X[i], float(t), raw_slice(rb, i)


def _map_points(fn, points, threads: int | None):
    items = list(points)
    workers = os.cpu_count() or 1 if threads is None else max(1, int(threads))
    if workers == 1 or len(items) < 64:
        return [fn(p) for p in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


@dataclass
class ContractionResult:
    passed: bool
    checked_points: int
    vacuous_points: int
    worst_margin: float | None   # largest margin among non-vacuous points
    worst_at: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    orthogonality: OrthogonalityResult | None = None

    def to_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "checked_points": int(self.checked_points),
            "vacuous_points": int(self.vacuous_points),
            "worst_margin": None if self.worst_margin is None else float(self.worst_margin),
            "worst_at": self.worst_at,
            "failures": self.failures,
            "orthogonality": None if self.orthogonality is None
            else self.orthogonality.to_dict(),
        }


def check_contraction(sys: SystemSpec, met: MetricSpec, grid: GridSpec,
                      lam: float | None = None,
                      threads: int | None = None) -> ContractionResult:
    """Kernel contraction condition over the grid at u = 0.

    Orthogonality of every H_i on the kernel is a precondition at each
    point; where it fails, the point is recorded as a failure rather
    than raising.  Points with an empty kernel pass vacuously.
    """
    rate = met.lam if lam is None else lam

    def eval_point(item):
        x, t, raw = item
        N = kernel_basis(raw.M @ raw.B)
        if N.shape[1] == 0:
            return (x, t, None, None, True, 0.0)
        orth = check_orthogonality(compute_H(raw), N)
        margin = check_ccm_point(raw, rate)
        eps = eps_margin(raw.M)
        return (x, t, margin, eps, orth.passed, orth.residual)

    rows = _map_points(eval_point, _grid_raws(sys, met, grid), threads)

    vacuous = 0
    worst: float | None = None
    worst_at: dict = {}
    failures: list = []
    orth_worst = 0.0
    orth_ok = True
    passed = True
    for x, t, margin, eps, o_ok, o_res in rows:
        orth_worst = max(orth_worst, o_res)
        if margin is None:
            vacuous += 1
            continue
        if not o_ok:
            orth_ok = False
            passed = False
            if len(failures) < 16:
                failures.append({"x": x.tolist(), "t": t,
                                 "reason": "orthogonality",
                                 "residual": float(o_res)})
        if worst is None or margin > worst:
            worst = margin
            worst_at = {"x": x.tolist(), "t": t}
        if margin >= -eps:
            passed = False
            if len(failures) < 16:
                failures.append({"x": x.tolist(), "t": t, "reason": "margin",
                                 "margin": float(margin), "eps": float(eps)})
    orth = OrthogonalityResult(orth_ok, orth_worst, EPS_ORTH)
    return ContractionResult(passed, len(rows), vacuous, worst, worst_at,
                             failures, orth)


@dataclass
class PowerLawFit:
    """Least-squares slope of log psi against log scale along a ray."""

    exponent: float | None
    direction: list
    t: float
    scales: list = field(default_factory=list)
    psi_values: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "exponent": None if self.exponent is None else float(self.exponent),
            "direction": self.direction,
            "t": float(self.t),
            "scales": [float(s) for s in self.scales],
            "psi_values": [float(p) for p in self.psi_values],
        }


def fit_psi_power_law(sys: SystemSpec, met: MetricSpec, direction: np.ndarray,
                      t: float = 0.0,
                      scales: np.ndarray | None = None) -> PowerLawFit:
    """Probe certificate psi at x = s * direction for shrinking s and fit
    log psi ~ exponent * log s.  Scales where the certificate is invalid
    or psi = 0 are skipped; fewer than 3 usable scales yields no fit."""
    d = np.asarray(direction, dtype=float)
    nd = float(np.linalg.norm(d))
    if nd == 0.0:
        return PowerLawFit(None, d.tolist(), t)
    d = d / nd
    if scales is None:
        scales = np.geomspace(0.5, 0.04, 10)
    plant = plant_for(sys, met)
    used_s: list[float] = []
    used_psi: list[float] = []
    for s in scales:
        raw = plant.raw(s * d, t, check=False)
        try:
            cert = construct_psi(compute_Q(raw), compute_H(raw))
        except CertificateInvalid:
            continue
        if cert.psi > 0.0 and math.isfinite(cert.psi):
            used_s.append(float(s))
            used_psi.append(cert.psi)
    if len(used_s) < 3:
        return PowerLawFit(None, d.tolist(), t, used_s, used_psi)
    slope = float(np.polyfit(np.log(used_s), np.log(used_psi), 1)[0])
    return PowerLawFit(slope, d.tolist(), t, used_s, used_psi)


@dataclass
class Condition1Result:
    passed: bool
    checked_points: int
    max_psi: float
    max_psi_at: dict = field(default_factory=dict)
    psi_cap: float = PSI_CAP
    invalid_count: int = 0
    invalid_examples: list = field(default_factory=list)
    blow_up: bool = False
    power_law: PowerLawFit | None = None

    def to_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "checked_points": int(self.checked_points),
            "max_psi": float(self.max_psi),
            "max_psi_at": self.max_psi_at,
            "psi_cap": float(self.psi_cap),
            "invalid_count": int(self.invalid_count),
            "invalid_examples": self.invalid_examples,
            "blow_up": bool(self.blow_up),
            "power_law": None if self.power_law is None else self.power_law.to_dict(),
        }


def check_condition1(sys: SystemSpec, met: MetricSpec, grid: GridSpec,
                     psi_cap: float = PSI_CAP,
                     threads: int | None = None) -> Condition1Result:
    """Certificate psi at every grid (x, t); fails on blow-up.

    Blow-up means max psi exceeding psi_cap or CertificateInvalid
    anywhere.  On blow-up a power-law probe along the ray through the
    most suspicious point distinguishes genuine growth (for the cubic
    blow-up of the scalar counterexample the fitted exponent is -3)
    from merely large finite values.
    """

    def eval_point(item):
        x, t, raw = item
        try:
            cert = construct_psi(compute_Q(raw), compute_H(raw))
        except CertificateInvalid as err:
            return (x, t, None, err.residual)
        return (x, t, cert.psi, None)

    rows = _map_points(eval_point, _grid_raws(sys, met, grid), threads)

    max_psi = 0.0
    max_at: dict = {}
    invalid = 0
    invalid_examples: list = []
    bad_dir: np.ndarray | None = None
    bad_norm = math.inf
    t_for_fit = float(grid.t_samples[0])
    for x, t, psi, residual in rows:
        if psi is None:
            invalid += 1
            if len(invalid_examples) < 16:
                invalid_examples.append({"x": x.tolist(), "t": t,
                                         "residual": float(residual)})
            nx = float(np.linalg.norm(x))
            if 0.0 < nx < bad_norm:
                bad_norm, bad_dir, t_for_fit = nx, x, t
            continue
        if psi > max_psi:
            max_psi, max_at = psi, {"x": x.tolist(), "t": t}
    blow_up = invalid > 0 or max_psi > psi_cap
    power_law = None
    if blow_up:
        if bad_dir is None and max_at:
            cand = np.asarray(max_at["x"], dtype=float)
            if float(np.linalg.norm(cand)) > 0.0:
                bad_dir = cand
                t_for_fit = max_at["t"]
        if bad_dir is not None:
            power_law = fit_psi_power_law(sys, met, bad_dir, t_for_fit)
    return Condition1Result(
        passed=not blow_up, checked_points=len(rows), max_psi=max_psi,
        max_psi_at=max_at, psi_cap=psi_cap, invalid_count=invalid,
        invalid_examples=invalid_examples, blow_up=blow_up, power_law=power_law,
    )


@dataclass
class StrongConditionsResult:
    c1_passed: bool
    c2_passed: bool
    strong: bool
    max_H_norm: float
    c2_tol: float = C2_TOL
    psi_zero_confirmed: bool | None = None  # set when strong holds

    def to_dict(self) -> dict:
        return {
            "c1_passed": bool(self.c1_passed),
            "c2_passed": bool(self.c2_passed),
            "strong": bool(self.strong),
            "max_H_norm": float(self.max_H_norm),
            "c2_tol": float(self.c2_tol),
            "psi_zero_confirmed": self.psi_zero_confirmed,
        }


def check_strong_conditions(sys: SystemSpec, met: MetricSpec, grid: GridSpec,
                            threads: int | None = None,
                            contraction: ContractionResult | None = None,
                            condition1: Condition1Result | None = None,
                            ) -> StrongConditionsResult:
    """Strong version of the conditions: C1 is the kernel contraction
    check (the kernel already is the orthogonal complement of the MB
    columns), C2 asks every H_i to vanish identically on the grid.
    When both hold, the psi = 0 certificate is confirmed against the
    Condition-1 sweep."""
    if contraction is None:
        contraction = check_contraction(sys, met, grid, threads=threads)

    def eval_point(item):
        _x, _t, raw = item
        return float(max(np.linalg.norm(Hi) for Hi in compute_H(raw)))

    norms = _map_points(eval_point, _grid_raws(sys, met, grid), threads)
    max_h = max(norms) if norms else 0.0
    c2 = max_h <= C2_TOL
    strong = contraction.passed and c2
    psi_zero: bool | None = None
    if strong:
        if condition1 is None:
            condition1 = check_condition1(sys, met, grid, threads=threads)
        psi_zero = condition1.max_psi == 0.0
    return StrongConditionsResult(contraction.passed, c2, strong, max_h,
                                  C2_TOL, psi_zero)


# ---------------------------------------------------------------------------
# top-level report

@dataclass
class VerificationReport:
    domain: dict
    scope: str
    metric_bounds: MetricBoundsResult
    contraction: ContractionResult
    condition1: Condition1Result
    strong: StrongConditionsResult
    lam: float
    verdict: bool

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "scope": self.scope,
            "lambda": float(self.lam),
            "metric_bounds": self.metric_bounds.to_dict(),
            "contraction": self.contraction.to_dict(),
            "condition1": self.condition1.to_dict(),
            "strong_conditions": self.strong.to_dict(),
            "verdict": bool(self.verdict),
        }


def verify(sys: SystemSpec, met: MetricSpec, grid: GridSpec,
           threads: int | None = None) -> VerificationReport:
    """Run all checks over the grid and fold them into one report.

    The verdict is positive iff metric bounds, kernel contraction and
    the Condition-1 certificate sweep all pass on the checked domain.
    """
    bounds = check_metric_bounds(met, grid)
    contraction = check_contraction(sys, met, grid, threads=threads)
    condition1 = check_condition1(sys, met, grid, threads=threads)
    strong = check_strong_conditions(sys, met, grid, threads=threads,
                                     contraction=contraction,
                                     condition1=condition1)
    verdict = bounds.passed and contraction.passed and condition1.passed
    return VerificationReport(
        domain=grid.describe(), scope=SCOPE_NOTE, metric_bounds=bounds,
        contraction=contraction, condition1=condition1, strong=strong,
        lam=met.lam, verdict=verdict,
    )
