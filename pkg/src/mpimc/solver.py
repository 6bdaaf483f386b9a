"""Mixed-precision iterative refinement with low-precision Krylov inner solvers.

The outer loop keeps the iterate and the residual ``r = b - A x`` in
float64. Each refinement asks an inner solver for an approximate correction
``z ~ A^{-1} r``; the inner solver only touches the matrix through a matvec
handle, which may be exact (:class:`ExactOperator`) or the simulated PCM
array (:class:`~mpimc.crossbar.AnalogOperator`).
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .crossbar import AnalogOperator, encode_matrix
from .errors import BreakdownError, DivergenceError, DomainError
from .pcm_device import NoiseModel

MAX_REFINEMENTS = 200
DIVERGENCE_WINDOW = 10
# Relative size of h_{k+1,k} below which the Krylov space is treated as invariant.
HAPPY_BREAKDOWN_RTOL = 1e-12


class ExactOperator:
    """Float64 matvec with a call counter."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=float)
        self.matvecs = 0

    @property
    def shape(self):
        return self.A.shape

    def __call__(self, v):
        self.matvecs += 1
        return self.A @ v


@dataclass
class LinearProblem:
    A: np.ndarray
    b: np.ndarray
    M_inv_diag: Optional[np.ndarray] = None
    hp_matvecs: int = field(default=0, repr=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise DomainError("A must be square")
        if self.b.shape != (self.A.shape[0],):
            raise DomainError("b must have length N")
        if self.M_inv_diag is not None:
            self.M_inv_diag = np.asarray(self.M_inv_diag, dtype=np.float64)
            if self.M_inv_diag.shape != self.b.shape or np.any(self.M_inv_diag == 0):
                raise DomainError("M_inv_diag must be a length-N vector without zeros")

    @property
    def n(self) -> int:
        return self.A.shape[0]


def residual(prob: LinearProblem, x) -> np.ndarray:
    """``b - A x`` in float64; counts one high-precision matvec."""
    prob.hp_matvecs += 1
    return prob.b - prob.A @ np.asarray(x, dtype=np.float64)


@dataclass
class RefinementRecord:
    refinement: int
    residual_norm: float
    error_norm: Optional[float]
    relative_error: Optional[float]
    error_inf: Optional[float]
    analog_matvecs: int
    hp_matvecs: int


@dataclass
class SolveTrace:
    """One record per residual evaluation; record 0 is the initial guess."""

    records: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    tol: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def refinements_used(self) -> int:
        return self.records[-1].refinement if self.records else 0

    @property
    def hp_matvecs(self) -> int:
        return self.records[-1].hp_matvecs if self.records else 0

    @property
    def analog_matvecs(self) -> int:
        return self.records[-1].analog_matvecs if self.records else 0

    @property
    def residual_norms(self) -> np.ndarray:
        return np.array([r.residual_norm for r in self.records])

    @property
    def error_norms(self) -> np.ndarray:
        return np.array([np.nan if r.error_norm is None else r.error_norm
                         for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(RefinementRecord.__dataclass_fields__)
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                        for k, v in asdict(r).items()})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "diverged": self.diverged,
            "tol": self.tol,
            "refinements_used": self.refinements_used,
            "hp_matvecs": self.hp_matvecs,
            "analog_matvecs": self.analog_matvecs,
            "meta": self.meta,
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _matvec_count(inner) -> int:
    op = getattr(inner, "operator", None)
    return int(getattr(op, "matvecs", 0))


def iterative_refine(prob: LinearProblem, inner: Callable, tol: float,
                     max_refinements: int = MAX_REFINEMENTS, *,
                     x_exact=None, divergence_window: int = DIVERGENCE_WINDOW):
    """Solve ``A x = b`` by iterative refinement around ``inner``.

    ``inner(r)`` returns an approximate solution of ``A z = r``. The loop
    starts from ``x = 0`` and stops once ``||b - A x||_2 < tol``, when the
    refinement budget is spent, or when the residual has grown for
    ``divergence_window`` consecutive refinements. Non-finite iterates raise
    :class:`DivergenceError`.

    Returns ``(x, trace)``.
    """
    if tol <= 0:
        raise DomainError("tol must be > 0")
    if max_refinements < 1:
        raise DomainError("max_refinements must be >= 1")
    x = np.zeros(prob.n)
    trace = SolveTrace(tol=tol)
    x_exact = None if x_exact is None else np.asarray(x_exact, dtype=float)
    xnorm = None if x_exact is None else float(np.linalg.norm(x_exact))
    hp0 = prob.hp_matvecs
    an0 = _matvec_count(inner)
    growth = 0

    for k in range(max_refinements + 1):
        r = residual(prob, x)
        rnorm = float(np.linalg.norm(r))
        if x_exact is not None:
            e = x - x_exact
            enorm = float(np.linalg.norm(e))
            erel = enorm / xnorm if xnorm > 0 else enorm
            einf = float(np.max(np.abs(e)))
        else:
            enorm = erel = einf = None
        trace.records.append(RefinementRecord(
            k, rnorm, enorm, erel, einf, _matvec_count(inner) - an0, prob.hp_matvecs - hp0))
        if rnorm < tol:
            trace.converged = True
            break
        if k > 0 and rnorm > trace.records[-2].residual_norm:
            growth += 1
            if growth >= divergence_window:
                trace.diverged = True
                break
        else:
            growth = 0
        if k == max_refinements:
            break
        z = inner(r)
        x = x + z
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite iterate at refinement {k + 1}", k + 1)
    return x, trace


@dataclass
class KrylovWorkspace:
    """Internal state of the last inner solve (for inspection and tests)."""

    # CG
    z: Optional[np.ndarray] = None
    rho: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    alphas: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    # GMRES
    V: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None
    beta: float = 0.0
    y: Optional[np.ndarray] = None
    iterations: int = 0


def cg_inner(matvec: Callable, r, m: int, *, full_output: bool = False):
    """``m`` steps of conjugate gradients on ``A z = r`` from ``z = 0``.

    ``matvec`` is called exactly once per step. An exactly zero recurrence
    residual ends the loop early (the system is solved); a zero curvature
    ``<w, v>`` with a nonzero residual raises :class:`BreakdownError`.
    """
    if m < 1:
        raise DomainError("m must be >= 1")
    r = np.asarray(r, dtype=float)
    ws = KrylovWorkspace()
    z = np.zeros_like(r)
    rho = r.copy()
    v = r.copy()
    rr = float(rho @ rho)
    w = None
    for k in range(m):
        if rr == 0.0:
            break
        w = matvec(v)
        wv = float(w @ v)
        if wv == 0.0:
            raise BreakdownError(f"CG breakdown at step {k + 1}: <w, v> = 0")
        alpha = rr / wv
        z = z + alpha * v
        rho = rho - alpha * w
        rr_new = float(rho @ rho)
        beta = rr_new / rr
        v = rho + beta * v
        rr = rr_new
        ws.alphas.append(alpha)
        ws.betas.append(beta)
        ws.iterations = k + 1
    if full_output:
        ws.z, ws.rho, ws.v, ws.w = z, rho, v, w
        return z, ws
    return z


def hessenberg_lstsq(H, beta: float) -> np.ndarray:
    """Minimize ``||beta e1 - H y||_2`` for (m+1) x m upper Hessenberg ``H``.

    Uses Givens rotations to reduce ``H`` to upper-triangular form.
    """
    H = np.array(H, dtype=float)
    mp1, m = H.shape
    g = np.zeros(mp1)
    g[0] = beta
    for k in range(m):
        a, b = H[k, k], H[k + 1, k]
        d = np.hypot(a, b)
        if d == 0.0:
            continue
        c, s = a / d, b / d
        rk = H[k, k:].copy()
        rk1 = H[k + 1, k:].copy()
        H[k, k:] = c * rk + s * rk1
        H[k + 1, k:] = -s * rk + c * rk1
        g[k], g[k + 1] = c * g[k] + s * g[k + 1], -s * g[k] + c * g[k + 1]
    R = np.triu(H[:m, :m])
    y = np.zeros(m)
    for i in range(m - 1, -1, -1):
        if R[i, i] == 0.0:
            raise BreakdownError("singular Hessenberg factor")
        y[i] = (g[i] - R[i, i + 1:] @ y[i + 1:]) / R[i, i]
    return y


def gmres_inner(matvec: Callable, r, m: int, add_identity: bool = False, *,
                full_output: bool = False):
    """``m`` steps of GMRES on ``A z = r`` from ``z = 0`` (no restarts).

    With ``add_identity`` the operator is ``matvec(v) + v``; this is how the
    unit diagonal of a Jacobi-preconditioned matrix is restored digitally
    when only its off-diagonal part is stored in the array.
    """
    if m < 1:
        raise DomainError("m must be >= 1")
    r = np.asarray(r, dtype=float)
    beta = float(np.linalg.norm(r))
    if beta == 0.0:
        raise DomainError("GMRES needs a nonzero right-hand side")
    n = r.size
    V = np.zeros((n, m + 1))
    H = np.zeros((m + 1, m))
    V[:, 0] = r / beta
    steps = m
    for k in range(m):
        w = matvec(V[:, k])
        if add_identity:
            w = w + V[:, k]
        wnorm = float(np.linalg.norm(w))
        for l in range(k + 1):
            H[l, k] = w @ V[:, l]
            w = w - H[l, k] * V[:, l]
        h = float(np.linalg.norm(w))
        H[k + 1, k] = h
        if h <= HAPPY_BREAKDOWN_RTOL * wnorm:
            H[k + 1, k] = 0.0
            steps = k + 1
            break
        V[:, k + 1] = w / h
    Hm = H[: steps + 1, :steps]
    y = hessenberg_lstsq(Hm, beta)
    z = V[:, :steps] @ y
    if full_output:
        return z, KrylovWorkspace(V=V[:, : steps + 1], H=Hm, beta=beta, y=y,
                                  iterations=steps)
    return z


def precondition_split(A):
    """Jacobi split: ``(offdiag(M^{-1} A), 1 / diag(A))`` with ``M = diag(A)``.

    The preconditioned operator is ``offdiag + I``.
    """
    A = np.asarray(A, dtype=float)
    d = np.diag(A)
    if np.any(d == 0):
        raise DomainError("diagonal preconditioner needs a zero-free diagonal")
    m_inv = 1.0 / d
    At = m_inv[:, None] * A
    np.fill_diagonal(At, 0.0)
    return At, m_inv


class InnerSolver:
    """Callable ``r -> z`` bundling a Krylov method with its operator.

    For GMRES with a diagonal preconditioner, the right-hand side is scaled
    by ``M^{-1}`` and the operator gets the identity added back.
    """

    def __init__(self, method: str, operator, m: int, m_inv_diag=None,
                 calibrate: bool = True):
        if method not in ("cg", "gmres"):
            raise DomainError(f"unknown inner method {method!r}")
        self.method = method
        self.operator = operator
        self.m = m
        self.m_inv_diag = m_inv_diag
        self.calibrate = calibrate

    def __call__(self, r):
        if self.calibrate and hasattr(self.operator, "calibrate"):
            self.operator.calibrate()
        if self.method == "cg":
            return cg_inner(self.operator, r, self.m)
        if self.m_inv_diag is not None:
            return gmres_inner(self.operator, self.m_inv_diag * r, self.m, add_identity=True)
        return gmres_inner(self.operator, r, self.m)


def cg_baseline(A, b, tol: float, max_iter: Optional[int] = None, *,
                x_exact=None, error_target: Optional[float] = None):
    """Plain float64 CG from ``x = 0``; returns ``(x, iterations)``.

    Stops when ``||b - A x||_2 < tol`` or, if ``error_target`` is given,
    when ``||x - x_exact||_2 <= error_target``. One matvec per iteration.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    max_iter = 10 * b.size if max_iter is None else max_iter
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)

    def done():
        if error_target is not None:
            return float(np.linalg.norm(x - x_exact)) <= error_target
        return np.sqrt(rr) < tol

    k = 0
    while not done() and k < max_iter:
        w = A @ p
        alpha = rr / float(w @ p)
        x = x + alpha * p
        r = r - alpha * w
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        k += 1
    return x, k


def exact_inner(A) -> Callable:
    """Direct float64 solve, the ideal inner solver."""
    A = np.asarray(A, dtype=float)
    return lambda r: np.linalg.solve(A, r)


def is_spd(A) -> bool:
    A = np.asarray(A, dtype=float)
    if not np.allclose(A, A.T, rtol=0, atol=0):
        return False
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    return True


class MixedPrecisionSolver:
    """Encode ``A`` once and solve ``A x = b`` for any number of right-hand sides.

    Parameters
    ----------
    A : (N, N) array
        System matrix; the outer loop always uses it in float64.
    method : {"cg", "gmres", "auto"}
        Inner Krylov method. ``auto`` picks CG for symmetric positive-definite
        matrices and GMRES otherwise.
    m : int
        Inner iterations per refinement.
    K : int
        Devices averaged per encoded element.
    band_halfwidth : int, optional
        Encode only ``|i - j| <= band_halfwidth``.
    precondition : bool, optional
        Jacobi-split the matrix and encode the off-diagonal part only.
        Defaults to True for GMRES and False for CG.
    model : NoiseModel, optional
        Array non-idealities; ignored when ``analog`` is False.
    analog : bool
        False replaces the array by an exact float64 matvec of the encoded
        matrix (useful as an oracle).
    calibrate : bool
        Run drift calibration at the start of every inner solve.
    """

    def __init__(self, A, method: str = "auto", m: int = 5, K: int = 1,
                 band_halfwidth: Optional[int] = None, precondition: Optional[bool] = None,
                 model: Optional[NoiseModel] = None, analog: bool = True,
                 calibrate: bool = True, tol: float = 1e-5,
                 max_refinements: int = MAX_REFINEMENTS):
        self.A = np.asarray(A, dtype=np.float64)
        spd = is_spd(self.A)
        if method == "auto":
            method = "cg" if spd else "gmres"
        elif method == "cg" and not spd:
            warnings.warn("CG inner solver on a matrix that is not symmetric "
                          "positive-definite; convergence is not guaranteed", stacklevel=2)
        if precondition is None:
            precondition = method == "gmres"
        if precondition and method == "cg":
            raise DomainError("the diagonal preconditioner is only wired for GMRES")
        self.method = method
        self.m = m
        self.tol = tol
        self.max_refinements = max_refinements
        self.model = NoiseModel() if model is None else model

        if precondition:
            encoded, self.m_inv_diag = precondition_split(self.A)
        else:
            encoded, self.m_inv_diag = self.A, None

        if analog and np.any(encoded):
            self.encoding = encode_matrix(encoded, K, band_halfwidth, self.model)
            self.operator = AnalogOperator(self.encoding, calibrate=calibrate)
        else:
            # exact mode, or nothing left to encode (diagonal A under Jacobi split)
            if band_halfwidth is not None:
                i = np.arange(encoded.shape[0])
                encoded = np.where(np.abs(i[:, None] - i[None, :]) <= band_halfwidth, encoded, 0.0)
            self.encoding = None
            self.operator = ExactOperator(encoded)
        self.inner = InnerSolver(method, self.operator, m, self.m_inv_diag, calibrate)
        self.meta = {"method": method, "m": m, "K": K, "band_halfwidth": band_halfwidth,
                     "precondition": bool(precondition), "analog": analog,
                     "calibrate": calibrate, "noise": self.model.to_dict()}

    def solve(self, b, x_exact=None, tol: Optional[float] = None):
        prob = LinearProblem(self.A, b, self.m_inv_diag)
        x, trace = iterative_refine(prob, self.inner, self.tol if tol is None else tol,
                                    self.max_refinements, x_exact=x_exact)
        trace.meta = dict(self.meta, tol=trace.tol)
        return x, trace
