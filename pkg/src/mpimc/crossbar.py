"""Matrix encoding onto a simulated PCM array and analog matrix-vector products.

Each nonzero element ``A_ij`` of the encoded matrix is stored as ``K``
devices programmed to ``|A_ij| * scale_a`` uS; the sign is kept digitally.
A matvec reads every device once (element-wise multiplication in the
array), averages the ``K`` reads, inverts the pseudo-Ohm's law and sums the
row in float64 outside the array. A global drift-correction factor,
obtained from the summed conductance of a fixed device subset, multiplies
every result.

Device arrays are stored element-major with shape ``(nnz, K)``; device
``(e, k)`` has flat index ``e * K + k``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CalibrationError, DomainError, ScalingError
from .pcm_device import (
    DeviceState,
    NoiseModel,
    currents_to_conductance,
    draw_drift_exponents,
    program_devices,
    read_currents,
)
from .rng import derive_rng

CALIB_SUBSET_SIZE = 10_000
ARRAY_BUDGET = 1_000_000


def band_element_count(n: int, band_halfwidth: Optional[int]) -> int:
    """Number of positions with ``|i - j| <= band_halfwidth`` in an n x n matrix."""
    if band_halfwidth is None or band_halfwidth >= n - 1:
        return n * n
    h = int(band_halfwidth)
    return n * (2 * h + 1) - h * (h + 1)


def required_devices(n: int, k: int, band_halfwidth: Optional[int] = None) -> int:
    """Devices needed for a matrix with no zeros inside the encoded region."""
    return k * band_element_count(n, band_halfwidth)


def band_indices(n: int, band_halfwidth: int):
    """Row/column indices of the band, diagonal by diagonal."""
    rows, cols = [], []
    for d in range(-min(band_halfwidth, n - 1), min(band_halfwidth, n - 1) + 1):
        i = np.arange(max(0, -d), min(n, n - d))
        rows.append(i)
        cols.append(i + d)
    return np.concatenate(rows), np.concatenate(cols)


@dataclass
class CrossbarEncoding:
    shape: tuple
    k_per_element: int
    band_halfwidth: Optional[int]
    scale_a: float
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    signs: np.ndarray
    g: np.ndarray
    nu: np.ndarray
    converged: np.ndarray
    calib_subset: np.ndarray
    calib_reference: float
    model: NoiseModel
    t_encoded: float = 0.0
    calib_factor: float = 1.0
    reads: int = field(default=0, repr=False)
    calibrations: int = field(default=0, repr=False)

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    @property
    def device_count(self) -> int:
        return int(self.g.size)

    def sign_matrix(self) -> np.ndarray:
        s = np.zeros(self.shape, dtype=np.int8)
        s[self.rows, self.cols] = self.signs
        return s

    def encoded_matrix(self) -> np.ndarray:
        """The exact matrix the array is meant to hold (what the noise perturbs)."""
        a = np.zeros(self.shape)
        a[self.rows, self.cols] = self.values
        return a

    def device(self, element: int, k: int = 0) -> DeviceState:
        return DeviceState(
            g_programmed=float(self.g[element, k]),
            t_program=self.t_encoded,
            drift_nu=float(self.nu[element, k]),
            rng_stream=element * self.k_per_element + k,
            converged=bool(self.converged[element, k]),
        )

    def metadata(self) -> dict:
        return {
            "shape": list(self.shape),
            "k_per_element": self.k_per_element,
            "band_halfwidth": self.band_halfwidth,
            "scale_a_uS_per_unit": self.scale_a,
            "nnz": self.nnz,
            "device_count": self.device_count,
            "unconverged_devices": int(np.count_nonzero(~self.converged)),
            "calib_subset_size": int(self.calib_subset.size),
            "calib_reference_uS": self.calib_reference,
            "seed": self.model.seed,
            "noise": self.model.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.metadata(), indent=2)


@dataclass
class MatvecResult:
    w: np.ndarray
    analog_ops: int
    calib_factor_applied: float


def encode_matrix(A, K: int = 1, band_halfwidth: Optional[int] = None,
                  model: Optional[NoiseModel] = None, *, t_encoded: float = 0.0,
                  calib_size: int = CALIB_SUBSET_SIZE) -> CrossbarEncoding:
    """Program the nonzero entries of ``A`` (or of its band) onto ``K`` devices each.

    The conductance scale maps the largest encoded magnitude to ``g_max``.
    Entries outside the band are never read and do not affect results.
    """
    model = NoiseModel() if model is None else model
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError("A must be a square matrix")
    if K < 1:
        raise DomainError("K must be >= 1")
    n = A.shape[0]
    if band_halfwidth is not None:
        if band_halfwidth < 0:
            raise DomainError("band_halfwidth must be >= 0")
        rows, cols = band_indices(n, int(band_halfwidth))
        values = A[rows, cols]
        keep = values != 0
        rows, cols, values = rows[keep], cols[keep], values[keep]
    else:
        rows, cols = np.nonzero(A)
        values = A[rows, cols]
    if values.size == 0:
        raise ScalingError("encoded region of the matrix is all zeros")
    amax = float(np.max(np.abs(values)))
    if not np.isfinite(amax):
        raise ScalingError("matrix contains non-finite entries")

    scale_a = model.g_max / amax
    targets = np.minimum(np.abs(values) * scale_a, model.g_max)
    targets = np.repeat(targets[:, None], K, axis=1)
    prog = program_devices(targets, model, derive_rng(model.seed, "encode", "program"))
    nu = draw_drift_exponents(targets.shape, model, derive_rng(model.seed, "encode", "drift"))

    n_dev = targets.size
    s = min(calib_size, n_dev)
    crng = derive_rng(model.seed, "encode", "calib")
    subset = np.sort(crng.choice(n_dev, size=s, replace=False))
    g_sub = prog.g.reshape(-1)[subset]
    i_ref = read_currents(g_sub, model.v_read_ref, 0.0, 0.0, model, crng)
    reference = float(np.sum(currents_to_conductance(i_ref, model.v_read_ref, model)))

    return CrossbarEncoding(
        shape=(n, n),
        k_per_element=int(K),
        band_halfwidth=None if band_halfwidth is None else int(band_halfwidth),
        scale_a=scale_a,
        rows=rows.astype(np.int64),
        cols=cols.astype(np.int64),
        values=values,
        signs=np.sign(values).astype(np.int8),
        g=prog.g,
        nu=nu,
        converged=prog.converged,
        calib_subset=subset,
        calib_reference=reference,
        model=model,
        t_encoded=float(t_encoded),
    )


def analog_matvec(enc: CrossbarEncoding, v, t_now: Optional[float] = None) -> MatvecResult:
    """Approximate ``enc.encoded_matrix() @ v`` on the simulated array.

    Inputs are scaled so the largest ``|v_j|`` drives ``v_max``; entries
    whose voltage would fall below ``v_min`` are read at ``v_min`` and the
    product is rescaled digitally. Read noise comes from the substream
    keyed by the encoding's read counter, which advances on every call.
    """
    model = enc.model
    v = np.asarray(v, dtype=float)
    n = enc.shape[0]
    if v.shape != (enc.shape[1],):
        raise DomainError(f"vector length {v.shape} does not match matrix shape {enc.shape}")
    t_now = enc.t_encoded if t_now is None else float(t_now)
    if t_now < enc.t_encoded:
        raise DomainError("t_now precedes the encoding time")
    vmax = float(np.max(np.abs(v))) if v.size else 0.0
    if vmax == 0.0:
        return MatvecResult(np.zeros(n), 0, enc.calib_factor)

    scale_v = model.v_max / vmax
    u = np.abs(v) * scale_v
    live = v[enc.cols] != 0
    if live.all():
        rows, cols, signs, g, nu = enc.rows, enc.cols, enc.signs, enc.g, enc.nu
    else:
        rows, cols, signs = enc.rows[live], enc.cols[live], enc.signs[live]
        g, nu = enc.g[live], enc.nu[live]
    u_e = u[cols]
    v_read = np.maximum(u_e, model.v_min)[:, None]

    rng = derive_rng(model.seed, "read", enc.reads)
    enc.reads += 1
    i = read_currents(g, v_read, t_now - enc.t_encoded, nu, model, rng)
    g_hat = currents_to_conductance(i, v_read, model).mean(axis=1)
    prod = g_hat * (u_e / (enc.scale_a * scale_v)) * signs * np.sign(v[cols])
    w = np.bincount(rows, weights=prod, minlength=n) * enc.calib_factor
    return MatvecResult(w, int(g.size), enc.calib_factor)


def calibrate_drift(enc: CrossbarEncoding, t_now: Optional[float] = None,
                    apply: bool = True) -> float:
    """Estimate the global drift correction from the calibration subset.

    Returns ``reference_sum / current_sum``; with ``apply`` the factor is
    stored on the encoding and used by subsequent matvecs.
    """
    model = enc.model
    if enc.calib_subset.size == 0:
        raise CalibrationError("calibration subset is empty")
    t_now = enc.t_encoded if t_now is None else float(t_now)
    g = enc.g.reshape(-1)[enc.calib_subset]
    nu = enc.nu.reshape(-1)[enc.calib_subset]
    rng = derive_rng(model.seed, "calib", enc.calibrations)
    enc.calibrations += 1
    i = read_currents(g, model.v_read_ref, t_now - enc.t_encoded, nu, model, rng)
    current = float(np.sum(currents_to_conductance(i, model.v_read_ref, model)))
    if current <= 0 or enc.calib_reference <= 0:
        raise CalibrationError(f"non-positive summed conductance (reference "
                               f"{enc.calib_reference:g} uS, current {current:g} uS)")
    factor = enc.calib_reference / current
    if apply:
        enc.calib_factor = factor
    return factor


def scalar_multiply_batch(betas, gammas, K: int, model: NoiseModel,
                          rng: np.random.Generator, t_read: float = 0.0) -> np.ndarray:
    """Estimate ``beta * gamma`` element-wise, with fresh devices per pair."""
    betas = np.asarray(betas, dtype=float)
    gammas = np.asarray(gammas, dtype=float)
    if np.any((betas < 0) | (betas > 1)) or np.any((gammas < 0) | (gammas > 1)):
        raise DomainError("beta and gamma must lie in [0, 1]")
    if K < 1:
        raise DomainError("K must be >= 1")
    targets = np.repeat((betas * model.g_max)[..., None], K, axis=-1)
    prog = program_devices(targets, model, rng)
    nu = draw_drift_exponents(targets.shape, model, rng)
    u = gammas * model.v_max
    v_read = np.maximum(u, model.v_min)[..., None]
    i = read_currents(prog.g, v_read, t_read, nu, model, rng)
    g_hat = currents_to_conductance(i, v_read, model).mean(axis=-1)
    return g_hat / model.g_max * (u / model.v_max)


def scalar_multiply(beta: float, gamma: float, K: int = 1,
                    model: Optional[NoiseModel] = None, *, rng_stream: int = 0,
                    t_read: float = 0.0) -> float:
    """Multiply two numbers in [0, 1] on ``K`` averaged PCM devices."""
    model = NoiseModel() if model is None else model
    rng = derive_rng(model.seed, "scalar", rng_stream)
    return float(scalar_multiply_batch(np.array([beta]), np.array([gamma]), K, model, rng)[0])


class AnalogOperator:
    """Clocked matvec over an encoding.

    Every call advances simulated time by ``tick`` seconds, so drift
    accumulates over a solve. ``calibrate()`` refreshes the drift factor at
    the current time (a no-op when calibration is disabled).
    """

    def __init__(self, enc: CrossbarEncoding, tick: Optional[float] = None,
                 calibrate: bool = True):
        self.enc = enc
        self.tick = enc.model.tick if tick is None else float(tick)
        self.calibration_enabled = calibrate
        self.clock = enc.t_encoded
        self.matvecs = 0
        self.analog_ops = 0

    @property
    def shape(self):
        return self.enc.shape

    def __call__(self, v) -> np.ndarray:
        self.clock += self.tick
        res = analog_matvec(self.enc, v, self.clock)
        self.matvecs += 1
        self.analog_ops += res.analog_ops
        return res.w

    def calibrate(self) -> float:
        if not self.calibration_enabled:
            return self.enc.calib_factor
        return calibrate_drift(self.enc, self.clock)
