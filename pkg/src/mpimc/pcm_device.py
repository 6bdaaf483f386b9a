"""Phase-change memory cell model.

A cell stores a conductance ``g`` (in microsiemens). Programming is an
iterative program-and-verify loop with additive Gaussian error; reads follow
a pseudo-Ohm's law ``I = alpha * G(t) * f(V) * (1 + eps)`` with a polynomial
I/V characteristic ``f``, a multiplicative read-noise term and power-law
conductance drift ``G(t) = G(t0) * (t / t0) ** -nu``.

Units throughout: conductance in uS, voltage in V, current in uA, time in s.

Time convention: a device programmed at simulation time ``t_program`` has
drifted for ``elapsed = t_now - t_program`` seconds. Drift is evaluated as
``apply_drift(g, t0 + elapsed, t0, nu)``, so the verify read straight after
programming sees no drift and ``t0`` (25 s by default) sets how fast the
early decay is.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import DomainError
from .rng import derive_rng

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

G_MAX = 50.0
V_READ_REF = 0.2
V_MIN = 0.1
V_MAX = 0.3
PROG_MARGIN = 1.74
PROG_MAX_ITERS = 20

_RAW_IV = (1.0, 1.5, 2.5)


def iv_curve(v, coeffs):
    """Evaluate ``f(V) = c1*V + c2*V**2 + ...`` (no constant term)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    for c in reversed(coeffs):
        out = (out + c) * v
    return out


def normalize_iv(raw_coeffs, v_ref: float = V_READ_REF) -> tuple:
    """Scale polynomial coefficients so that ``f(v_ref) == v_ref``.

    Conductance is defined as the I/V ratio at ``v_ref``, so pinning ``f``
    there makes ``G * f(v_ref)`` the plain Ohm's-law current.
    """
    scale = v_ref / float(iv_curve(v_ref, raw_coeffs))
    return tuple(float(c) * scale for c in raw_coeffs)


DEFAULT_IV_COEFFS = normalize_iv(_RAW_IV)


@dataclass(frozen=True)
class NoiseModel:
    """Non-ideality parameters of the simulated array.

    All standard deviations are non-negative; set them to zero (or use
    :meth:`noiseless`) for an ideal array. ``seed`` is the master seed from
    which every random stream is derived.
    """

    sigma_prog: float = 0.2
    sigma_read_rel: float = 0.02
    drift_nu_mean: float = 0.05
    drift_nu_std: float = 0.01
    iv_coeffs: tuple = DEFAULT_IV_COEFFS
    adc_bits: Optional[int] = None
    v_read_ref: float = V_READ_REF
    seed: int = 0
    g_max: float = G_MAX
    prog_margin: float = PROG_MARGIN
    prog_max_iters: int = PROG_MAX_ITERS
    t0: float = 25.0
    tick: float = 1.0
    v_min: float = V_MIN
    v_max: float = V_MAX

    def __post_init__(self):
        object.__setattr__(self, "iv_coeffs", tuple(float(c) for c in self.iv_coeffs))
        for name in ("sigma_prog", "sigma_read_rel", "drift_nu_mean", "drift_nu_std"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        if self.adc_bits is not None and not (1 <= int(self.adc_bits) <= 16):
            raise DomainError("adc_bits must be None or an integer in 1..16")
        if self.g_max <= 0 or self.prog_margin <= 0 or self.prog_max_iters < 1:
            raise DomainError("g_max, prog_margin must be > 0 and prog_max_iters >= 1")
        if self.t0 <= 0 or self.tick < 0:
            raise DomainError("t0 must be > 0 and tick >= 0")
        if not (0 < self.v_min < self.v_max):
            raise DomainError("need 0 < v_min < v_max")
        if not self.iv_coeffs:
            raise DomainError("iv_coeffs must not be empty")
        # f(0) = 0 holds by construction; check monotonicity on the read range.
        grid = np.linspace(0.0, self.v_max, 3001)
        if np.any(np.diff(iv_curve(grid, self.iv_coeffs)) <= 0):
            raise DomainError("f(V) must be strictly increasing on [0, v_max]")

    # --- derived quantities -------------------------------------------------

    def iv(self, v):
        return iv_curve(v, self.iv_coeffs)

    @cached_property
    def alpha(self) -> float:
        return calibrate_alpha(self)

    @property
    def i_max(self) -> float:
        """Upper end of the ADC current range (uA)."""
        return self.g_max * float(self.iv(self.v_max))

    # --- variants -----------------------------------------------------------

    def replace(self, **changes) -> "NoiseModel":
        return dataclasses.replace(self, **changes)

    def without_noise(self) -> "NoiseModel":
        """Same mapping and I/V curve, but every random term and the ADC off."""
        return self.replace(sigma_prog=0.0, sigma_read_rel=0.0, drift_nu_mean=0.0,
                            drift_nu_std=0.0, adc_bits=None)

    @classmethod
    def noiseless(cls, seed: int = 0, linear: bool = True) -> "NoiseModel":
        m = cls(seed=seed).without_noise()
        return m.replace(iv_coeffs=(1.0,)) if linear else m

    @classmethod
    def low_noise(cls, seed: int = 0, factor: float = 0.1) -> "NoiseModel":
        """Default model with programming and read noise scaled by ``factor``."""
        d = cls(seed=seed)
        return d.replace(sigma_prog=d.sigma_prog * factor,
                         sigma_read_rel=d.sigma_read_rel * factor)

    # --- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["iv_coeffs"] = list(self.iv_coeffs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown noise parameters: {sorted(unknown)}")
        d = dict(d)
        if "iv_coeffs" in d:
            d["iv_coeffs"] = tuple(d["iv_coeffs"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NoiseModel":
        return cls.from_dict(json.loads(text))

    def to_toml(self) -> str:
        import tomli_w

        d = {k: v for k, v in self.to_dict().items() if v is not None}
        return tomli_w.dumps({"noise": d})

    @classmethod
    def from_toml(cls, text: str) -> "NoiseModel":
        d = tomllib.loads(text)
        return cls.from_dict(d.get("noise", d))


@dataclass(frozen=True)
class DeviceState:
    """One programmed cell. Immutable; reads never change it."""

    g_programmed: float
    t_program: float
    drift_nu: float
    rng_stream: int
    converged: bool = True
    iterations: int = 0
    verify_read: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.g_programmed < 0:
            raise DomainError("conductance must be non-negative")
        if self.drift_nu < 0:
            raise DomainError("drift exponent must be non-negative")


def calibrate_alpha(model: NoiseModel) -> float:
    """Fix the pseudo-Ohm's-law gain so a clean full-scale read inverts exactly."""
    clean = model.replace(sigma_read_rel=0.0, adc_bits=None)
    i_clean = read_currents(model.g_max, model.v_read_ref, 0.0, 0.0, clean, None)
    return float(i_clean) / (model.g_max * float(model.iv(model.v_read_ref)))


def apply_drift(g0, t, t0, nu):
    """Power-law drift ``g0 * (t / t0) ** -nu``. Works on scalars and arrays."""
    t = np.asarray(t, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if np.any(np.asarray(t0) <= 0):
        raise DomainError("reference time t0 must be > 0")
    if np.any(t < t0):
        raise DomainError("t must be >= t0")
    if np.any(nu < 0):
        raise DomainError("drift exponent must be >= 0")
    out = np.asarray(g0, dtype=float) * (t / t0) ** (-nu)
    return float(out) if out.ndim == 0 else out


def drifted(g, elapsed, nu, t0):
    """Conductance ``elapsed`` seconds after programming (array fast path)."""
    if elapsed == 0:
        return np.asarray(g, dtype=float)
    return g * np.power((t0 + elapsed) / t0, -nu)


def quantize_current(i, model: NoiseModel):
    """Round currents onto the ADC grid; identity when ``adc_bits`` is None."""
    if model.adc_bits is None:
        return i
    levels = 2 ** int(model.adc_bits) - 1
    step = model.i_max / levels
    return np.clip(np.rint(np.asarray(i) / step), 0, levels) * step


def read_currents(g, v, elapsed, nu, model: NoiseModel, rng: np.random.Generator):
    """Vectorized noisy read of conductances ``g`` at voltages ``v`` (broadcast)."""
    g_eff = drifted(g, elapsed, nu, model.t0)
    i = g_eff * model.iv(v)
    if model.sigma_read_rel > 0:
        i = i * (1.0 + model.sigma_read_rel * rng.standard_normal(np.shape(i)))
    return quantize_current(i, model)


def currents_to_conductance(i, v, model: NoiseModel):
    """Invert the pseudo-Ohm's law: ``G = I / (alpha f(V))``."""
    return i / (model.alpha * model.iv(v))


def draw_drift_exponents(shape, model: NoiseModel, rng: np.random.Generator):
    if model.drift_nu_std == 0:
        return np.full(shape, model.drift_nu_mean)
    nu = rng.normal(model.drift_nu_mean, model.drift_nu_std, size=shape)
    return np.maximum(nu, 0.0)


@dataclass
class ProgramResult:
    g: np.ndarray
    verify_read: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray


def program_devices(targets, model: NoiseModel, rng: np.random.Generator,
                    margin: Optional[float] = None,
                    max_iters: Optional[int] = None) -> ProgramResult:
    """Program-and-verify a batch of devices.

    Each pulse moves the stored conductance by the error seen in the last
    verify read, plus Gaussian error of std ``sigma_prog``; the result is
    clipped to ``[0, g_max]``. A device stops when its verify read is within
    ``margin`` of the target. Devices that run out of pulses keep their best
    verified state and report ``converged=False``. Zero targets are left in
    the reset state (g = 0) without pulsing.
    """
    margin = model.prog_margin if margin is None else margin
    max_iters = model.prog_max_iters if max_iters is None else max_iters
    if margin <= 0:
        raise DomainError("margin must be > 0")
    if max_iters < 1:
        raise DomainError("max_iters must be >= 1")
    targets = np.asarray(targets, dtype=float)
    if np.any(targets < 0) or np.any(targets > model.g_max):
        raise DomainError(f"target conductance must lie in [0, {model.g_max}] uS")

    shape = targets.shape
    t = targets.ravel()
    n = t.size
    g = np.zeros(n)
    read = np.zeros(n)
    best_g = np.zeros(n)
    best_read = np.zeros(n)
    best_err = np.abs(t)
    converged = t == 0
    iterations = np.zeros(n, dtype=np.int64)
    active = np.flatnonzero(~converged)

    for _ in range(max_iters):
        if active.size == 0:
            break
        ta = t[active]
        step = ta - read[active]
        if model.sigma_prog > 0:
            step = step + model.sigma_prog * rng.standard_normal(active.size)
        ga = np.clip(g[active] + step, 0.0, model.g_max)
        ia = read_currents(ga, model.v_read_ref, 0.0, 0.0, model, rng)
        ra = currents_to_conductance(ia, model.v_read_ref, model)
        g[active] = ga
        read[active] = ra
        iterations[active] += 1
        err = np.abs(ra - ta)
        better = err < best_err[active]
        idx = active[better]
        best_g[idx] = ga[better]
        best_read[idx] = ra[better]
        best_err[idx] = err[better]
        done = err <= margin
        converged[active[done]] = True
        active = active[~done]

    # converged devices hold their last state, which is also within margin
    out_g = np.where(converged, g, best_g)
    out_read = np.where(converged, read, best_read)
    return ProgramResult(out_g.reshape(shape), out_read.reshape(shape),
                         converged.reshape(shape), iterations.reshape(shape))


def program_and_verify(target_g: float, margin: float = PROG_MARGIN,
                       max_iters: int = PROG_MAX_ITERS,
                       model: Optional[NoiseModel] = None, *,
                       rng_stream: int = 0, t_program: float = 0.0) -> DeviceState:
    """Program a single device; randomness comes from stream ``rng_stream``."""
    model = NoiseModel() if model is None else model
    if not (0 <= target_g <= model.g_max):
        raise DomainError(f"target conductance must lie in [0, {model.g_max}] uS")
    rng = derive_rng(model.seed, "device", rng_stream, "program")
    res = program_devices(np.array([target_g]), model, rng, margin, max_iters)
    nu = float(draw_drift_exponents(1, model, rng)[0])
    return DeviceState(
        g_programmed=float(res.g[0]),
        t_program=float(t_program),
        drift_nu=nu,
        rng_stream=int(rng_stream),
        converged=bool(res.converged[0]),
        iterations=int(res.iterations[0]),
        verify_read=float(res.verify_read[0]),
    )


def read_current(dev: DeviceState, v: float, t_now: float,
                 model: Optional[NoiseModel] = None, *, read_index: int = 0) -> float:
    """Read one device at voltage ``v`` and time ``t_now``; returns uA.

    Noise for read number ``read_index`` of a device is drawn from the stream
    keyed by ``(seed, rng_stream, read_index)``, so reads are pure functions
    of their arguments.
    """
    model = NoiseModel() if model is None else model
    if not (0.0 <= v <= model.v_max):
        raise DomainError(f"read voltage must lie in [0, {model.v_max}] V")
    if t_now < dev.t_program:
        raise DomainError("cannot read before the device was programmed")
    rng = derive_rng(model.seed, "device", dev.rng_stream, "read", read_index)
    i = read_currents(np.array([dev.g_programmed]), v, t_now - dev.t_program,
                      dev.drift_nu, model, rng)
    return float(i[0])
