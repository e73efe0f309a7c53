"""Tick-driven emulation of the feedback pipeline.

count binning -> boxcar prefilter -> IQ demodulation -> RBW boxcar ->
complex-to-polar -> LO phase lock -> amplitude-scheduled drive synthesis.

The per-tick work lives in numba kernels operating on flat arrays so that the
trajectory integrator can call them inline; :class:`ControllerState` is the
Python-side owner of those arrays.

Phase convention: a count-rate tone ``A sin(2 pi f_pfb t + theta)`` yields a
complex amplitude ``A exp(i (theta - pi/2))``.  The LO tracks the tone's
instantaneous sine phase, so the drive ``m sin(lo + phi_pfb)`` leads the
detected tone by ``phi_pfb``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.optimize import brentq

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi

# layout of ControllerState.f
F_PF_SUM, F_RBW_RE, F_RBW_IM, F_LO, F_AMP, F_MAG, F_MEAS, F_DRIVE, F_Z_RE, F_Z_IM, F_PERR = range(11)
N_F = 11
# layout of ControllerState.i
I_TICK, I_PF_POS, I_RBW_POS = range(3)
N_I = 3
# layout of the packed config vector
C_F_TICK, C_PHI, C_GAIN, C_MOD_MAX, C_MAG_REF, C_COMP_RE, C_COMP_IM = range(7)
N_C = 7


def boxcar_response(f, n: int, fs: float):
    """Complex frequency response of an ``n``-tap moving average sampled at ``fs``."""
    j = np.arange(n)
    f = np.atleast_1d(np.asarray(f, dtype=float))
    h = np.exp(-2j * np.pi * np.outer(f, j) / fs).mean(axis=1)
    return h if h.size > 1 else h[0]


def boxcar_3db_frequency(n: int, fs: float) -> float:
    """Half-power frequency of an ``n``-tap moving average (numeric root)."""
    if n == 1:
        return fs / 2.0

    def excess(f):
        return abs(boxcar_response(f, n, fs)) ** 2 - 0.5

    return brentq(excess, 1e-9 * fs, fs / n, xtol=1e-12 * fs)


def prefilter_length_for_bandwidth(bandwidth: float, fs: float) -> int:
    """Tap count whose boxcar 3 dB point lies closest to ``bandwidth``."""
    guess = max(1, int(round(0.4425 * fs / bandwidth)))
    candidates = [n for n in (guess - 1, guess, guess + 1) if n >= 1]
    return min(candidates, key=lambda n: abs(boxcar_3db_frequency(n, fs) - bandwidth))


@dataclass(frozen=True)
class ControllerConfig:
    f_pfb: float
    phi_pfb: float = 0.0
    tick: float = 8e-9
    n_periods: int = 1
    prefilter_len: int = 17
    lock_gain: float = 0.5
    mod_max: float = 0.11
    # RBW magnitude (counts/tick) of a full-swing 0 -> 1 transmission oscillation
    mag_ref: float = 0.5 * 1.0e6 * 8e-9
    compensate_prefilter: bool = True

    def __post_init__(self):
        if not (self.f_pfb > 0 and self.tick > 0):
            raise ValueError("f_pfb and tick must be positive")
        if self.f_pfb * self.tick >= 0.5:
            raise ValueError("f_pfb must lie below the tick Nyquist frequency")
        if self.n_periods < 1 or int(self.n_periods) != self.n_periods:
            raise ValueError("n_periods must be a positive integer")
        if self.prefilter_len < 1 or int(self.prefilter_len) != self.prefilter_len:
            raise ValueError("prefilter_len must be a positive integer")
        if not 0.0 < self.lock_gain <= 1.0:
            raise ValueError("lock_gain must lie in (0, 1]")
        if not 0.0 <= self.mod_max < 1.0:
            raise ValueError("mod_max must lie in [0, 1)")
        if not self.mag_ref > 0:
            raise ValueError("mag_ref must be positive")

    @classmethod
    def for_detection(cls, f_pfb: float, empty_detect_rate: float, tick: float = 8e-9,
                      reference_swing: float = 1.0, **kw):
        """Build a config whose gain map is referenced to ``empty_detect_rate``.

        The drive saturates at ``mod_max`` once the RBW magnitude reaches that of
        a transmission oscillation of peak-to-peak size ``reference_swing``
        (1.0 is the full 0 -> 1 swing).
        """
        if not reference_swing > 0:
            raise ValueError("reference_swing must be positive")
        return cls(f_pfb=f_pfb, tick=tick, mag_ref=0.5 * reference_swing * empty_detect_rate * tick, **kw)

    @property
    def rbw_len(self) -> int:
        # tau rounded to whole ticks; exact only when tick divides n/f_pfb
        return max(1, int(round(self.n_periods / (self.f_pfb * self.tick))))

    @property
    def tau(self) -> float:
        return self.rbw_len * self.tick

    @property
    def rbw_bandwidth(self) -> float:
        """3 dB half-width of the RBW filter, ``0.4425 f_pfb / n``."""
        return 0.4425 / self.tau

    def packed(self) -> np.ndarray:
        v = np.zeros(N_C)
        v[C_F_TICK] = self.f_pfb * self.tick
        v[C_PHI] = self.phi_pfb
        v[C_GAIN] = self.lock_gain
        v[C_MOD_MAX] = self.mod_max
        v[C_MAG_REF] = self.mag_ref
        comp = 1.0 + 0j
        if self.compensate_prefilter and self.prefilter_len > 1:
            comp = 1.0 / boxcar_response(self.f_pfb, self.prefilter_len, 1.0 / self.tick)
        v[C_COMP_RE] = comp.real
        v[C_COMP_IM] = comp.imag
        return v


@dataclass
class ControllerState:
    pf_buf: np.ndarray
    rbw_buf: np.ndarray
    f: np.ndarray = field(default_factory=lambda: np.zeros(N_F))
    i: np.ndarray = field(default_factory=lambda: np.zeros(N_I, dtype=np.int64))

    @classmethod
    def initial(cls, config: ControllerConfig) -> "ControllerState":
        return cls(pf_buf=np.zeros(config.prefilter_len),
                   rbw_buf=np.zeros(config.rbw_len, dtype=np.complex128))

    def copy(self) -> "ControllerState":
        return ControllerState(self.pf_buf.copy(), self.rbw_buf.copy(), self.f.copy(), self.i.copy())

    @property
    def tick_index(self) -> int:
        return int(self.i[I_TICK])

    @property
    def lo_phase(self) -> float:
        return float(self.f[F_LO])

    @property
    def scheduled_amplitude(self) -> float:
        return float(self.f[F_AMP])

    @property
    def magnitude(self) -> float:
        return float(self.f[F_MAG])

    @property
    def amplitude(self) -> complex:
        return complex(self.f[F_Z_RE], self.f[F_Z_IM])

    @property
    def phase_error(self) -> float:
        """Measured tone phase minus the free-running LO phase at the last update."""
        return float(self.f[F_PERR])


@dataclass(frozen=True)
class DriveSample:
    modulation: float


@njit(cache=True)
def wrap_phase(x):
    """Wrap to (-pi, pi]."""
    y = x + math.pi
    y -= TWO_PI * math.floor(y / TWO_PI)
    y -= math.pi
    if y == -math.pi:
        y = math.pi
    return y


@njit(cache=True)
def _prefilter(count, pf_buf, f, i):
    n = pf_buf.shape[0]
    pos = i[I_PF_POS]
    f[F_PF_SUM] += count - pf_buf[pos]
    pf_buf[pos] = count
    pos += 1
    if pos == n:
        pos = 0
    i[I_PF_POS] = pos
    return f[F_PF_SUM] / n


@njit(cache=True)
def _lo_carrier(tick_index, f_tick):
    x = tick_index * f_tick
    return TWO_PI * (x - math.floor(x))


@njit(cache=True)
def _demodulate(sample, tick_index, f_tick):
    ph = _lo_carrier(tick_index, f_tick)
    return 2.0 * sample * complex(math.cos(ph), -math.sin(ph))


@njit(cache=True)
def _rbw(z, rbw_buf, f, i):
    n = rbw_buf.shape[0]
    pos = i[I_RBW_POS]
    old = rbw_buf[pos]
    rbw_buf[pos] = z
    pos += 1
    if pos == n:
        pos = 0
        # exact resum once per window bounds round-off drift
        s = 0j
        for k in range(n):
            s += rbw_buf[k]
        f[F_RBW_RE] = s.real
        f[F_RBW_IM] = s.imag
    else:
        f[F_RBW_RE] += z.real - old.real
        f[F_RBW_IM] += z.imag - old.imag
    i[I_RBW_POS] = pos
    return complex(f[F_RBW_RE], f[F_RBW_IM]) / n


@njit(cache=True)
def _lock(lo_phase, measured_phase, gain):
    return wrap_phase(lo_phase + gain * wrap_phase(measured_phase - lo_phase))


@njit(cache=True)
def _schedule(magnitude, mod_max, mag_ref):
    r = magnitude / mag_ref
    if r > 1.0:
        r = 1.0
    return mod_max * r


@njit(cache=True)
def _process_tick(count, pf_buf, rbw_buf, f, i, c):
    k = i[I_TICK]
    f_tick = c[C_F_TICK]
    x = _prefilter(count, pf_buf, f, i)
    z = _demodulate(x, k, f_tick)
    zr = _rbw(z, rbw_buf, f, i) * complex(c[C_COMP_RE], c[C_COMP_IM])
    mag = abs(zr)
    lo = wrap_phase(f[F_LO] + TWO_PI * f_tick)
    if mag > 0.0:
        meas = wrap_phase(_lo_carrier(k, f_tick) + math.atan2(zr.imag, zr.real) + HALF_PI)
        f[F_MEAS] = meas
        f[F_PERR] = wrap_phase(meas - lo)
        lo = _lock(lo, meas, c[C_GAIN])
    f[F_LO] = lo
    amp = _schedule(mag, c[C_MOD_MAX], c[C_MAG_REF])
    drive = amp * math.sin(lo + c[C_PHI])
    f[F_MAG] = mag
    f[F_Z_RE] = zr.real
    f[F_Z_IM] = zr.imag
    f[F_AMP] = amp
    f[F_DRIVE] = drive
    i[I_TICK] = k + 1
    return drive


@njit(cache=True)
def _run_pipeline(counts, pf_buf, rbw_buf, f, i, c, drive, mag, lo, perr):
    for n in range(counts.shape[0]):
        drive[n] = _process_tick(counts[n], pf_buf, rbw_buf, f, i, c)
        mag[n] = f[F_MAG]
        lo[n] = f[F_LO]
        perr[n] = f[F_PERR]


# public single-stage API -------------------------------------------------

def prefilter(count, state: ControllerState) -> float:
    """Push one tick's count through the boxcar prefilter."""
    return _prefilter(float(count), state.pf_buf, state.f, state.i)


def demodulate(sample, tick_index: int, f_pfb: float, tick: float) -> complex:
    """Mix ``sample`` down with the fixed LO reference ``2 exp(-i 2 pi f_pfb k tick)``."""
    return _demodulate(float(sample), int(tick_index), f_pfb * tick)


def rbw_integrate(z: complex, state: ControllerState) -> complex:
    """Boxcar mean of the last ``tau`` complex samples."""
    return _rbw(complex(z), state.rbw_buf, state.f, state.i)


def lock_lo(measured_phase: float, state: ControllerState, lock_gain: float) -> float:
    """First-order phase-lock update; stores and returns the new LO phase."""
    if not 0.0 < lock_gain <= 1.0:
        raise ValueError("lock_gain must lie in (0, 1]")
    lo = _lock(state.f[F_LO], float(measured_phase), lock_gain)
    state.f[F_LO] = lo
    return lo


def schedule_gain(magnitude: float, mod_max: float, mag_ref: float) -> float:
    """Linear magnitude-to-modulation map saturating at ``mod_max``."""
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    return _schedule(float(magnitude), mod_max, mag_ref)


def process_tick(count, state: ControllerState, config: ControllerConfig) -> DriveSample:
    """Run one full pipeline tick, mutating ``state``; returns the drive sample."""
    drive = _process_tick(float(count), state.pf_buf, state.rbw_buf, state.f, state.i, config.packed())
    return DriveSample(float(drive))


@dataclass
class PipelineTrace:
    drive: np.ndarray
    magnitude: np.ndarray
    lo_phase: np.ndarray
    phase_error: np.ndarray


def run_pipeline(counts, config: ControllerConfig, state: ControllerState | None = None) -> PipelineTrace:
    """Replay a count stream through the pipeline."""
    counts = np.ascontiguousarray(counts, dtype=float)
    if state is None:
        state = ControllerState.initial(config)
    n = counts.shape[0]
    out = PipelineTrace(np.empty(n), np.empty(n), np.empty(n), np.empty(n))
    _run_pipeline(counts, state.pf_buf, state.rbw_buf, state.f, state.i, config.packed(),
                  out.drive, out.magnitude, out.lo_phase, out.phase_error)
    return out


# stream files ------------------------------------------------------------

def write_stream(path, values, header: str = "count") -> Path:
    """Write ``(tick_index, value)`` rows as CSV, or as int64/float64 pairs for ``.bin``."""
    path = Path(path)
    values = np.asarray(values)
    if path.suffix == ".bin":
        if header == "count":
            rows = np.column_stack([np.arange(values.size), values.astype(np.int64)]).astype("<i8")
        else:
            rows = np.empty(values.size, dtype=[("tick_index", "<i8"), ("value", "<f8")])
            rows["tick_index"] = np.arange(values.size)
            rows["value"] = values
        path.write_bytes(rows.tobytes())
        return path
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tick_index", header])
        for k, v in enumerate(values.tolist()):
            w.writerow([k, repr(float(v)) if header != "count" else int(v)])
    return path


def read_stream(path, header: str = "count") -> np.ndarray:
    """Inverse of :func:`write_stream`; rows must be contiguous from tick 0."""
    path = Path(path)
    if path.suffix == ".bin":
        raw = path.read_bytes()
        if header == "count":
            rows = np.frombuffer(raw, dtype="<i8").reshape(-1, 2)
            idx, values = rows[:, 0], rows[:, 1]
        else:
            rows = np.frombuffer(raw, dtype=[("tick_index", "<i8"), ("value", "<f8")])
            idx, values = rows["tick_index"], rows["value"]
    else:
        with path.open(newline="") as fh:
            r = csv.reader(fh)
            head = next(r)
            if head[0] != "tick_index":
                raise ValueError(f"{path}: expected a tick_index column, got {head!r}")
            rows = [(int(a), float(b)) for a, b in r]
        idx = np.array([a for a, _ in rows], dtype=np.int64)
        values = np.array([b for _, b in rows])
        if header == "count":
            values = values.astype(np.int64)
    if not np.array_equal(idx, np.arange(idx.size)):
        raise ValueError(f"{path}: tick indices are not contiguous from 0")
    return np.array(values)
