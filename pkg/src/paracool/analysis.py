"""Transmission spectra, Q-factor fitting, storage statistics and phase-sweep fits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import signal
from scipy.optimize import lsq_linear, minimize, nnls

from .cavity import CavityParams, TrapParams, derive_trap_frequencies, radial_frequency_shift

TWO_PI = 2.0 * math.pi
MIN_SPECTRUM_LEN = 2**10
TRAPPED_THRESHOLD = 2e-3


class FitError(RuntimeError):
    """A fit failed to converge."""


class DegenerateStatsError(ValueError):
    """No trapped trajectories to average over."""


# spectra ----------------------------------------------------------------

def power_spectrum(series, sample_dt: float, nperseg: int | None = None):
    """One-sided Welch PSD (Hann window, 50% overlap, mean removed per segment).

    Returns ``(freqs, psd)`` with ``psd`` in units of ``series**2 / Hz``, so
    ``sum(psd) * df`` equals the variance of the series.
    """
    x = np.asarray(series, dtype=float)
    if x.size < MIN_SPECTRUM_LEN:
        raise ValueError(f"series too short for a spectrum: {x.size} < {MIN_SPECTRUM_LEN}")
    if nperseg is None:
        nperseg = min(x.size, 2**12)
    if nperseg > x.size:
        raise ValueError("nperseg longer than series")
    return signal.welch(x, fs=1.0 / sample_dt, window="hann", nperseg=nperseg,
                        noverlap=nperseg // 2, detrend="constant", scaling="density")


def _median_bias(n: int) -> float:
    # ratio of the sample median to the mean of n chi-squared(2) variates
    k = np.arange(1, (n - 1) // 2 + 1)
    return float(1.0 + np.sum(1.0 / (2 * k + 1) - 1.0 / (2 * k)))


def ensemble_power_spectrum(series_list, sample_dt: float, nperseg: int = 2**10,
                            average: str = "mean"):
    """Welch PSD pooled over the segments of many series.

    ``average='mean'`` weights every segment equally (the segment-weighted mean
    of :func:`power_spectrum`).  ``'median'`` takes the bias-corrected median
    of the pooled segment periodograms, which keeps a handful of violent
    segments from dominating.  Series shorter than ``nperseg`` are skipped.
    Returns ``(freqs, psd, n_segments)``.
    """
    if average not in ("mean", "median"):
        raise ValueError("average must be 'mean' or 'median'")
    segs, freqs = [], None
    for s in series_list:
        s = np.asarray(s, dtype=float)
        if s.size < max(nperseg, MIN_SPECTRUM_LEN):
            continue
        freqs, _, sxx = signal.spectrogram(s, fs=1.0 / sample_dt, window="hann", nperseg=nperseg,
                                           noverlap=nperseg // 2, detrend="constant",
                                           scaling="density", mode="psd")
        segs.append(sxx)
    if not segs:
        raise ValueError("no series long enough for the requested segment length")
    pooled = np.concatenate(segs, axis=1)
    n = pooled.shape[1]
    if average == "mean":
        psd = pooled.mean(axis=1)
    else:
        psd = np.median(pooled, axis=1) / _median_bias(n)
    return freqs, psd, n


# Q-factor fitting -------------------------------------------------------

@dataclass(frozen=True)
class SpectrumFit:
    q_factor: float
    peak_freq: float
    # 1/f background at the resonance relative to the line peak
    noise_amp: float
    fit_residual: float
    softening: float
    line_amp: float
    background: float
    model: str
    converged: bool

    @property
    def amp_ratio(self) -> float:
        """Radial amplitude/waist implied by the softening (analytic model only)."""
        return math.sqrt(max(self.softening, 0.0) / 0.75)


def oscillator_line(f, fc, q):
    """Power response of a damped oscillator, unity at ``f -> 0``."""
    u = np.asarray(f, dtype=float) / fc
    return 1.0 / ((1.0 - u * u) ** 2 + (u / q) ** 2)


def analytic_transmission_psd(f, f_rho: float, q: float, amp_ratio: float = 0.0,
                              line_amp: float = 1.0, background: float = 0.0,
                              nonlinear: bool = True):
    """Second-harmonic forward model of the transmission spectrum.

    Radial motion through the Gaussian coupling modulates the transmission at
    twice the oscillation frequency, so the line sits at ``2 f_rho`` with the
    oscillator's quality factor; the anharmonic trap softens it by
    ``3/4 (A/w)^2``.  ``background`` is the coefficient of a ``1/f`` floor.
    """
    shift = radial_frequency_shift(amp_ratio) if nonlinear else 0.0
    fc = 2.0 * f_rho * (1.0 + shift)
    f = np.asarray(f, dtype=float)
    return line_amp * oscillator_line(f, fc, q) + background / f


@njit(cache=True)
def _langevin_transmission(n_samples, every, dt, w_r, damping, sigma_v, inv_w2t, inv_w02,
                           kg, g0, x0, seed, out):
    # BAOAB splitting in the 1D Gaussian radial potential
    np.random.seed(seed)
    x = x0
    v = 0.0
    c1 = math.exp(-damping * dt)
    c2 = math.sqrt(1.0 - c1 * c1) * sigma_v
    # force per unit mass for U = -U0 exp(-2x^2/w^2): -(w_r^2) x exp(-2x^2/w^2)
    a = -w_r * w_r * x * math.exp(-2.0 * x * x * inv_w2t)
    for k in range(n_samples):
        acc = 0.0
        for _ in range(every):
            v += 0.5 * dt * a
            x += 0.5 * dt * v
            v = c1 * v + c2 * np.random.normal()
            x += 0.5 * dt * v
            a = -w_r * w_r * x * math.exp(-2.0 * x * x * inv_w2t)
            v += 0.5 * dt * a
            g = g0 * math.exp(-x * x * inv_w02)
            t = kg / (kg + g * g)
            acc += t * t
        out[k] = acc / every


def synthesize_transmission(q: float, amp_ratio: float, cavity: CavityParams, trap: TrapParams,
                            sample_dt: float = 10e-6, n_samples: int = 2**16, seed: int = 12345,
                            substeps: int = 10) -> np.ndarray:
    """Transmission time series of a stochastically driven, damped radial oscillator.

    The oscillator moves in the full Gaussian trap potential with energy
    damping rate ``omega_rho / q`` and a thermal drive whose temperature puts
    the harmonic-approximation rms amplitude at ``amp_ratio * waist / sqrt(2)``.
    """
    w_r = derive_trap_frequencies(trap)[0]
    # kT/m = w_r^2 <x^2>, <x^2> = A^2/2
    sigma_v = w_r * amp_ratio * trap.waist / math.sqrt(2.0)
    out = np.empty(n_samples)
    _langevin_transmission(n_samples, substeps, sample_dt / substeps, w_r, w_r / q, sigma_v,
                           1.0 / trap.waist**2, 1.0 / cavity.mode_waist**2, cavity.kappa_gamma,
                           cavity.g0, 0.0, seed, out)
    return out


def synthesis_transmission_psd(f, q: float, amp_ratio: float, cavity: CavityParams, trap: TrapParams,
                               sample_dt: float = 10e-6, n_samples: int = 2**16, seed: int = 12345,
                               nperseg: int = 2**10):
    """PSD of :func:`synthesize_transmission`, interpolated onto ``f``."""
    series = synthesize_transmission(q, amp_ratio, cavity, trap, sample_dt, n_samples, seed)
    freqs, psd = power_spectrum(series, sample_dt, nperseg)
    return np.interp(f, freqs, psd)


def _fit_linear(shape, f, psd):
    # relative residuals: minimise sum(((a*shape + b/f) - psd) / psd)^2 with a, b >= 0
    design = np.column_stack([shape / psd, 1.0 / (f * psd)])
    norm = np.linalg.norm(design, axis=0)
    norm[norm == 0] = 1.0
    coef, _ = nnls(design / norm, np.ones_like(psd))
    coef = coef / norm
    resid = design @ coef - 1.0
    return coef, float(np.sqrt(np.mean(resid**2)))


def fit_q_factor(freqs, psd, f_rho: float, model: str = "analytic",
                 cavity: CavityParams | None = None, trap: TrapParams | None = None,
                 band=(0.2, 4.0), n_starts: int = 8, maxiter: int = 2000,
                 synthesis_kw: dict | None = None) -> SpectrumFit:
    """Least-squares fit of the transmission-spectrum forward model.

    Fits the oscillator quality factor ``Q``, the anharmonic softening of the
    line (``model='analytic'``) or the motional amplitude (``'synthesis'``),
    a line amplitude and a ``b/f`` background over ``band * 2 f_rho``.  The
    nonlinear parameters are searched with a multi-start Nelder-Mead simplex;
    the amplitude and background are solved by non-negative least squares at
    every simplex vertex.
    """
    freqs = np.asarray(freqs, dtype=float)
    psd = np.asarray(psd, dtype=float)
    f2 = 2.0 * f_rho
    lo, hi = band[0] * f2, band[1] * f2
    if freqs.max() < hi or freqs[freqs > 0].min() > lo:
        raise ValueError(f"PSD must cover [{lo:.4g}, {hi:.4g}] Hz")
    sel = (freqs >= lo) & (freqs <= hi) & (psd > 0)
    f, p = freqs[sel], psd[sel]
    if f.size < 8:
        raise ValueError("PSD window too narrow for a Q fit")

    if model == "analytic":
        def shape(theta):
            q = math.exp(theta[0])
            fc = f2 * (1.0 - theta[1])
            return oscillator_line(f, fc, q)
        # seed the softening at the data's own peak as well as at the bare resonance
        s_peak = float(np.clip(1.0 - f[np.argmax(p * f)] / f2, -0.4, 0.8))
        starts = [(math.log(q0), s0) for s0 in (s_peak, 0.0) for q0 in (1.5, 3.0, 6.0, 12.0)][:n_starts]
    elif model == "synthesis":
        if cavity is None or trap is None:
            raise ValueError("synthesis model needs cavity and trap parameters")
        kw = dict(synthesis_kw or {})

        def shape(theta):
            q = math.exp(theta[0])
            amp = abs(theta[1])
            return synthesis_transmission_psd(f, q, amp, cavity, trap, **kw)
        starts = [(math.log(q0), a0) for q0 in (1.5, 3.0, 6.0, 12.0) for a0 in (0.3, 0.6)][:n_starts]
    else:
        raise ValueError(f"unknown model {model!r}")

    def objective(theta):
        if model == "analytic" and not -0.5 < theta[1] < 0.9:
            return 1e6
        if not -2.0 < theta[0] < 6.0:
            return 1e6
        return _fit_linear(shape(theta), f, p)[1]

    best = None
    for s in starts:
        res = minimize(objective, np.array(s, dtype=float), method="Nelder-Mead",
                       options=dict(maxiter=maxiter, xatol=1e-8, fatol=1e-12))
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.isfinite(best.fun) or best.fun >= 1e6:
        raise FitError(f"Q fit did not converge (residual {getattr(best, 'fun', np.nan)})")
    theta = best.x
    (a, b), resid = _fit_linear(shape(theta), f, p)
    q = math.exp(theta[0])
    if model == "analytic":
        softening = float(theta[1])
    else:
        softening = float(-radial_frequency_shift(abs(theta[1])))
    fc = f2 * (1.0 - softening)
    peak_line = a * float(oscillator_line(fc * math.sqrt(max(1 - 0.5 / q**2, 0.0)), fc, q))
    noise_amp = (b / fc) / peak_line if peak_line > 0 else math.inf
    return SpectrumFit(q_factor=q, peak_freq=fc, noise_amp=noise_amp, fit_residual=resid,
                       softening=softening, line_amp=float(a), background=float(b),
                       model=model, converged=bool(best.success))


# storage statistics -----------------------------------------------------

@dataclass(frozen=True)
class StorageStats:
    mean: float
    sem: float
    count: int
    total: int
    trapped_fraction: float


def storage_stats(results, threshold: float = TRAPPED_THRESHOLD) -> StorageStats:
    """Mean and standard error of the storage time over trapped trajectories.

    Accepts :class:`~paracool.dynamics.TrajectoryResult` objects or plain
    storage times in seconds.
    """
    times = np.array([getattr(r, "storage_time", r) for r in results], dtype=float)
    if times.size == 0:
        raise DegenerateStatsError("no trajectories")
    trapped = np.sort(times[times >= threshold])
    if trapped.size == 0:
        raise DegenerateStatsError(f"none of {times.size} trajectories stayed {threshold * 1e3:g} ms")
    sem = float(np.std(trapped, ddof=1) / math.sqrt(trapped.size)) if trapped.size > 1 else math.nan
    return StorageStats(mean=float(np.mean(trapped)), sem=sem, count=int(trapped.size),
                        total=int(times.size), trapped_fraction=trapped.size / times.size)


# phase-sweep fits -------------------------------------------------------

def wrap(phase):
    """Wrap to (-pi, pi]."""
    out = np.mod(np.asarray(phase, dtype=float) + np.pi, TWO_PI) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    return float(out) if out.ndim == 0 else out


def _weights(sems, n):
    if sems is None:
        return np.ones(n)
    sems = np.asarray(sems, dtype=float)
    if sems.shape != (n,) or not np.all(np.isfinite(sems)) or np.any(sems <= 0):
        return np.ones(n)
    return 1.0 / sems**2


@dataclass(frozen=True)
class PeriodicGaussianFit:
    amplitude: float
    center: float
    width: float
    baseline: float
    residual: float
    degenerate: bool

    def __call__(self, phase):
        return self.amplitude * np.exp(-wrap(np.asarray(phase) - self.center) ** 2
                                       / (2 * self.width**2)) + self.baseline

    @property
    def optimal_phase(self) -> float:
        return self.center


def fit_periodic_gaussian(phases, means, sems=None, n_starts: int = 8) -> PeriodicGaussianFit:
    """Weighted fit of ``A exp(-wrap(phi - phi0)^2 / (2 sigma^2)) + B``.

    ``A >= 0`` and ``B`` enter linearly; ``phi0`` and ``log sigma`` are searched
    by multi-start Nelder-Mead.  The fit is flagged degenerate when the
    amplitude vanishes or the width runs into its bounds.
    """
    phi = np.asarray(phases, dtype=float)
    y = np.asarray(means, dtype=float)
    if phi.size < 5:
        raise ValueError("need at least 5 phase points")
    spread = np.ptp(np.unwrap(np.sort(wrap(phi))))
    if spread < 1.5 * np.pi - 1e-9:
        raise ValueError("phase points must span at least 1.5 pi")
    sw = np.sqrt(_weights(sems, phi.size))
    scale = float(np.max(np.abs(y))) or 1.0
    sig_lo, sig_hi = 0.05, 2.0 * np.pi

    def linear(theta):
        phi0, log_sig = theta
        sig = math.exp(log_sig)
        g = np.exp(-wrap(phi - phi0) ** 2 / (2 * sig * sig))
        design = np.column_stack([g, np.ones_like(g)]) * sw[:, None]
        res = lsq_linear(design, y * sw / scale, bounds=([0.0, -np.inf], [np.inf, np.inf]))
        return res.x * scale, float(np.sum(((design @ res.x) - y * sw / scale) ** 2))

    def objective(theta):
        if not math.log(sig_lo) <= theta[1] <= math.log(sig_hi):
            return 1e12
        return linear(theta)[1]

    best = None
    for phi0 in np.linspace(-np.pi, np.pi, n_starts, endpoint=False):
        res = minimize(objective, np.array([phi0, math.log(0.7)]), method="Nelder-Mead",
                       options=dict(maxiter=2000, xatol=1e-9, fatol=1e-14))
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.isfinite(best.fun) or best.fun >= 1e12:
        raise FitError("periodic Gaussian fit did not converge")
    (a, b), ss = linear(best.x)
    sig = math.exp(best.x[1])
    degenerate = bool(a <= 1e-6 * max(abs(b), 1e-300) or a <= 1e-12 * scale
                      or sig <= sig_lo * 1.01 or sig >= sig_hi * 0.99)
    return PeriodicGaussianFit(amplitude=float(a), center=wrap(best.x[0]), width=sig,
                               baseline=float(b), residual=ss, degenerate=degenerate)


def fit_phase_dip(phases, means, sems=None, n_starts: int = 8) -> PeriodicGaussianFit:
    """Locate the heating side of a phase sweep.

    Fits the periodic Gaussian to the negated curve, so ``center`` is the
    middle of the storage-time dip and ``amplitude`` its depth; the returned
    model describes ``-means``.  Heating floors are flat, which makes a plain
    argmin unstable.
    """
    return fit_periodic_gaussian(phases, -np.asarray(means, dtype=float), sems, n_starts)


@dataclass(frozen=True)
class SinusoidFit:
    amplitude: float
    phase: float
    baseline: float
    amplitude_err: float
    phase_err: float
    baseline_err: float
    residual: float

    def __call__(self, phase):
        return self.amplitude * np.sin(np.asarray(phase) - self.phase) + self.baseline

    @property
    def optimal_phase(self) -> float:
        """Phase advance of the sinusoid's maximum."""
        return wrap(self.phase + np.pi / 2)

    @property
    def significance(self) -> float:
        return self.amplitude / self.amplitude_err if self.amplitude_err > 0 else math.inf


def fit_sinusoid(phases, means, sems=None) -> SinusoidFit:
    """Weighted linear least squares of ``A sin(phi - phi0) + B`` (A >= 0)."""
    phi = np.asarray(phases, dtype=float)
    y = np.asarray(means, dtype=float)
    if np.unique(np.round(wrap(phi), 12)).size < 3:
        raise ValueError("need at least 3 distinct phases")
    w = _weights(sems, phi.size)
    design = np.column_stack([np.sin(phi), np.cos(phi), np.ones_like(phi)])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    resid = (design @ coef - y) * sw
    ss = float(resid @ resid)
    cov = np.linalg.pinv((design * w[:, None]).T @ design)
    dof = phi.size - 3
    if sems is None or np.all(w == 1.0):
        cov *= ss / dof if dof > 0 else 0.0
    elif dof > 0:
        # inflate only when the scatter exceeds the quoted errors
        cov *= max(1.0, ss / dof)
    s, c, b = coef
    amp = math.hypot(s, c)
    # A sin(phi - phi0) = A cos(phi0) sin(phi) - A sin(phi0) cos(phi)
    phi0 = math.atan2(-c, s)
    if amp > 0:
        jac_a = np.array([s / amp, c / amp, 0.0])
        jac_p = np.array([c / amp**2, -s / amp**2, 0.0])
        amp_err = math.sqrt(max(jac_a @ cov @ jac_a, 0.0))
        ph_err = math.sqrt(max(jac_p @ cov @ jac_p, 0.0))
    else:
        amp_err = math.sqrt(max(cov[0, 0], 0.0))
        ph_err = math.inf
    return SinusoidFit(amplitude=amp, phase=wrap(phi0), baseline=float(b), amplitude_err=amp_err,
                       phase_err=ph_err, baseline_err=math.sqrt(max(cov[2, 2], 0.0)), residual=ss)
