"""Static atom-cavity physics: coupling, transmission, scattering and trap maps.

All functions are pure and accept either scalars or numpy arrays.  The cavity
axis is ``z``; ``x`` and ``y`` are the radial coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import constants as sc

TWO_PI = 2.0 * math.pi
RB85_MASS = 84.911789738 * sc.atomic_mass


def trap_wavelength_from_fsr(probe_wavelength: float, cavity_length: float, n_fsr: int = 4) -> float:
    """Wavelength lying ``n_fsr`` free spectral ranges red of ``probe_wavelength``."""
    fsr = sc.c / (2.0 * cavity_length)
    return sc.c / (sc.c / probe_wavelength - n_fsr * fsr)


@dataclass(frozen=True)
class CavityParams:
    g0: float = TWO_PI * 16.0e6
    kappa: float = TWO_PI * 1.5e6
    gamma: float = TWO_PI * 3.0e6
    mode_waist: float = 19.1e-6
    probe_wavelength: float = 780.0e-9
    trap_wavelength: float = trap_wavelength_from_fsr(780.0e-9, 260.0e-6, 4)
    cavity_length: float = 260.0e-6
    # counts/s with no atom coupled; a free calibration (detector efficiency unknown)
    empty_detect_rate: float = 1.0e6
    # peak free-space scattering rate, reached at g**2 = kappa*gamma
    max_scatter_rate: float = 1.0e5

    def __post_init__(self):
        for name in ("g0", "kappa", "gamma", "mode_waist", "probe_wavelength",
                     "trap_wavelength", "cavity_length", "empty_detect_rate", "max_scatter_rate"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"CavityParams.{name} must be finite and > 0, got {value!r}")
        if not (self.g0 > self.kappa and self.g0 > self.gamma):
            raise ValueError("CavityParams requires strong coupling: g0 > kappa and g0 > gamma")
        if not self.trap_wavelength > self.probe_wavelength:
            raise ValueError("trap_wavelength must exceed probe_wavelength (red-detuned trap)")

    @property
    def kappa_gamma(self) -> float:
        return self.kappa * self.gamma

    def with_(self, **changes) -> "CavityParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class TrapParams:
    depth: float = sc.k * 850e-6
    waist: float = 19.1e-6
    wavelength: float = trap_wavelength_from_fsr(780.0e-9, 260.0e-6, 4)
    atom_mass: float = RB85_MASS

    def __post_init__(self):
        for name in ("depth", "waist", "wavelength", "atom_mass"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"TrapParams.{name} must be finite and > 0, got {value!r}")

    def with_(self, **changes) -> "TrapParams":
        return replace(self, **changes)


def coupling_at(pos, c: CavityParams):
    """Atom-cavity coupling g at ``pos`` (rad/s).

    Gaussian in the radial direction, standing-wave cosine along the axis.
    The sign flips between antinodes; only ``g**2`` is physical.
    """
    pos = np.asarray(pos, dtype=float)
    x, y, z = pos[..., 0], pos[..., 1], pos[..., 2]
    r2 = x * x + y * y
    return c.g0 * np.exp(-r2 / c.mode_waist**2) * np.cos(TWO_PI * z / c.probe_wavelength)


def transmission(g, c: CavityParams):
    """On-resonance probe transmission normalised to the empty cavity."""
    kg = c.kappa_gamma
    return (kg / (kg + np.square(g))) ** 2


def scattering_rate(g, c: CavityParams):
    """Free-space scattering rate, peak-normalised to ``c.max_scatter_rate``.

    The atomic excitation of the driven coupled system scales as
    ``g**2 * kappa*gamma / (kappa*gamma + g**2)**2``, whose maximum over ``g``
    is 1/4 at ``g**2 = kappa*gamma``.
    """
    kg = c.kappa_gamma
    g2 = np.square(g)
    return c.max_scatter_rate * 4.0 * g2 * kg / (kg + g2) ** 2


def detection_rate(g, c: CavityParams):
    return c.empty_detect_rate * transmission(g, c)


def trap_potential(pos, t: TrapParams, mod: float = 0.0):
    """Dipole potential ``-U0 (1+mod) exp(-2 r^2/w^2) cos^2(k z)`` in joules."""
    pos = np.asarray(pos, dtype=float)
    x, y, z = pos[..., 0], pos[..., 1], pos[..., 2]
    r2 = x * x + y * y
    kz = TWO_PI * z / t.wavelength
    return -t.depth * (1.0 + mod) * np.exp(-2.0 * r2 / t.waist**2) * np.cos(kz) ** 2


def trap_force(pos, t: TrapParams, mod: float = 0.0):
    """Analytic ``-grad U`` of :func:`trap_potential`, shape ``(..., 3)``."""
    pos = np.asarray(pos, dtype=float)
    x, y, z = pos[..., 0], pos[..., 1], pos[..., 2]
    k = TWO_PI / t.wavelength
    envelope = t.depth * (1.0 + mod) * np.exp(-2.0 * (x * x + y * y) / t.waist**2)
    c2 = np.cos(k * z) ** 2
    w2 = t.waist**2
    fx = -4.0 * x / w2 * envelope * c2
    fy = -4.0 * y / w2 * envelope * c2
    fz = -envelope * k * np.sin(2.0 * k * z)
    return np.stack([fx, fy, fz], axis=-1)


def derive_trap_frequencies(t: TrapParams) -> tuple[float, float]:
    """Harmonic (radial, axial) angular frequencies at the trap minimum."""
    omega_r = 2.0 / t.waist * math.sqrt(t.depth / t.atom_mass)
    omega_z = TWO_PI / t.wavelength * math.sqrt(2.0 * t.depth / t.atom_mass)
    return omega_r, omega_z


def radial_frequency_shift(amplitude_ratio):
    """Leading-order fractional frequency shift of a 1D radial oscillation.

    For ``-U0 exp(-2x^2/w^2)`` the quartic term gives
    ``delta_omega/omega = -3/4 (A/w)^2``.
    """
    return -0.75 * np.square(amplitude_ratio)


def recoil_velocity(c: CavityParams, t: TrapParams) -> float:
    """Single-photon recoil velocity ``h / (lambda_probe m)``."""
    return sc.h / (c.probe_wavelength * t.atom_mass)
