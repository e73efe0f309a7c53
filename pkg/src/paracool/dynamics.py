"""Semiclassical stochastic atom trajectories in the modulated dipole trap.

The atom is a point particle integrated with velocity Verlet under the
instantaneous (possibly modulated) trap potential.  Probe back-action enters as
discrete recoil kicks at the free-space scattering rate; detected photons are
Poisson counts at the transmission-dependent detection rate.  The feedback
controller of :mod:`paracool.dsp` runs inline at its own tick.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from . import dsp
from .cavity import (
    CavityParams,
    TrapParams,
    derive_trap_frequencies,
    detection_rate,
    recoil_velocity,
    scattering_rate,
    trap_potential,
)

TWO_PI = 2.0 * math.pi

# Back-action amplification over bare photon recoil; calibrated so that the
# fitted Q of the no-feedback transmission spectrum lands near 2.8.
# Regenerate with scripts/calibrate_kick_scale.py.
KICK_SCALE_DEFAULT = 3.5

# packed physics vector
(P_U0, P_WT2, P_KT, P_MASS, P_G0, P_W02, P_KP, P_KG, P_R_DET, P_R_SC,
 P_VKICK, P_AX_DAMP, P_DT, P_ESC_R2, P_RADIAL) = range(15)
N_P = 15

# diagnostics columns
DIAG_COLUMNS = ("t", "x", "y", "z", "energy", "transmission", "magnitude", "lo_phase",
                "phase_error", "modulation")
N_DIAG = len(DIAG_COLUMNS)

CTRL_NONE, CTRL_FEEDBACK, CTRL_OPEN_LOOP = 0, 1, 2
ESCAPE_NONE, ESCAPE_ENERGY, ESCAPE_RADIUS, BLOWUP = 0, 1, 2, 3
ESCAPE_CHANNELS = {ESCAPE_NONE: "none", ESCAPE_ENERGY: "energy", ESCAPE_RADIUS: "radius"}


@dataclass(frozen=True)
class AtomState:
    pos: np.ndarray
    vel: np.ndarray
    t: float = 0.0

    def energy(self, trap: TrapParams, mod: float = 0.0) -> float:
        return float(0.5 * trap.atom_mass * np.dot(self.vel, self.vel) + trap_potential(self.pos, trap, mod))


@dataclass(frozen=True)
class NoiseModel:
    kick_scale: float = KICK_SCALE_DEFAULT
    axial_extra_damping: float = 0.0
    # defaults to h / lambda_probe when None
    recoil_momentum: float | None = None

    def __post_init__(self):
        if self.kick_scale < 0:
            raise ValueError("kick_scale must be >= 0")
        if self.axial_extra_damping < 0:
            raise ValueError("axial_extra_damping must be >= 0")


@dataclass(frozen=True)
class Plant:
    cavity: CavityParams = field(default_factory=CavityParams)
    trap: TrapParams = field(default_factory=TrapParams)
    noise: NoiseModel = field(default_factory=NoiseModel)

    def kick_velocity(self) -> float:
        if self.noise.recoil_momentum is None:
            v = recoil_velocity(self.cavity, self.trap)
        else:
            v = self.noise.recoil_momentum / self.trap.atom_mass
        return self.noise.kick_scale * v


@dataclass(frozen=True)
class SimConfig:
    dt_physics: float = 1e-6
    max_time: float = 0.5
    escape_radius: float = 3 * 19.1e-6
    trapped_threshold: float = 2e-3
    rng_seed: int = 0
    # pin z to the antinode and integrate only the radial plane
    radial_only: bool = True
    # decimation interval of the diagnostic series; None disables them
    diag_dt: float | None = None
    record_counts: bool = False
    ke_factor: float = 0.5

    def __post_init__(self):
        if not (self.dt_physics > 0 and self.max_time > 0):
            raise ValueError("dt_physics and max_time must be positive")
        if self.escape_radius <= 0:
            raise ValueError("escape_radius must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.max_time / self.dt_physics))


@dataclass(frozen=True)
class OpenLoopDrive:
    """Fixed parametric modulation ``depth * sin(2 pi frequency t + phase)``."""
    depth: float
    frequency: float
    phase: float = 0.0

    def __post_init__(self):
        if not abs(self.depth) < 1:
            raise ValueError("|depth| must be < 1")


@dataclass
class TrajectoryResult:
    storage_time: float
    escaped: bool
    escape_channel: str
    seed: object
    tick_counts: np.ndarray | None = None
    diagnostics: dict | None = None

    def same_as(self, other: "TrajectoryResult") -> bool:
        """Bit-level equality including all recorded arrays."""
        if (self.storage_time, self.escaped, self.escape_channel) != (
                other.storage_time, other.escaped, other.escape_channel):
            return False
        if (self.tick_counts is None) != (other.tick_counts is None):
            return False
        if self.tick_counts is not None and not np.array_equal(self.tick_counts, other.tick_counts):
            return False
        if (self.diagnostics is None) != (other.diagnostics is None):
            return False
        if self.diagnostics is not None:
            return all(np.array_equal(self.diagnostics[k], other.diagnostics[k], equal_nan=True)
                       for k in self.diagnostics)
        return True


def pack_physics(plant: Plant, sim: SimConfig, dt: float | None = None) -> np.ndarray:
    c, t = plant.cavity, plant.trap
    p = np.zeros(N_P)
    p[P_U0] = t.depth
    p[P_WT2] = t.waist**2
    p[P_KT] = TWO_PI / t.wavelength
    p[P_MASS] = t.atom_mass
    p[P_G0] = c.g0
    p[P_W02] = c.mode_waist**2
    p[P_KP] = TWO_PI / c.probe_wavelength
    p[P_KG] = c.kappa_gamma
    p[P_R_DET] = c.empty_detect_rate
    p[P_R_SC] = c.max_scatter_rate
    p[P_VKICK] = plant.kick_velocity()
    p[P_AX_DAMP] = plant.noise.axial_extra_damping
    p[P_DT] = sim.dt_physics if dt is None else dt
    p[P_ESC_R2] = sim.escape_radius**2
    p[P_RADIAL] = 1.0 if sim.radial_only else 0.0
    return p


# numba core ---------------------------------------------------------------

@njit(cache=True)
def _force0(x, y, z, p):
    """Unmodulated trap force and potential."""
    env = p[P_U0] * math.exp(-2.0 * (x * x + y * y) / p[P_WT2])
    kz = p[P_KT] * z
    c = math.cos(kz)
    c2 = c * c
    a = -4.0 / p[P_WT2] * env * c2
    fz = -env * p[P_KT] * 2.0 * math.sin(kz) * c
    return a * x, a * y, fz, -env * c2


@njit(cache=True)
def _coupling(x, y, z, p):
    return p[P_G0] * math.exp(-(x * x + y * y) / p[P_W02]) * math.cos(p[P_KP] * z)


@njit(cache=True)
def _rates(g, p):
    g2 = g * g
    kg = p[P_KG]
    d = kg + g2
    trans = (kg / d) ** 2
    r_sc = p[P_R_SC] * 4.0 * g2 * kg / (d * d)
    return trans, trans * p[P_R_DET], r_sc


@njit(cache=True)
def _verlet(pos, vel, fcache, mod, p):
    """One velocity-Verlet step under ``(1+mod) * F0``; ``fcache`` holds F0(pos)."""
    dt = p[P_DT]
    h = 0.5 * dt * (1.0 + mod) / p[P_MASS]
    vel[0] += h * fcache[0]
    vel[1] += h * fcache[1]
    vel[2] += h * fcache[2]
    pos[0] += dt * vel[0]
    pos[1] += dt * vel[1]
    pos[2] += dt * vel[2]
    fx, fy, fz, u = _force0(pos[0], pos[1], pos[2], p)
    fcache[0] = fx
    fcache[1] = fy
    fcache[2] = fz
    vel[0] += h * fx
    vel[1] += h * fy
    vel[2] += h * fz
    return u


@njit(cache=True)
def _seed(seed):
    np.random.seed(seed)


@njit(cache=True)
def _integrate(pos, vel, p, n_steps, steps_per_tick, seed,
               ctrl_mode, pf_buf, rbw_buf, cf, ci, cc, ol,
               diag_every, diag, counts_out):
    """Closed-loop integration; returns (steps_done, status, n_diag)."""
    np.random.seed(seed)
    dt = p[P_DT]
    radial = p[P_RADIAL] > 0.5
    if radial:
        pos[2] = 0.0
        vel[2] = 0.0
    vk = p[P_VKICK]
    mass = p[P_MASS]
    esc_r2 = p[P_ESC_R2]
    ax_damp = math.exp(-p[P_AX_DAMP] * dt)
    fcache = np.zeros(3)
    fx, fy, fz, u = _force0(pos[0], pos[1], pos[2], p)
    fcache[0] = fx
    fcache[1] = fy
    fcache[2] = fz
    mod = 0.0
    if ctrl_mode == CTRL_OPEN_LOOP:
        mod = ol[0] * math.sin(ol[2])
    count = 0
    tick = 0
    n_counts = counts_out.shape[0]
    n_diag_max = diag.shape[0]
    n_diag = 0
    t_acc = 0.0
    n_acc = 0
    status = ESCAPE_NONE
    n = 0
    while n < n_steps:
        u = _verlet(pos, vel, fcache, mod, p)
        if radial:
            pos[2] = 0.0
            vel[2] = 0.0
        elif ax_damp != 1.0:
            vel[2] *= ax_damp
        g = _coupling(pos[0], pos[1], pos[2], p)
        trans, r_det, r_sc = _rates(g, p)
        if vk > 0.0 and np.random.random() < r_sc * dt:
            # absorption along the cavity axis plus isotropic emission
            nx = np.random.normal()
            ny = np.random.normal()
            nz = np.random.normal()
            nn = math.sqrt(nx * nx + ny * ny + nz * nz)
            vel[0] += vk * nx / nn
            vel[1] += vk * ny / nn
            if not radial:
                sgn = 1.0 if np.random.random() < 0.5 else -1.0
                vel[2] += vk * (nz / nn + sgn)
        lam = r_det * dt
        if lam > 0.0:
            count += np.random.poisson(lam)
        n += 1
        t = n * dt

        if (n % steps_per_tick) == 0:
            if tick < n_counts:
                counts_out[tick] = count
            if ctrl_mode == CTRL_FEEDBACK:
                mod = dsp._process_tick(float(count), pf_buf, rbw_buf, cf, ci, cc)
            count = 0
            tick += 1
        if ctrl_mode == CTRL_OPEN_LOOP:
            mod = ol[0] * math.sin(ol[1] * t + ol[2])

        ke = 0.5 * mass * (vel[0] * vel[0] + vel[1] * vel[1] + vel[2] * vel[2])
        energy = ke + u
        t_acc += trans
        n_acc += 1
        if diag_every > 0 and (n % diag_every) == 0 and n_diag < n_diag_max:
            diag[n_diag, 0] = t
            diag[n_diag, 1] = pos[0]
            diag[n_diag, 2] = pos[1]
            diag[n_diag, 3] = pos[2]
            diag[n_diag, 4] = energy
            diag[n_diag, 5] = t_acc / n_acc
            diag[n_diag, 6] = cf[dsp.F_MAG]
            diag[n_diag, 7] = cf[dsp.F_LO]
            diag[n_diag, 8] = cf[dsp.F_PERR]
            diag[n_diag, 9] = mod
            n_diag += 1
        if diag_every > 0 and (n % diag_every) == 0:
            t_acc = 0.0
            n_acc = 0

        if not (math.isfinite(energy) and math.isfinite(pos[0]) and math.isfinite(pos[1])
                and math.isfinite(pos[2])):
            status = BLOWUP
            break
        if energy > 0.0:
            status = ESCAPE_ENERGY
            break
        if pos[0] * pos[0] + pos[1] * pos[1] > esc_r2:
            status = ESCAPE_RADIUS
            break
    return n, status, n_diag


# Python API ---------------------------------------------------------------

def sample_initial_state(trap: TrapParams, rng: np.random.Generator, ke_factor: float = 0.5,
                         radial_only: bool = False, bound_only: bool = True,
                         spread_scale: float = 1.0, max_tries: int = 10_000) -> AtomState:
    """Draw a thermal atom at the central antinode.

    The temperature is fixed by ``<KE> = ke_factor * U0`` for three-dimensional
    Maxwell-Boltzmann velocities (``kT = 2/3 ke_factor U0``); positions follow
    the matching harmonic-approximation Gaussian, scaled by ``spread_scale``.
    With ``radial_only`` the axial coordinate and velocity are zero.  With
    ``bound_only`` unbound draws (``E >= 0``) are rejected.
    """
    if ke_factor < 0:
        raise ValueError("ke_factor must be >= 0")
    if ke_factor == 0:
        return AtomState(np.zeros(3), np.zeros(3), 0.0)
    kT = 2.0 / 3.0 * ke_factor * trap.depth
    m = trap.atom_mass
    w_r, w_z = derive_trap_frequencies(trap)
    sv = math.sqrt(kT / m)
    sx = spread_scale * math.sqrt(kT / m) / w_r
    sz = spread_scale * math.sqrt(kT / m) / w_z
    for _ in range(max_tries):
        pos = rng.normal(0.0, 1.0, 3) * np.array([sx, sx, sz])
        vel = rng.normal(0.0, sv, 3)
        if radial_only:
            pos[2] = 0.0
            vel[2] = 0.0
        state = AtomState(pos, vel, 0.0)
        if not bound_only or state.energy(trap) < 0:
            return state
    raise RuntimeError("could not draw a bound initial state; lower ke_factor")


def step(state: AtomState, trap: TrapParams, cavity: CavityParams, noise: NoiseModel,
         mod: float, dt: float, rng: np.random.Generator, radial_only: bool = False) -> AtomState:
    """Advance one Verlet step, then apply at most one recoil event."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not abs(mod) < 1:
        raise ValueError("|mod| must be < 1")
    plant = Plant(cavity, trap, noise)
    p = pack_physics(plant, SimConfig(dt_physics=dt, radial_only=radial_only))
    pos = np.array(state.pos, dtype=float)
    vel = np.array(state.vel, dtype=float)
    fx, fy, fz, _ = _force0(pos[0], pos[1], pos[2], p)
    _verlet(pos, vel, np.array([fx, fy, fz]), mod, p)
    if radial_only:
        pos[2] = vel[2] = 0.0
    elif noise.axial_extra_damping > 0:
        vel[2] *= math.exp(-noise.axial_extra_damping * dt)
    g = _coupling(pos[0], pos[1], pos[2], p)
    prob = float(scattering_rate(g, cavity)) * dt
    if prob > 0.1:
        raise ValueError(f"scattering probability per step {prob:.3g} > 0.1; reduce dt")
    vk = plant.kick_velocity()
    if vk > 0 and rng.random() < prob:
        vel += recoil_kick(rng, vk, radial_only)
    return AtomState(pos, vel, state.t + dt)


def recoil_kick(rng: np.random.Generator, v_kick: float, radial_only: bool = False) -> np.ndarray:
    """Velocity change of one scattering event: axial absorption + isotropic emission."""
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    dv = v_kick * n
    if radial_only:
        dv[2] = 0.0
    else:
        dv[2] += v_kick * (1.0 if rng.random() < 0.5 else -1.0)
    return dv


def sample_detections(g, cavity: CavityParams, dt: float, rng: np.random.Generator, size=None):
    """Poisson photon count with mean ``detection_rate(g) * dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return rng.poisson(detection_rate(g, cavity) * dt, size=size)


def _seed_sequences(seed):
    ss = np.random.SeedSequence(seed)
    init_seq, kern_seq = ss.spawn(2)
    return np.random.default_rng(init_seq), int(kern_seq.generate_state(1)[0])


def validate_run(sim: SimConfig, plant: Plant, controller: dsp.ControllerConfig | None,
                 drive: OpenLoopDrive | None) -> int:
    """Check run consistency; returns physics steps per controller tick."""
    if controller is not None and drive is not None:
        raise ValueError("at most one of controller and drive may be given")
    if plant.cavity.max_scatter_rate * sim.dt_physics > 0.1:
        raise ValueError("max_scatter_rate * dt_physics > 0.1: time step too coarse for "
                         "Bernoulli thinning of scattering events")
    if not sim.radial_only:
        f_z = derive_trap_frequencies(plant.trap)[1] / TWO_PI
        if sim.dt_physics > 1.0 / (50.0 * f_z) * (1 + 1e-9):
            raise ValueError("dt_physics must be <= 1/(50 f_z) when axial motion is integrated")
    if controller is None:
        return 1
    ratio = controller.tick / sim.dt_physics
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > 1e-9 * ratio:
        raise ValueError(f"controller tick {controller.tick} is not a positive integer multiple "
                         f"of dt_physics {sim.dt_physics}")
    return steps


def simulate_trajectory(sim: SimConfig, plant: Plant, controller: dsp.ControllerConfig | None = None,
                        drive: OpenLoopDrive | None = None, seed=None,
                        initial_state: AtomState | None = None) -> TrajectoryResult:
    """Run one closed-loop trajectory until escape or ``sim.max_time``.

    ``seed`` may be an int or a sequence of ints (defaults to ``sim.rng_seed``);
    the result is a deterministic function of it.
    """
    steps_per_tick = validate_run(sim, plant, controller, drive)
    seed = sim.rng_seed if seed is None else seed
    rng, kseed = _seed_sequences(seed)
    if initial_state is None:
        initial_state = sample_initial_state(plant.trap, rng, sim.ke_factor, sim.radial_only)
    pos = np.array(initial_state.pos, dtype=float)
    vel = np.array(initial_state.vel, dtype=float)
    p = pack_physics(plant, sim)
    n_steps = sim.n_steps

    if controller is not None:
        st = dsp.ControllerState.initial(controller)
        pf_buf, rbw_buf, cf, ci, cc = st.pf_buf, st.rbw_buf, st.f, st.i, controller.packed()
        mode = CTRL_FEEDBACK
    else:
        pf_buf, rbw_buf = np.zeros(1), np.zeros(1, dtype=np.complex128)
        cf, ci, cc = np.zeros(dsp.N_F), np.zeros(dsp.N_I, dtype=np.int64), np.zeros(dsp.N_C)
        mode = CTRL_NONE
    ol = np.zeros(3)
    if drive is not None:
        mode = CTRL_OPEN_LOOP
        ol[:] = drive.depth, TWO_PI * drive.frequency, drive.phase

    if sim.diag_dt:
        diag_every = max(1, int(round(sim.diag_dt / sim.dt_physics)))
        diag = np.zeros((n_steps // diag_every + 1, N_DIAG))
    else:
        diag_every, diag = 0, np.zeros((0, N_DIAG))
    n_ticks = n_steps // steps_per_tick if sim.record_counts else 0
    counts = np.zeros(n_ticks, dtype=np.int32)

    done, status, n_diag = _integrate(pos, vel, p, n_steps, steps_per_tick, kseed, mode,
                                      pf_buf, rbw_buf, cf, ci, cc, ol, diag_every, diag, counts)
    t_end = done * sim.dt_physics
    if status == BLOWUP:
        raise FloatingPointError(f"non-finite atom state at t = {t_end:.9g} s")
    escaped = status != ESCAPE_NONE
    result = TrajectoryResult(
        storage_time=t_end if escaped else sim.max_time,
        escaped=escaped,
        escape_channel=ESCAPE_CHANNELS[status],
        seed=seed,
    )
    if sim.record_counts:
        result.tick_counts = counts[: done // steps_per_tick]
    if sim.diag_dt:
        result.diagnostics = {name: diag[:n_diag, j].copy() for j, name in enumerate(DIAG_COLUMNS)}
    return result


def _ensemble_job(args):
    sim, plant, controller, drive, seeds = args
    return [simulate_trajectory(sim, plant, controller, drive, seed=s) for s in seeds]


def trajectory_seed(master_seed: int, index: int) -> list[int]:
    return [int(master_seed), int(index)]


def run_ensemble(n_traj: int, sim: SimConfig, plant: Plant, controller: dsp.ControllerConfig | None = None,
                 drive: OpenLoopDrive | None = None, master_seed: int = 0,
                 workers: int = 1) -> list[TrajectoryResult]:
    """Run ``n_traj`` independent trajectories; trajectory ``i`` is seeded by ``(master_seed, i)``.

    Results are ordered by index and do not depend on ``workers``.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    validate_run(sim, plant, controller, drive)
    seeds = [trajectory_seed(master_seed, i) for i in range(n_traj)]
    workers = max(1, min(int(workers), n_traj))
    if workers == 1:
        return _ensemble_job((sim, plant, controller, drive, seeds))
    chunk = math.ceil(n_traj / (workers * 4))
    jobs = [(sim, plant, controller, drive, seeds[i:i + chunk]) for i in range(0, n_traj, chunk)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        out = []
        for part in pool.map(_ensemble_job, jobs):
            out.extend(part)
    return out


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


def with_noise(plant: Plant, **changes) -> Plant:
    return replace(plant, noise=replace(plant.noise, **changes))
