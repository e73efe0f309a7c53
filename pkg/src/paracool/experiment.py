"""Experiment configuration, sweep orchestration and result export.

Configs are TOML files with one table per parameter group::

    [experiment]   name, mode, n_trajectories, master_seed, output
    [cavity]       CavityParams fields (SI units)
    [trap]         depth_uK, waist, wavelength, atom_mass
    [noise]        NoiseModel fields
    [sim]          SimConfig fields
    [controller]   ControllerConfig fields plus reference_swing
    [drive]        OpenLoopDrive fields (mode = "open_loop")
    [sweep]        param, and values or start/stop/count[/endpoint]
    [fit]          kind = periodic_gaussian | sinusoid | none
    [spectrum]     diag_dt, nperseg, band, model (spectrum runs)
    [figure]       f_pfb_values (multi-frequency figures)

Mode defaults are applied first and every key in the file overrides them.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np
import tomli
from scipy import constants as sc

from . import __version__
from . import analysis as an
from . import dynamics as dyn
from .cavity import CavityParams, TrapParams, derive_trap_frequencies
from .dsp import ControllerConfig

MODES = ("radial", "axial", "open_loop", "no_feedback")
FIT_KINDS = ("periodic_gaussian", "sinusoid", "none")
CSV_COLUMNS = ("swept_param", "swept_value", "mean_storage_s", "sem_storage_s",
               "n_trapped", "n_total", "trapped_fraction")
FIGURES = ("fig2b", "fig3", "fig4", "fig5")
SCALES = ("desk", "full")

# Calibrated operating points.  Radial runs use a 1 us decimated tick, for which
# the 17-tap 8 ns prefilter (136 ns) collapses to a single tap.
MODE_DEFAULTS = {
    "radial": dict(
        cavity=dict(empty_detect_rate=5.0e6),
        sim=dict(dt_physics=1e-6, max_time=0.5, radial_only=True),
        controller=dict(f_pfb=7.0e3, tick=1e-6, prefilter_len=1, mod_max=0.11, reference_swing=0.004),
    ),
    "axial": dict(
        # probe power raised tenfold over the radial setting
        cavity=dict(empty_detect_rate=5.0e7),
        sim=dict(dt_physics=8e-9, max_time=0.03, radial_only=False),
        controller=dict(f_pfb=1.0e6, tick=8e-9, prefilter_len=17, mod_max=0.36, reference_swing=1.0),
    ),
    "no_feedback": dict(
        cavity=dict(empty_detect_rate=5.0e6),
        sim=dict(dt_physics=1e-6, max_time=0.5, radial_only=True),
    ),
    "open_loop": dict(
        sim=dict(dt_physics=1e-6, max_time=0.5, radial_only=True),
    ),
}

_SECTIONS = ("experiment", "cavity", "trap", "noise", "sim", "controller", "drive", "sweep",
             "fit", "spectrum", "figure")
_ALIASES = {
    "phi_pfb": "controller.phi_pfb", "f_pfb": "controller.f_pfb", "mod_max": "controller.mod_max",
    "lock_gain": "controller.lock_gain", "n_periods": "controller.n_periods",
    "reference_swing": "controller.reference_swing", "kick_scale": "noise.kick_scale",
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple

    def __post_init__(self):
        if len(self.values) < 1:
            raise ConfigError("sweep: at least one value is required")

    @classmethod
    def linspace(cls, param, start, stop, count, endpoint=True):
        return cls(param, tuple(float(v) for v in np.linspace(start, stop, int(count), endpoint=endpoint)))


@dataclass(frozen=True)
class SpectrumSpec:
    diag_dt: float = 10e-6
    nperseg: int = 1024
    band: tuple = (0.15, 1.0)
    model: str = "analytic"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    mode: str
    plant: dyn.Plant
    sim: dyn.SimConfig
    controller: ControllerConfig | None = None
    drive: dyn.OpenLoopDrive | None = None
    sweep: SweepSpec | None = None
    n_trajectories: int = 100
    master_seed: int = 0
    fit: str = "none"
    output: str | None = None
    spectrum: SpectrumSpec | None = None
    f_pfb_values: tuple = ()
    reference_swing: float | None = None
    # the parsed document, kept so sweep points can be rebuilt from it
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def resolved(self) -> dict:
        """Every input that influences results, as plain JSON-compatible data."""
        out = dict(
            name=self.name, mode=self.mode, n_trajectories=self.n_trajectories,
            master_seed=self.master_seed, fit=self.fit,
            cavity=asdict(self.plant.cavity), trap=asdict(self.plant.trap),
            noise=asdict(self.plant.noise), sim=asdict(self.sim),
            controller=None if self.controller is None else asdict(self.controller),
            drive=None if self.drive is None else asdict(self.drive),
            sweep=None if self.sweep is None else dict(param=self.sweep.param, values=list(self.sweep.values)),
            spectrum=None if self.spectrum is None else dict(asdict(self.spectrum), band=list(self.spectrum.band)),
            f_pfb_values=list(self.f_pfb_values), reference_swing=self.reference_swing,
            version=__version__,
        )
        return out

    @property
    def digest(self) -> str:
        return config_digest(self.resolved())

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = _deep_copy(self.raw)
        raw.setdefault("experiment", {})["master_seed"] = int(seed)
        return build_config(raw)

    def with_value(self, param: str, value) -> "ExperimentConfig":
        """Copy with one (possibly aliased, dotted) parameter replaced."""
        section, key = _split_param(param)
        raw = _deep_copy(self.raw)
        raw.setdefault(section, {})[key] = value
        raw.pop("sweep", None)
        return build_config(raw)


@dataclass(frozen=True)
class ResultRecord:
    swept_param: str
    swept_value: float
    stats: an.StorageStats | None
    n_total: int
    config_digest: str
    seed: int
    fit: dict = field(default_factory=dict)
    # wall-clock creation time; informational only and never exported
    timestamp: str = ""

    @property
    def degenerate(self) -> bool:
        return self.stats is None

    def row(self) -> dict:
        st = self.stats
        return dict(
            swept_param=self.swept_param, swept_value=float(self.swept_value),
            mean_storage_s=math.nan if st is None else st.mean,
            sem_storage_s=math.nan if st is None else st.sem,
            n_trapped=0 if st is None else st.count, n_total=self.n_total,
            trapped_fraction=0.0 if st is None else st.trapped_fraction,
        )


@dataclass(frozen=True)
class Table:
    """Plot-ready named table."""
    name: str
    columns: tuple
    rows: list
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()


# config loading -------------------------------------------------------------

def config_digest(resolved: dict) -> str:
    text = json.dumps(resolved, sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _deep_copy(d):
    return json.loads(json.dumps(d))


def _split_param(param: str) -> tuple[str, str]:
    param = _ALIASES.get(param, param)
    if "." not in param:
        raise ConfigError(f"sweep.param: unknown parameter {param!r}; use section.field")
    section, key = param.split(".", 1)
    if section not in ("cavity", "trap", "noise", "sim", "controller", "drive"):
        raise ConfigError(f"sweep.param: section {section!r} cannot be swept")
    return section, key


def _merge(base: dict, over: dict) -> dict:
    out = _deep_copy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, section: str, values: dict, extra: tuple = ()):
    names = {f.name for f in fields(cls)}
    for k in values:
        if k not in names and k not in extra:
            raise ConfigError(f"{section}.{k}: unknown field (allowed: {', '.join(sorted(names | set(extra)))})")
    kw = {k: v for k, v in values.items() if k in names}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _require(cond, path, msg):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def build_config(doc: dict) -> ExperimentConfig:
    """Validate a parsed config document and build an :class:`ExperimentConfig`."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>: expected a table")
    for k, v in doc.items():
        _require(k in _SECTIONS, k, f"unknown section (allowed: {', '.join(_SECTIONS)})")
        _require(isinstance(v, dict), k, "expected a table")
    exp = dict(doc.get("experiment", {}))
    allowed = {"name", "mode", "n_trajectories", "master_seed", "output"}
    for k in exp:
        _require(k in allowed, f"experiment.{k}", "unknown field")
    mode = exp.get("mode", "radial")
    _require(mode in MODES, "experiment.mode", f"must be one of {MODES}, got {mode!r}")
    merged = _merge(MODE_DEFAULTS[mode], {k: v for k, v in doc.items() if k != "experiment"})

    n_traj = exp.get("n_trajectories", 100)
    _require(isinstance(n_traj, int) and not isinstance(n_traj, bool) and n_traj >= 1,
             "experiment.n_trajectories", "must be a positive integer")
    seed = exp.get("master_seed", 0)
    _require(isinstance(seed, int) and not isinstance(seed, bool) and 0 <= seed < 2**64,
             "experiment.master_seed", "must be a 64-bit non-negative integer")

    cav = _build(CavityParams, "cavity", merged.get("cavity", {}))
    trap_kw = dict(merged.get("trap", {}))
    if "depth_uK" in trap_kw:
        _require("depth" not in trap_kw, "trap.depth_uK", "give depth or depth_uK, not both")
        trap_kw["depth"] = sc.k * float(trap_kw.pop("depth_uK")) * 1e-6
    trap = _build(TrapParams, "trap", trap_kw)
    noise = _build(dyn.NoiseModel, "noise", merged.get("noise", {}))
    sim = _build(dyn.SimConfig, "sim", merged.get("sim", {}))
    plant = dyn.Plant(cavity=cav, trap=trap, noise=noise)

    controller, ref_swing = None, None
    if mode in ("radial", "axial"):
        ckw = dict(merged.get("controller", {}))
        _require("f_pfb" in ckw, "controller.f_pfb", "required")
        ref_swing = float(ckw.pop("reference_swing", 1.0))
        _require(ref_swing > 0, "controller.reference_swing", "must be positive")
        _require("mag_ref" not in ckw, "controller.mag_ref", "set reference_swing instead")
        ckw["mag_ref"] = 0.5 * ref_swing * cav.empty_detect_rate * float(ckw.get("tick", 8e-9))
        controller = _build(ControllerConfig, "controller", ckw)
    elif "controller" in doc:
        raise ConfigError(f"controller: not used in mode {mode!r}")

    drive = None
    if mode == "open_loop":
        _require("drive" in merged, "drive", "required in open_loop mode")
        drive = _build(dyn.OpenLoopDrive, "drive", merged["drive"])
    elif "drive" in doc:
        raise ConfigError(f"drive: only used in open_loop mode, not {mode!r}")

    try:
        dyn.validate_run(sim, plant, controller, drive)
    except ValueError as exc:
        raise ConfigError(f"sim/controller: {exc}") from None

    sweep = None
    if "sweep" in merged:
        sw = merged["sweep"]
        for k in sw:
            _require(k in ("param", "values", "start", "stop", "count", "endpoint"), f"sweep.{k}", "unknown field")
        _require("param" in sw, "sweep.param", "required")
        _split_param(sw["param"])
        if "values" in sw:
            _require(not ({"start", "stop", "count"} & set(sw)), "sweep", "give values or start/stop/count")
            vals = sw["values"]
            _require(isinstance(vals, list) and len(vals) >= 1, "sweep.values", "must be a non-empty list")
            sweep = SweepSpec(sw["param"], tuple(vals))
        else:
            for k in ("start", "stop", "count"):
                _require(k in sw, f"sweep.{k}", "required when values is absent")
            _require(int(sw["count"]) >= 1, "sweep.count", "must be >= 1")
            sweep = SweepSpec.linspace(sw["param"], sw["start"], sw["stop"], sw["count"],
                                       sw.get("endpoint", True))

    fit_kw = merged.get("fit", {})
    for k in fit_kw:
        _require(k == "kind", f"fit.{k}", "unknown field")
    fit = fit_kw.get("kind", {"radial": "periodic_gaussian", "axial": "sinusoid"}.get(mode, "none"))
    _require(fit in FIT_KINDS, "fit.kind", f"must be one of {FIT_KINDS}")

    spectrum = None
    if "spectrum" in merged:
        sp = dict(merged["spectrum"])
        if "band" in sp:
            _require(isinstance(sp["band"], list) and len(sp["band"]) == 2, "spectrum.band", "must be [lo, hi]")
            sp["band"] = tuple(float(b) for b in sp["band"])
        spectrum = _build(SpectrumSpec, "spectrum", sp)
        _require(spectrum.model in ("analytic", "synthesis"), "spectrum.model", "analytic or synthesis")

    fig = merged.get("figure", {})
    for k in fig:
        _require(k == "f_pfb_values", f"figure.{k}", "unknown field")
    f_values = tuple(float(f) for f in fig.get("f_pfb_values", ()))
    if f_values:
        _require(controller is not None, "figure.f_pfb_values", "needs a feedback mode")
        for f in f_values:
            try:
                replace(controller, f_pfb=f)
            except ValueError as exc:
                raise ConfigError(f"figure.f_pfb_values: {exc}") from None

    return ExperimentConfig(
        name=str(exp.get("name", "experiment")), mode=mode, plant=plant, sim=sim,
        controller=controller, drive=drive, sweep=sweep, n_trajectories=n_traj,
        master_seed=seed, fit=fit, output=exp.get("output"), spectrum=spectrum,
        f_pfb_values=f_values, reference_swing=ref_swing, raw=_deep_copy(doc),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return build_config(doc)


def figure_config_path(name: str, scale: str = "desk"):
    if name not in FIGURES:
        raise ConfigError(f"unknown figure {name!r} (choose from {', '.join(FIGURES)})")
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r} (choose desk or full)")
    return resources.files("paracool") / "configs" / f"{name}_{scale}.toml"


def load_figure_config(name: str, scale: str = "desk") -> ExperimentConfig:
    with resources.as_file(figure_config_path(name, scale)) as p:
        return load_config(p)


# running ----------------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_point(config: ExperimentConfig, workers: int = 1, swept_param: str = "none",
              swept_value: float = math.nan) -> ResultRecord:
    """One ensemble at the config's operating point."""
    results = dyn.run_ensemble(config.n_trajectories, config.sim, config.plant, config.controller,
                               config.drive, master_seed=config.master_seed, workers=workers)
    try:
        stats = an.storage_stats(results, config.sim.trapped_threshold)
    except an.DegenerateStatsError:
        stats = None
    return ResultRecord(swept_param=swept_param, swept_value=float(swept_value), stats=stats,
                        n_total=len(results), config_digest=config.digest,
                        seed=config.master_seed, timestamp=_now())


def fit_records(records, kind: str) -> dict:
    """Apply the sweep fit to the non-degenerate points; failures are reported, not raised."""
    if kind == "none":
        return {}
    ok = [r for r in records if r.stats is not None]
    x = np.array([r.swept_value for r in ok], dtype=float)
    y = np.array([r.stats.mean for r in ok])
    e = np.array([r.stats.sem for r in ok])
    try:
        if kind == "periodic_gaussian":
            g = an.fit_periodic_gaussian(x, y, e)
            dip = an.fit_phase_dip(x, y, e)
            return dict(kind=kind, optimal_phase=g.center, amplitude=g.amplitude, width=g.width,
                        baseline=g.baseline, peak_storage_s=g.amplitude + g.baseline,
                        worst_phase=dip.center, degenerate=g.degenerate)
        s = an.fit_sinusoid(x, y, e)
        return dict(kind=kind, optimal_phase=s.optimal_phase, amplitude=s.amplitude,
                    amplitude_err=s.amplitude_err, phase=s.phase, baseline=s.baseline,
                    significance=s.significance, degenerate=bool(s.amplitude == 0))
    except (ValueError, an.FitError) as exc:
        return dict(kind=kind, error=str(exc))


def run_sweep(config: ExperimentConfig, workers: int = 1) -> list[ResultRecord]:
    """Run an ensemble per swept value, then attach the mode's fit to every record.

    Every point reuses ``master_seed`` (common random numbers), so differences
    between points come from the swept parameter rather than sampling noise.
    """
    if config.sweep is None:
        raise ConfigError("sweep: section required for a sweep run")
    records = []
    for v in config.sweep.values:
        cfg = config.with_value(config.sweep.param, v)
        rec = run_point(cfg, workers, config.sweep.param, v)
        records.append(replace(rec, config_digest=config.digest))
    fit = fit_records(records, config.fit)
    return [replace(r, fit=fit) for r in records]


def baseline_config(config: ExperimentConfig) -> ExperimentConfig:
    """Same plant and simulation settings with the feedback removed."""
    raw = _deep_copy(config.raw)
    mode = config.mode
    for k in ("controller", "drive", "sweep", "fit", "figure"):
        raw.pop(k, None)
    raw.setdefault("experiment", {})["mode"] = "no_feedback"
    # keep the mode's plant and sim defaults explicit
    for sec in ("cavity", "sim"):
        raw[sec] = _merge(MODE_DEFAULTS[mode].get(sec, {}), raw.get(sec, {}))
    return build_config(raw)


# export -----------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.15e}"
    return str(v)


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        row = r.row()
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def _json_safe(v):
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def records_json(records, config: ExperimentConfig | None = None) -> str:
    records = list(records)
    doc = dict(
        config_digest=records[0].config_digest if records else None,
        config=None if config is None else _json_safe(config.resolved()),
        records=[_json_safe(dict(r.row(), config_digest=r.config_digest, seed=r.seed, fit=r.fit))
                 for r in records],
    )
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _write(path, text: str):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def export_results(records, path, fmt: str = "csv", config: ExperimentConfig | None = None) -> Path:
    """Write records as CSV (fixed columns) or JSON (with the config digest)."""
    records = list(records)
    if not records:
        raise ValueError("no records to export")
    if fmt == "csv":
        return _write(path, records_csv(records))
    if fmt == "json":
        return _write(path, records_json(records, config))
    raise ValueError(f"unknown format {fmt!r}")


def write_table(table: Table, directory) -> Path:
    return _write(Path(directory) / f"{table.name}.csv", table.to_csv())


# figures ----------------------------------------------------------------------

def records_table(name: str, records) -> Table:
    rows = [[r.row()[c] for c in CSV_COLUMNS] for r in records]
    return Table(name, CSV_COLUMNS, rows, meta=dict(fit=records[0].fit if records else {}))


def run_spectrum(config: ExperimentConfig, workers: int = 1):
    """No-feedback transmission spectrum and its Q fit."""
    spec = config.spectrum or SpectrumSpec()
    sim = replace(config.sim, diag_dt=spec.diag_dt)
    results = dyn.run_ensemble(config.n_trajectories, sim, config.plant, master_seed=config.master_seed,
                               workers=workers)
    step = sim.dt_physics * max(1, int(round(spec.diag_dt / sim.dt_physics)))
    series = [r.diagnostics["transmission"] for r in results]
    freqs, psd, nseg = an.ensemble_power_spectrum(series, step, nperseg=spec.nperseg)
    f_rho = derive_trap_frequencies(config.plant.trap)[0] / (2 * math.pi)
    fit = an.fit_q_factor(freqs, psd, f_rho, model=spec.model, cavity=config.plant.cavity,
                          trap=config.plant.trap, band=spec.band)
    return freqs, psd, nseg, fit, results


def sweep_at_frequency(config: ExperimentConfig, f_pfb: float, workers: int = 1) -> list[ResultRecord]:
    """Run the config's phase sweep with the feedback frequency set to ``f_pfb``."""
    cfg = config.with_value("f_pfb", f_pfb)
    cfg = replace(cfg, sweep=config.sweep, fit=config.fit, raw=_merge(cfg.raw, {"sweep": config.raw["sweep"]}))
    return run_sweep(cfg, workers)


def reproduce_figure(name: str, scale: str = "desk", workers: int = 1, seed: int | None = None,
                     progress=None) -> dict[str, Table]:
    """Run a bundled figure config and return its plot-ready tables."""
    config = load_figure_config(name, scale)
    if seed is not None:
        config = config.with_seed(seed)
    say = progress or (lambda msg: None)
    tables = {}
    if name == "fig2b":
        freqs, psd, nseg, fit, results = run_spectrum(config, workers)
        tables["fig2b_psd"] = Table("fig2b_psd", ("freq_hz", "psd"),
                                    [[f, p] for f, p in zip(freqs, psd)], meta=dict(segments=nseg))
        f_rho = derive_trap_frequencies(config.plant.trap)[0] / (2 * math.pi)
        tables["fig2b_fit"] = Table("fig2b_fit", ("quantity", "value"), [
            ["q_factor", fit.q_factor], ["peak_freq_hz", fit.peak_freq], ["two_f_rho_hz", 2 * f_rho],
            ["softening", fit.softening], ["noise_amp", fit.noise_amp],
            ["fit_residual", fit.fit_residual], ["n_trajectories", len(results)], ["segments", nseg]])
        return tables

    base = run_point(baseline_config(config), workers, "none")
    say(f"baseline: {_describe(base)}")
    tables[f"{name}_baseline"] = records_table(f"{name}_baseline", [base])
    freqs = config.f_pfb_values or (config.controller.f_pfb,)
    summary = []
    for f in freqs:
        recs = sweep_at_frequency(config, f, workers) if config.f_pfb_values else run_sweep(config, workers)
        label = f"{name}_f{int(round(f))}"
        tables[label] = records_table(label, recs)
        fit = recs[0].fit
        ok = [r for r in recs if r.stats is not None]
        emp = max(ok, key=lambda r: r.stats.mean) if ok else None
        summary.append([f, fit.get("peak_storage_s", math.nan), fit.get("optimal_phase", math.nan),
                        emp.stats.mean if emp else math.nan, emp.swept_value if emp else math.nan,
                        fit.get("worst_phase", math.nan), fit.get("significance", math.nan)])
        say(f"{label}: optimal phase {fit.get('optimal_phase', math.nan):.3f} rad")
    tables[f"{name}_summary"] = Table(f"{name}_summary", (
        "f_pfb_hz", "fitted_max_storage_s", "optimal_phase_rad", "empirical_max_storage_s",
        "empirical_best_phase_rad", "worst_phase_rad", "fit_significance"), summary)
    return tables


def _describe(rec: ResultRecord) -> str:
    if rec.stats is None:
        return "no trapped trajectories"
    return f"mean {rec.stats.mean * 1e3:.3f} ms +- {rec.stats.sem * 1e3:.3f} ms ({rec.stats.count}/{rec.n_total})"
