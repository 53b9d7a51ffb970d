"""Experiment configuration and the pipeline stages behind the CLI.

Stages persist their artifacts in the output directory so later stages can
reload them instead of recomputing:

* ``simulate``: plant run at the reference inputs, sensor CSVs
* ``reduce``: snapshot sweep, POD basis, LTV schedule, energy and RMSE CSVs
* ``estimate``: EKF runs with and without disturbance estimation
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import fom, rom
from .container import write_csv
from .estimator import NoiseConfig, augment, discretize, export_estimate_csv, run_estimator, save_estimate
from .properties import PropertyParams, estimate_properties, export_property_csv
from .scenario import (
    ProcessInputs,
    SensorConfig,
    SheetGeometry,
    ToolSpec,
    build_sheet_mesh,
    build_time_grid,
    hole_flanging_template,
    save_parameter_trajectory,
    synth_forming_trajectory,
)


class ConfigError(ValueError):
    pass


def _point(entry):
    """A position given as ``[x, y, z]``, ``[x, y]`` or ``{r, angle}`` (degrees)."""
    if isinstance(entry, dict):
        try:
            r, angle = float(entry["r"]), math.radians(float(entry["angle"]))
        except KeyError as exc:
            raise ConfigError(f"polar position needs 'r' and 'angle': {entry}") from exc
        return (r * math.cos(angle), r * math.sin(angle), float(entry.get("z", 0.0)))
    vals = [float(v) for v in entry]
    if len(vals) not in (2, 3):
        raise ConfigError(f"position needs 2 or 3 coordinates: {entry}")
    return tuple(vals + [0.0] * (3 - len(vals)))


def _polar_points(*pairs):
    return tuple(_point({"r": r, "angle": a}) for r, a in pairs)


def _segments(entries):
    try:
        return tuple((float(a), float(b), float(v)) for a, b, v in entries)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"segments must be [start, end, value] triples: {entries}") from exc


@dataclass
class ExperimentConfig:
    seed: int = 0
    geometry: SheetGeometry = field(default_factory=lambda: SheetGeometry(0.30, 0.05, 0.002))
    edge_length: float = 0.01
    n_steps: int = 510
    reference: ProcessInputs = field(default_factory=lambda: ProcessInputs(1273.0, 80.0, 4.0))
    sweep_temperatures: tuple = (1073.0, 1173.0, 1273.0, 1373.0)
    sweep_speeds: tuple = (80.0, 90.0, 100.0)
    excitations: tuple = (
        ((2.0, 4.0, 800.0), (6.5, 8.0, -500.0), (11.5, 12.5, 1000.0)),
        ((4.0, 5.5, -800.0), (7.5, 9.0, 1000.0), (12.0, 13.0, -600.0)),
    )
    snapshot_stride: int = 1
    rom_r: int | None = 30
    rom_energy: float | None = None
    energy_power: int = 1
    rmse_dimensions: tuple = (10, 30, 50)
    off_nominal_temperature: float = 1373.0
    sensor_positions: tuple = field(default_factory=lambda: _polar_points((0.11, 0.0), (0.16, 120.0), (0.25, 240.0)))
    noise_std: float = 10.0
    eval_points: tuple = field(default_factory=lambda: _polar_points((0.11, 0.0), (0.18, 60.0), (0.28, 180.0)))
    q_w: float = 10.0
    r_v: float = 0.1
    p0: float = 10.0
    q_d: float = 1.0
    joseph: bool = False
    disturbance_unit: float = 1e5  # W/m^3 per unit of d
    disturbance: tuple = ((9.0, 11.0, 1000.0),)
    plant_inputs: ProcessInputs | None = None
    latent_heat_power: float = 0.0  # W/m^3, 0 disables the plant-only source
    properties: PropertyParams = field(default_factory=PropertyParams)
    speedup_edge_length: float = 0.005
    speedup_r: int = 30
    speedup_repeats: int = 3
    workers: int = 1
    out: str = "out"

    def __post_init__(self):
        if not self.sweep_temperatures or not self.sweep_speeds:
            raise ConfigError("sweep lists must be non-empty")
        if (self.rom_r is None) == (self.rom_energy is None):
            raise ConfigError("set exactly one of rom.r and rom.energy")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if self.n_steps < 1 or self.snapshot_stride < 1:
            raise ConfigError("n_steps and snapshot_stride must be positive")
        for name in ("q_w", "r_v", "p0", "q_d", "disturbance_unit"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def plant(self):
        return self.plant_inputs or self.reference

    @property
    def sensors(self):
        return SensorConfig(self.sensor_positions, noise_std=self.noise_std)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw or {})
        kw = {}
        try:
            if "seed" in raw:
                kw["seed"] = int(raw.pop("seed"))
            if "out" in raw:
                kw["out"] = str(raw.pop("out"))
            if "workers" in raw:
                kw["workers"] = int(raw.pop("workers"))
            mesh = raw.pop("mesh", {})
            if "geometry" in mesh:
                kw["geometry"] = SheetGeometry(**mesh["geometry"])
            for key in ("edge_length", "n_steps"):
                if key in mesh:
                    kw[key] = type(getattr(cls, key))(mesh[key])
            if "reference" in raw:
                kw["reference"] = ProcessInputs(**raw.pop("reference"))
            sweep = raw.pop("sweep", {})
            if "t_aust_avg" in sweep:
                kw["sweep_temperatures"] = tuple(float(v) for v in sweep["t_aust_avg"])
            if "v_punch" in sweep:
                kw["sweep_speeds"] = tuple(float(v) for v in sweep["v_punch"])
            if "excitations" in sweep:
                kw["excitations"] = tuple(_segments(s) for s in sweep["excitations"])
            if "stride" in sweep:
                kw["snapshot_stride"] = int(sweep["stride"])
            rom_cfg = raw.pop("rom", {})
            if "r" in rom_cfg or "energy" in rom_cfg:
                kw["rom_r"] = None if rom_cfg.get("r") is None else int(rom_cfg["r"])
                kw["rom_energy"] = None if rom_cfg.get("energy") is None else float(rom_cfg["energy"])
            if "energy_power" in rom_cfg:
                kw["energy_power"] = int(rom_cfg["energy_power"])
            if "rmse_dimensions" in rom_cfg:
                kw["rmse_dimensions"] = tuple(int(v) for v in rom_cfg["rmse_dimensions"])
            if "off_nominal_temperature" in rom_cfg:
                kw["off_nominal_temperature"] = float(rom_cfg["off_nominal_temperature"])
            sens = raw.pop("sensors", {})
            if "positions" in sens:
                kw["sensor_positions"] = tuple(_point(p) for p in sens["positions"])
            if "noise_std" in sens:
                kw["noise_std"] = float(sens["noise_std"])
            if "eval_points" in raw:
                kw["eval_points"] = tuple(_point(p) for p in raw.pop("eval_points"))
            noise = raw.pop("noise", {})
            for key in ("q_w", "r_v", "p0", "q_d"):
                if key in noise:
                    kw[key] = float(noise[key])
            if "joseph" in noise:
                kw["joseph"] = bool(noise["joseph"])
            dist = raw.pop("disturbance", {})
            if "unit" in dist:
                kw["disturbance_unit"] = float(dist["unit"])
            if "segments" in dist:
                kw["disturbance"] = _segments(dist["segments"])
            plant = raw.pop("plant", {})
            if "inputs" in plant:
                kw["plant_inputs"] = ProcessInputs(**plant["inputs"])
            if "latent_heat_power" in plant:
                kw["latent_heat_power"] = float(plant["latent_heat_power"])
            if "properties" in raw:
                kw["properties"] = PropertyParams(**raw.pop("properties"))
            speed = raw.pop("speedup", {})
            for key in ("edge_length", "r", "repeats"):
                if key in speed:
                    kw[f"speedup_{key}"] = type(getattr(cls, f"speedup_{key}"))(speed[key])
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        if raw:
            raise ConfigError(f"unknown config sections: {sorted(raw)}")
        return cls(**kw)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)


@dataclass
class Scenario:
    """Mesh, parameter trajectory and systems shared by all stages."""

    cfg: ExperimentConfig
    mesh: object
    traj: object
    tool: ToolSpec

    @classmethod
    def build(cls, cfg: ExperimentConfig, edge_length=None):
        mesh = build_sheet_mesh(cfg.geometry, edge_length or cfg.edge_length)
        tool = ToolSpec()
        # The synthetic tool motion depends on step indices only, so one
        # trajectory serves every process input.
        traj = synth_forming_trajectory(mesh, cls.grid_for(cfg, cfg.reference), tool)
        return cls(cfg, mesh, traj, tool)

    @staticmethod
    def grid_for(cfg, u):
        return build_time_grid(cfg.n_steps, u, cfg.reference, hole_flanging_template())

    def grid(self, u=None):
        return self.grid_for(self.cfg, u or self.cfg.reference)

    def system(self, latent_heat_power=0.0):
        mat = fom.default_steel()
        if latent_heat_power:
            mat = mat.with_source(fom.LatentHeatSource(latent_heat_power, m_s=self.cfg.properties.m_s))
        return fom.FullOrderSystem(self.mesh, mat, disturbance_unit=self.cfg.disturbance_unit)

    def simulate(self, u, disturbance=None, latent_heat_power=0.0, sensors=None):
        return fom.simulate_fom(self.system(latent_heat_power), self.traj, self.grid(u), u,
                                disturbance=disturbance, sensors=sensors)


def noisy(y, sigma, seed):
    """Add seeded Gaussian noise to readings."""
    rng = np.random.default_rng(seed)
    return y + rng.normal(0.0, sigma, size=np.shape(y)) if sigma > 0 else np.array(y, copy=True)


# --- simulate -----------------------------------------------------------------


def stage_simulate(cfg: ExperimentConfig, scen: Scenario, out: Path):
    u = cfg.plant
    sensors = cfg.sensors
    run = scen.simulate(u, fom.PiecewiseConstant(cfg.disturbance), cfg.latent_heat_power, sensors)
    y_noisy = noisy(run.y, cfg.noise_std, cfg.seed)
    fom.save_state_trajectory(out / "plant_state.hfc", run)
    save_parameter_trajectory(out / "parameters.hfc", scen.traj)
    fom.export_readings_csv(out / "sensors_clean.csv", run.t, run.y)
    fom.export_readings_csv(out / "sensors_noisy.csv", run.t, y_noisy)
    return run, y_noisy


# --- reduce -------------------------------------------------------------------


def run_sweep(cfg: ExperimentConfig, scen: Scenario):
    """FOM runs over the input sweep plus disturbance-excited runs at the reference."""
    jobs = [(ProcessInputs(T, v, cfg.reference.t_hold), None, {"t_aust_avg": T, "v_punch": v, "excitation": -1})
            for T in cfg.sweep_temperatures for v in cfg.sweep_speeds]
    for i, segs in enumerate(cfg.excitations):
        ref = cfg.reference
        jobs.append((ref, fom.PiecewiseConstant(segs), {"t_aust_avg": ref.t_aust_avg, "v_punch": ref.v_punch,
                                                        "excitation": i}))

    def one(job):
        u, dist, meta = job
        return scen.simulate(u, dist), meta

    with ThreadPoolExecutor(max_workers=max(cfg.workers, 1)) as pool:
        return list(pool.map(one, jobs))


def find_run(runs, T, v, excitation=-1):
    for run, meta in runs:
        if meta["t_aust_avg"] == T and meta["v_punch"] == v and meta["excitation"] == excitation:
            return run
    raise KeyError(f"no run at {T} K, {v} mm/s")


@dataclass
class Reduction:
    runs: list
    basis: rom.PodBasis  # truncated to the configured r
    full: rom.PodBasis  # widest basis used for the error curves
    schedule: rom.LtvSchedule  # at the configured r
    rank: int
    rmse_curves: dict  # (label, r) -> RMSE(k)


def stage_reduce(cfg: ExperimentConfig, scen: Scenario, out: Path | None = None, rank_check=True):
    runs = run_sweep(cfg, scen)
    snaps = rom.collect_snapshots(runs, stride=cfg.snapshot_stride)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        # Keep every mode up to the numerical rank; the rule picks from these.
        full = rom.pod_basis(snaps, r=min(snaps.shape))
    rank = full.r
    r = rom.select_dimension(full.sigma, rank, r=cfg.rom_r, energy=cfg.rom_energy, power=cfg.energy_power)
    widest = max([r, *cfg.rmse_dimensions] + ([rank] if rank_check else []))
    full = full.truncate(min(widest, rank))
    basis = rom.PodBasis(full.phi[:, :r], full.sigma, cfg.energy_power)

    ref = cfg.reference
    supporting = find_run(runs, ref.t_aust_avg, ref.v_punch)
    grid = scen.grid(ref)
    system = scen.system()
    # Built from the chosen basis alone so the result does not depend on rank_check.
    schedule = rom.build_ltv_schedule(system, basis.phi, supporting, scen.traj, grid, cfg.sensors)
    sched_full = rom.build_ltv_schedule(system, full.phi, supporting, scen.traj, grid, cfg.sensors)

    vol = scen.mesh.lumped_volumes
    off = find_run(runs, cfg.off_nominal_temperature, ref.v_punch)
    dims = sorted(set(cfg.rmse_dimensions) | ({full.r} if rank_check else set()))
    curves = {}
    for r in dims:
        sched = sched_full.truncate(r)
        phi = full.phi[:, :r]
        for label, run in (("supporting", supporting), ("off_nominal", off)):
            x = rom.simulate_rom(sched, phi.T @ run.q[0])
            curves[(label, r)] = fom.rmse(x @ phi.T, run.q, vol)
    del sched_full

    red = Reduction(runs, basis, full, schedule, rank, curves)
    if out is not None:
        rom.save_basis(out / "basis.hfc", basis)
        rom.save_schedule(out / "schedule.hfc", schedule)
        eps = rom.energy_curve(full.sigma, cfg.energy_power)
        write_csv(out / "energy.csv", ["r", "energy_ratio", "singular_value"],
                  [(i + 1, float(eps[i]), float(full.sigma[i])) for i in range(len(eps))],
                  comments=[f"numerical rank {rank}; chosen r {basis.r}"])
        keys = sorted(curves)
        header = ["t [s]"] + [f"rmse_{label}_r{r} [K]" for label, r in keys]
        t = grid.t
        write_csv(out / "rom_rmse.csv", header,
                  np.column_stack([t] + [curves[k] for k in keys]),
                  comments=[f"off_nominal: {cfg.off_nominal_temperature} K; time axis of the reference grid"])
    return red


# --- estimate -----------------------------------------------------------------


@dataclass
class EstimationOutcome:
    plant: fom.StateTrajectory
    y: np.ndarray
    with_d: object  # EstimateResult or None
    without_d: object
    d_true: np.ndarray
    active: np.ndarray  # instants counted as the disturbance-active window


def load_plant(path, scen: Scenario, cfg: ExperimentConfig):
    """External plant trajectory (container ``state``); sensor readings from ``q``."""
    run = fom.load_state_trajectory(path)
    if run.q.shape != (cfg.n_steps + 1, scen.mesh.n_nodes):
        raise ValueError(f"external plant has shape {run.q.shape}, expected "
                         f"{(cfg.n_steps + 1, scen.mesh.n_nodes)}")
    idx = fom.sensor_nodes(cfg.sensors, scen.mesh, scen.traj)
    y = run.q[np.arange(len(run.q))[:, None], idx]
    return fom.StateTrajectory(run.t, run.q, y)


def active_window(cfg, scen, plant, d_true):
    """Instants where the plant's disturbance (injected or latent) is switched on."""
    if cfg.latent_heat_power:
        src = fom.LatentHeatSource(cfg.latent_heat_power, m_s=cfg.properties.m_s)
        power = (src(plant.q) * scen.mesh.lumped_volumes).sum(axis=1)
        return power > 0.05 * power.max() if power.max() > 0 else np.zeros(len(power), bool)
    on = np.any(d_true != 0, axis=1)
    if not on.any():
        # No source at all: judge over the whole horizon.
        return np.ones(len(plant.t), bool)
    # Step k drives instant k + 1.
    return np.concatenate([[False], on])


def stage_estimate(cfg: ExperimentConfig, scen: Scenario, basis, schedule, out: Path | None = None,
                   plant=None, with_disturbance=True, without_disturbance=True):
    if plant is None:
        plant = scen.simulate(cfg.plant, fom.PiecewiseConstant(cfg.disturbance), cfg.latent_heat_power,
                              cfg.sensors)
    grid = scen.grid(cfg.plant)
    sched = schedule.with_steps(grid.h)
    y = noisy(plant.y, cfg.noise_std, cfg.seed)
    vol = scen.mesh.lumped_volumes
    r = basis.r
    x0 = basis.project(plant.q[0])
    model = discretize(sched)
    d_true = (fom.PiecewiseConstant(cfg.disturbance).sample(grid) if not cfg.latent_heat_power
              else np.zeros((grid.n_t, 1)))

    with_d = without_d = None
    if with_disturbance:
        nd = model.B_d.shape[2]
        noise = NoiseConfig(cfg.q_w * np.eye(r), cfg.r_v * np.eye(cfg.sensors.m), cfg.q_d * np.eye(nd))
        with_d = run_estimator(augment(model), y, noise, np.r_[x0, np.zeros(nd)], cfg.p0 * np.eye(r + nd),
                               t=grid.t, phi=basis.phi, reference=plant.q, volumes=vol, joseph=cfg.joseph)
    if without_disturbance:
        noise = NoiseConfig(cfg.q_w * np.eye(r), cfg.r_v * np.eye(cfg.sensors.m))
        without_d = run_estimator(model, y, noise, x0, cfg.p0 * np.eye(r), t=grid.t, phi=basis.phi,
                                  reference=plant.q, volumes=vol, joseph=cfg.joseph)
    outcome = EstimationOutcome(plant, y, with_d, without_d, d_true, active_window(cfg, scen, plant, d_true))
    if out is not None:
        write_estimation_outputs(cfg, scen, outcome, grid, out)
    return outcome


def write_estimation_outputs(cfg, scen, oc: EstimationOutcome, grid, out: Path):
    t = grid.t
    main = oc.with_d if oc.with_d is not None else oc.without_d
    for tag, res in (("with_d", oc.with_d), ("without_d", oc.without_d)):
        if res is not None:
            export_estimate_csv(out / f"estimate_{tag}.csv", res)
            save_estimate(out / f"estimate_{tag}.hfc", res)

    header, cols = ["t [s]"], [t]
    for tag, res in (("with_d", oc.with_d), ("without_d", oc.without_d)):
        if res is not None:
            header.append(f"rmse_{tag} [K]")
            cols.append(res.rmse)
    header.append("disturbance_active")
    cols.append(oc.active.astype(float))
    write_csv(out / "rmse_comparison.csv", header, np.column_stack(cols))

    if oc.with_d is not None:
        # d_true per step is applied over (t_k, t_k+1]; report it at the instant it drives.
        d_inst = np.vstack([np.zeros((1, oc.d_true.shape[1])), oc.d_true])
        write_csv(out / "disturbance.csv", ["t [s]", "d_true [unit]", "d_hat [unit]"],
                  np.column_stack([t, d_inst[:, 0], oc.with_d.d_hat[:, 0]]),
                  comments=[f"1 unit = {cfg.disturbance_unit!r} W/m^3 over the contact region"])

    pts = SensorConfig(cfg.eval_points, max_distance=np.inf)
    idx = fom.sensor_nodes(pts, scen.mesh, scen.traj)
    rows = np.arange(len(t))[:, None]
    true_T = oc.plant.q[rows, idx]
    est_T = main.q[rows, idx]
    header = ["t [s]"]
    for i in range(len(cfg.eval_points)):
        header += [f"point{i}_true [K]", f"point{i}_estimate [K]"]
    write_csv(out / "eval_points.csv", header,
              np.column_stack([t] + [c for i in range(len(cfg.eval_points)) for c in (true_T[:, i], est_T[:, i])]))

    pmap = estimate_properties(main.q, t, cfg.properties)
    final = scen.mesh.nodes + scen.traj.displacement[-1]
    export_property_csv(out / "properties.csv", pmap, final)


def load_artifacts(out: Path):
    return rom.load_basis(out / "basis.hfc"), rom.load_schedule(out / "schedule.hfc")

