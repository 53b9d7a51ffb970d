"""Acceptance checks for the full pipeline.

Each ``check_*`` function returns a :class:`CheckResult` with the measured
quantities next to their thresholds. :func:`evaluate` runs them all.
"""

from __future__ import annotations

import filecmp
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fom, rom
from .estimator import (
    DiscreteModel,
    EkfState,
    NoiseConfig,
    augment,
    covariance_health,
    discretize,
    ekf_predict,
    ekf_update,
    fd_jacobian,
    run_estimator,
)
from .experiment import ExperimentConfig, Scenario, stage_estimate, stage_reduce, stage_simulate
from .scenario import ParameterSlice, ProcessInputs, build_strip_mesh


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def line(self):
        return f"criterion {self.number} {self.name}: {'PASS' if self.passed else 'FAIL'}"


def _f(x):
    return float(x)


# --- pipeline criteria ----------------------------------------------------------


def check_pod_energy(red, runtime, limit=600.0):
    eps = rom.energy_curve(red.full.sigma, red.full.power)
    monotone = bool(np.all(np.diff(eps) >= -1e-15))
    full = abs(eps[-1] - 1.0) <= 1e-12
    e30 = eps[min(30, len(eps)) - 1]
    return CheckResult(1, "pod_energy", monotone and full and e30 >= 0.99 and runtime < limit, {
        "energy_30": _f(e30), "energy_full": _f(eps[-1]), "non_decreasing": monotone,
        "sweep_and_basis_seconds": runtime, "runtime_limit_seconds": limit,
    })


def check_rom_error(red, dims=(10, 30, 50), rank_limit=0.5):
    sup = [_f(red.rmse_curves[("supporting", r)].max()) for r in dims]
    off = [_f(red.rmse_curves[("off_nominal", r)].max()) for r in dims]
    at_rank = _f(red.rmse_curves[("supporting", red.full.r)].max())
    decreasing = all(a > b for a, b in zip(sup, sup[1:]))
    ordered = all(np.isfinite(o) and o > s for o, s in zip(off, sup))
    return CheckResult(2, "rom_error_structure", decreasing and at_rank <= rank_limit and ordered, {
        "dimensions": list(dims), "peak_rmse_supporting_K": sup, "peak_rmse_off_nominal_K": off,
        "rank": red.full.r, "peak_rmse_at_rank_K": at_rank, "limit_at_rank_K": rank_limit,
    })


def pulse_statistics(t, d_hat, start, end, level):
    """Plateau (mean over the second half of the pulse) and 50 % crossing time."""
    mid = 0.5 * (start + end)
    late = (t >= mid) & (t <= end)
    plateau = float(d_hat[late].mean())
    after = np.nonzero((t >= start) & (d_hat >= 0.5 * plateau))[0]
    cross = float(t[after[0]]) if after.size else float("nan")
    return plateau, cross


def check_known_disturbance(oc, cfg: ExperimentConfig, rmse_limit=20.0, plateau_tol=0.25):
    res = oc.with_d
    start, end, level = cfg.disturbance[0]
    plateau, cross = pulse_statistics(res.t, res.d_hat[:, 0], start, end, level)
    peak = _f(res.rmse.max())
    ok_plateau = abs(plateau - level) <= plateau_tol * abs(level)
    delayed = bool(cross > start)
    return CheckResult(3, "ekf_known_disturbance", peak <= rmse_limit and ok_plateau and delayed, {
        "peak_rmse_K": peak, "rmse_limit_K": rmse_limit, "plateau": plateau, "pulse_level": level,
        "plateau_tolerance": plateau_tol, "half_level_crossing_s": cross, "pulse_start_s": start,
    })


def check_disturbance_benefit(oc, min_reduction=0.2):
    w = oc.active
    with_all, without_all = _f(oc.with_d.rmse.max()), _f(oc.without_d.rmse.max())
    with_w, without_w = _f(oc.with_d.rmse[w].max()), _f(oc.without_d.rmse[w].max())
    reduction = 1.0 - with_w / without_w
    return CheckResult(4, "disturbance_estimation_benefit", with_all <= without_all and reduction >= min_reduction, {
        "peak_rmse_with_K": with_all, "peak_rmse_without_K": without_all,
        "window_peak_rmse_with_K": with_w, "window_peak_rmse_without_K": without_w,
        "window_reduction": reduction, "min_reduction": min_reduction,
        "window_s": [_f(oc.plant.t[w].min()), _f(oc.plant.t[w].max())],
    })


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def check_speedup(cfg: ExperimentConfig, min_ratio=100.0):
    scen = Scenario.build(cfg, edge_length=cfg.speedup_edge_length)
    sys = scen.system()
    u = cfg.reference
    grid = scen.grid(u)
    runs = []
    t_fom = _median_time(lambda: runs.append(fom.simulate_fom(sys, scen.traj, grid, u)), cfg.speedup_repeats)
    supporting = runs[-1]
    basis = rom.pod_basis(rom.collect_snapshots([(supporting, {})]), r=cfg.speedup_r)
    sched = rom.build_ltv_schedule(sys, basis.phi, supporting, scen.traj, grid, cfg.sensors)
    x0 = basis.project(supporting.q[0])
    t_rom = _median_time(lambda: rom.simulate_rom(sched, x0), cfg.speedup_repeats)
    ratio = t_fom / t_rom
    return CheckResult(5, "speedup", ratio >= min_ratio, {
        "n": scen.mesh.n_nodes, "r": basis.r, "fom_seconds": t_fom, "rom_seconds": t_rom,
        "ratio": ratio, "min_ratio": min_ratio, "repeats": cfg.speedup_repeats,
    })


# --- oracle suites --------------------------------------------------------------


def _uniform_slice(n, T_inf, distance=1.0, pressure=0.0):
    return ParameterSlice(np.zeros((n, 3)), np.full(n, distance), np.full(n, pressure), np.full(n, T_inf))


def _strip(nx=12, ny=4):
    return build_strip_mesh(0.06, 0.02, nx, ny, 0.002)


def fom_oracles():
    rng = np.random.default_rng(7)
    mesh = _strip()
    n = mesh.n_nodes
    rho, cp, lam = 7800.0, 500.0, 30.0
    mat = fom.constant_material(rho, cp, lam)
    out = {}

    # No exchange anywhere: the lumped heat content is a step invariant.
    sys = fom.FullOrderSystem(mesh, mat, exchange_faces=False, exchange_rims=(), solver="direct")
    p = _uniform_slice(n, 293.0)
    q = 900.0 + 200.0 * rng.random(n)
    e0 = sys.assemble(q, p).m @ q
    worst = 0.0
    for _ in range(20):
        q_new = fom.step_fom(sys, q, p, 0.05)
        worst = max(worst, abs(sys.assemble(q_new, p).m @ q_new - sys.assemble(q, p).m @ q) / e0)
        q = q_new
    out["adiabatic_max_relative_change"] = worst

    # Uniform cooling through both faces against the exponential solution.
    film = fom.FilmModel(h_convection=500.0, emissivity=0.0)
    sys = fom.FullOrderSystem(mesh, mat, film=film, exchange_rims=())
    T0, T_inf, h, steps = 1200.0, 300.0, 0.01, 500
    q = np.full(n, T0)
    p = _uniform_slice(n, T_inf)
    for _ in range(steps):
        q = fom.step_fom(sys, q, p, h)
    rate = 2.0 * film.h_convection / (rho * cp * mesh.thickness)
    exact = T_inf + (T0 - T_inf) * np.exp(-rate * h * steps)
    out["scalar_ode_relative_error"] = float(np.abs(q - exact).max() / (exact - T_inf))

    # Comparison principle: ordered initial data stay ordered and bounded.
    sys = fom.FullOrderSystem(mesh, mat, film=film)
    q_lo = 600.0 + 300.0 * rng.random(n)
    q_hi = q_lo + 100.0 * rng.random(n)
    ordered, bounded = True, True
    lo_bound, hi_bound = min(q_lo.min(), T_inf), max(q_hi.max(), T_inf)
    for _ in range(50):
        q_lo = fom.step_fom(sys, q_lo, p, 0.05)
        q_hi = fom.step_fom(sys, q_hi, p, 0.05)
        ordered &= bool(np.all(q_hi >= q_lo))
        bounded &= bool(q_lo.min() >= lo_bound and q_hi.max() <= hi_bound)
    out["comparison_ordered"] = ordered
    out["comparison_bounded"] = bounded

    # A constant induced source equals the same power injected as a disturbance.
    g = 2e6
    sys_g = fom.FullOrderSystem(mesh, fom.constant_material(rho, cp, lam, lambda T: np.full_like(T, g)), film=film)
    sys_d = fom.FullOrderSystem(mesh, mat, film=film, disturbance_regions=fom.whole_sheet_region)
    qa = qb = np.full(n, 800.0)
    for _ in range(50):
        qa = fom.step_fom(sys_g, qa, p, 0.05)
        qb = fom.step_fom(sys_d, qb, p, 0.05, d=np.array([g]))
    out["source_equivalence_max_diff_K"] = float(np.abs(qa - qb).max())

    passed = (out["adiabatic_max_relative_change"] <= 1e-8 and out["scalar_ode_relative_error"] <= 5e-3
              and ordered and bounded and out["source_equivalence_max_diff_K"] <= 1e-6)
    return CheckResult(6, "fom_oracles", passed, out)


def scalar_kalman(a, c, g, q, r, x0, p0, ys, offset=0.0):
    """Textbook scalar Kalman filter; returns posterior means and variances."""
    xs, ps = [x0], [p0]
    x, p = x0, p0
    for y in ys:
        x = a * x + offset
        p = a * p * a + g * q * g
        k = p * c / (c * p * c + r)
        x = x + k * (y - c * x)
        p = (1 - k * c) * p
        xs.append(x)
        ps.append(p)
    return np.array(xs), np.array(ps)


def _toy_ltv(rng, n_t=40, r=4, m=2, n_d=1):
    sched = rom.LtvSchedule(
        M=np.array([np.eye(r) + 0.1 * np.diag(rng.random(r)) for _ in range(n_t)]),
        K=np.array([-np.diag(1.0 + rng.random(r)) + 0.05 * rng.standard_normal((r, r)) for _ in range(n_t)]),
        b=rng.standard_normal((n_t, r)),
        E=rng.standard_normal((n_t, r, n_d)),
        C=rng.standard_normal((n_t + 1, m, r)),
        h=np.full(n_t, 0.05),
    )
    return sched


def filter_oracles():
    rng = np.random.default_rng(11)
    out = {}

    a, c, g, q, r_v = 0.95, 1.3, 0.5, 0.2, 0.4
    ys = rng.standard_normal(30)
    model = DiscreteModel(np.full((30, 1, 1), a), np.zeros((30, 1)), np.full((30, 1, 1), g),
                          np.full((31, 1, 1), c), np.ones(30))
    res = run_estimator(model, np.r_[0.0, ys][:, None], NoiseConfig([[q]], [[r_v]]), [1.0], [[2.0]])
    xs, ps = scalar_kalman(a, c, g, q, r_v, 1.0, 2.0, ys)
    out["scalar_kalman_max_diff"] = float(max(np.abs(res.x[:, 0] - xs).max(), np.abs(res.P_diag[:, 0] - ps).max()))

    sched = _toy_ltv(rng)
    dm = discretize(sched)
    x = np.zeros((sched.n_t + 1, sched.r))
    x[0] = rng.standard_normal(sched.r)
    for k in range(sched.n_t):
        x[k + 1] = rom.step_rom(sched, k, x[k])
    y = np.einsum("kmr,kr->km", sched.C, x)
    noise = NoiseConfig(np.eye(sched.r), np.eye(sched.m))
    res = run_estimator(dm, y, noise, x[0], np.eye(sched.r), check_health=True)
    out["zero_innovation_max"] = float(np.abs(res.innovations).max())
    out["self_consistency_max_error"] = float(np.abs(res.x - x).max())

    am = augment(dm)
    y_noisy = y + rng.normal(0.0, 0.5, y.shape)
    noise = NoiseConfig(np.eye(sched.r), 0.25 * np.eye(sched.m), 0.1 * np.eye(1))
    st = EkfState(np.r_[x[0], 0.0], 3.0 * np.eye(sched.r + 1))
    worst_asym, worst_eig = 0.0, np.inf
    Q = np.diag(np.r_[np.ones(sched.r), 0.1])
    for k in range(1, sched.n_t + 1):
        st = ekf_predict(st, am, Q)
        st, _ = ekf_update(st, y_noisy[k], am, noise.R_v)
        asym, eig = covariance_health(st.P)
        worst_asym, worst_eig = max(worst_asym, asym), min(worst_eig, eig)
    out["covariance_max_asymmetry"] = worst_asym
    out["covariance_min_relative_eigenvalue"] = worst_eig

    k = 7
    x_lin = rng.standard_normal(sched.r)
    J = fd_jacobian(lambda z: dm.transition(k, z), x_lin)
    out["fd_jacobian_relative_error"] = float(np.abs(J - dm.A[k]).max() / np.abs(dm.A[k]).max())

    passed = (out["scalar_kalman_max_diff"] <= 1e-10 and out["zero_innovation_max"] <= 1e-8
              and worst_asym <= 1e-10 and worst_eig >= -1e-8 and out["fd_jacobian_relative_error"] <= 1e-5)
    return CheckResult(7, "filter_oracles", passed, out)


def best_rank_error(Q, k):
    """Frobenius error of the best rank-``k`` approximation, from the eigenvalues of ``Q^T Q``."""
    lam = np.sort(np.linalg.eigvalsh(Q.T @ Q))[::-1]
    return float(np.sqrt(max(lam[k:].sum(), 0.0)))


def pod_oracles(basis: rom.PodBasis | None = None):
    rng = np.random.default_rng(3)
    out = {}
    if basis is not None:
        out["basis_orthonormality_error"] = float(np.abs(basis.phi.T @ basis.phi - np.eye(basis.r)).max())
    Q = rng.standard_normal((40, 12))
    b = rom.pod_basis(Q, r=8)
    out["random_orthonormality_error"] = float(np.abs(b.phi.T @ b.phi - np.eye(8)).max())

    v = rng.standard_normal(15)
    dup = rom.pod_basis(np.tile(v[:, None], (1, 5)), r=1)
    align = abs(dup.phi[:, 0] @ v) / np.linalg.norm(v)
    out["rank1_alignment_error"] = float(abs(1.0 - align))
    out["rank1_tail_max"] = float(dup.sigma[1:].max())

    Q = rng.standard_normal((20, 6))
    worst = 0.0
    for k in range(1, 6):
        phi = rom.pod_basis(Q, r=k).phi
        err = np.linalg.norm(Q - phi @ (phi.T @ Q))
        worst = max(worst, abs(err - best_rank_error(Q, k)))
    out["best_rank_max_diff"] = worst

    ortho = max(out.get("basis_orthonormality_error", 0.0), out["random_orthonormality_error"])
    passed = (ortho <= 1e-10 and out["rank1_alignment_error"] <= 1e-12 and out["rank1_tail_max"] <= 1e-12
              and worst <= 1e-10)
    return CheckResult(8, "pod_oracles", passed, out)


def check_reproducibility(cfg: ExperimentConfig, basis, schedule):
    """Run the simulate and estimate stages twice and compare every CSV byte for byte."""
    with tempfile.TemporaryDirectory() as tmp:
        dirs = [Path(tmp) / "a", Path(tmp) / "b"]
        for d in dirs:
            d.mkdir()
            scen = Scenario.build(cfg)
            stage_simulate(cfg, scen, d)
            stage_estimate(cfg, scen, basis, schedule, d)
        names = sorted(p.name for p in dirs[0].glob("*.csv"))
        match, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], names, shallow=False)
    return CheckResult(9, "reproducibility", bool(names) and not mismatch and not errors,
                       {"files": names, "mismatched": mismatch + errors})


# --- driver -------------------------------------------------------------------


def benefit_config(cfg: ExperimentConfig, latent_heat_power=1.5e8, temperature=1373.0):
    """Plant with an unmodelled latent-heat source; no injected disturbance."""
    u = ProcessInputs(temperature, cfg.reference.v_punch, cfg.reference.t_hold)
    return replace(cfg, plant_inputs=u, latent_heat_power=latent_heat_power, disturbance=())


def evaluate(cfg: ExperimentConfig, out: Path | None = None, log=print, keep: dict | None = None):
    """Run every criterion; returns the list of results.

    When ``keep`` is a dict it receives the scenario, basis, schedule and both
    estimation outcomes for further inspection.
    """
    results = []

    def done(res):
        results.append(res)
        log(res.line())

    scen = Scenario.build(cfg)
    t0 = time.perf_counter()
    red = stage_reduce(cfg, scen, out)
    runtime = time.perf_counter() - t0
    done(check_pod_energy(red, runtime))
    done(check_rom_error(red, cfg.rmse_dimensions))
    basis, schedule = red.basis, red.schedule
    del red

    known = stage_estimate(cfg, scen, basis, schedule)
    done(check_known_disturbance(known, cfg))
    benefit = stage_estimate(benefit_config(cfg), scen, basis, schedule)
    done(check_disturbance_benefit(benefit))
    if keep is not None:
        keep.update(scenario=scen, basis=basis, schedule=schedule, known=known, benefit=benefit)
    del known, benefit
    done(check_speedup(cfg))
    done(fom_oracles())
    done(filter_oracles())
    done(pod_oracles(basis))
    done(check_reproducibility(cfg, basis, schedule))
    return results


def report(results):
    return {
        "passed": all(r.passed for r in results),
        "criteria": [{"number": r.number, "name": r.name, "passed": r.passed, "details": r.details}
                     for r in results],
    }
