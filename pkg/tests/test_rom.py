import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hotform import fom, rom
from hotform.scenario import ProcessInputs, SensorConfig, build_time_grid, hole_flanging_template

from .conftest import REFERENCE

SENSORS = SensorConfig([[0.11, 0.0, 0.0], [-0.08, 0.1386, 0.0], [-0.125, -0.2165, 0.0]], max_distance=0.05)


# --- spectrum and basis ----------------------------------------------------------


def test_energy_ratio_examples():
    assert rom.energy_ratio([3.0, 1.0], 1) == 0.75
    assert rom.energy_ratio([1.0, 0.0], 1) == 1.0
    assert rom.energy_ratio([5.0, 2.0, 1.0], 3) == 1.0
    assert rom.energy_ratio([3.0, 1.0], 1, power=2) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        rom.energy_ratio([3.0, 1.0], 0)


def test_diagonal_matrix_spectrum():
    b = rom.pod_basis(np.diag([3.0, 1.0]), r=1)
    np.testing.assert_allclose(b.sigma, [3.0, 1.0])
    assert b.energy == pytest.approx(0.75)
    np.testing.assert_allclose(np.abs(b.phi[:, 0]), [1.0, 0.0])


def test_repeated_column_is_rank_one(rng):
    v = rng.standard_normal(12)
    b = rom.pod_basis(np.tile(v[:, None], (1, 6)), r=1)
    np.testing.assert_allclose(np.abs(b.phi[:, 0]), np.abs(v) / np.linalg.norm(v), atol=1e-14)
    assert np.all(b.sigma[1:] <= 1e-12)


def test_rank_deficient_request_is_lowered(rng):
    Q = rng.standard_normal((10, 2)) @ rng.standard_normal((2, 8))
    with pytest.warns(RuntimeWarning, match="rank 2"):
        b = rom.pod_basis(Q, r=5)
    assert b.r == 2


def test_energy_rule_picks_smallest_dimension(rng):
    Q = rng.standard_normal((30, 10)) * np.logspace(0, -3, 10)
    b = rom.pod_basis(Q, energy=0.9)
    eps = rom.energy_curve(b.sigma)
    assert eps[b.r - 1] >= 0.9
    assert b.r == 1 or eps[b.r - 2] < 0.9
    with pytest.raises(ValueError):
        rom.pod_basis(Q)
    with pytest.raises(ValueError):
        rom.pod_basis(Q, r=2, energy=0.9)


def best_rank_error(Q, k):
    # Eckart-Young via the eigenvalues of the Gram matrix, independent of the SVD path.
    lam = np.sort(np.linalg.eigvalsh(Q.T @ Q))[::-1]
    return np.sqrt(max(lam[k:].sum(), 0.0))


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_pod_is_the_best_rank_k_approximation(k):
    Q = np.random.default_rng(99).standard_normal((20, 6))
    phi = rom.pod_basis(Q, r=k).phi
    err = np.linalg.norm(Q - phi @ (phi.T @ Q))
    assert abs(err - best_rank_error(Q, k)) <= 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 40), l=st.integers(1, 15))
def test_basis_orthonormal_and_spectrum_monotone(seed, n, l):
    Q = np.random.default_rng(seed).standard_normal((n, l))
    r = min(n, l)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        b = rom.pod_basis(Q, r=r)
    assert np.abs(b.phi.T @ b.phi - np.eye(b.r)).max() < 1e-10
    assert np.all(np.diff(b.sigma) <= 0)
    eps = rom.energy_curve(b.sigma)
    assert np.all(np.diff(eps) >= -1e-15)
    assert eps[-1] == pytest.approx(1.0, abs=1e-12)
    assert 0 < b.energy <= 1


def test_lift_then_project_is_identity(rng):
    b = rom.pod_basis(rng.standard_normal((50, 12)), r=7)
    x = rng.standard_normal(7)
    np.testing.assert_allclose(b.project(b.lift(x)), x, atol=1e-12)
    X = rng.standard_normal((4, 7))
    np.testing.assert_allclose(b.project(b.lift(X)), X, atol=1e-12)


def test_basis_roundtrip(tmp_path, rng):
    b = rom.pod_basis(rng.standard_normal((30, 9)), r=4, power=2)
    rom.save_basis(tmp_path / "b.hfc", b)
    back = rom.load_basis(tmp_path / "b.hfc")
    assert back.phi.tobytes() == b.phi.tobytes()
    assert back.sigma.tobytes() == b.sigma.tobytes()
    assert back.power == 2


# --- snapshots ---------------------------------------------------------------------


def fake_run(n, steps, rng):
    return fom.StateTrajectory(np.arange(steps + 1.0), rng.standard_normal((steps + 1, n)))


def test_single_run_column_count(rng):
    snaps = rom.collect_snapshots([(fake_run(8, 10, rng), {"id": 0})])
    assert snaps.shape == (8, 11)
    assert len(snaps.provenance) == 11
    assert rom.collect_snapshots([(fake_run(8, 10, rng), {})], stride=3).shape == (8, 4)


def test_mesh_mismatch_rejected(rng):
    with pytest.raises(ValueError, match="nodes"):
        rom.collect_snapshots([(fake_run(8, 3, rng), {}), (fake_run(9, 3, rng), {})])


def test_duplicate_run_keeps_subspace(rng):
    run = fake_run(20, 5, rng)
    once = rom.collect_snapshots([(run, {})])
    twice = rom.collect_snapshots([(run, {}), (run, {})])
    s1 = np.linalg.svd(once.Q, compute_uv=False)
    s2 = np.linalg.svd(twice.Q, compute_uv=False)
    assert rom.numerical_rank(s1, once.shape) == rom.numerical_rank(s2, twice.shape)
    a, b = rom.pod_basis(once, r=6).phi, rom.pod_basis(twice, r=6).phi
    np.testing.assert_allclose(a @ a.T, b @ b.T, atol=1e-10)


def test_provenance_selection(rng):
    snaps = rom.collect_snapshots([(fake_run(5, 2, rng), {"excitation": -1}), (fake_run(5, 2, rng), {"excitation": 0})])
    plain = snaps.select(lambda rec: rec["excitation"] < 0)
    assert plain.shape == (5, 3)


# --- projected dynamics -------------------------------------------------------------


@pytest.fixture(scope="module")
def coarse_system(coarse_mesh):
    return fom.FullOrderSystem(coarse_mesh, fom.default_steel(), disturbance_unit=1e5)


@pytest.fixture(scope="module")
def sweep(coarse_system, coarse_traj):
    runs = []
    for T in (1073.0, 1273.0, 1373.0):
        for v in (80.0, 100.0):
            u = ProcessInputs(T, v, 4.0)
            grid = build_time_grid(510, u, REFERENCE, hole_flanging_template())
            runs.append((fom.simulate_fom(coarse_system, coarse_traj, grid, u), {"T": T, "v": v}))
    return runs


def test_identity_basis_reproduces_full_step(coarse_system, coarse_traj):
    n = coarse_system.n
    red = rom.galerkin_reduce(coarse_system, np.eye(n))
    q = np.full(n, 1250.0)
    p = coarse_traj.slice(290)
    full = fom.step_fom(coarse_system, q, p, 0.03, d=np.array([500.0]))
    reduced = red.step(q, p, 0.03, d=np.array([500.0]))
    np.testing.assert_allclose(reduced, full, rtol=1e-10)


def test_ltv_equals_nonlinear_rom_along_supporting_run(coarse_system, coarse_traj, nominal_grid, sweep):
    supporting = sweep[2][0]
    snaps = rom.collect_snapshots([(supporting, {})])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        b = rom.pod_basis(snaps, r=min(snaps.shape))
    sched = rom.build_ltv_schedule(coarse_system, b.phi, supporting, coarse_traj, nominal_grid, SENSORS)
    x_ltv = rom.simulate_rom(sched, b.project(supporting.q[0]))
    red = rom.galerkin_reduce(coarse_system, b.phi)
    x = b.project(supporting.q[0])
    x_nl = [x]
    for k in range(nominal_grid.n_t):
        x = red.step(x, coarse_traj.slice(k), nominal_grid.h[k])
        x_nl.append(x)
    lifted_ltv, lifted_nl = b.lift(x_ltv), b.lift(np.array(x_nl))
    assert np.abs(lifted_ltv - lifted_nl).max() <= 1e-6
    assert fom.rmse(lifted_ltv, supporting.q, coarse_system.mesh.lumped_volumes).max() <= 1e-6


def test_error_decreases_with_dimension(coarse_system, coarse_traj, nominal_grid, sweep):
    supporting = sweep[2][0]
    b = rom.pod_basis(rom.collect_snapshots(sweep), r=50)
    sched = rom.build_ltv_schedule(coarse_system, b.phi, supporting, coarse_traj, nominal_grid, SENSORS)
    peaks = []
    for r in (10, 30, 50):
        x = rom.simulate_rom(sched.truncate(r), b.phi[:, :r].T @ supporting.q[0])
        peaks.append(fom.rmse(x @ b.phi[:, :r].T, supporting.q, coarse_system.mesh.lumped_volumes).max())
    assert peaks[0] > peaks[1] > peaks[2]


def test_unseen_pulse_error_sits_at_the_contact(coarse_system, coarse_traj, nominal_grid, sweep):
    supporting = sweep[2][0]
    b = rom.pod_basis(rom.collect_snapshots(sweep), r=30)
    sched = rom.build_ltv_schedule(coarse_system, b.phi, supporting, coarse_traj, nominal_grid, SENSORS)
    pulse = fom.PiecewiseConstant(((9.0, 11.0, 1000.0),))
    plant = fom.simulate_fom(coarse_system, coarse_traj, nominal_grid, REFERENCE, disturbance=pulse)
    x = rom.simulate_rom(sched, b.project(plant.q[0]), pulse.sample(nominal_grid))
    k = int(np.flatnonzero(np.asarray(nominal_grid.labels) == "holding")[-1])  # late in the pulse, in contact
    err = np.abs(b.lift(x[k]) - plant.q[k])
    contact = coarse_traj.tool_distance[k] <= fom.CONTACT_THRESHOLD
    assert err[contact].mean() > 3.0 * err[~contact].mean()


def test_null_system_stays_at_zero(rng):
    n_t, r = 6, 3
    sched = rom.LtvSchedule(np.array([np.eye(r)] * n_t), -np.array([np.eye(r)] * n_t), np.zeros((n_t, r)),
                            rng.standard_normal((n_t, r, 1)), np.zeros((n_t + 1, 1, r)), np.full(n_t, 0.1))
    assert not rom.simulate_rom(sched, np.zeros(r)).any()


def test_schedule_roundtrip_and_truncation(tmp_path, coarse_system, coarse_traj, nominal_grid, sweep):
    supporting = sweep[2][0]
    b = rom.pod_basis(rom.collect_snapshots(sweep), r=12)
    sched = rom.build_ltv_schedule(coarse_system, b.phi, supporting, coarse_traj, nominal_grid, SENSORS)
    rom.save_schedule(tmp_path / "s.hfc", sched)
    back = rom.load_schedule(tmp_path / "s.hfc")
    for name in ("M", "K", "b", "E", "C", "h"):
        assert getattr(back, name).tobytes() == getattr(sched, name).tobytes()
    small = rom.build_ltv_schedule(coarse_system, b.phi[:, :5], supporting, coarse_traj, nominal_grid, SENSORS)
    cut = sched.truncate(5)
    np.testing.assert_allclose(cut.M, small.M, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(cut.K, small.K, rtol=1e-12, atol=1e-12)
    assert sched.mass_condition().max() < 1e6
