"""Snapshot POD, Galerkin projection and the supporting-trajectory LTV model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .container import read_container, write_container
from .fom import FullOrderSystem, StateTrajectory, nearest_nodes
from .scenario import ParameterSlice, ParameterTrajectory, SensorConfig, TimeGrid


@dataclass
class SnapshotMatrix:
    Q: np.ndarray  # (n, l)
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.provenance) != self.Q.shape[1]:
            raise ValueError("one provenance record per snapshot column is required")
        if not np.all(np.isfinite(self.Q)):
            raise ValueError("snapshot matrix contains non-finite entries")

    @property
    def shape(self):
        return self.Q.shape

    def select(self, keep):
        """Columns whose provenance satisfies ``keep(record)``."""
        idx = [j for j, rec in enumerate(self.provenance) if keep(rec)]
        return SnapshotMatrix(self.Q[:, idx], [self.provenance[j] for j in idx])


def collect_snapshots(runs, stride=1) -> SnapshotMatrix:
    """Concatenate state trajectories column-wise.

    Parameters
    ----------
    runs : iterable of (StateTrajectory, dict)
        Each run with a provenance record (scenario id, inputs, disturbance tag).
    stride : int
        Keep every ``stride``-th time instant of each run.
    """
    blocks, prov = [], []
    n = None
    for st, info in runs:
        if n is None:
            n = st.q.shape[1]
        elif st.q.shape[1] != n:
            raise ValueError(f"run {info!r} has {st.q.shape[1]} nodes, expected {n}")
        steps = np.arange(0, len(st.q), stride)
        blocks.append(st.q[steps].T)
        prov += [dict(info, step=int(k)) for k in steps]
    if not blocks:
        raise ValueError("no runs given")
    return SnapshotMatrix(np.hstack(blocks), prov)


def energy_ratio(sigma, r, power=1):
    """Share of the singular-value sum captured by the leading ``r`` values.

    ``power=1`` sums the singular values themselves; ``power=2`` gives the
    usual squared-energy criterion.
    """
    s = np.asarray(sigma, dtype=float) ** power
    if not 1 <= r <= len(s):
        raise ValueError(f"r = {r} outside [1, {len(s)}]")
    return float(s[:r].sum() / s.sum())


def energy_curve(sigma, power=1):
    s = np.asarray(sigma, dtype=float) ** power
    return np.cumsum(s) / s.sum()


def numerical_rank(sigma, shape):
    sigma = np.asarray(sigma)
    if sigma.size == 0 or sigma[0] == 0:
        return 0
    tol = sigma[0] * max(shape) * np.finfo(float).eps
    return int(np.sum(sigma > tol))


@dataclass
class PodBasis:
    phi: np.ndarray  # (n, r)
    sigma: np.ndarray  # all singular values of the snapshot matrix
    power: int = 1

    @property
    def r(self):
        return self.phi.shape[1]

    @property
    def energy(self):
        return energy_ratio(self.sigma, self.r, self.power)

    def truncate(self, r):
        if r > self.r:
            raise ValueError(f"basis holds only {self.r} modes")
        return PodBasis(self.phi[:, :r], self.sigma, self.power)

    def project(self, q):
        return np.asarray(q) @ self.phi if np.ndim(q) > 1 else self.phi.T @ q

    def lift(self, x):
        return np.asarray(x) @ self.phi.T if np.ndim(x) > 1 else self.phi @ x


def select_dimension(sigma, rank, r=None, energy=None, power=1):
    """Apply the fixed-``r`` or energy rule, capped at ``rank`` with a warning."""
    if (r is None) == (energy is None):
        raise ValueError("give exactly one of r or energy")
    if energy is not None:
        if not 0 < energy <= 1:
            raise ValueError("energy threshold must lie in (0, 1]")
        r = min(int(np.searchsorted(energy_curve(sigma, power), energy - 1e-15) + 1), len(sigma))
    if r < 1:
        raise ValueError("r must be at least 1")
    if r > rank:
        warnings.warn(f"snapshot rank {rank} is below the requested r = {r}; using r = {rank}", RuntimeWarning,
                      stacklevel=3)
        r = rank
    return r


def pod_basis(snapshots, r=None, energy=None, power=1) -> PodBasis:
    """POD basis from the thin SVD of the snapshot matrix.

    Exactly one of ``r`` (fixed dimension) or ``energy`` (smallest ``r``
    whose :func:`energy_ratio` reaches the threshold) must be given. When
    the numerical rank is below the requested dimension, ``r`` is lowered
    with a warning.
    """
    Q = snapshots.Q if isinstance(snapshots, SnapshotMatrix) else np.asarray(snapshots, dtype=float)
    if Q.ndim != 2 or Q.shape[1] < 1:
        raise ValueError("need at least one snapshot")
    if (r is None) == (energy is None):
        raise ValueError("give exactly one of r or energy")
    U, sigma, _ = la.svd(Q, full_matrices=False, lapack_driver="gesdd")
    r = select_dimension(sigma, numerical_rank(sigma, Q.shape), r=r, energy=energy, power=power)
    return PodBasis(U[:, :r].copy(), sigma, power)


def save_basis(path, basis: PodBasis):
    write_container(path, "pod_basis", static={"phi": basis.phi, "sigma": basis.sigma},
                    attrs={"power": basis.power})


def load_basis(path) -> PodBasis:
    box = read_container(path, kind="pod_basis")
    return PodBasis(box.static["phi"], box.static["sigma"], int(box.attrs.get("power", 1)))


# -- Galerkin projection ------------------------------------------------------


@dataclass
class ReducedSystem:
    """Nonlinear reduced model evaluated by lift, assemble, project."""

    sys: FullOrderSystem
    phi: np.ndarray

    @property
    def r(self):
        return self.phi.shape[1]

    def lift(self, x):
        return self.phi @ x

    def project(self, q):
        return self.phi.T @ q

    def assemble(self, x, p: ParameterSlice):
        asm = self.sys.assemble(self.lift(x), p)
        return project_assembly(asm, self.phi) + (asm,)

    def disturbance_matrix(self, p: ParameterSlice, volumes=None):
        return self.phi.T @ self.sys.disturbance_matrix(p, volumes)

    def step(self, x, p: ParameterSlice, h, d=None, w=None):
        """Linearly implicit Euler step of the reduced system (``w`` is an additive force)."""
        M_r, K_r, b_r, asm = self.assemble(x, p)
        rhs = M_r @ x + h * b_r
        if d is not None and np.any(d):
            rhs = rhs + h * self.disturbance_matrix(p, asm.volumes) @ np.atleast_1d(d)
        if w is not None:
            rhs = rhs + h * w
        return np.linalg.solve(M_r - h * K_r, rhs)


def project_assembly(asm, phi):
    """Galerkin projection ``(phi^T M phi, phi^T K phi, phi^T b)`` of an assembly."""
    M_r = phi.T @ (asm.m[:, None] * phi)
    K_phi = asm.K_cond @ phi - asm.robin[:, None] * phi
    K_r = phi.T @ K_phi
    return 0.5 * (M_r + M_r.T), K_r, phi.T @ asm.b


def galerkin_reduce(sys: FullOrderSystem, phi) -> ReducedSystem:
    phi = np.asarray(phi, dtype=float)
    if phi.shape[0] != sys.n:
        raise ValueError(f"basis has {phi.shape[0]} rows, system has {sys.n} nodes")
    return ReducedSystem(sys, phi)


# -- supporting-trajectory LTV model ------------------------------------------


@dataclass
class LtvSchedule:
    """Reduced matrices frozen along a supporting trajectory.

    Arrays are indexed by step ``k`` (``M``, ``K``, ``b``, ``E``, ``h``) or by
    time instant (``C``, one more entry than steps).
    """

    M: np.ndarray  # (n_t, r, r)
    K: np.ndarray  # (n_t, r, r)
    b: np.ndarray  # (n_t, r)
    E: np.ndarray  # (n_t, r, n_d)
    C: np.ndarray  # (n_t + 1, m, r)
    h: np.ndarray  # (n_t,)
    label: str = ""

    def __post_init__(self):
        n_t, r = self.b.shape
        if self.M.shape != (n_t, r, r) or self.K.shape != (n_t, r, r):
            raise ValueError("inconsistent reduced matrix shapes")
        if self.E.shape[:2] != (n_t, r) or self.C.shape[0] != n_t + 1 or self.C.shape[2] != r:
            raise ValueError("inconsistent disturbance or output shapes")
        if self.h.shape != (n_t,):
            raise ValueError("one step size per step is required")

    @property
    def n_t(self):
        return len(self.h)

    @property
    def r(self):
        return self.b.shape[1]

    @property
    def n_d(self):
        return self.E.shape[2]

    @property
    def m(self):
        return self.C.shape[1]

    def truncate(self, r):
        """Schedule of the leading ``r`` modes (sub-blocks of the projected matrices)."""
        if r > self.r:
            raise ValueError(f"schedule holds only {self.r} modes")
        return LtvSchedule(self.M[:, :r, :r].copy(), self.K[:, :r, :r].copy(), self.b[:, :r].copy(),
                           self.E[:, :r].copy(), self.C[:, :, :r].copy(), self.h.copy(), self.label)

    def with_steps(self, h):
        """Same per-step matrices, different step sizes (other punch speed or hold time)."""
        h = np.asarray(h, dtype=float)
        if h.shape != self.h.shape:
            raise ValueError("step count must not change")
        return LtvSchedule(self.M, self.K, self.b, self.E, self.C, h, self.label)

    def mass_condition(self):
        return np.linalg.cond(self.M)


def build_ltv_schedule(sys: FullOrderSystem, phi, supporting: StateTrajectory, traj: ParameterTrajectory,
                       grid: TimeGrid, sensors: SensorConfig, label="supporting") -> LtvSchedule:
    """Assemble at the supporting states and parameters, then project, once per step."""
    phi = np.asarray(phi, dtype=float)
    n_t = grid.n_t
    if len(supporting.q) < n_t + 1 or traj.n_instants < n_t + 1:
        raise ValueError(f"supporting run covers {len(supporting.q) - 1} steps, grid has {n_t}")
    r = phi.shape[1]
    M = np.empty((n_t, r, r))
    K = np.empty((n_t, r, r))
    b = np.empty((n_t, r))
    E = None
    C = np.empty((n_t + 1, sensors.m, r))
    for k in range(n_t):
        p = traj.slice(k)
        asm = sys.assemble(supporting.q[k], p)
        M[k], K[k], b[k] = project_assembly(asm, phi)
        Ek = phi.T @ sys.disturbance_matrix(p, asm.volumes)
        if E is None:
            E = np.empty((n_t,) + Ek.shape)
        E[k] = Ek
    for k in range(n_t + 1):
        idx = nearest_nodes(sensors.positions, sys.mesh, traj.displacement[k], sensors.max_distance)
        C[k] = phi[idx]
    return LtvSchedule(M, K, b, E, C, grid.h.copy(), label)


def save_schedule(path, sched: LtvSchedule):
    write_container(
        path,
        "ltv_schedule",
        static={"C_final": sched.C[-1]},
        fields={"M": sched.M, "K": sched.K, "b": sched.b, "E": sched.E, "C": sched.C[:-1], "h": sched.h[:, None]},
        attrs={"label": sched.label},
    )


def load_schedule(path) -> LtvSchedule:
    box = read_container(path, kind="ltv_schedule")
    f = box.fields
    C = np.concatenate([f["C"], box.static["C_final"][None]], axis=0)
    return LtvSchedule(f["M"], f["K"], f["b"], f["E"], C, f["h"][:, 0].copy(), box.attrs.get("label", ""))


def step_rom(sched: LtvSchedule, k, x, d=None, h=None):
    """Linearly implicit Euler step ``k`` of the LTV reduced model."""
    h = sched.h[k] if h is None else h
    rhs = sched.M[k] @ x + h * sched.b[k]
    if d is not None:
        rhs = rhs + h * sched.E[k] @ np.atleast_1d(d)
    try:
        return np.linalg.solve(sched.M[k] - h * sched.K[k], rhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"reduced step matrix at step {k} is singular") from exc


def simulate_rom(sched: LtvSchedule, x0, disturbance=None):
    """Run the LTV reduced model; ``disturbance`` is ``(n_t, n_d)`` per step or ``None``."""
    x = np.asarray(x0, dtype=float)
    out = np.empty((sched.n_t + 1, sched.r))
    out[0] = x
    for k in range(sched.n_t):
        x = step_rom(sched, k, x, None if disturbance is None else disturbance[k])
        out[k + 1] = x
    return out
