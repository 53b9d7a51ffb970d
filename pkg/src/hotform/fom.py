"""Full-order finite-element thermal model of the deforming sheet.

The sheet is a triangulated mid-surface with lumped thickness. Assembly
yields the lumped mass vector ``m`` (the diagonal of ``M``), the sparse
matrix ``K`` (conduction plus Robin exchange) and the load ``b`` of

    M(q, p, t) dq/dt = K(q, p, t) q + b(q, p, t) + E(q, p, t) d.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, splu
from scipy.spatial import cKDTree

from .container import read_container, write_container, write_csv
from .scenario import (
    CONTACT_THRESHOLD,
    Mesh,
    ParameterSlice,
    ParameterTrajectory,
    ProcessInputs,
    SensorConfig,
    TimeGrid,
    lump,
)

log = logging.getLogger(__name__)

STEFAN_BOLTZMANN = 5.670374419e-8  # W/(m^2 K^4)


class DegenerateElementError(ValueError):
    def __init__(self, element, area):
        super().__init__(f"element {element} is inverted or degenerate (signed area {area:.3e} m^2)")
        self.element = element


class SensorOffPartError(ValueError):
    def __init__(self, sensor, distance):
        super().__init__(f"sensor {sensor} is {distance:.4f} m from the nearest node (off-part)")
        self.sensor = sensor
        self.distance = distance


class SingularSystemError(RuntimeError):
    pass


# -- material and film --------------------------------------------------------


@dataclass(frozen=True)
class MaterialModel:
    """Constant density with tabulated ``c_p(T)`` and ``lambda(T)``.

    ``induced_heat`` maps nodal temperatures [K] to a volumetric source
    [W/m^3]; ``None`` means no source.
    """

    density: float
    cp_temperatures: tuple
    cp_values: tuple
    k_temperatures: tuple
    k_values: tuple
    induced_heat: Optional[Callable] = None

    def __post_init__(self):
        if not self.density > 0:
            raise ValueError("density must be positive")
        for t, v, name in (
            (self.cp_temperatures, self.cp_values, "specific heat"),
            (self.k_temperatures, self.k_values, "conductivity"),
        ):
            t, v = np.asarray(t, float), np.asarray(v, float)
            if t.shape != v.shape or t.size == 0:
                raise ValueError(f"{name} table needs matching, non-empty columns")
            if np.any(np.diff(t) <= 0):
                raise ValueError(f"{name} table must be sorted by temperature")
            if np.any(v <= 0):
                raise ValueError(f"{name} values must be positive")

    def with_source(self, induced_heat):
        return MaterialModel(
            self.density, self.cp_temperatures, self.cp_values,
            self.k_temperatures, self.k_values, induced_heat,
        )


def material_eval(mat: MaterialModel, T):
    """Specific heat, conductivity and induced heat at temperature(s) ``T``.

    Tables are interpolated linearly and clamped to their end values.
    """
    T = np.asarray(T, dtype=float)
    cp = np.interp(T, mat.cp_temperatures, mat.cp_values)
    lam = np.interp(T, mat.k_temperatures, mat.k_values)
    g = np.zeros_like(T) if mat.induced_heat is None else np.asarray(mat.induced_heat(T), dtype=float)
    return cp, lam, g


def constant_material(density, cp, conductivity, induced_heat=None):
    return MaterialModel(density, (0.0,), (cp,), (0.0,), (conductivity,), induced_heat)


def default_steel():
    """Martensitic stainless steel stand-in. Values are illustrative, not a material card."""
    return MaterialModel(
        density=7700.0,
        cp_temperatures=(293.0, 473.0, 673.0, 873.0, 1073.0, 1273.0, 1473.0),
        cp_values=(460.0, 510.0, 560.0, 640.0, 620.0, 640.0, 660.0),
        k_temperatures=(293.0, 573.0, 873.0, 1073.0, 1273.0, 1473.0),
        k_values=(30.0, 29.0, 27.0, 26.0, 28.0, 30.0),
    )


@dataclass(frozen=True)
class LatentHeatSource:
    """Volumetric heat release ``power * bump(T)`` between ``m_f`` and ``m_s``.

    The bump rises and falls with smooth ramps of width ``ramp`` inside the
    interval, mimicking heat release during a martensitic transformation.
    """

    power: float  # W/m^3
    m_s: float = 443.0
    m_f: float = 343.0
    ramp: float = 15.0

    def __call__(self, T):
        T = np.asarray(T, dtype=float)
        up = np.clip((self.m_s - T) / self.ramp, 0.0, 1.0)
        down = np.clip((T - self.m_f) / self.ramp, 0.0, 1.0)
        return self.power * np.minimum(up, down)


@dataclass(frozen=True)
class FilmModel:
    """Heat transfer coefficient of the sheet surface.

    In contact (tool distance at or below ``contact_threshold``) the
    coefficient is ``h_contact_0 + h_contact_1 * p_N``; otherwise it is
    convection plus linearised radiation to ``T_inf``.
    """

    h_contact_0: float = 1500.0  # W/(m^2 K)
    h_contact_1: float = 1e-4  # W/(m^2 K Pa)
    h_convection: float = 20.0  # W/(m^2 K)
    emissivity: float = 0.7
    contact_threshold: float = CONTACT_THRESHOLD


def film_coefficient(film: FilmModel, T, T_inf, tool_distance, pressure):
    T = np.asarray(T, dtype=float)
    T_inf = np.asarray(T_inf, dtype=float)
    contact = film.h_contact_0 + film.h_contact_1 * np.asarray(pressure, dtype=float)
    gap = film.h_convection + film.emissivity * STEFAN_BOLTZMANN * (T * T + T_inf * T_inf) * (T + T_inf)
    return np.where(np.asarray(tool_distance) <= film.contact_threshold, contact, gap)


# -- disturbance regions ------------------------------------------------------


def contact_region(p: ParameterSlice, threshold=CONTACT_THRESHOLD):
    """Single region: nodes currently in tool contact."""
    return (p.tool_distance <= threshold)[None, :]


def whole_sheet_region(p: ParameterSlice):
    return np.ones((1, len(p.tool_distance)), dtype=bool)


# -- assembly -----------------------------------------------------------------


@dataclass
class Assembly:
    """Assembled full-order matrices at one step.

    ``K = K_cond - diag(robin)``; ``m`` is the lumped mass diagonal.
    """

    m: np.ndarray
    K_cond: sp.csr_matrix
    robin: np.ndarray
    b: np.ndarray
    volumes: np.ndarray

    @property
    def M(self):
        return sp.diags(self.m, format="csr")

    @property
    def K(self):
        return (self.K_cond - sp.diags(self.robin)).tocsr()


@dataclass
class FullOrderSystem:
    """Sheet mesh with material, film model, exchange surfaces and disturbance layout.

    Parameters
    ----------
    exchange_faces : bool
        Exchange heat through both sheet faces.
    exchange_rims : tuple of str or None
        Rim tags that exchange heat; ``None`` means every rim.
    conserve_volume : bool
        Thin the sheet where the deformed element area grows so that element
        volumes stay at their reference value.
    disturbance_regions : callable
        ``ParameterSlice -> (n_d, n) bool`` region masks.
    disturbance_unit : float
        Power density [W/m^3] represented by one unit of the disturbance.
    solver : {"cg", "direct"}
        Jacobi-preconditioned conjugate gradients (falls back to the direct
        solver when it misses the tolerance) or sparse LU.
    """

    mesh: Mesh
    material: MaterialModel
    film: FilmModel = field(default_factory=FilmModel)
    exchange_faces: bool = True
    exchange_rims: Optional[tuple] = None
    conserve_volume: bool = True
    disturbance_regions: Callable = contact_region
    disturbance_unit: float = 1.0
    solver: str = "cg"

    def __post_init__(self):
        mesh = self.mesh
        n = mesh.n_nodes
        tri = mesh.triangles
        p0, p1, p2 = (mesh.nodes[tri[:, i]] for i in range(3))
        cross = np.cross(p1 - p0, p2 - p0)
        self._ref_normals = cross / np.linalg.norm(cross, axis=1)[:, None]
        self._ref_areas = mesh.element_areas

        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        keys = rows * n + cols
        uniq, self._scatter = np.unique(keys, return_inverse=True)
        self._indices = (uniq % n).astype(np.int32)
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(uniq // n, minlength=n))]).astype(np.int32)
        self._diag_pos = np.searchsorted(uniq, np.arange(n) * n + np.arange(n))
        self._nnz = len(uniq)

        tags = mesh.boundary_tags
        keep = np.ones(len(tags), bool) if self.exchange_rims is None else np.isin(tags, self.exchange_rims)
        self._rim_edges = mesh.boundary_edges[keep]
        self._rim_elements = self._edge_elements(self._rim_edges)

    def _edge_elements(self, edges):
        owner = {}
        for e, t in enumerate(self.mesh.triangles):
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                owner[(min(a, b), max(a, b))] = e
        return np.array([owner[(min(a, b), max(a, b))] for a, b in edges], dtype=np.int64)

    @property
    def n(self):
        return self.mesh.n_nodes

    def geometry(self, displacement):
        """Deformed element areas and thicknesses.

        Raises
        ------
        DegenerateElementError
            If a deformed element has non-positive signed area.
        """
        x = self.mesh.nodes + displacement
        tri = self.mesh.triangles
        p0, p1, p2 = (x[tri[:, i]] for i in range(3))
        cross = np.cross(p1 - p0, p2 - p0)
        signed = 0.5 * np.einsum("ij,ij->i", cross, self._ref_normals)
        bad = np.flatnonzero(signed <= 0)
        if bad.size:
            raise DegenerateElementError(int(bad[0]), float(signed[bad[0]]))
        area = 0.5 * np.linalg.norm(cross, axis=1)
        if self.conserve_volume:
            thickness = self.mesh.thickness * self._ref_areas / area
        else:
            thickness = np.full(len(area), self.mesh.thickness)
        return x, area, thickness

    def assemble(self, q, p: ParameterSlice) -> Assembly:
        """Assemble ``M``, ``K`` and ``b`` at nodal temperatures ``q``."""
        q = np.asarray(q, dtype=float)
        x, area, thickness = self.geometry(p.displacement)
        tri = self.mesh.triangles
        n = self.n
        cp, _, g = material_eval(self.material, q)

        volume_e = area * thickness
        volumes = lump(tri, volume_e, n)
        m = self.material.density * cp * volumes

        # grad(phi_i) . grad(phi_j) = (e_i . e_j) / (4 A^2), e_i the edge opposite node i
        xa, xb, xc = (x[tri[:, i]] for i in range(3))
        edges = np.stack([xc - xb, xa - xc, xb - xa], axis=1)
        dots = np.einsum("eik,ejk->eij", edges, edges)
        lam_e = np.interp(q[tri].mean(axis=1), self.material.k_temperatures, self.material.k_values)
        local = -(lam_e * thickness / (4.0 * area))[:, None, None] * dots
        data = np.bincount(self._scatter, weights=local.ravel(), minlength=self._nnz)
        K_cond = sp.csr_matrix((data, self._indices, self._indptr), shape=(n, n))

        exchange = np.zeros(n)
        if self.exchange_faces:
            exchange += 2.0 * lump(tri, area, n)
        if len(self._rim_edges):
            a, b = self._rim_edges[:, 0], self._rim_edges[:, 1]
            rim = np.linalg.norm(x[b] - x[a], axis=1) * thickness[self._rim_elements]
            exchange += np.bincount(np.concatenate([a, b]), weights=np.concatenate([rim, rim]) / 2.0, minlength=n)
        h = film_coefficient(self.film, q, p.contact_temperature, p.tool_distance, p.contact_pressure)
        robin = h * exchange
        b = robin * p.contact_temperature + g * volumes
        return Assembly(m, K_cond, robin, b, volumes)

    def disturbance_matrix(self, p: ParameterSlice, volumes=None, warn=False):
        """``E`` with the nodal volume (times the unit) in the rows of each region.

        An empty region gives a zero column; ``warn`` reports it. Inside
        time loops empty regions are routine (no contact yet) and stay quiet.
        """
        if volumes is None:
            _, area, thickness = self.geometry(p.displacement)
            volumes = lump(self.mesh.triangles, area * thickness, self.n)
        masks = np.atleast_2d(self.disturbance_regions(p))
        empty = np.flatnonzero(~masks.any(axis=1))
        if warn and empty.size:
            warnings.warn(f"disturbance regions {empty.tolist()} are empty", RuntimeWarning, stacklevel=2)
        return (masks * volumes[None, :]).T * self.disturbance_unit

    def n_disturbances(self, p: ParameterSlice):
        return np.atleast_2d(self.disturbance_regions(p)).shape[0]

    def system_matrix(self, asm: Assembly, h):
        """CSC matrix of ``M - h K`` (symmetric, so CSR arrays double as CSC)."""
        data = -h * asm.K_cond.data
        data[self._diag_pos] += asm.m + h * asm.robin
        return sp.csc_matrix((data, self._indices, self._indptr), shape=(self.n, self.n))


# free-function aliases matching the operation names
def assemble(sys: FullOrderSystem, q, p: ParameterSlice):
    return sys.assemble(q, p)


def build_disturbance_matrix(sys: FullOrderSystem, p: ParameterSlice):
    """Disturbance input matrix at one step; warns on empty regions."""
    return sys.disturbance_matrix(p, warn=True)


# -- outputs ------------------------------------------------------------------


def nearest_nodes(positions, mesh: Mesh, displacement, max_distance=np.inf):
    """Index of the node nearest (in deformed coordinates) to each world position."""
    tree = cKDTree(mesh.nodes + displacement)
    dist, idx = tree.query(np.asarray(positions, dtype=float))
    far = np.flatnonzero(dist > max_distance)
    if far.size:
        raise SensorOffPartError(int(far[0]), float(dist[far[0]]))
    return idx


def output_matrix(sensors: SensorConfig, mesh: Mesh, displacement):
    """Selection matrix ``C_k`` (m x n) picking the node under each sensor."""
    idx = nearest_nodes(sensors.positions, mesh, displacement, sensors.max_distance)
    m = len(idx)
    return sp.csr_matrix((np.ones(m), (np.arange(m), idx)), shape=(m, mesh.n_nodes))


def sensor_nodes(sensors: SensorConfig, mesh: Mesh, traj: ParameterTrajectory):
    """Node indices seen by each sensor at every instant, shape ``(n_t + 1, m)``."""
    return np.array(
        [nearest_nodes(sensors.positions, mesh, traj.displacement[k], sensors.max_distance)
         for k in range(traj.n_instants)]
    )


# -- time integration ---------------------------------------------------------


def step_fom(sys: FullOrderSystem, q, p: ParameterSlice, h, d=None, asm=None):
    """One linearly implicit Euler step with coefficients frozen at ``q``.

    Solves ``(M - h K) q_next = M q + h (b + E d)``.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    if asm is None:
        asm = sys.assemble(q, p)
    rhs = asm.m * q + h * asm.b
    if d is not None and np.any(d):
        rhs = rhs + h * (sys.disturbance_matrix(p, asm.volumes) @ np.atleast_1d(d))
    S = sys.system_matrix(asm, h)
    q_next = solve_spd(S, rhs, x0=q, method=sys.solver)
    return q_next


def solve_spd(S, rhs, x0=None, method="cg", tol=1e-10):
    """Solve the symmetric positive definite step system to relative residual ``tol``."""
    scale = max(np.linalg.norm(rhs), 1.0)
    if method == "cg":
        inv_diag = 1.0 / S.diagonal()
        precond = LinearOperator(S.shape, matvec=lambda v: inv_diag * v, dtype=float)
        x, info = cg(S, rhs, x0=x0, rtol=1e-3 * tol, atol=0.0, M=precond, maxiter=200)
        if info == 0 and np.all(np.isfinite(x)) and np.linalg.norm(S @ x - rhs) <= tol * scale:
            return x
        log.debug("CG missed tolerance (info=%s); using sparse LU", info)
    elif method != "direct":
        raise ValueError(f"unknown solver {method!r}")
    try:
        x = splu(S.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(rhs)
    except RuntimeError as exc:
        raise SingularSystemError(f"singular step matrix: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("step produced non-finite temperatures")
    res = np.linalg.norm(S @ x - rhs)
    if res > tol * scale:
        raise SingularSystemError(f"step residual {res:.3e} exceeds tolerance")
    return x


@dataclass(frozen=True)
class PiecewiseConstant:
    """Disturbance signal built from ``(start, end, values)`` segments.

    Segments are half-open ``[start, end)``; overlapping segments add up.
    """

    segments: tuple = ()
    n_d: int = 1

    def __call__(self, t):
        out = np.zeros(self.n_d)
        for start, end, values in self.segments:
            if start <= t < end:
                out += np.broadcast_to(np.asarray(values, dtype=float), (self.n_d,))
        return out

    def sample(self, grid: TimeGrid):
        """Disturbance per step, evaluated at step midpoints; shape ``(n_t, n_d)``."""
        t = grid.t
        mid = 0.5 * (t[:-1] + t[1:])
        return np.array([self(tm) for tm in mid]).reshape(grid.n_t, self.n_d)


def zero_signal(n_d=1):
    return PiecewiseConstant((), n_d)


@dataclass
class StateTrajectory:
    """Nodal temperatures at ``t_0 ... t_{n_t}`` and optional sensor readings."""

    t: np.ndarray
    q: np.ndarray  # (n_t + 1, n) [K]
    y: Optional[np.ndarray] = None  # (n_t + 1, m) [K]

    def __post_init__(self):
        if len(self.t) != len(self.q):
            raise ValueError("trajectory length does not match its time axis")
        if not np.all(np.isfinite(self.q)):
            raise ValueError("trajectory contains non-finite temperatures")

    @property
    def n_t(self):
        return len(self.t) - 1


def simulate_fom(sys: FullOrderSystem, traj: ParameterTrajectory, grid: TimeGrid, u: ProcessInputs,
                 disturbance=None, sensors: SensorConfig = None, q0=None) -> StateTrajectory:
    """Run the full-order model over the grid from the homogeneous austenitized state."""
    if traj.n_instants != grid.n_t + 1:
        raise ValueError(f"parameter trajectory has {traj.n_instants} instants, grid needs {grid.n_t + 1}")
    q = np.full(sys.n, float(u.t_aust_avg)) if q0 is None else np.asarray(q0, dtype=float).copy()
    d_steps = None if disturbance is None else disturbance.sample(grid)
    out = np.empty((grid.n_t + 1, sys.n))
    out[0] = q
    for k in range(grid.n_t):
        p = traj.slice(k)
        d = None if d_steps is None else d_steps[k]
        q = step_fom(sys, q, p, grid.h[k], d)
        out[k + 1] = q
    y = None
    if sensors is not None:
        nodes = sensor_nodes(sensors, sys.mesh, traj)
        y = np.take_along_axis(out, nodes, axis=1)
    return StateTrajectory(grid.t, out, y)


def save_state_trajectory(path, st: StateTrajectory, attrs=None):
    fields = {"t": st.t[:, None], "q": st.q}
    if st.y is not None:
        fields["y"] = st.y
    write_container(path, "state_trajectory", fields=fields, attrs=attrs)


def load_state_trajectory(path) -> StateTrajectory:
    box = read_container(path, kind="state_trajectory")
    return StateTrajectory(box.fields["t"][:, 0].copy(), box.fields["q"], box.fields.get("y"))


def export_readings_csv(path, t, values, prefix="y", unit="K"):
    values = np.asarray(values)
    header = ["t [s]"] + [f"{prefix}{j + 1} [{unit}]" for j in range(values.shape[1])]
    write_csv(path, header, (np.concatenate([[tk], row]) for tk, row in zip(t, values)))


# -- error metric -------------------------------------------------------------


def rmse(lifted, reference, volumes):
    """Volume-weighted mean absolute nodal error [K].

    Works on single states ``(n,)`` or stacks ``(n_t + 1, n)``; the nodal
    volumes approximate the spatial integrals.
    """
    err = np.abs(np.asarray(lifted, dtype=float) - np.asarray(reference, dtype=float))
    volumes = np.asarray(volumes, dtype=float)
    return err @ volumes / volumes.sum()
