"""Sheet geometry, forming schedule, time grid and sensor placement.

The mechanical solution enters the thermal model only through a
:class:`ParameterTrajectory`: per time instant and node the displacement,
the distance to the nearest tool, the contact pressure and the contact
temperature. It is either generated synthetically here or imported from an
externally computed container file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .container import ContainerError, read_container, write_container, write_csv

CONTACT_THRESHOLD = 1e-6  # m, tool distance at or below which a node is in contact

PHASES = ("transfer", "forming", "holding", "demoulding")


@dataclass(frozen=True)
class ProcessInputs:
    """Process inputs: austenitizing temperature [K], punch speed [mm/s], hold time [s]."""

    t_aust_avg: float
    v_punch: float
    t_hold: float

    def __post_init__(self):
        if not self.t_aust_avg > 0:
            raise ValueError(f"austenitizing temperature must be positive, got {self.t_aust_avg}")
        if not self.v_punch > 0:
            raise ValueError(f"punch speed must be positive, got {self.v_punch}")
        if not self.t_hold >= 0:
            raise ValueError(f"holding time must be non-negative, got {self.t_hold}")

    def as_dict(self):
        return {"t_aust_avg": self.t_aust_avg, "v_punch": self.v_punch, "t_hold": self.t_hold}


# -- mesh ---------------------------------------------------------------------


@dataclass(frozen=True)
class SheetGeometry:
    outer_radius: float
    hole_radius: float
    thickness: float


@dataclass
class Mesh:
    """Triangulated mid-surface of a sheet with uniform reference thickness.

    Attributes
    ----------
    nodes : (n, 3) ndarray
        Reference node coordinates [m].
    thickness : float
        Reference sheet thickness [m].
    triangles : (n_e, 3) ndarray of int
        Linear triangle connectivity, counter-clockwise in the x-y plane.
    boundary_edges : (n_b, 2) ndarray of int
        Rim edges of the sheet.
    boundary_tags : (n_b,) ndarray of str
        Name of the rim each boundary edge belongs to.
    """

    nodes: np.ndarray
    thickness: float
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    element_areas: np.ndarray = field(init=False)
    lumped_volumes: np.ndarray = field(init=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.boundary_edges = np.asarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        self.boundary_tags = np.asarray(self.boundary_tags, dtype=str)
        n = len(self.nodes)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            raise ValueError("nodes must have shape (n, 3)")
        if not self.thickness > 0:
            raise ValueError("thickness must be positive")
        for name, idx in (("triangles", self.triangles), ("boundary_edges", self.boundary_edges)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"{name} reference node indices outside [0, {n})")
        if len(self.boundary_tags) != len(self.boundary_edges):
            raise ValueError("one boundary tag per boundary edge is required")
        self.element_areas = triangle_areas(self.nodes, self.triangles)
        bad = np.flatnonzero(self.element_areas <= 0)
        if bad.size:
            raise ValueError(f"element {bad[0]} has non-positive area")
        self.lumped_volumes = lump(self.triangles, self.element_areas * self.thickness, n)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.triangles)

    def radius(self):
        return np.hypot(self.nodes[:, 0], self.nodes[:, 1])


def triangle_areas(points, triangles):
    """Areas of triangles embedded in 3D."""
    p0, p1, p2 = (points[triangles[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)


def lump(triangles, element_values, n):
    """Distribute one third of each element value to each of its nodes."""
    return np.bincount(triangles.ravel(), weights=np.repeat(element_values / 3.0, 3), minlength=n)


def _stitch_rings(inner, outer, inner_angles, outer_angles):
    # Merge two closed rings by angle into a strip of triangles.
    na, nb = len(inner), len(outer)
    j0 = int(np.argmin(np.abs(np.angle(np.exp(1j * (outer_angles - inner_angles[0]))))))
    a = inner_angles[0] + 2 * np.pi * np.arange(na + 1) / na
    shift = np.angle(np.exp(1j * (outer_angles[j0] - inner_angles[0])))
    b = inner_angles[0] + shift + 2 * np.pi * np.arange(nb + 1) / nb
    tris = []
    i = j = 0
    while i < na or j < nb:
        ia, ia1 = inner[i % na], inner[(i + 1) % na]
        jb, jb1 = outer[(j0 + j) % nb], outer[(j0 + j + 1) % nb]
        if j == nb or (i < na and a[i + 1] <= b[j + 1]):
            tris.append((ia, jb, ia1))
            i += 1
        else:
            tris.append((ia, jb, jb1))
            j += 1
    return tris


def build_sheet_mesh(geometry: SheetGeometry, edge_length: float) -> Mesh:
    """Annular sheet mesh built from concentric rings of nodes.

    Ring ``j`` sits at nominal radius ``rho_j`` with ``N_j`` equally spaced
    nodes. Each ring polygon is placed at the radius whose polygon area equals
    ``pi * rho_j**2``, so the mesh area is exactly the analytic annulus area.
    Adjacent rings are stitched into triangle strips; rings are staggered by
    half a node spacing.
    """
    r_out, r_hole = geometry.outer_radius, geometry.hole_radius
    if not (0 < r_hole < r_out):
        raise ValueError(f"degenerate geometry: hole radius {r_hole} must lie in (0, {r_out})")
    if not edge_length > 0:
        raise ValueError("edge length must be positive")

    n_rings = max(1, int(round((r_out - r_hole) / edge_length))) + 1
    rho = np.linspace(r_hole, r_out, n_rings)
    points, rings, angles = [], [], []
    start = 0
    for j, r in enumerate(rho):
        count = max(6, int(round(2 * np.pi * r / edge_length)))
        theta = 2 * np.pi * (np.arange(count) + 0.5 * (j % 2)) / count
        radius = r * math.sqrt(2 * np.pi / (count * math.sin(2 * np.pi / count)))
        points.append(np.column_stack([radius * np.cos(theta), radius * np.sin(theta), np.zeros(count)]))
        rings.append(np.arange(start, start + count))
        angles.append(theta)
        start += count

    tris = []
    for j in range(n_rings - 1):
        tris.extend(_stitch_rings(rings[j], rings[j + 1], angles[j], angles[j + 1]))
    tris = np.array(tris, dtype=np.int64)
    nodes = np.vstack(points)

    def closed(ring):
        return np.column_stack([ring, np.roll(ring, -1)])

    edges = np.vstack([closed(rings[0]), closed(rings[-1])])
    tags = ["hole"] * len(rings[0]) + ["outer"] * len(rings[-1])
    return Mesh(nodes, geometry.thickness, tris, edges, tags)


def build_strip_mesh(length, width, nx, ny, thickness) -> Mesh:
    """Structured strip on ``[0, length] x [0, width]``.

    Rim tags are ``left`` (x = 0), ``right`` (x = length), ``bottom`` and
    ``top``.
    """
    xs = np.linspace(0.0, length, nx + 1)
    ys = np.linspace(0.0, width, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])

    def nid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)
            tris += [(a, b, c), (a, c, d)]
    edges, tags = [], []
    for j in range(ny):
        edges += [(nid(0, j), nid(0, j + 1)), (nid(nx, j), nid(nx, j + 1))]
        tags += ["left", "right"]
    for i in range(nx):
        edges += [(nid(i, 0), nid(i + 1, 0)), (nid(i, ny), nid(i + 1, ny))]
        tags += ["bottom", "top"]
    return Mesh(nodes, thickness, tris, edges, tags)


# -- time grid ----------------------------------------------------------------


@dataclass(frozen=True)
class PhaseTemplate:
    """Nominal per-step durations [s] and phase labels."""

    labels: tuple
    h: tuple

    def __post_init__(self):
        if len(self.labels) != len(self.h):
            raise ValueError("one label per step is required")
        unknown = set(self.labels) - set(PHASES)
        if unknown:
            raise ValueError(f"unknown phase labels {sorted(unknown)}")

    @classmethod
    def from_phases(cls, phases):
        """Build from ``[(label, n_steps, duration), ...]`` with uniform steps per phase."""
        labels, h = [], []
        for label, n_steps, duration in phases:
            labels += [label] * int(n_steps)
            h += [float(duration) / n_steps] * int(n_steps)
        return cls(tuple(labels), tuple(h))

    def __len__(self):
        return len(self.h)


def hole_flanging_template():
    """510-step template: 150/130/130/100 steps over 6.0/1.0/4.0/2.0 s."""
    return PhaseTemplate.from_phases(
        [("transfer", 150, 6.0), ("forming", 130, 1.0), ("holding", 130, 4.0), ("demoulding", 100, 2.0)]
    )


@dataclass(frozen=True)
class TimeGrid:
    h: np.ndarray
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float))
        if len(self.labels) != len(self.h):
            raise ValueError("one phase label per step is required")
        if np.any(~(self.h > 0)):
            raise ValueError("all step sizes must be positive")

    @property
    def n_t(self):
        return len(self.h)

    @property
    def t(self):
        """Time instants ``t_0 = 0, ..., t_{n_t}``."""
        return np.concatenate([[0.0], np.cumsum(self.h)])

    def phase_steps(self, label):
        return np.flatnonzero(np.asarray(self.labels) == label)


def build_time_grid(n_t: int, u: ProcessInputs, u_ref: ProcessInputs, template: PhaseTemplate) -> TimeGrid:
    """Scale the template step sizes to the given process inputs.

    Forming steps scale with ``u_ref.v_punch / u.v_punch`` and holding steps
    with ``u.t_hold / u_ref.t_hold``; the number of steps never changes, so
    step ``k`` always describes the same forming configuration.
    """
    if n_t != len(template):
        raise ValueError(f"n_t = {n_t} does not match template length {len(template)}")
    if not (u.v_punch > 0 and u_ref.v_punch > 0):
        raise ValueError("punch speed must be positive")
    labels = np.asarray(template.labels)
    h = np.array(template.h, dtype=float)
    h[labels == "forming"] *= u_ref.v_punch / u.v_punch
    if np.any(labels == "holding"):
        # A fixed step count with positive steps needs a positive holding time.
        if not (u.t_hold > 0 and u_ref.t_hold > 0):
            raise ValueError("holding time must be positive when the template has holding steps")
        h[labels == "holding"] *= u.t_hold / u_ref.t_hold
    return TimeGrid(h, tuple(template.labels))


# -- parameter trajectory -----------------------------------------------------

FIELDS = ("displacement", "tool_distance", "contact_pressure", "contact_temperature")


@dataclass
class ParameterTrajectory:
    """Mechanical solution surrogate at the time instants ``t_0 ... t_{n_t}``.

    Slice ``k`` holds the configuration used for the step from ``t_k`` to
    ``t_{k+1}`` (and the geometry at ``t_k``).
    """

    displacement: np.ndarray  # (n_t + 1, n, 3) [m]
    tool_distance: np.ndarray  # (n_t + 1, n) [m]
    contact_pressure: np.ndarray  # (n_t + 1, n) [Pa]
    contact_temperature: np.ndarray  # (n_t + 1, n) [K]

    def __post_init__(self):
        self.validate()

    @property
    def n_instants(self):
        return len(self.tool_distance)

    @property
    def n_nodes(self):
        return self.tool_distance.shape[1]

    def validate(self, n_nodes=None, n_instants=None):
        d = np.asarray(self.displacement)
        shape = self.tool_distance.shape
        if d.shape != shape + (3,):
            raise ContainerError(f"displacement shape {d.shape} inconsistent with {shape}")
        for name in ("contact_pressure", "contact_temperature"):
            if getattr(self, name).shape != shape:
                raise ContainerError(f"{name} shape {getattr(self, name).shape} inconsistent with {shape}")
        if n_nodes is not None and shape[1] != n_nodes:
            raise ContainerError(f"trajectory has {shape[1]} nodes, mesh has {n_nodes}")
        if n_instants is not None and shape[0] != n_instants:
            raise ContainerError(f"trajectory has {shape[0]} instants, grid needs {n_instants}")
        for name in FIELDS:
            arr = getattr(self, name)
            bad = np.argwhere(~np.isfinite(arr.reshape(shape[0], shape[1], -1)))
            if bad.size:
                k, i = int(bad[0, 0]), int(bad[0, 1])
                raise ContainerError(f"non-finite {name} at step {k}, node {i}", step=k, field_name=name, index=i)
        checks = (
            ("tool_distance", self.tool_distance < 0, "negative tool distance"),
            ("contact_pressure", self.contact_pressure < 0, "negative contact pressure"),
            ("contact_temperature", self.contact_temperature <= 0, "non-positive contact temperature"),
            ("contact_pressure", (self.contact_pressure > 0) & (self.tool_distance > 0), "pressure without contact"),
        )
        for name, mask, what in checks:
            bad = np.argwhere(mask)
            if bad.size:
                k, i = int(bad[0, 0]), int(bad[0, 1])
                raise ContainerError(f"{what} at step {k}, node {i}", step=k, field_name=name, index=i)

    def slice(self, k):
        return ParameterSlice(
            self.displacement[k], self.tool_distance[k], self.contact_pressure[k], self.contact_temperature[k]
        )


@dataclass(frozen=True)
class ParameterSlice:
    displacement: np.ndarray
    tool_distance: np.ndarray
    contact_pressure: np.ndarray
    contact_temperature: np.ndarray


def save_parameter_trajectory(path, traj: ParameterTrajectory):
    write_container(
        path,
        "parameter_trajectory",
        fields={name: getattr(traj, name) for name in FIELDS},
        attrs={"n_nodes": traj.n_nodes},
    )


def load_parameter_trajectory(path, n_nodes=None, n_instants=None) -> ParameterTrajectory:
    """Load and validate a trajectory; optionally check it against mesh and grid sizes."""
    box = read_container(path, kind="parameter_trajectory")
    missing = [name for name in FIELDS if name not in box.fields]
    if missing:
        raise ContainerError(f"container lacks fields {missing}")
    traj = ParameterTrajectory(*(box.fields[name] for name in FIELDS))
    traj.validate(n_nodes=n_nodes, n_instants=n_instants)
    return traj


def export_parameter_csv(path, traj: ParameterTrajectory, grid: TimeGrid, nodes):
    """Long-format CSV of the trajectory at the selected node indices."""
    t = grid.t
    rows = []
    for k in range(traj.n_instants):
        for i in nodes:
            d = traj.displacement[k, i]
            rows.append(
                [t[k], k, int(i), d[0], d[1], d[2], traj.tool_distance[k, i],
                 traj.contact_pressure[k, i], traj.contact_temperature[k, i]]
            )
    header = ["t [s]", "step", "node", "dx [m]", "dy [m]", "dz [m]", "tool_distance [m]",
              "contact_pressure [Pa]", "contact_temperature [K]"]
    write_csv(path, header, rows)


@dataclass(frozen=True)
class ToolSpec:
    """Synthetic tool set for the hole-flanging stage.

    The punch raises the sheet inside ``punch_radius`` by ``stroke`` with a
    smooth transition of width ``draw_band``; every node inside
    ``die_radius`` comes into tool contact during forming, the contact front
    travelling outwards.
    """

    punch_radius: float = 0.10
    die_radius: float = 0.20
    draw_band: float = 0.04
    stroke: float = 0.03
    tool_gap: float = 0.01
    max_pressure: float = 20e6
    tool_temperature: float = 323.0
    ambient_temperature: float = 293.0
    contact_threshold: float = CONTACT_THRESHOLD
    contact_onset: tuple = (0.2, 0.8)
    release_steps: int = 10


def smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def synth_forming_trajectory(mesh: Mesh, grid: TimeGrid, tool: ToolSpec) -> ParameterTrajectory:
    """Prescribed deformation and contact schedule for a hole-flanging stroke.

    The schedule depends on step indices and phase labels only, never on the
    step sizes, so runs that differ in punch speed or holding time share the
    same per-step configurations.
    """
    r = mesh.radius()
    r_hole = r.min()
    if not (r_hole < tool.punch_radius <= tool.die_radius):
        raise ValueError("tool radii must satisfy hole radius < punch radius <= die radius")
    n, n_t = mesh.n_nodes, grid.n_t
    labels = np.asarray(grid.labels)

    profile = smoothstep((tool.punch_radius - r) / tool.draw_band)
    in_tool = r <= tool.die_radius
    s0, s1 = tool.contact_onset
    onset = np.where(in_tool, s0 + (s1 - s0) * (r - r_hole) / (tool.die_radius - r_hole), 2.0)

    def ramp(s):
        # pressure build-up after contact closes; nodes outside the tool never reach it
        return np.where(in_tool, np.clip((s - onset) / np.maximum(1.0 - onset, 1e-12), 0.0, 1.0), 0.0)

    w = np.zeros(n_t + 1)
    gap = np.full((n_t + 1, n), tool.tool_gap)
    pressure = np.zeros((n_t + 1, n))
    formed = 0.0  # progress reached at the end of the forming phase so far
    n_form = int(np.sum(labels == "forming"))
    j_form = j_dem = 0
    for k, label in enumerate(labels):
        if label == "transfer":
            continue
        if label == "forming":
            j_form += 1
            s = j_form / n_form
            formed = s
            w[k] = tool.stroke * s
            gap[k] = np.where(in_tool, tool.tool_gap * np.clip(1.0 - s / onset, 0.0, 1.0), tool.tool_gap)
            pressure[k] = np.where(in_tool & (s > onset), tool.max_pressure * ramp(s), 0.0)
        elif label == "holding":
            w[k] = tool.stroke * formed
            closed = in_tool & (formed >= onset)
            gap[k] = np.where(closed, 0.0, gap[k])
            pressure[k] = np.where(closed, tool.max_pressure * ramp(formed), 0.0)
        else:  # demoulding
            j_dem += 1
            w[k] = tool.stroke * formed
            gap[k] = tool.tool_gap * min(1.0, j_dem / tool.release_steps)
    w[n_t] = w[n_t - 1]
    gap[n_t] = gap[n_t - 1]
    pressure[n_t] = pressure[n_t - 1]
    # holding keeps the end-of-forming contact; nodes whose contact never closed keep the gap
    pressure[gap > tool.contact_threshold] = 0.0

    displacement = np.zeros((n_t + 1, n, 3))
    displacement[:, :, 2] = w[:, None] * profile[None, :]
    t_inf = np.where(gap <= tool.contact_threshold, tool.tool_temperature, tool.ambient_temperature)
    return ParameterTrajectory(displacement, gap, pressure, t_inf)


# -- sensors ------------------------------------------------------------------


@dataclass(frozen=True)
class SensorConfig:
    """Fixed world-frame temperature sensors."""

    positions: np.ndarray  # (m, 3) [m]
    noise_std: float = 10.0  # K
    max_distance: float = 0.02  # m, farther than this from every node means off-part

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.shape[1] == 2:
            pos = np.column_stack([pos, np.zeros(len(pos))])
        object.__setattr__(self, "positions", pos)
        if len(pos) < 1 or pos.shape[1] != 3:
            raise ValueError("at least one 3D sensor position is required")
        if not self.noise_std >= 0:
            raise ValueError("noise standard deviation must be non-negative")

    @property
    def m(self):
        return len(self.positions)


def polar(radius, angle_deg, z=0.0):
    a = math.radians(angle_deg)
    return [radius * math.cos(a), radius * math.sin(a), z]
