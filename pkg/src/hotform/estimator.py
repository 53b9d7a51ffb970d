"""Extended Kalman filter on the reduced model, with disturbance augmentation.

The discrete model is ``x_{k+1} = F_k(x_k) + G_k w_k`` with measurements
``y_k = C_k x_k + v_k``. For the LTV reduced model ``F_k`` is affine,
``F_k(x) = A_k x + c_k``, obtained from the same linearly implicit Euler
scheme the simulator uses. Unknown power densities are appended to the state
as a random walk, ``d_{k+1} = d_k + w_d``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .container import write_container, write_csv
from .rom import LtvSchedule

SYMMETRY_TOL = 1e-12


def _check_spd(name, A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    scale = max(np.abs(A).max(), 1.0)
    if np.abs(A - A.T).max() > SYMMETRY_TOL * scale:
        raise ValueError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(A).min() <= 0.0:
        raise ValueError(f"{name} is not positive definite")
    return A


def scaled_identity(value, n):
    return float(value) * np.eye(n)


@dataclass(frozen=True)
class NoiseConfig:
    """Process, measurement and disturbance-model covariances.

    ``Q_d`` may be ``None`` when no disturbance states are estimated.
    """

    Q_w: np.ndarray
    R_v: np.ndarray
    Q_d: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "Q_w", _check_spd("Q_w", self.Q_w))
        object.__setattr__(self, "R_v", _check_spd("R_v", self.R_v))
        if self.Q_d is not None:
            object.__setattr__(self, "Q_d", _check_spd("Q_d", self.Q_d))


@dataclass
class EkfState:
    x: np.ndarray
    P: np.ndarray
    k: int = 0


@dataclass
class DiscreteModel:
    """Affine time-varying model ``x_{k+1} = A_k x_k + c_k + G_k w_k``.

    ``C`` holds one output matrix per instant (``n_t + 1`` of them). ``B_d``
    is the discretized disturbance channel, kept so :func:`augment` can
    build the extended system. ``n_d`` counts disturbance states already
    appended to ``x``.
    """

    A: np.ndarray
    c: np.ndarray
    G: np.ndarray
    C: np.ndarray
    h: np.ndarray
    B_d: np.ndarray | None = None
    n_d: int = 0

    @property
    def n_t(self):
        return self.A.shape[0]

    @property
    def n_x(self):
        return self.A.shape[1]

    @property
    def m(self):
        return self.C.shape[1]

    def transition(self, k, x):
        return self.A[k] @ x + self.c[k]

    def jacobians(self, k, x=None):
        return self.A[k], self.G[k]

    def output(self, k):
        return self.C[k]


def discretize(schedule: LtvSchedule, h=None, cond_limit=1e12) -> DiscreteModel:
    """Precompute the one-step maps of the LTV reduced model.

    With ``S_k = M_k - h_k K_k``: ``A_k = S_k^{-1} M_k``,
    ``c_k = S_k^{-1} h_k b_k``, ``G_k = S_k^{-1} h_k`` and
    ``B_d,k = S_k^{-1} h_k E_k``.
    """
    h = schedule.h if h is None else np.asarray(h, dtype=float)
    n_t, r = schedule.n_t, schedule.r
    A = np.empty((n_t, r, r))
    c = np.empty((n_t, r))
    G = np.empty((n_t, r, r))
    B_d = np.empty((n_t, r, schedule.n_d))
    for k in range(n_t):
        S = schedule.M[k] - h[k] * schedule.K[k]
        cond = np.linalg.cond(S)
        if not np.isfinite(cond) or cond > cond_limit:
            raise np.linalg.LinAlgError(f"step matrix at step {k} is singular (condition {cond:.3g})")
        lu = scipy.linalg.lu_factor(S)
        rhs = np.column_stack([schedule.M[k], h[k] * schedule.b[k], h[k] * np.eye(r), h[k] * schedule.E[k]])
        sol = scipy.linalg.lu_solve(lu, rhs)
        A[k] = sol[:, :r]
        c[k] = sol[:, r]
        G[k] = sol[:, r + 1 : 2 * r + 1]
        B_d[k] = sol[:, 2 * r + 1 :]
    return DiscreteModel(A, c, G, schedule.C.copy(), np.array(h, dtype=float), B_d)


def augment(model: DiscreteModel, n_d=None) -> DiscreteModel:
    """Append random-walk disturbance states to ``model``.

    Transition blocks are ``[[A_k, B_d,k], [0, I]]``, outputs ``[C_k, 0]`` and
    the noise channel is ``blockdiag(G_k, I)`` so the process covariance is
    ``blockdiag(Q_w, Q_d)``.
    """
    if model.B_d is None:
        raise ValueError("model carries no disturbance channel")
    if model.n_d:
        raise ValueError("model is already augmented")
    n_d = model.B_d.shape[2] if n_d is None else n_d
    if n_d < 1:
        raise ValueError("augmentation needs at least one disturbance")
    n_t, r = model.n_t, model.n_x
    n = r + n_d
    A = np.zeros((n_t, n, n))
    A[:, :r, :r] = model.A
    A[:, :r, r:] = model.B_d[:, :, :n_d]
    A[:, r:, r:] = np.eye(n_d)
    c = np.zeros((n_t, n))
    c[:, :r] = model.c
    G = np.zeros((n_t, n, n))
    G[:, :r, :r] = model.G
    G[:, r:, r:] = np.eye(n_d)
    C = np.zeros((model.C.shape[0], model.m, n))
    C[:, :, :r] = model.C
    return DiscreteModel(A, c, G, C, model.h.copy(), model.B_d, n_d)


def fd_jacobian(f, x, rel_step=1e-6):
    """Central finite-difference Jacobian of ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(f(x))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        dx = rel_step * max(abs(x[j]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[j] += dx
        xm[j] -= dx
        J[:, j] = (np.atleast_1d(f(xp)) - np.atleast_1d(f(xm))) / (2.0 * dx)
    return J


@dataclass
class FunctionModel:
    """Model given by a step map ``f(k, x, w)``; Jacobians by finite differences.

    Used for the nonlinear reduced model, where every evaluation lifts,
    assembles and projects. ``f`` must accept ``w=None`` for the noise-free map.
    """

    f: callable
    C: np.ndarray
    h: np.ndarray
    n_w: int
    rel_step: float = 1e-6
    n_d: int = 0

    @property
    def n_t(self):
        return len(self.h)

    @property
    def m(self):
        return self.C.shape[1]

    def transition(self, k, x):
        return self.f(k, x, None)

    def jacobians(self, k, x):
        A = fd_jacobian(lambda z: self.f(k, z, None), x, self.rel_step)
        w0 = np.zeros(self.n_w)
        G = fd_jacobian(lambda w: self.f(k, x, w), w0, self.rel_step)
        return A, G

    def output(self, k):
        return self.C[k]


def nonlinear_rom_model(rom, traj, grid, C, disturbance=None, rel_step=1e-6) -> FunctionModel:
    """Nonlinear reduced model as a :class:`FunctionModel`.

    ``rom`` is a :class:`~hotform.rom.ReducedSystem`; ``disturbance`` is a
    known ``(n_t, n_d)`` input or ``None``.
    """

    def f(k, x, w):
        d = None if disturbance is None else disturbance[k]
        return rom.step(x, traj.slice(k), grid.h[k], d=d, w=w)

    return FunctionModel(f, np.asarray(C), np.asarray(grid.h), rom.r, rel_step)


def _symmetrize(P):
    return 0.5 * (P + P.T)


def ekf_predict(st: EkfState, model, noise_cov) -> EkfState:
    """Propagate mean and covariance over step ``st.k``.

    ``noise_cov`` is the covariance of ``w`` in the model's noise channel.
    """
    k = st.k
    A, G = model.jacobians(k, st.x)
    x = model.transition(k, st.x)
    P = A @ st.P @ A.T + G @ noise_cov @ G.T
    return EkfState(x, _symmetrize(P), k + 1)


class InnovationError(np.linalg.LinAlgError):
    pass


def _factor_innovation(S):
    try:
        return scipy.linalg.cho_factor(S)
    except np.linalg.LinAlgError:
        pass
    scale = np.trace(S)
    if not np.isfinite(scale) or scale <= 0:
        raise InnovationError("innovation covariance is zero or not finite")
    jitter = 1e-10 * scale
    try:
        return scipy.linalg.cho_factor(S + jitter * np.eye(len(S)))
    except np.linalg.LinAlgError as exc:
        raise InnovationError("innovation covariance is singular after jitter") from exc


def ekf_update(prior: EkfState, y, model, R_v, joseph=False):
    """Measurement update at instant ``prior.k``; returns ``(posterior, innovation)``."""
    C = model.output(prior.k)
    y = np.asarray(y, dtype=float)
    if y.shape != (C.shape[0],):
        raise ValueError(f"measurement has shape {y.shape}, expected ({C.shape[0]},)")
    PCt = prior.P @ C.T
    S = _symmetrize(C @ PCt + R_v)
    cf = _factor_innovation(S)
    K = scipy.linalg.cho_solve(cf, PCt.T).T
    innov = y - C @ prior.x
    x = prior.x + K @ innov
    I_KC = np.eye(len(x)) - K @ C
    if joseph:
        P = I_KC @ prior.P @ I_KC.T + K @ R_v @ K.T
    else:
        P = I_KC @ prior.P
    return EkfState(x, _symmetrize(P), prior.k), innov


@dataclass
class EstimateResult:
    """Filter output over the instants ``0..n``.

    ``x`` holds the reduced estimates (with disturbance states last when
    augmented), ``q`` the lifted nodal temperatures when a basis was given.
    """

    t: np.ndarray
    x: np.ndarray
    P_diag: np.ndarray
    innovations: np.ndarray
    n_d: int = 0
    q: np.ndarray | None = None
    rmse: np.ndarray | None = None
    partial: bool = False
    health: dict = field(default_factory=dict)

    @property
    def d_hat(self):
        return self.x[:, self.x.shape[1] - self.n_d :]

    @property
    def x_r(self):
        return self.x[:, : self.x.shape[1] - self.n_d]


def process_covariance(model, noise: NoiseConfig):
    if model.n_d:
        if noise.Q_d is None:
            raise ValueError("augmented model needs Q_d")
        return scipy.linalg.block_diag(noise.Q_w, noise.Q_d)
    return noise.Q_w


def covariance_health(P):
    """Asymmetry and smallest eigenvalue relative to the norm of ``P``."""
    norm = max(np.abs(P).max(), np.finfo(float).tiny)
    eig = np.linalg.eigvalsh(_symmetrize(P))
    return np.abs(P - P.T).max(), eig.min() / norm


def run_estimator(model, y, noise: NoiseConfig, x0, P0, t=None, phi=None, reference=None, volumes=None,
                  joseph=False, check_health=False):
    """Run predict/update over the measurement stream ``y`` (rows are instants).

    The initial estimate is taken as given at instant 0; updates start at
    instant 1. When ``y`` has fewer rows than the model has instants, the run
    stops early and the result is flagged ``partial``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n_inst = model.n_t + 1
    partial = len(y) < n_inst
    if partial:
        warnings.warn(f"measurement stream has {len(y)} of {n_inst} instants; stopping early", RuntimeWarning)
    n = min(len(y), n_inst)
    if len(y) and y.shape[1] != model.m:
        raise ValueError(f"measurements have {y.shape[1]} channels, model has {model.m}")
    Q = process_covariance(model, noise)
    R_v = noise.R_v

    st = EkfState(np.array(x0, dtype=float), _symmetrize(np.array(P0, dtype=float)), 0)
    xs = np.empty((n, st.x.size))
    Pd = np.empty((n, st.x.size))
    innov = np.zeros((n, model.m))
    worst_asym, worst_eig = 0.0, np.inf
    if n:
        xs[0], Pd[0] = st.x, np.diag(st.P)
    for k in range(1, n):
        st = ekf_predict(st, model, Q)
        st, innov[k] = ekf_update(st, y[k], model, R_v, joseph=joseph)
        xs[k], Pd[k] = st.x, np.diag(st.P)
        if check_health:
            asym, eig = covariance_health(st.P)
            worst_asym, worst_eig = max(worst_asym, asym), min(worst_eig, eig)

    if t is None:
        t = np.concatenate([[0.0], np.cumsum(model.h)])
    res = EstimateResult(np.asarray(t)[:n], xs, Pd, innov, model.n_d, partial=partial)
    if check_health:
        res.health = {"max_asymmetry": worst_asym, "min_relative_eigenvalue": worst_eig}
    if phi is not None:
        res.q = res.x_r @ np.asarray(phi).T
        if reference is not None:
            from .fom import rmse

            res.rmse = rmse(res.q, np.asarray(reference)[:n], volumes)
    return res


def observability_gramian_sv(model: DiscreteModel, start=0, horizon=None):
    """Smallest and largest singular value of the finite-horizon observability Gramian.

    A diagnostic only; a near-zero smallest value flags directions the
    sensors cannot see over the horizon.
    """
    horizon = model.n_t - start if horizon is None else horizon
    n = model.n_x
    W = np.zeros((n, n))
    Phi = np.eye(n)
    for k in range(start, start + horizon + 1):
        C = model.output(k)
        W += Phi.T @ C.T @ C @ Phi
        if k < model.n_t:
            Phi = model.A[k] @ Phi
    s = np.linalg.svd(W, compute_uv=False)
    return s[-1], s[0]


def export_estimate_csv(path, res: EstimateResult, unit_d="W/m^3"):
    """Per-instant log: time, innovations, RMSE (if computed) and disturbance estimates."""
    header = ["t [s]"] + [f"innovation_{i} [K]" for i in range(res.innovations.shape[1])]
    cols = [res.t[:, None], res.innovations]
    if res.rmse is not None:
        header.append("rmse [K]")
        cols.append(res.rmse[:, None])
    header += [f"d_hat_{i} [{unit_d}]" for i in range(res.n_d)]
    cols.append(res.d_hat)
    write_csv(path, header, np.hstack(cols))


def save_estimate(path, res: EstimateResult):
    fields = {"t": res.t, "x": res.x, "P_diag": res.P_diag, "innovation": res.innovations}
    if res.q is not None:
        fields["q"] = res.q
    write_container(path, "estimate", fields=fields, attrs={"n_d": res.n_d, "partial": res.partial})
