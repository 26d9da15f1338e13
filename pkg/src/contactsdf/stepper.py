"""Quasi-dynamic time stepping: the explicit smoothed-distance step and its QP references.

The quasi-dynamic step solves

    min_v  || h Q^{1/2} v - Q^{-1/2} b(u) ||   s.t.  phi_i / h + J_ij v >= 0,

which under z = h Q^{1/2} v is the projection of z_query = Q^{-1/2} b(u) onto a
polyhedron ("dual cone"). :func:`step_velocity` replaces that projection by one
gradient step on the log-sum-exp distance to the cone; :func:`qp_oracle_step`
solves it exactly, and :func:`relaxed_kkt_step` solves the complementarity-relaxed
KKT system used by the QP-model MPC baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .contact import OBJECT_DOF, ContactSet, contact_jacobian_rows
from .geometry import kkt_residuals, project_onto_polyhedron, smooth_distance
from .rotations import quat_exp, quat_mul

log = logging.getLogger(__name__)

GRAVITY = (0.0, 0.0, -9.81)


class NonFiniteResult(ArithmeticError):
    pass


class IterationLimit(RuntimeError):
    pass


@dataclass(frozen=True)
class SystemState:
    object_position: np.ndarray
    object_quaternion: np.ndarray
    robot_config: np.ndarray

    def __post_init__(self):
        for name in ("object_position", "object_quaternion", "robot_config"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if abs(np.linalg.norm(self.object_quaternion) - 1.0) > 1e-9:
            raise ValueError("object quaternion must be unit length")

    @property
    def n_r(self):
        return self.robot_config.shape[0]

    def as_vector(self):
        return np.concatenate([self.object_position, self.object_quaternion, self.robot_config])

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=float)
        quat = vec[3:7] / np.linalg.norm(vec[3:7])
        return cls(vec[:3], quat, vec[7:])

    def to_dict(self):
        return {
            "object_position": self.object_position.tolist(),
            "object_quaternion": self.object_quaternion.tolist(),
            "robot_config": self.robot_config.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["object_position"], d["object_quaternion"], d["robot_config"])


@dataclass(frozen=True)
class ModelParams:
    """Parameters of the quasi-dynamic model.

    ``M_o`` acts on the object twist (world linear, body angular), ``K_r`` is
    the robot impedance stiffness, ``tau_r`` the robot's non-contact force.
    """

    M_o: np.ndarray
    K_r: np.ndarray
    m_o: float
    mu: float
    sigma: float
    h: float = 0.1
    tau_r: np.ndarray | None = None
    gravity: np.ndarray = field(default_factory=lambda: np.array(GRAVITY))

    def __post_init__(self):
        M = np.array(self.M_o, dtype=float)
        K = np.array(self.K_r, dtype=float)
        if K.ndim == 1:
            K = np.diag(K)
        if M.ndim == 1:
            M = np.diag(M)
        object.__setattr__(self, "M_o", M)
        object.__setattr__(self, "K_r", K)
        tau = np.zeros(K.shape[0]) if self.tau_r is None else np.array(self.tau_r, dtype=float)
        object.__setattr__(self, "tau_r", tau)
        object.__setattr__(self, "gravity", np.array(self.gravity, dtype=float))
        self.validate()

    def validate(self):
        if self.M_o.shape != (OBJECT_DOF, OBJECT_DOF):
            raise ValueError(f"M_o must be {OBJECT_DOF}x{OBJECT_DOF}, got {self.M_o.shape}")
        if not np.allclose(self.M_o, self.M_o.T):
            raise ValueError("M_o must be symmetric")
        if np.linalg.eigvalsh(self.M_o).min() <= 0:
            raise ValueError("M_o must be positive definite")
        if np.any(self.K_r != np.diag(np.diag(self.K_r))) or np.any(np.diag(self.K_r) <= 0):
            raise ValueError("K_r must be diagonal with positive entries")
        if self.m_o <= 0 or self.sigma <= 0 or self.h <= 0:
            raise ValueError("m_o, sigma and h must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")

    @property
    def n_r(self):
        return self.K_r.shape[0]

    @property
    def dim(self):
        return OBJECT_DOF + self.n_r

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {
            "M_o": self.M_o.tolist(), "K_r": np.diag(self.K_r).tolist(), "m_o": float(self.m_o),
            "mu": float(self.mu), "sigma": float(self.sigma), "h": float(self.h),
            "tau_r": self.tau_r.tolist(), "gravity": self.gravity.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            M_o=np.array(d["M_o"]), K_r=np.array(d["K_r"]), m_o=d["m_o"], mu=d["mu"], sigma=d["sigma"],
            h=d.get("h", 0.1), tau_r=d.get("tau_r"), gravity=d.get("gravity", GRAVITY),
        )


@dataclass(frozen=True)
class DualCone:
    """Rows (normals[k], offsets[k]) of {z : normals @ z + offsets <= 0}."""

    normals: np.ndarray
    offsets: np.ndarray

    @property
    def dim(self):
        return self.normals.shape[1]

    def __len__(self):
        return self.normals.shape[0]


# ---------------------------------------------------------------------------
# model pieces


def assemble_Q_b(params, u):
    """Block-diagonal Q = diag(M_o / h^2, K_r) and b = [m_o g, 0, K_r u + tau_r]."""
    u = np.asarray(u, dtype=float)
    n_r = params.n_r
    Q = np.zeros((params.dim, params.dim))
    Q[:OBJECT_DOF, :OBJECT_DOF] = params.M_o / params.h**2
    Q[OBJECT_DOF:, OBJECT_DOF:] = params.K_r
    b = np.zeros(params.dim)
    b[:3] = params.m_o * params.gravity
    b[OBJECT_DOF:] = params.K_r @ u + params.tau_r
    assert b.shape[0] == OBJECT_DOF + n_r
    return Q, b


def inv_sqrt_spd(M, floor=1e-10):
    w, V = np.linalg.eigh(M)
    if w.min() < floor:
        raise ValueError(f"matrix eigenvalue {w.min():.3e} below {floor}")
    return (V / np.sqrt(w)) @ V.T


def q_inv_sqrt(params):
    """Q^{-1/2} computed blockwise."""
    out = np.zeros((params.dim, params.dim))
    out[:OBJECT_DOF, :OBJECT_DOF] = params.h * inv_sqrt_spd(params.M_o)
    k = np.diag(params.K_r)
    if k.min() < 1e-10:
        raise ValueError("K_r entries must exceed 1e-10")
    out[OBJECT_DOF:, OBJECT_DOF:] = np.diag(1.0 / np.sqrt(k))
    return out


def build_dual_cone(contacts, q_inv_half, mu):
    """Normalized cone rows n = -Q^{-1/2} J^T / ||.||, b = -phi / ||.||.

    Rows whose scaled Jacobian vanishes are dropped.
    """
    dim = q_inv_half.shape[0]
    if contacts.n_c == 0:
        return DualCone(np.zeros((0, dim)), np.zeros(0))
    J = contact_jacobian_rows(contacts, mu)
    G = J @ q_inv_half  # rows of (Q^{-1/2} J^T)^T; Q^{-1/2} is symmetric
    norms = np.linalg.norm(G, axis=1)
    phi = contacts.row_phi()
    ok = norms >= 1e-10
    if not np.all(ok):
        log.warning("dropping %d degenerate cone rows", int(np.sum(~ok)))
    return DualCone(-G[ok] / norms[ok, None], -phi[ok] / norms[ok])


def dsdf(cone, z_query, sigma):
    return smooth_distance(cone.normals, cone.offsets, z_query, sigma).value


def dsdf_gradient(cone, z_query, sigma):
    return smooth_distance(cone.normals, cone.offsets, z_query, sigma).grad


def dsdf_project(cone, z_query, sigma, jacobian=False):
    """z+ = z - d(z) grad d(z), optionally with d z+ / d z."""
    sd = smooth_distance(cone.normals, cone.offsets, z_query, sigma, hessian=jacobian)
    z_plus = z_query - sd.value * sd.grad
    if not jacobian:
        return z_plus
    n = z_query.shape[0]
    jac = np.eye(n) - np.outer(sd.grad, sd.grad) - sd.value * sd.hessian
    return z_plus, jac


def _check_finite(v):
    if not np.all(np.isfinite(v)):
        raise NonFiniteResult("non-finite velocity")
    return v


def unconstrained_velocity(params, u):
    """(1/h) Q^{-1} b, evaluated as Q^{-1/2} (Q^{-1/2} b) / h like the constrained steps."""
    qih = q_inv_sqrt(params)
    return qih @ (qih @ assemble_Q_b(params, u)[1]) / params.h


def step_velocity(state, u, params, contacts, cone=None):
    """Explicit next velocity from the smoothed velocity-space distance."""
    qih = q_inv_sqrt(params)
    if cone is None:
        cone = build_dual_cone(contacts, qih, params.mu)
    _, b = assemble_Q_b(params, u)
    z_q = qih @ b
    z_plus = dsdf_project(cone, z_q, params.sigma)
    return _check_finite(qih @ z_plus / params.h)


def qp_oracle_solve(params, u, contacts, max_iter=None):
    """Exact projection in z-space. Returns (z_plus, projection result, cone, z_query, Q^{-1/2})."""
    qih = q_inv_sqrt(params)
    cone = build_dual_cone(contacts, qih, params.mu)
    _, b = assemble_Q_b(params, u)
    z_q = qih @ b
    if len(cone) == 0:
        return z_q, None, cone, z_q, qih
    if max_iter is None:
        max_iter = max(50, 4 * (len(cone) + cone.dim))
    try:
        # z = 0 is feasible: every offset is -phi / ||.|| <= 0
        proj = project_onto_polyhedron(cone.normals, cone.offsets, z_q, np.zeros(cone.dim), max_iter)
    except RuntimeError as exc:
        raise IterationLimit(str(exc)) from exc
    return proj.point, proj, cone, z_q, qih


def qp_oracle_step(state, u, params, contacts, relaxation=None):
    """Exact quasi-dynamic velocity; with ``relaxation`` the relaxed-KKT solution instead."""
    if relaxation is not None:
        return relaxed_kkt_step(state, u, params, contacts, relaxation)
    z, *_ , qih = qp_oracle_solve(params, u, contacts)
    return _check_finite(qih @ z / params.h)


def qp_kkt_residuals(params, u, contacts):
    z, proj, cone, z_q, _ = qp_oracle_solve(params, u, contacts)
    if proj is None:
        return {"stationarity": 0.0, "primal": 0.0, "dual": 0.0, "complementarity": 0.0}
    return kkt_residuals(cone.normals, cone.offsets, z_q, z, proj.multipliers)


@dataclass
class RelaxedSolution:
    z: np.ndarray
    multipliers: np.ndarray
    slack: np.ndarray
    iterations: int


def relaxed_kkt_solve(cone, z_query, eps, tol=1e-10, max_iter=100):
    """Solve z - z_q + N^T lam = 0, N z + c + s = 0, lam * s = eps with lam, s > 0.

    Primal-dual Newton with fraction-to-boundary steps and backtracking on the
    residual norm. Equivalent to a log-barrier projection with fixed weight eps.
    """
    N, c = cone.normals, cone.offsets
    m, n = N.shape
    z = np.array(z_query, dtype=float)
    if m == 0:
        return RelaxedSolution(z, np.zeros(0), np.zeros(0), 0)
    s = np.maximum(-(N @ z + c), np.sqrt(eps))
    lam = eps / s
    eye = np.eye(n)

    def residual(z, lam, s):
        return np.concatenate([z - z_query + N.T @ lam, N @ z + c + s, lam * s - eps])

    r = residual(z, lam, s)
    rnorm = np.linalg.norm(r)
    for it in range(1, max_iter + 1):
        if rnorm <= tol * (1.0 + np.linalg.norm(z_query)):
            return RelaxedSolution(z, lam, s, it)
        rd, rp, rc = r[:n], r[n:n + m], r[n + m:]
        W = lam / s
        H = eye + (N.T * W) @ N
        rhs = -rd - N.T @ (W * (rp - rc / lam))
        dz = cho_solve(cho_factor(H), rhs)
        dlam = W * (N @ dz + rp - rc / lam)
        ds = -(rc + s * dlam) / lam
        alpha = 1.0
        for arr, d in ((lam, dlam), (s, ds)):
            neg = d < 0
            if np.any(neg):
                alpha = min(alpha, 0.995 * float(np.min(-arr[neg] / d[neg])))
        while True:
            zn, ln, sn = z + alpha * dz, lam + alpha * dlam, s + alpha * ds
            rn = residual(zn, ln, sn)
            rn_norm = np.linalg.norm(rn)
            if rn_norm <= (1.0 - 1e-4 * alpha) * rnorm or alpha < 1e-10:
                break
            alpha *= 0.5
        z, lam, s, r, rnorm = zn, ln, sn, rn, rn_norm
    raise IterationLimit(f"relaxed KKT solve did not converge in {max_iter} iterations")


def relaxed_kkt_step(state, u, params, contacts, eps=1e-4, cone=None):
    qih = q_inv_sqrt(params)
    if cone is None:
        cone = build_dual_cone(contacts, qih, params.mu)
    _, b = assemble_Q_b(params, u)
    sol = relaxed_kkt_solve(cone, qih @ b, eps)
    return _check_finite(qih @ sol.z / params.h)


def integrate(state, v_plus, h):
    """q+ = q "+" h v+: translate, compose the body-frame rotation, move the robot."""
    v_plus = np.asarray(v_plus, dtype=float)
    pos = state.object_position + h * v_plus[:3]
    quat = quat_mul(state.object_quaternion, quat_exp(h * v_plus[3:6]))
    quat = quat / np.linalg.norm(quat)
    robot = state.robot_config + h * v_plus[OBJECT_DOF:]
    return SystemState(pos, quat, robot)


# ---------------------------------------------------------------------------
# frozen-cone step models, u -> (v, dv/du)


class DsdfStepModel:
    """Smoothed step with the cone frozen at construction (the MPC prediction model)."""

    name = "contactsdf"

    def __init__(self, params, contacts, cone=None):
        self.params = params
        self.qih = q_inv_sqrt(params)
        self.cone = build_dual_cone(contacts, self.qih, params.mu) if cone is None else cone
        _, self._b0 = assemble_Q_b(params, np.zeros(params.n_r))
        self._dzq_du = self.qih[:, OBJECT_DOF:] @ params.K_r

    def velocity(self, u):
        z_q = self.qih @ self._b0 + self._dzq_du @ u
        return _check_finite(self.qih @ dsdf_project(self.cone, z_q, self.params.sigma) / self.params.h)

    def velocity_and_jacobian(self, u):
        z_q = self.qih @ self._b0 + self._dzq_du @ u
        z_plus, jz = dsdf_project(self.cone, z_q, self.params.sigma, jacobian=True)
        h = self.params.h
        v = _check_finite(self.qih @ z_plus / h)
        return v, self.qih @ jz @ self._dzq_du / h


class RelaxedQpStepModel(DsdfStepModel):
    """Relaxed-KKT QP step with implicit-function derivatives (the baseline model)."""

    name = "qpmodel"

    def __init__(self, params, contacts, eps=1e-4, cone=None):
        super().__init__(params, contacts, cone)
        self.eps = eps

    def velocity(self, u):
        z_q = self.qih @ self._b0 + self._dzq_du @ u
        return _check_finite(self.qih @ relaxed_kkt_solve(self.cone, z_q, self.eps).z / self.params.h)

    def velocity_and_jacobian(self, u):
        z_q = self.qih @ self._b0 + self._dzq_du @ u
        sol = relaxed_kkt_solve(self.cone, z_q, self.eps)
        N = self.cone.normals
        H = np.eye(N.shape[1]) + (N.T * (sol.multipliers / sol.slack)) @ N
        jz = np.linalg.solve(H, np.eye(N.shape[1]))
        h = self.params.h
        return _check_finite(self.qih @ sol.z / h), self.qih @ jz @ self._dzq_du / h
