"""Query points, collision detection against a plane set, and contact Jacobian rows.

Velocity coordinates are ``v = [v_lin (world), omega (body), v_r]``: the object
twist first, then the robot coordinates. Robot query spheres are Cartesian
points whose centers are three consecutive entries of the robot configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .geometry import exact_distance, smooth_distance
from .rotations import quat_to_matrix, yaw_of

OBJECT_DOF = 6


class DegenerateNormal(RuntimeError):
    pass


@dataclass(frozen=True)
class QueryPoint:
    """A point that may touch the object.

    ``body`` is ``"robot"`` (sphere center driven by robot coordinates
    ``3*robot_index : 3*robot_index+3``) or ``"ground"`` (a fixed world point).
    """

    body: str
    local_position: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    robot_index: int | None = None

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be non-negative")
        if self.body == "robot" and (self.robot_index is None or self.robot_index < 0):
            raise ValueError("robot query points need a robot index")
        if self.body not in ("robot", "ground"):
            raise ValueError(f"unknown body {self.body!r}")

    def world_position(self, robot_config):
        local = np.asarray(self.local_position, dtype=float)
        if self.body == "ground":
            return local
        k = self.robot_index
        return np.asarray(robot_config[3 * k:3 * k + 3], dtype=float) + local


@dataclass
class ContactSet:
    """Per-contact distances, frames and Jacobians at one system state.

    ``jn[i] @ v`` is the separation rate of contact ``i`` and ``jd[i, j] @ v``
    the relative sliding rate along ``tangents[i, j]``.
    """

    phi: np.ndarray
    witness: np.ndarray
    normal: np.ndarray
    tangents: np.ndarray
    jn: np.ndarray
    jd: np.ndarray
    source: list = field(default_factory=list)

    @property
    def n_c(self):
        return self.phi.shape[0]

    @property
    def n_d(self):
        return self.tangents.shape[1]

    @property
    def dim(self):
        return self.jn.shape[1]

    @classmethod
    def empty(cls, dim, n_d=4):
        return cls(
            phi=np.zeros(0), witness=np.zeros((0, 3)), normal=np.zeros((0, 3)),
            tangents=np.zeros((0, n_d, 3)), jn=np.zeros((0, dim)), jd=np.zeros((0, n_d, dim)),
        )

    def jac_rows(self, mu):
        return contact_jacobian_rows(self, mu)

    def row_phi(self):
        """phi repeated once per friction direction, aligned with ``jac_rows``."""
        return np.repeat(self.phi, self.n_d)

    def subset(self, keep):
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return ContactSet(
            self.phi[keep], self.witness[keep], self.normal[keep], self.tangents[keep],
            self.jn[keep], self.jd[keep], [self.source[i] for i in keep] if self.source else [],
        )

    def to_dict(self):
        return {
            "contacts": [
                {"phi": float(p), "normal": n.tolist(), "witness": w.tolist(), "source": s}
                for p, n, w, s in zip(self.phi, self.normal, self.witness, self.source or [None] * self.n_c)
            ]
        }


def tangent_basis(normal, n_d=4):
    """``n_d`` unit vectors evenly spanning the plane orthogonal to ``normal``.

    The second half is the exact negation of the first. The seed axis is the
    global axis least aligned with the normal (ties: x before y before z).
    """
    if n_d < 2 or n_d % 2:
        raise ValueError("n_d must be an even integer >= 2")
    n = np.asarray(normal, dtype=float)
    seed = np.zeros(3)
    seed[int(np.argmin(np.abs(n)))] = 1.0
    t1 = seed - (seed @ n) * n
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    half = n_d // 2
    angles = 2.0 * np.pi * np.arange(half) / n_d
    first = np.cos(angles)[:, None] * t1 + np.sin(angles)[:, None] * t2
    return np.vstack([first, -first])


def _direction_rows(directions, witness_rel_body, rotation, robot_index, dim):
    """Rows mapping v to directions . (v_query - v_witness)."""
    directions = np.atleast_2d(directions)
    rows = np.zeros((directions.shape[0], dim))
    dirs_body = directions @ rotation
    rows[:, :3] = -directions
    rows[:, 3:6] = -np.cross(witness_rel_body, dirs_body)
    if robot_index is not None:
        rows[:, OBJECT_DOF + 3 * robot_index:OBJECT_DOF + 3 * robot_index + 3] = directions
    return rows


def contact_jacobian_rows(contacts, mu):
    """Rows J_ij = Jn_i - mu * Jd_ij stacked contact-major, shape (n_c * n_d, dim)."""
    rows = contacts.jn[:, None, :] - mu * contacts.jd
    return rows.reshape(-1, contacts.dim)


def detect_contacts(state, planes, queries, sigma=1000.0, cutoff=0.05, n_d=4, method="csdf"):
    """Contacts between the object (``planes`` in its body frame) and ``queries``.

    ``method="csdf"`` uses the smoothed distance and its closest-point formula;
    ``method="exact"`` projects onto the polytope (the ground-truth routine).
    Queries farther than ``cutoff`` are dropped and penetration clamps phi to 0.
    """
    rot = quat_to_matrix(state.object_quaternion)
    pos = np.asarray(state.object_position, dtype=float)
    dim = OBJECT_DOF + len(state.robot_config)
    if not queries:
        return ContactSet.empty(dim, n_d)
    X = np.array([q.world_position(state.robot_config) for q in queries])
    radii = np.array([q.radius for q in queries])
    Xb = (X - pos) @ rot

    if method == "csdf":
        sd = smooth_distance(planes.normals, planes.offsets, Xb, sigma)
        dist = sd.value
        gnorm = np.linalg.norm(sd.grad, axis=1)
        keep = np.flatnonzero(dist - radii < cutoff)
        if np.any(gnorm[keep] < 1e-8):
            raise DegenerateNormal("smoothed gradient vanishes at a retained query (deep penetration)")
        normals_b = sd.grad / np.maximum(gnorm, 1e-300)[:, None]
        witness_b = Xb - dist[:, None] * sd.grad
    elif method == "exact":
        res = [exact_distance(planes, xb) for xb in Xb]
        dist = np.array([r.distance for r in res])
        keep = np.flatnonzero(dist - radii < cutoff)
        normals_b = np.array([r.outward_direction for r in res])
        witness_b = np.array([r.closest_point for r in res])
    else:
        raise ValueError(f"unknown detection method {method!r}")

    n_c = len(keep)
    if n_c == 0:
        return ContactSet.empty(dim, n_d)
    phi = np.maximum(dist[keep] - radii[keep], 0.0)
    normal = normals_b[keep] @ rot.T
    wb = witness_b[keep]
    witness = wb @ rot.T + pos
    r_body = wb
    tangents = np.zeros((n_c, n_d, 3))
    jn = np.zeros((n_c, dim))
    jd = np.zeros((n_c, n_d, dim))
    for a, i in enumerate(keep):
        q = queries[i]
        ridx = q.robot_index if q.body == "robot" else None
        tangents[a] = tangent_basis(normal[a], n_d)
        jn[a] = _direction_rows(normal[a], r_body[a], rot, ridx, dim)[0]
        jd[a] = _direction_rows(tangents[a], r_body[a], rot, ridx, dim)
    return ContactSet(phi, witness, normal, tangents, jn, jd, [int(i) for i in keep])


def robot_spheres(n_fingers, radius):
    return [QueryPoint("robot", radius=radius, robot_index=k) for k in range(n_fingers)]


def ground_queries(state, planes, pitch=0.02, margin=0.005, height=0.0):
    """Ground points on a yaw-aligned grid inside the object's footprint.

    The footprint is the convex hull of the object's vertices projected onto
    the ground, shrunk by ``margin`` so grid points never sit on its rim.
    """
    rot = quat_to_matrix(state.object_quaternion)
    verts = planes.vertices @ rot.T + np.asarray(state.object_position, dtype=float)
    xy = verts[:, :2]
    hull = ConvexHull(xy)
    center = xy[hull.vertices].mean(axis=0)
    reach = np.max(np.linalg.norm(xy - center, axis=1))
    k = int(np.ceil(reach / pitch))
    ticks = pitch * np.arange(-k, k + 1)
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    yaw = yaw_of(state.object_quaternion)
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.c_[gx.ravel(), gy.ravel()]
    pts = local @ np.array([[c, s], [-s, c]]) + center
    inside = np.all(pts @ hull.equations[:, :2].T + hull.equations[:, 2] <= -margin, axis=1)
    return [QueryPoint("ground", (float(x), float(y), height)) for x, y in pts[inside]]
