"""Convex objects as supporting-plane sets, with exact and smoothed distance queries.

A convex body is the intersection of halfspaces ``n_i . x + b_i <= 0``. The exact
(truncated) distance is a Euclidean projection onto that polytope; the smooth
surrogate replaces both maxima of ``max(0, max_i n_i . x + b_i)`` by
log-sum-exp with sharpness ``sigma``. The smooth machinery here works in any
dimension and is reused for the velocity-space cone in :mod:`contactsdf.stepper`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import linprog, nnls
from scipy.spatial import HalfspaceIntersection, QhullError

MERGE_TOL = 1e-8


class GeometryError(ValueError):
    pass


class NonConvexMesh(GeometryError):
    pass


class DegenerateMesh(GeometryError):
    pass


class InvalidPlaneSet(GeometryError):
    pass


class SolverFailure(RuntimeError):
    """The active-set projection ran out of iterations."""


# ---------------------------------------------------------------------------
# log-sum-exp distance, any dimension


def lse(values):
    """Max-shifted log-sum-exp over the last axis."""
    values = np.asarray(values, dtype=float)
    m = np.max(values, axis=-1, keepdims=True)
    out = m + np.log(np.sum(np.exp(values - m), axis=-1, keepdims=True))
    return out[..., 0]


@dataclass
class SmoothDistance:
    """Value, gradient and (optionally) Hessian of the smoothed polytope distance.

    ``softmax`` holds the inner plane weights and ``outer_weight`` the sigmoid of
    the inner lse, so ``grad == outer_weight * softmax @ A``.
    """

    value: np.ndarray
    grad: np.ndarray
    softmax: np.ndarray
    outer_weight: np.ndarray
    hessian: np.ndarray | None = None


def smooth_distance(A, c, x, sigma, hessian=False):
    """(1/sigma) * lse{0, lse{sigma * (A x + c)}} for x of shape (n,) or (k, n).

    With no rows the distance is 0 everywhere (nothing to violate).
    """
    A = np.asarray(A, dtype=float)
    c = np.asarray(c, dtype=float)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    k, n = X.shape
    m = A.shape[0]
    if m == 0:
        res = SmoothDistance(
            value=np.zeros(k), grad=np.zeros((k, n)), softmax=np.zeros((k, 0)), outer_weight=np.zeros(k),
            hessian=np.zeros((n, n)) if hessian else None,
        )
        return _squeeze(res) if single else res

    s = sigma * (X @ A.T + c)
    smax = np.max(s, axis=1, keepdims=True)
    e = np.exp(s - smax)
    total = np.sum(e, axis=1, keepdims=True)
    inner = (smax + np.log(total))[:, 0]
    p = e / total
    outer = np.logaddexp(0.0, inner)
    w = np.exp(inner - outer)
    gp = p @ A
    grad = w[:, None] * gp
    hess = None
    if hessian:
        if not single:
            raise ValueError("hessian is only available for a single query")
        g0 = gp[0]
        w0 = w[0]
        cov = (A.T * p[0]) @ A - np.outer(g0, g0)
        hess = sigma * (w0 * (1.0 - w0) * np.outer(g0, g0) + w0 * cov)
    res = SmoothDistance(value=outer / sigma, grad=grad, softmax=p, outer_weight=w, hessian=hess)
    return _squeeze(res) if single else res


def _squeeze(res):
    return SmoothDistance(
        value=float(res.value[0]), grad=res.grad[0], softmax=res.softmax[0],
        outer_weight=float(res.outer_weight[0]), hessian=res.hessian,
    )


def max_distance(A, c, x):
    """Non-smooth surrogate max(0, max_i A_i x + c_i). Test-only reference."""
    A = np.asarray(A, dtype=float)
    if A.shape[0] == 0:
        return 0.0
    return max(0.0, float(np.max(A @ np.asarray(x, dtype=float) + c)))


# ---------------------------------------------------------------------------
# exact projection


@dataclass
class ProjectionResult:
    point: np.ndarray
    multipliers: np.ndarray
    active: list
    iterations: int


def project_onto_polyhedron(A, c, query, start, max_iter=50):
    """Euclidean projection of ``query`` onto {x : A x + c <= 0} by a primal active set.

    ``start`` must be feasible. Blocking rows are only accepted with a clear
    component along the null-space step, which keeps the working set linearly
    independent. If the iteration stalls or its working set turns singular,
    the problem is re-solved by :func:`project_least_distance`.
    """
    A = np.asarray(A, dtype=float)
    c = np.asarray(c, dtype=float)
    query = np.asarray(query, dtype=float)
    try:
        result = _primal_active_set(A, c, query, np.array(start, dtype=float), max_iter)
    except np.linalg.LinAlgError:
        result = None
    if result is None:
        # Degenerate vertices (many tied active rows) can make the add/drop
        # sequence cycle or stall; the least-distance dual solved by NNLS
        # has no such issue.
        result = project_least_distance(A, c, query, max_iter)
    return result


def _primal_active_set(A, c, query, x, max_iter):
    m, n = A.shape
    scale = 1.0 + np.linalg.norm(query) + np.linalg.norm(x)
    work: list[int] = []
    in_work = np.zeros(m, dtype=bool)
    row_norms = np.linalg.norm(A, axis=1)
    for it in range(1, max_iter + 1):
        g = x - query
        if work:
            qf, r = np.linalg.qr(A[work].T)
            p = -(g - qf @ (qf.T @ g))
        else:
            p = -g
        if np.linalg.norm(p) <= 1e-12 * scale:
            lam_w = solve_triangular(r, -(qf.T @ g)) if work else np.zeros(0)
            if not np.all(np.isfinite(lam_w)):
                return None
            if len(lam_w) == 0 or lam_w.min() >= -1e-12 * scale:
                lam = np.zeros(m)
                lam[work] = np.maximum(lam_w, 0.0)
                return ProjectionResult(point=x, multipliers=lam, active=list(work), iterations=it)
            j = int(np.argmin(lam_w))
            in_work[work[j]] = False
            work.pop(j)
            continue
        Ap = A @ p
        slack = np.maximum(-(A @ x + c), 0.0)
        # rows (numerically) in the span of the working set cannot block
        cand = (~in_work) & (Ap > 1e-9 * np.linalg.norm(p) * row_norms)
        alpha, block = 1.0, -1
        if np.any(cand):
            idx = np.flatnonzero(cand)
            ratios = slack[idx] / Ap[idx]
            k = int(np.argmin(ratios))
            if ratios[k] < 1.0:
                alpha, block = float(ratios[k]), int(idx[k])
        x = x + alpha * p
        if block >= 0:
            work.append(block)
            in_work[block] = True
    return None


def project_least_distance(A, c, query, iterations=0):
    """Projection as a least-distance program, solved through its NNLS dual.

    Needs no feasible start, so it also serves unbounded plane sets.
    """
    A = np.asarray(A, dtype=float)
    c = np.asarray(c, dtype=float)
    query = np.asarray(query, dtype=float)
    m, n = A.shape
    E = np.vstack([-A.T, (A @ query + c)[None, :]])
    f = np.zeros(n + 1)
    f[-1] = 1.0
    try:
        u, _ = nnls(E, f, maxiter=max(1000, 10 * m))
    except RuntimeError as exc:
        raise SolverFailure(f"projection did not converge: {exc}") from exc
    r = E @ u - f
    if not np.isfinite(r).all() or abs(r[-1]) < 1e-14:
        raise SolverFailure("projection did not converge (infeasible constraint set)")
    point = query - r[:n] / r[-1]
    lam = u / -r[-1]
    active = [int(i) for i in np.flatnonzero(lam > 0)]
    return ProjectionResult(point=point, multipliers=lam, active=active, iterations=iterations)


def kkt_residuals(A, c, query, point, multipliers):
    """Stationarity, primal, dual and complementarity residuals of a projection."""
    A = np.asarray(A, dtype=float)
    cons = A @ point + c
    return {
        "stationarity": float(np.max(np.abs(point - query + A.T @ multipliers), initial=0.0)),
        "primal": float(np.max(np.maximum(cons, 0.0), initial=0.0)),
        "dual": float(np.max(np.maximum(-multipliers, 0.0), initial=0.0)),
        "complementarity": float(np.max(np.abs(multipliers * cons), initial=0.0)),
    }


# ---------------------------------------------------------------------------
# plane sets


@dataclass(frozen=True)
class SupportPlaneSet:
    """Convex body {x : normals @ x + offsets <= 0} in the frame named by ``frame``."""

    normals: np.ndarray
    offsets: np.ndarray
    frame: str = "object"
    _interior: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        offsets = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        if normals.shape[1] != 3 or normals.shape[0] != offsets.shape[0] or normals.shape[0] < 1:
            raise InvalidPlaneSet("need I >= 1 normals of shape (I, 3) and I offsets")
        if np.any(np.abs(np.linalg.norm(normals, axis=1) - 1.0) > 1e-9):
            raise InvalidPlaneSet("normals must be unit length")
        normals.setflags(write=False)
        offsets.setflags(write=False)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "_interior", self._chebyshev_center())
        self.vertices  # noqa: B018 -- validates boundedness

    def __len__(self):
        return self.normals.shape[0]

    def _chebyshev_center(self):
        big = 1e6
        res = linprog(
            c=np.r_[0.0, 0.0, 0.0, -1.0],
            A_ub=np.c_[self.normals, np.ones(len(self))],
            b_ub=-self.offsets,
            bounds=[(-big, big)] * 3 + [(None, 1.0)],
            method="highs",
        )
        if res.status != 0 or res.x[3] <= 1e-12:
            raise InvalidPlaneSet("plane set has empty interior")
        if np.any(np.abs(res.x[:3]) > big / 2):
            raise InvalidPlaneSet("plane set is unbounded")
        return res.x[:3]

    @property
    def interior_point(self):
        return self._interior

    @cached_property
    def vertices(self):
        halfspaces = np.c_[self.normals, self.offsets]
        try:
            hs = HalfspaceIntersection(halfspaces, self._interior)
        except QhullError as exc:
            raise InvalidPlaneSet(f"vertex enumeration failed: {exc}") from exc
        verts = hs.intersections
        if not np.all(np.isfinite(verts)) or np.max(np.abs(verts)) > 1e5:
            raise InvalidPlaneSet("plane set is unbounded")
        # qhull repeats vertices shared by several planes
        return np.unique(np.round(verts, 12), axis=0)

    def transformed(self, rotation, translation):
        """Plane set of the body after x -> rotation @ x + translation."""
        rotation = np.asarray(rotation, dtype=float)
        normals = self.normals @ rotation.T
        offsets = self.offsets - normals @ np.asarray(translation, dtype=float)
        return SupportPlaneSet(normals, offsets, self.frame)

    def to_dict(self):
        return {"normals": self.normals.tolist(), "offsets": self.offsets.tolist(), "frame": self.frame}

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data["normals"], dtype=float), np.array(data["offsets"], dtype=float), data.get("frame", "object"))

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def box(half_extents, frame="object"):
    """Axis-aligned cuboid centered at the origin."""
    hx, hy, hz = np.broadcast_to(np.asarray(half_extents, dtype=float), (3,))
    normals = np.vstack([np.eye(3), -np.eye(3)])
    offsets = -np.array([hx, hy, hz, hx, hy, hz])
    return SupportPlaneSet(normals, offsets, frame)


def build_from_mesh(vertices, faces, frame="object"):
    """Plane set of a closed convex triangle mesh, one plane per distinct face orientation."""
    V = np.asarray(vertices, dtype=float)
    F = np.asarray(faces, dtype=int)
    if V.shape[0] < 4:
        raise DegenerateMesh("need at least 4 vertices")
    centroid = V.mean(axis=0)
    volume = 0.0
    planes: list[tuple[np.ndarray, float]] = []
    for a, b, cc in F:
        va, vb, vc = V[a], V[b], V[cc]
        nrm = np.cross(vb - va, vc - va)
        area2 = np.linalg.norm(nrm)
        if area2 < 1e-14:
            continue
        nrm = nrm / area2
        if nrm @ (centroid - va) > 0:
            nrm = -nrm
            vb, vc = vc, vb
        volume += np.dot(va, np.cross(vb, vc)) / 6.0
        off = -float(nrm @ va)
        for kept_n, kept_b in planes:
            if np.max(np.abs(kept_n - nrm)) < MERGE_TOL and abs(kept_b - off) < MERGE_TOL:
                break
        else:
            planes.append((nrm, off))
    if abs(volume) < 1e-12 or not planes:
        raise DegenerateMesh(f"mesh volume {volume:.3e} is too small")
    normals = np.array([p[0] for p in planes])
    offsets = np.array([p[1] for p in planes])
    violation = np.max(V @ normals.T + offsets)
    if violation > 1e-6:
        raise NonConvexMesh(f"a vertex lies {violation:.3e} outside a face plane")
    return SupportPlaneSet(normals, offsets, frame)


def read_off(path):
    """Vertices and fan-triangulated faces of an OFF file."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise GeometryError("not an OFF file")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    verts = np.array(tokens[pos:pos + 3 * nv], dtype=float).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        k = int(tokens[pos])
        idx = [int(t) for t in tokens[pos + 1:pos + 1 + k]]
        pos += 1 + k
        faces.extend((idx[0], idx[i], idx[i + 1]) for i in range(1, k - 1))
    return verts, np.array(faces, dtype=int)


def load_off(path, frame="object"):
    return build_from_mesh(*read_off(path), frame=frame)


# ---------------------------------------------------------------------------
# queries


@dataclass(frozen=True)
class DistanceQueryResult:
    distance: float
    closest_point: np.ndarray
    outward_direction: np.ndarray


def exact_distance(planes, x_query, max_iter=50):
    """Truncated distance from ``x_query`` to the body, by exact projection."""
    x_query = np.asarray(x_query, dtype=float)
    values = planes.normals @ x_query + planes.offsets
    if np.all(values <= 0.0):
        k = int(np.argmax(values))
        return DistanceQueryResult(0.0, x_query.copy(), planes.normals[k].copy())
    proj = project_onto_polyhedron(planes.normals, planes.offsets, x_query, planes.interior_point, max_iter)
    diff = x_query - proj.point
    dist = float(np.linalg.norm(diff))
    direction = diff / dist if dist > 0 else planes.normals[int(np.argmax(values))].copy()
    return DistanceQueryResult(dist, proj.point, direction)


def csdf(planes, x_query, sigma):
    return smooth_distance(planes.normals, planes.offsets, x_query, sigma).value


def csdf_gradient(planes, x_query, sigma):
    return smooth_distance(planes.normals, planes.offsets, x_query, sigma).grad


def closest_point_approx(planes, x_query, sigma):
    """x - csdf(x) * grad csdf(x); the gradient is deliberately not renormalized."""
    sd = smooth_distance(planes.normals, planes.offsets, x_query, sigma)
    return np.asarray(x_query, dtype=float) - sd.value * sd.grad


def max_approx(planes, x_query):
    return max_distance(planes.normals, planes.offsets, x_query)


def gradient_norm(planes, x_query, sigma):
    """Diagnostic: how far the smoothed gradient is from a unit vector."""
    return float(np.linalg.norm(csdf_gradient(planes, x_query, sigma)))
