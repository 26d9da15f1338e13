"""Unit-quaternion helpers. Quaternions are stored scalar-first (w, x, y, z)."""

import numpy as np


def quat_mul(q, p):
    w1, x1, y1, z1 = q
    w2, x2, y2, z2 = p
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def left_mul_matrix(q):
    """Matrix L(q) with quat_mul(q, p) == L(q) @ p."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def right_mul_matrix(p):
    """Matrix R(p) with quat_mul(q, p) == R(p) @ q."""
    w, x, y, z = p
    return np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def normalize(q):
    return np.asarray(q, dtype=float) / np.linalg.norm(q)


def quat_exp(rotvec):
    """Quaternion of the rotation vector ``rotvec`` (axis * angle)."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec)
    half = 0.5 * angle
    if angle < 1e-8:
        # second-order series keeps the derivative exact near zero
        return np.concatenate([[1.0 - angle**2 / 8.0], 0.5 * rotvec * (1.0 - angle**2 / 24.0)])
    return np.concatenate([[np.cos(half)], np.sin(half) / angle * rotvec])


def quat_exp_jacobian(rotvec):
    """d quat_exp(r) / d r, shape (4, 3)."""
    r = np.asarray(rotvec, dtype=float)
    a = np.linalg.norm(r)
    if a < 1e-6:
        jac = np.zeros((4, 3))
        jac[0] = -0.25 * r
        jac[1:] = 0.5 * np.eye(3) * (1.0 - a**2 / 24.0) - r[:, None] * r[None, :] / 24.0
        return jac
    half = 0.5 * a
    s, c = np.sin(half), np.cos(half)
    rhat = r / a
    jac = np.zeros((4, 3))
    jac[0] = -0.5 * s * rhat
    # d(sin(a/2)/a * r)/dr
    f = s / a
    df = (0.5 * c * a - s) / a**2
    jac[1:] = f * np.eye(3) + df * np.outer(r, rhat)
    return jac


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    return quat_exp(axis / np.linalg.norm(axis) * angle)


def rotation_angle_between(q, p):
    """Geodesic angle between two rotations; invariant to the sign of either quaternion."""
    d = abs(float(np.dot(q, p)))
    return 2.0 * np.arccos(min(1.0, d))


def yaw_of(q):
    w, x, y, z = q
    return np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
