import numpy as np
import pytest

from contactsdf.contact import (
    OBJECT_DOF, DegenerateNormal, QueryPoint, contact_jacobian_rows, detect_contacts, ground_queries, robot_spheres,
    tangent_basis,
)
from contactsdf.geometry import box, exact_distance
from contactsdf.rotations import axis_angle, quat_exp, quat_mul, quat_to_matrix
from contactsdf.stepper import SystemState, integrate


def cube_state(pos=(0, 0, 0), quat=(1, 0, 0, 0), robot=(0.6, 0, 0)):
    return SystemState(np.array(pos, float), np.array(quat, float), np.array(robot, float))


def test_ball_touching_face():
    planes = box(0.5)
    cs = detect_contacts(cube_state(), planes, robot_spheres(1, 0.01), sigma=1000.0, cutoff=0.1)
    assert cs.n_c == 1
    assert cs.phi[0] == pytest.approx(0.09, abs=1e-6)
    np.testing.assert_allclose(cs.normal[0], [1, 0, 0], atol=1e-6)
    assert cs.jac_rows(0.4).shape == (4, OBJECT_DOF + 3)


def test_far_ball_filtered():
    cs = detect_contacts(cube_state(robot=(5, 0, 0)), box(0.5), robot_spheres(1, 0.01), 1000.0, 0.1)
    assert cs.n_c == 0
    assert cs.jac_rows(0.4).shape == (0, OBJECT_DOF + 3)


def test_four_ground_points_under_resting_cube():
    half = 0.03
    planes = box(half)
    state = cube_state(pos=(0, 0, half), robot=(1.0, 0, 0))
    pts = [QueryPoint("ground", (sx * 0.015, sy * 0.015, 0.0)) for sx in (-1, 1) for sy in (-1, 1)]
    for method in ("csdf", "exact"):
        cs = detect_contacts(state, planes, pts, 1000.0, 0.05, method=method)
        assert cs.n_c == 4
        np.testing.assert_allclose(cs.phi, 0.0, atol=1e-2 if method == "csdf" else 1e-12)
        # the object-outward normal points from the bottom face to the ground points
        np.testing.assert_allclose(cs.normal, np.tile([0, 0, -1.0], (4, 1)), atol=1e-6)
        exact = [exact_distance(planes, np.array(p.local_position) - [0, 0, half]).distance for p in pts]
        np.testing.assert_allclose(exact, 0.0, atol=1e-12)


def test_ground_grid_lies_inside_footprint():
    planes = box((0.04, 0.03, 0.02))
    state = cube_state(pos=(0.01, -0.02, 0.02), quat=axis_angle([0, 0, 1], 0.3))
    pts = ground_queries(state, planes, pitch=0.02, margin=0.005)
    assert len(pts) > 0
    rot = quat_to_matrix(state.object_quaternion)
    for q in pts:
        xb = (np.array(q.local_position) - state.object_position) @ rot
        assert np.all(np.abs(xb[:2]) <= np.array([0.04, 0.03]) - 0.005 + 1e-12)


def test_deep_penetration_raises():
    planes = box(0.5)
    with pytest.raises(DegenerateNormal):
        detect_contacts(cube_state(robot=(0, 0, 0)), planes, robot_spheres(1, 0.01), 100.0, 0.1)


def test_penetration_clamps_phi():
    planes = box(0.5)
    cs = detect_contacts(cube_state(robot=(0.505, 0, 0)), planes, robot_spheres(1, 0.01), 1000.0, 0.1)
    assert cs.phi[0] == 0.0


@pytest.mark.parametrize("normal", [(0, 0, 1), (1, 0, 0), (0.6, 0.8, 0), (1 / np.sqrt(3),) * 3])
def test_tangent_basis_properties(normal):
    n = np.array(normal, float)
    for n_d in (2, 4, 8):
        t = tangent_basis(n, n_d)
        assert t.shape == (n_d, 3)
        np.testing.assert_allclose(t @ n, 0.0, atol=1e-10)
        np.testing.assert_allclose(np.linalg.norm(t, axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(t[n_d // 2:], -t[: n_d // 2])
        cos = t[0] @ t[1]
        assert cos == pytest.approx(np.cos(2 * np.pi / n_d), abs=1e-12)


def test_tangent_basis_z_normal():
    t = tangent_basis(np.array([0.0, 0, 1]), 4)
    np.testing.assert_allclose(t, [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], atol=1e-15)
    t2 = tangent_basis(np.array([0.0, 0, 1]), 2)
    np.testing.assert_allclose(t2, [[1, 0, 0], [-1, 0, 0]], atol=1e-15)


def test_tangent_basis_rejects_odd():
    with pytest.raises(ValueError):
        tangent_basis(np.array([0.0, 0, 1]), 3)


def test_mu_zero_rows_collapse_and_linearity():
    cs = detect_contacts(cube_state(robot=(0.55, 0.1, 0)), box(0.5), robot_spheres(1, 0.01), 1000.0, 0.1)
    rows0 = contact_jacobian_rows(cs, 0.0)
    for j in range(1, 4):
        np.testing.assert_array_equal(rows0[j], rows0[0])
    np.testing.assert_array_equal(rows0[0], cs.jn[0])
    rows = contact_jacobian_rows(cs, 0.5)
    np.testing.assert_allclose(rows, (cs.jn[:, None] - 0.5 * cs.jd).reshape(-1, cs.dim))


def test_point_contact_rows_along_x():
    # ball on the +x face of a cube: the robot part of the normal row is +e_x, the object part -e_x
    cs = detect_contacts(cube_state(robot=(0.55, 0, 0)), box(0.5), robot_spheres(1, 0.01), 1e5, 0.1)
    row = cs.jn[0]
    np.testing.assert_allclose(row[:3], [-1, 0, 0], atol=1e-6)
    np.testing.assert_allclose(row[OBJECT_DOF:], [1, 0, 0], atol=1e-6)
    # the lever arm is along the normal, so pure normal pushes exert no torque
    np.testing.assert_allclose(row[3:6], 0.0, atol=1e-6)


def _gap(state, planes, query):
    rot = quat_to_matrix(state.object_quaternion)
    xb = (query.world_position(state.robot_config) - state.object_position) @ rot
    d = exact_distance(planes, xb)
    return d.distance


def test_normal_jacobian_matches_gap_rate_at_corner(rng):
    planes = box(0.03)
    q = QueryPoint("robot", radius=0.0, robot_index=0)
    for _ in range(20):
        quat = axis_angle(rng.normal(size=3), rng.uniform(0, np.pi))
        # a point outside a corner region, so the witness is a vertex
        corner = np.array([0.03, 0.03, 0.03]) + np.abs(rng.normal(size=3)) * 0.01
        finger = quat_to_matrix(quat) @ corner + [0.1, 0.0, 0.05]
        state = SystemState([0.1, 0.0, 0.05], quat, finger)
        cs = detect_contacts(state, planes, [q], 1000.0, 0.1, method="exact")
        v = rng.normal(size=OBJECT_DOF + 3) * 0.1
        eps = 1e-6
        rate = (_gap(integrate(state, v, eps), planes, q) - _gap(integrate(state, -v, eps), planes, q)) / (2 * eps)
        assert cs.jn[0] @ v == pytest.approx(rate, abs=1e-4)


def test_tangent_rows_match_sliding_rate(rng):
    planes = box(0.03)
    q = QueryPoint("robot", radius=0.0, robot_index=0)
    quat = axis_angle([0.2, 0.5, 1.0], 0.7)
    state = SystemState([0, 0, 0.03], quat, quat_to_matrix(quat) @ np.array([0.04, 0.01, -0.005]) + [0, 0, 0.03])
    cs = detect_contacts(state, planes, [q], 1000.0, 0.1, method="exact")
    v = rng.normal(size=OBJECT_DOF + 3)
    # velocity of the witness point on the object, and of the finger
    rot = quat_to_matrix(quat)
    r = cs.witness[0] - state.object_position
    v_obj = v[:3] + rot @ np.cross(v[3:6], rot.T @ r)
    rel = v[OBJECT_DOF:] - v_obj
    np.testing.assert_allclose(cs.jd[0] @ v, cs.tangents[0] @ rel, atol=1e-12)
    assert cs.jn[0] @ v == pytest.approx(cs.normal[0] @ rel, abs=1e-12)


def test_body_angular_velocity_convention():
    # integrate uses q (x) exp(h w): w is expressed in the body frame
    quat = axis_angle([1, 0, 0], np.pi / 2)
    state = SystemState([0, 0, 0], quat, np.zeros(3))
    nxt = integrate(state, np.r_[0, 0, 0, 0, 0, 1.0, 0, 0, 0], 0.1)
    np.testing.assert_allclose(nxt.object_quaternion, quat_mul(quat, quat_exp([0, 0, 0.1])), atol=1e-15)


def test_contact_set_serialisation():
    cs = detect_contacts(cube_state(robot=(0.55, 0, 0)), box(0.5), robot_spheres(1, 0.01), 1000.0, 0.1)
    d = cs.to_dict()
    assert len(d["contacts"]) == 1 and d["contacts"][0]["source"] == 0
