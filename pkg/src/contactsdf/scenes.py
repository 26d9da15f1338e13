"""Desk-scale manipulation scenes with an exact quasi-dynamic ground truth.

The environment detects contacts by exact polytope projection and steps with
the exact QP, using hidden "true" parameters. Controllers and learners only see
their own :class:`~contactsdf.stepper.ModelParams`.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contact import QueryPoint, detect_contacts, ground_queries, robot_spheres
from .geometry import SupportPlaneSet, box
from .rotations import axis_angle, quat_to_matrix
from .stepper import ModelParams, SystemState, integrate, qp_oracle_step


@dataclass
class SceneSpec:
    name: str
    planes: SupportPlaneSet
    true_params: ModelParams
    initial_state: SystemState
    target_positions: list
    target_rotations: list
    n_fingers: int = 3
    finger_radius: float = 0.01
    ground: bool = True
    ground_pitch: float = 0.02
    ground_margin: float = 0.005
    cutoff: float = 0.05
    n_d: int = 4
    detect_sigma: float = 1000.0
    u_lb: np.ndarray = None
    u_ub: np.ndarray = None
    weights: dict = field(default_factory=dict)
    grasp_cost: bool = True
    horizon: int = 4
    rollout_length: int = 200
    turning_rotations: int | None = None

    def __post_init__(self):
        n_r = 3 * self.n_fingers
        self.u_lb = np.full(n_r, -0.01) if self.u_lb is None else np.asarray(self.u_lb, dtype=float)
        self.u_ub = np.full(n_r, 0.01) if self.u_ub is None else np.asarray(self.u_ub, dtype=float)
        for q in self.target_rotations:
            if abs(np.linalg.norm(q) - 1.0) > 1e-9:
                raise ValueError("target quaternions must be normalized")
        phi = self.min_clearance(self.initial_state)
        if phi < -1e-6:
            raise ValueError(f"initial state penetrates by {-phi:.2e} m")

    @property
    def n_r(self):
        return 3 * self.n_fingers

    def queries(self, state):
        fingers = robot_spheres(self.n_fingers, self.finger_radius)
        if not self.ground:
            return fingers
        return fingers + ground_queries(state, self.planes, self.ground_pitch, self.ground_margin)

    def detect(self, state, method="csdf", sigma=None):
        return detect_contacts(
            state, self.planes, self.queries(state), sigma or self.detect_sigma, self.cutoff, self.n_d, method
        )

    def min_clearance(self, state):
        """Smallest signed clearance between object, fingers and the ground plane."""
        from .geometry import exact_distance
        from .rotations import quat_to_matrix

        rot = quat_to_matrix(state.object_quaternion)
        verts = self.planes.vertices @ rot.T + state.object_position
        clear = float(verts[:, 2].min()) if self.ground else np.inf
        for q in robot_spheres(self.n_fingers, self.finger_radius):
            xb = (q.world_position(state.robot_config) - state.object_position) @ rot
            d = exact_distance(self.planes, xb).distance
            if d == 0.0:
                d = float(np.max(self.planes.normals @ xb + self.planes.offsets))
            clear = min(clear, d - q.radius)
        return clear

    def targets(self):
        return list(itertools.product(range(len(self.target_positions)), range(len(self.target_rotations))))

    def to_dict(self):
        return {
            "name": self.name,
            "planes": self.planes.to_dict(),
            "true_params": self.true_params.to_dict(),
            "initial_state": self.initial_state.to_dict(),
            "target_positions": [np.asarray(p).tolist() for p in self.target_positions],
            "target_rotations": [np.asarray(q).tolist() for q in self.target_rotations],
            "n_fingers": self.n_fingers,
            "finger_radius": self.finger_radius,
            "ground": self.ground,
            "ground_pitch": self.ground_pitch,
            "ground_margin": self.ground_margin,
            "cutoff": self.cutoff,
            "n_d": self.n_d,
            "detect_sigma": self.detect_sigma,
            "u_lb": self.u_lb.tolist(),
            "u_ub": self.u_ub.tolist(),
            "weights": dict(self.weights),
            "grasp_cost": self.grasp_cost,
            "horizon": self.horizon,
            "rollout_length": self.rollout_length,
            "turning_rotations": self.turning_rotations,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["planes"] = SupportPlaneSet.from_dict(d["planes"])
        d["true_params"] = ModelParams.from_dict(d["true_params"])
        d["initial_state"] = SystemState.from_dict(d["initial_state"])
        d["target_positions"] = [np.asarray(p, dtype=float) for p in d["target_positions"]]
        d["target_rotations"] = [np.asarray(q, dtype=float) for q in d["target_rotations"]]
        return cls(**d)

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


class Env:
    """Single-owner ground-truth environment."""

    def __init__(self, scene, seed=0, noise=0.0):
        self.scene = scene
        self.seed = seed
        self.noise = noise
        self.rng = np.random.default_rng(seed)
        self.state = scene.initial_state
        self.steps = 0

    def reset(self, state=None):
        self.state = self.scene.initial_state if state is None else state
        self.steps = 0
        return self.state

    def step(self, u):
        self.state = env_step(self, u)
        return self.state


def env_step(env, u):
    """Advance ``env`` by one exact quasi-dynamic step and return the new state."""
    scene = env.scene
    u = np.asarray(u, dtype=float)
    if np.any(u < scene.u_lb - 1e-9) or np.any(u > scene.u_ub + 1e-9):
        raise ValueError("control outside actuator bounds")
    state = env.state
    contacts = scene.detect(state, method="exact")
    v = qp_oracle_step(state, u, scene.true_params, contacts)
    if env.noise > 0:
        v = v + env.noise * env.rng.uniform(-1.0, 1.0, v.shape)
    nxt = integrate(state, v, scene.true_params.h)
    env.state = nxt
    env.steps += 1
    return nxt


def sample_target(scene, rng, kind=None):
    """Uniform (position, quaternion) from the scene's target lists.

    ``kind="turn"`` or ``"flip"`` restricts to the first ``turning_rotations``
    rotations or the rest.
    """
    rots = list(range(len(scene.target_rotations)))
    split = scene.turning_rotations if scene.turning_rotations is not None else len(rots)
    if kind == "turn":
        rots = rots[:split]
    elif kind == "flip":
        rots = rots[split:]
    if not rots or not scene.target_positions:
        raise ValueError("scene has no targets of that kind")
    i = int(rng.integers(len(scene.target_positions)))
    j = rots[int(rng.integers(len(rots)))]
    return np.array(scene.target_positions[i], dtype=float), np.array(scene.target_rotations[j], dtype=float)


def random_contact_configuration(scene, rng, max_gap=0.01):
    """A state near contact and a bounded control, for model comparisons.

    The object keeps its resting height with a random yaw and offset; each
    finger sits outside a random side face, at most ``max_gap`` from it.
    """
    q0 = scene.initial_state
    yaw = rng.uniform(-np.pi, np.pi)
    quat = axis_angle([0, 0, 1], yaw)
    pos = q0.object_position + np.r_[rng.uniform(-0.02, 0.02, 2), 0.0]
    rot = quat_to_matrix(quat)
    verts = scene.planes.vertices
    fingers = []
    for _ in range(scene.n_fingers):
        side = np.flatnonzero(np.abs(scene.planes.normals[:, 2]) < 0.5)
        k = int(rng.choice(side))
        n = scene.planes.normals[k]
        # a point on face k, away from its rim
        on_face = verts[np.abs(verts @ n + scene.planes.offsets[k]) < 1e-9]
        w = rng.dirichlet(np.ones(len(on_face)))
        p = 0.5 * (w @ on_face) + 0.5 * on_face.mean(axis=0)
        p = p + (scene.finger_radius + rng.uniform(0.0, max_gap)) * n
        fingers.append(rot @ p + pos)
    state = SystemState(pos, quat, np.concatenate(fingers))
    u = rng.uniform(scene.u_lb, scene.u_ub)
    return state, u


# ---------------------------------------------------------------------------
# catalog

CUBE_WEIGHTS = {"contact": 1.0, "grasp": 0.1, "control": 1.0, "position": 10000.0, "rotation": 1000.0}
BOX_WEIGHTS = {"contact": 1.0, "grasp": 0.1, "control": 1.0, "position": 10000.0, "rotation": 5000.0}
STICK_WEIGHTS = {"contact": 1.0, "grasp": 0.1, "control": 1.0, "position": 500.0, "rotation": 100.0}


def cuboid_params(half_extents, mass, mu, stiffness, n_r, sigma=1000.0, h=0.1):
    """Ground-truth parameters for a uniform cuboid."""
    hx, hy, hz = half_extents
    inertia = mass / 3.0 * np.array([hy**2 + hz**2, hx**2 + hz**2, hx**2 + hy**2])
    M = np.diag(np.r_[np.full(3, mass), inertia])
    return ModelParams(M_o=M, K_r=np.full(n_r, stiffness), m_o=mass, mu=mu, sigma=sigma, h=h)


def _three_ball_start(half_extents, radius, gap=0.015):
    hx, hy, hz = half_extents
    z = hz
    balls = []
    for ang in (0.0, 2 * np.pi / 3, 4 * np.pi / 3):
        d = np.array([np.cos(ang), np.sin(ang)])
        # distance along d to the footprint boundary
        reach = min(hx / abs(d[0]) if abs(d[0]) > 1e-9 else np.inf, hy / abs(d[1]) if abs(d[1]) > 1e-9 else np.inf)
        r = reach + radius + gap
        balls.extend([r * d[0], r * d[1], z])
    return SystemState([0.0, 0.0, hz], [1.0, 0.0, 0.0, 0.0], balls)


def _table_one_targets(hz, flips):
    positions = [np.array([sx * 0.05, sy * 0.05, hz]) for sx in (1, -1) for sy in (1, -1)]
    turns = [axis_angle([0, 0, 1], a) for a in (0.0, np.pi / 4, -np.pi / 4, np.pi / 2, -np.pi / 2)]
    flip_q = [axis_angle([0, 1, 0], a) for a in flips]
    return positions, turns + flip_q, len(turns)


def three_ball_scene(name, half_extents, weights, flips, mass=0.1, mu=0.4, stiffness=200.0, rollout=200):
    radius = 0.01
    start = _three_ball_start(half_extents, radius)
    positions, rotations, n_turn = _table_one_targets(half_extents[2], flips)
    return SceneSpec(
        name=name,
        planes=box(half_extents),
        true_params=cuboid_params(half_extents, mass, mu, stiffness, 9),
        initial_state=start,
        target_positions=positions,
        target_rotations=rotations,
        n_fingers=3,
        finger_radius=radius,
        weights=dict(weights),
        rollout_length=rollout,
        turning_rotations=n_turn,
    )


def planar_push_scene():
    """Top-down pushing: no gravity and no ground contacts, the object's support is folded into M_o."""
    half = (0.03, 0.03, 0.03)
    radius = 0.01
    # the finger starts nearly touching: the frozen cone cannot close a gap wider than one step of motion
    start = SystemState([0.0, 0.0, half[2]], [1, 0, 0, 0], [-(half[0] + radius + 0.002), 0.0, half[2]])
    positions = [np.array([0.05, y, half[2]]) for y in (0.0, 0.02, -0.02)]
    rotations = [axis_angle([0, 0, 1], a) for a in (0.0, np.pi / 8, -np.pi / 8)]
    u_lb = np.array([-0.01, -0.01, 0.0])
    u_ub = np.array([0.01, 0.01, 0.0])
    return SceneSpec(
        name="planar-push",
        planes=box(half),
        true_params=cuboid_params(half, 0.1, 0.4, 200.0, 3).replace(gravity=np.zeros(3)),
        initial_state=start,
        target_positions=positions,
        target_rotations=rotations,
        n_fingers=1,
        finger_radius=radius,
        ground=False,
        u_lb=u_lb,
        u_ub=u_ub,
        weights={"contact": 1.0, "grasp": 0.0, "control": 1.0, "position": 10000.0, "rotation": 100.0},
        grasp_cost=False,
        rollout_length=100,
    )


def builtin_scenes():
    """Name -> zero-argument factory for every shipped scene."""
    return {
        "planar-push": planar_push_scene,
        "three-ball-cube": lambda: three_ball_scene(
            "three-ball-cube", (0.03, 0.03, 0.03), CUBE_WEIGHTS, (np.pi / 2, -np.pi / 2), rollout=200
        ),
        "three-ball-box": lambda: three_ball_scene(
            "three-ball-box", (0.04, 0.03, 0.02), BOX_WEIGHTS, (np.pi / 2, -np.pi / 2), rollout=300
        ),
        "three-ball-stick": lambda: three_ball_scene(
            "three-ball-stick", (0.06, 0.015, 0.015), STICK_WEIGHTS, (3 * np.pi / 4, np.pi), rollout=300
        ),
    }


def get_scene(name):
    catalog = builtin_scenes()
    if name not in catalog:
        raise KeyError(f"unknown scene {name!r}; available: {', '.join(sorted(catalog))}")
    return catalog[name]()
