"""Receding-horizon control through a frozen-cone step model.

The cone is built once at the query state, so each predicted velocity depends
only on that step's control. The rollout is single shooting; gradients are
propagated backwards by hand through the quaternion integration and the
step model's Jacobian, and the box-constrained problem is solved by a monotone
spectral projected-gradient method.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .contact import OBJECT_DOF
from .rotations import left_mul_matrix, quat_exp, quat_exp_jacobian, quat_mul, right_mul_matrix, rotation_angle_between
from .stepper import DsdfStepModel, RelaxedQpStepModel, SystemState, integrate


class NonFiniteObjective(ArithmeticError):
    pass


class RolloutError(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"rollout failed at step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class MpcConfig:
    horizon: int
    u_lb: np.ndarray
    u_ub: np.ndarray
    target_position: np.ndarray
    target_quaternion: np.ndarray
    w_contact: float = 1.0
    w_grasp: float = 0.1
    w_control: float = 1.0
    w_position: float = 10000.0
    w_rotation: float = 1000.0
    max_iters: int = 50
    step_tolerance: float = 1e-6
    grasp_cost_enabled: bool = True

    def __post_init__(self):
        self.u_lb = np.asarray(self.u_lb, dtype=float)
        self.u_ub = np.asarray(self.u_ub, dtype=float)
        self.target_position = np.asarray(self.target_position, dtype=float)
        self.target_quaternion = np.asarray(self.target_quaternion, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if np.any(self.u_lb > self.u_ub):
            raise ValueError("u_lb must not exceed u_ub")
        if min(self.w_contact, self.w_grasp, self.w_control, self.w_position, self.w_rotation) < 0:
            raise ValueError("cost weights must be non-negative")
        if abs(np.linalg.norm(self.target_quaternion) - 1.0) > 1e-9:
            raise ValueError("target quaternion must be normalized")

    @classmethod
    def for_scene(cls, scene, target_position, target_quaternion, **overrides):
        w = scene.weights
        kwargs = dict(
            horizon=scene.horizon, u_lb=scene.u_lb, u_ub=scene.u_ub,
            target_position=target_position, target_quaternion=target_quaternion,
            w_contact=w.get("contact", 1.0), w_grasp=w.get("grasp", 0.1), w_control=w.get("control", 1.0),
            w_position=w.get("position", 10000.0), w_rotation=w.get("rotation", 1000.0),
            grasp_cost_enabled=scene.grasp_cost,
        )
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class MpcSolution:
    controls: np.ndarray
    predicted_states: list
    objective: float
    iterations: int
    solve_time: float
    initial_objective: float = float("nan")
    converged: bool = False
    hit_iteration_limit: bool = False


# ---------------------------------------------------------------------------
# costs


def _fingers(state):
    return state.robot_config.reshape(-1, 3)


def path_cost(state, u, config):
    """Contact, grasp-closure and control-effort terms."""
    u = np.asarray(u, dtype=float)
    rel = _fingers(state) - state.object_position
    cost = config.w_contact * float(np.sum(rel**2)) + config.w_control * float(u @ u)
    if config.grasp_cost_enabled:
        cost += config.w_grasp * float(grasp_sum(rel) @ grasp_sum(rel))
    return cost


def grasp_sum(rel):
    """Sum of unit vectors from the object to each finger; coincident fingers contribute 0.

    The grasp term is the squared norm of this sum after rotating it into the
    object frame, which a rotation leaves unchanged, so it is evaluated in world.
    """
    norms = np.linalg.norm(rel, axis=1)
    ok = norms >= 1e-6
    out = np.zeros(3)
    if np.any(ok):
        out = np.sum(rel[ok] / norms[ok, None], axis=0)
    return out


def terminal_cost(state, config):
    dp = state.object_position - config.target_position
    d = float(state.object_quaternion @ config.target_quaternion)
    return config.w_position * float(dp @ dp) + config.w_rotation * (1.0 - d * d)


def _path_cost_grad(state, config):
    """Gradient of the state part of the path cost w.r.t. (position, robot)."""
    rel = _fingers(state) - state.object_position
    g_f = 2.0 * config.w_contact * rel
    if config.grasp_cost_enabled and config.w_grasp > 0:
        norms = np.linalg.norm(rel, axis=1)
        S = grasp_sum(rel)
        for i, (r, n) in enumerate(zip(rel, norms)):
            if n < 1e-6:
                continue
            e = r / n
            g_f[i] += 2.0 * config.w_grasp * (S - e * (e @ S)) / n
    return -np.sum(g_f, axis=0), g_f.ravel()


# ---------------------------------------------------------------------------
# rollout and gradient


def _models_for(model, T):
    if isinstance(model, (list, tuple)):
        if len(model) != T:
            raise ValueError("need one step model per horizon step")
        return list(model)
    return [model] * T


def rollout(q0, model, U):
    states = [q0]
    for m, u in zip(_models_for(model, len(U)), U):
        states.append(integrate(states[-1], m.velocity(u), m.params.h))
    return states


def objective(q0, model, config, U, with_grad=True):
    """Total cost of the control sequence ``U`` (T x n_r) and its gradient."""
    U = np.asarray(U, dtype=float)
    T = U.shape[0]
    models = _models_for(model, T)
    states = [q0]
    vels, jacs = [], []
    for t in range(T):
        if with_grad:
            v, dv = models[t].velocity_and_jacobian(U[t])
            jacs.append(dv)
        else:
            v = models[t].velocity(U[t])
        vels.append(v)
        states.append(integrate(states[-1], v, models[t].params.h))
    J = sum(path_cost(states[t], U[t], config) for t in range(T)) + terminal_cost(states[T], config)
    if not np.isfinite(J):
        raise NonFiniteObjective("objective is not finite")
    if not with_grad:
        return J, states

    qT = states[T]
    g_p = 2.0 * config.w_position * (qT.object_position - config.target_position)
    d = qT.object_quaternion @ config.target_quaternion
    g_q = -2.0 * config.w_rotation * d * config.target_quaternion
    g_r = np.zeros_like(qT.robot_config)
    grad = np.zeros_like(U)
    for t in range(T - 1, -1, -1):
        h = models[t].params.h
        q_prev = states[t].object_quaternion
        e = quat_exp(h * vels[t][3:6])
        P = quat_mul(q_prev, e)
        nP = np.linalg.norm(P)
        qhat = P / nP
        g_P = (g_q - qhat * (qhat @ g_q)) / nP
        g_v = np.zeros_like(vels[t])
        g_v[:3] = h * g_p
        g_v[3:6] = h * (quat_exp_jacobian(h * vels[t][3:6]).T @ (left_mul_matrix(q_prev).T @ g_P))
        g_v[OBJECT_DOF:] = h * g_r
        grad[t] = jacs[t].T @ g_v + 2.0 * config.w_control * U[t]
        # pull back to states[t]
        g_q = right_mul_matrix(e).T @ g_P
        if t > 0:
            gp_path, gr_path = _path_cost_grad(states[t], config)
            g_p = g_p + gp_path
            g_r = g_r + gr_path
    return J, states, grad


def solve_mpc(q0, model, config, warm_start=None):
    """Monotone spectral projected gradient over the box-bounded control sequence."""
    t0 = time.perf_counter()
    T = config.horizon
    lb = np.broadcast_to(config.u_lb, (T, config.u_lb.shape[0]))
    ub = np.broadcast_to(config.u_ub, (T, config.u_ub.shape[0]))
    x = np.zeros((T, config.u_lb.shape[0])) if warm_start is None else np.array(warm_start, dtype=float)
    x = np.clip(x, lb, ub)
    f, states, g = objective(q0, model, config, x)
    f0 = f
    span = float(np.max(ub - lb)) if np.max(ub - lb) > 0 else 1.0
    gmax = float(np.max(np.abs(g)))
    alpha = 0.5 * span / gmax if gmax > 0 else 1.0
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        pg = np.clip(x - g, lb, ub) - x
        if np.max(np.abs(pg)) < config.step_tolerance:
            converged = True
            it -= 1
            break
        d = np.clip(x - alpha * g, lb, ub) - x
        slope = float(np.sum(g * d))
        if slope >= 0:
            converged = True
            it -= 1
            break
        lam = 1.0
        for _ in range(40):
            xn = np.clip(x + lam * d, lb, ub)  # exact feasibility despite round-off
            fn, sn = objective(q0, model, config, xn, with_grad=False)
            if fn <= f + 1e-4 * lam * slope:
                break
            lam *= 0.5
        else:
            converged = True
            break
        fn, sn, gn = objective(q0, model, config, xn)
        s = (xn - x).ravel()
        y = (gn - g).ravel()
        sy = float(s @ y)
        alpha = float(s @ s) / sy if sy > 1e-300 else 1e3 * span / max(gmax, 1e-12)
        alpha = min(max(alpha, 1e-12), 1e12)
        x, f, g, states = xn, fn, gn, sn
    return MpcSolution(
        controls=x, predicted_states=states, objective=f, iterations=it,
        solve_time=time.perf_counter() - t0, initial_objective=f0, converged=converged,
        hit_iteration_limit=not converged,
    )


def shift_warm_start(controls):
    return np.vstack([controls[1:], controls[-1:]])


# ---------------------------------------------------------------------------
# receding horizon


@dataclass
class RolloutResult:
    states: list
    controls: list
    records: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def pose_errors(state, config):
    pos_err = float(np.linalg.norm(state.object_position - config.target_position))
    rot_err = rotation_angle_between(state.object_quaternion, config.target_quaternion)
    return pos_err, rot_err


def make_model(kind, params, contacts, eps=1e-4):
    if kind == "contactsdf":
        return DsdfStepModel(params, contacts)
    if kind == "qpmodel":
        return RelaxedQpStepModel(params, contacts, eps)
    raise ValueError(f"unknown model kind {kind!r}")


def receding_horizon_rollout(env, params, config, H, model_kind="contactsdf", eps=1e-4, callback=None):
    """Run H steps of detect -> cone -> solve -> apply first control on ``env``."""
    scene = env.scene
    states = [env.state]
    controls = []
    records = []
    warm = None
    for k in range(H):
        try:
            q = env.state
            contacts = scene.detect(q, method="csdf")
            model = make_model(model_kind, params, contacts, eps)
            sol = solve_mpc(q, model, config, warm)
            u0 = sol.controls[0]
            env.step(u0)
        except Exception as exc:  # noqa: BLE001 -- re-raised with the step index
            raise RolloutError(k, exc) from exc
        warm = shift_warm_start(sol.controls)
        controls.append(u0)
        states.append(env.state)
        pos_err, rot_err = pose_errors(env.state, config)
        rec = {
            "step": k,
            "solve_ms": 1e3 * sol.solve_time,
            "objective": sol.objective,
            "initial_objective": sol.initial_objective,
            "iterations": sol.iterations,
            "cost_to_goal": terminal_cost(env.state, config),
            "position_error": pos_err,
            "orientation_error": rot_err,
            "control_norm": float(np.linalg.norm(u0)),
            "n_contacts": contacts.n_c,
        }
        records.append(rec)
        if callback is not None:
            callback(rec)
    pos_err, rot_err = pose_errors(env.state, config)
    solve_ms = [r["solve_ms"] for r in records]
    metrics = {
        "steps": H,
        "terminal_position_error": pos_err,
        "terminal_orientation_error": rot_err,
        "mean_solve_ms": float(np.mean(solve_ms)) if solve_ms else 0.0,
        "initial_cost_to_goal": terminal_cost(states[0], config),
        "final_cost_to_goal": terminal_cost(env.state, config),
        "accumulated_cost_to_goal": float(sum(r["cost_to_goal"] for r in records)),
    }
    return RolloutResult(states, controls, records, metrics)
