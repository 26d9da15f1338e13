"""Fitting model parameters to on-MPC transitions.

The learnable parameters are the diagonal object inertia ``M_o``, the diagonal
robot stiffness ``K_r``, the object mass ``m_o``, the friction coefficient
``mu`` and the smoothing ``sigma`` of the velocity-space distance. They are
optimized in an unconstrained vector through smooth bijections, so every
decoded parameter set is valid by construction.

The one-step prediction runs detect -> cone -> smoothed step -> integrate.
Detection uses the scene's fixed geometric smoothing and does not depend on the
learned parameters, so contacts are computed once per stored transition and
the loss gradient is obtained by a hand-written reverse pass through the cone
construction, the smoothed projection and the quaternion integration.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contact import OBJECT_DOF, contact_jacobian_rows
from .geometry import lse
from .mpc import MpcConfig, receding_horizon_rollout
from .rotations import left_mul_matrix, quat_exp, quat_exp_jacobian, quat_mul
from .scenes import sample_target
from .stepper import ModelParams, integrate

SIGMA_FLOOR = 10.0


class NonFiniteLoss(ArithmeticError):
    pass


class NonFiniteGradient(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass
class Transition:
    state: object
    control: np.ndarray
    next_state: object
    contacts: object = None


class TransitionBuffer:
    """FIFO ring buffer of (q_k, u_k, q_{k+1}) transitions."""

    def __init__(self, capacity=400):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def add(self, state, control, next_state, contacts=None):
        self._items.append(Transition(state, np.array(control, dtype=float), next_state, contacts))

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def batch(self):
        return list(self._items)


# ---------------------------------------------------------------------------
# parameter bijection


def _softplus(x):
    return float(np.logaddexp(0.0, x))


def _softplus_inv(y):
    return float(y + np.log(-np.expm1(-y)))


def _sigmoid(x):
    return float(0.5 * (1.0 + np.tanh(0.5 * x)))


@dataclass(frozen=True)
class ParamVector:
    """Unconstrained coordinates of the learnable parameters.

    Layout: ``[log diag M_o (6), log diag K_r (n_r), log m_o, softplus^-1 mu,
    log(sigma - SIGMA_FLOOR)]``. Step size, gravity and ``tau_r`` are carried
    over unchanged from the template parameters.
    """

    values: np.ndarray
    template: ModelParams

    def __post_init__(self):
        object.__setattr__(self, "values", np.array(self.values, dtype=float))

    @property
    def n_r(self):
        return self.template.n_r

    @classmethod
    def from_params(cls, params):
        if np.any(params.M_o != np.diag(np.diag(params.M_o))):
            raise ValueError("learning supports diagonal M_o only")
        if params.sigma <= SIGMA_FLOOR:
            raise ValueError(f"sigma must exceed {SIGMA_FLOOR}")
        if params.mu <= 0:
            raise ValueError("mu must be positive to be learned")
        vals = np.concatenate([
            np.log(np.diag(params.M_o)), np.log(np.diag(params.K_r)),
            [np.log(params.m_o), _softplus_inv(params.mu), np.log(params.sigma - SIGMA_FLOOR)],
        ])
        return cls(vals, params)

    def to_params(self):
        v = self.values
        n_r = self.n_r
        return self.template.replace(
            M_o=np.diag(np.exp(v[:OBJECT_DOF])),
            K_r=np.diag(np.exp(v[OBJECT_DOF:OBJECT_DOF + n_r])),
            m_o=float(np.exp(v[OBJECT_DOF + n_r])),
            mu=_softplus(v[OBJECT_DOF + n_r + 1]),
            sigma=SIGMA_FLOOR + float(np.exp(v[OBJECT_DOF + n_r + 2])),
        )

    def with_values(self, values):
        return ParamVector(values, self.template)

    def chain(self, grad_natural):
        """Map a gradient w.r.t. (diag M_o, diag K_r, m_o, mu, sigma) to these coordinates."""
        v = self.values
        n_r = self.n_r
        scale = np.concatenate([
            np.exp(v[:OBJECT_DOF + n_r + 1]),
            [_sigmoid(v[OBJECT_DOF + n_r + 1]), np.exp(v[OBJECT_DOF + n_r + 2])],
        ])
        return grad_natural * scale


def planted_initial_params(true_params, inertia_scale=3.0, stiffness_scale=0.5, mass_scale=2.0, mu=0.15,
                           sigma=1000.0):
    """Learner initialization for the planted-truth fixture: the hidden truth, perturbed."""
    return true_params.replace(
        M_o=true_params.M_o * inertia_scale, K_r=true_params.K_r * stiffness_scale,
        m_o=true_params.m_o * mass_scale, mu=mu, sigma=sigma,
    )


def params_to_json(params, path, extra=None):
    payload = {"params": params.to_dict()}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2))


def params_from_json(path):
    return ModelParams.from_dict(json.loads(Path(path).read_text())["params"])


# ---------------------------------------------------------------------------
# loss and its reverse pass


def _transition_contacts(tr, scene):
    if tr.contacts is None:
        tr.contacts = scene.detect(tr.state, method="csdf")
    return tr.contacts


def pose_loss(pred, real):
    """Squared position and robot error plus 1 - <q_pred, q_real>^2."""
    dp = pred.object_position - real.object_position
    dr = pred.robot_config - real.robot_config
    d = float(pred.object_quaternion @ real.object_quaternion)
    return float(dp @ dp + dr @ dr + 1.0 - d * d)


def _forward(params, contacts, u):
    """Smoothed step with every intermediate needed by :func:`_backward`."""
    h = params.h
    dim = params.dim
    dq = np.concatenate([h / np.sqrt(np.diag(params.M_o)), 1.0 / np.sqrt(np.diag(params.K_r))])
    b = np.zeros(dim)
    b[:3] = params.m_o * params.gravity
    b[OBJECT_DOF:] = np.diag(params.K_r) * u + params.tau_r
    z_q = dq * b
    f = {"dq": dq, "b": b, "z_q": z_q, "u": np.asarray(u, dtype=float), "rows": 0}
    if contacts.n_c == 0:
        z_plus = z_q
    else:
        J = contact_jacobian_rows(contacts, params.mu)
        G = J * dq
        rho = np.linalg.norm(G, axis=1)
        ok = rho >= 1e-10
        J, G, rho = J[ok], G[ok], rho[ok]
        phi = contacts.row_phi()[ok]
        jd = contacts.jd.reshape(-1, dim)[ok]
        N = -G / rho[:, None]
        c = -phi / rho
        sigma = params.sigma
        a = N @ z_q + c
        t = sigma * a
        L = lse(t)
        p = np.exp(t - L)
        w = _sigmoid(L)
        s = float(np.logaddexp(0.0, L)) / sigma
        gvec = w * (N.T @ p)
        z_plus = z_q - s * gvec
        f.update(rows=int(ok.sum()), J=J, jd=jd, rho=rho, phi=phi, N=N, a=a, L=L, p=p, w=w, s=s, gvec=gvec)
    f["z_plus"] = z_plus
    f["v"] = dq * z_plus / h
    return f


def _backward(params, f, v_bar):
    """Gradient w.r.t. (diag M_o, diag K_r, m_o, mu, sigma) given dLoss/dv."""
    h = params.h
    dq, b = f["dq"], f["b"]
    d_bar = v_bar * f["z_plus"] / h
    y = v_bar * dq / h  # d/d z_plus
    z_bar = y.copy()
    mu_bar = 0.0
    sigma_bar = 0.0
    if f["rows"]:
        N, a, p, w, s, gvec, L = f["N"], f["a"], f["p"], f["w"], f["s"], f["gvec"], f["L"]
        sigma = params.sigma
        s_bar = -float(y @ gvec)
        g_bar = -s * y
        Ntp = N.T @ p
        w_bar = float(g_bar @ Ntp)
        N_bar = w * np.outer(p, g_bar)
        p_bar = w * (N @ g_bar)
        L_bar = s_bar * w / sigma + w_bar * w * (1.0 - w)
        sigma_bar += -s_bar * s / sigma
        t_bar = p * (p_bar - p @ p_bar) + L_bar * p
        a_bar = sigma * t_bar
        sigma_bar += float(t_bar @ a)
        N_bar += np.outer(a_bar, f["z_q"])
        z_bar += N.T @ a_bar
        c_bar = a_bar
        rho, phi, J = f["rho"], f["phi"], f["J"]
        # N = -G / rho and c = -phi / rho, with G_k / rho_k = -N_k
        proj = N_bar - N * np.sum(N * N_bar, axis=1)[:, None]
        G_bar = -proj / rho[:, None] - (c_bar * phi / rho**2)[:, None] * N
        J_bar = G_bar * dq
        d_bar += np.sum(G_bar * J, axis=0)
        mu_bar = -float(np.sum(J_bar * f["jd"]))
    d_bar += z_bar * b
    b_bar = z_bar * dq
    n_r = params.n_r
    M = np.diag(params.M_o)
    k = np.diag(params.K_r)
    grad_M = -d_bar[:OBJECT_DOF] * dq[:OBJECT_DOF] / (2.0 * M)
    grad_K = -d_bar[OBJECT_DOF:] * dq[OBJECT_DOF:] / (2.0 * k) + b_bar[OBJECT_DOF:] * f["u"]
    grad_m = float(b_bar[:3] @ params.gravity)
    assert grad_K.shape[0] == n_r
    return np.concatenate([grad_M, grad_K, [grad_m, mu_bar, sigma_bar]])


def _integrate_adjoint(state, v, h, real):
    """Loss of integrate(state, v, h) against ``real`` and its gradient w.r.t. v."""
    pred = integrate(state, v, h)
    loss = pose_loss(pred, real)
    g_v = np.zeros_like(v)
    g_v[:3] = 2.0 * h * (pred.object_position - real.object_position)
    g_v[OBJECT_DOF:] = 2.0 * h * (pred.robot_config - real.robot_config)
    d = float(pred.object_quaternion @ real.object_quaternion)
    g_q = -2.0 * d * real.object_quaternion
    e = quat_exp(h * v[3:6])
    P = quat_mul(state.object_quaternion, e)
    nP = np.linalg.norm(P)
    qhat = P / nP
    g_P = (g_q - qhat * (qhat @ g_q)) / nP
    g_v[3:6] = h * (quat_exp_jacobian(h * v[3:6]).T @ (left_mul_matrix(state.object_quaternion).T @ g_P))
    return loss, g_v


def prediction_loss(theta, batch, scene, with_grad=False):
    """Mean one-step pose error of the smoothed model at ``theta`` over ``batch``.

    With ``with_grad`` also returns the gradient in ``theta``'s coordinates.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    params = theta.to_params()
    total = 0.0
    grad = np.zeros(OBJECT_DOF + params.n_r + 3)
    for tr in batch:
        f = _forward(params, _transition_contacts(tr, scene), tr.control)
        loss, g_v = _integrate_adjoint(tr.state, f["v"], params.h, tr.next_state)
        total += loss
        if with_grad:
            grad += _backward(params, f, g_v)
    total /= len(batch)
    if not np.isfinite(total):
        raise NonFiniteLoss("prediction loss is not finite")
    if not with_grad:
        return total
    grad = theta.chain(grad / len(batch))
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("prediction loss gradient is not finite")
    return total, grad


def prediction_loss_fd(theta, batch, scene, step=1e-6):
    """Central finite-difference gradient of :func:`prediction_loss` (test oracle)."""
    grad = np.zeros_like(theta.values)
    for i in range(theta.values.shape[0]):
        e = np.zeros_like(theta.values)
        e[i] = step
        fp = prediction_loss(theta.with_values(theta.values + e), batch, scene)
        fm = prediction_loss(theta.with_values(theta.values - e), batch, scene)
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First and second moment estimates of the Adam update."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def update_step(theta, batch, learning_rate, scene, state=None, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update in the unconstrained coordinates.

    Returns ``(theta', loss_before, optimizer_state)``. A zero gradient leaves
    ``theta`` unchanged on the first step.
    """
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    loss, g = prediction_loss(theta, batch, scene, with_grad=True)
    st = AdamState.zeros(g.shape[0]) if state is None else state
    st.t += 1
    st.m = beta1 * st.m + (1.0 - beta1) * g
    st.v = beta2 * st.v + (1.0 - beta2) * g * g
    m_hat = st.m / (1.0 - beta1**st.t)
    v_hat = st.v / (1.0 - beta2**st.t)
    step = learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    step[v_hat == 0] = 0.0
    return theta.with_values(theta.values - step), loss, st


# ---------------------------------------------------------------------------
# on-MPC training loop


@dataclass
class TrainingConfig:
    n_rollouts: int = 8
    rollout_length: int = 100
    rollouts_per_update: int = 4
    epochs: int = 50
    learning_rate: float = 0.05
    buffer_capacity: int = 400
    model_kind: str = "contactsdf"
    target_kind: str | None = None
    seed: int = 0
    mpc_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_rollouts < 0 or self.rollout_length < 1 or self.rollouts_per_update < 1 or self.epochs < 0:
            raise ValueError("invalid training schedule")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainingResult:
    theta: ParamVector
    loss_curve: list
    cost_curve: list
    env_steps: int
    buffer: list = field(default_factory=list)

    @property
    def params(self):
        return self.theta.to_params()


def on_mpc_training(env, initial_params, config, callback=None):
    """Alternate MPC rollouts on ``env`` with rounds of ``config.epochs`` updates.

    Loss rows are normalized by the buffer loss at the first update round and
    cost rows by the first rollout's accumulated cost-to-goal.
    """
    scene = env.scene
    theta = ParamVector.from_params(initial_params)
    rng = np.random.default_rng(config.seed)
    buffer = TransitionBuffer(config.buffer_capacity)
    loss_curve, cost_curve = [], []
    loss_ref = cost_ref = None
    opt = None
    steps = 0
    for k in range(config.n_rollouts):
        tp, tq = sample_target(scene, rng, config.target_kind)
        env.reset()
        mpc_cfg = MpcConfig.for_scene(scene, tp, tq, **config.mpc_overrides)
        params = theta.to_params()

        res = receding_horizon_rollout(env, params, mpc_cfg, config.rollout_length, config.model_kind)
        for q, u, qn in zip(res.states[:-1], res.controls, res.states[1:]):
            buffer.add(q, u, qn)
        steps += config.rollout_length
        acc = float(res.metrics["accumulated_cost_to_goal"])
        cost_ref = acc if cost_ref is None else cost_ref
        cost_curve.append({"rollout_idx": k, "cost": acc, "cost_norm": acc / cost_ref if cost_ref > 0 else 0.0})
        if callback is not None:
            callback("rollout", cost_curve[-1])
        if (k + 1) % config.rollouts_per_update:
            continue
        batch = buffer.batch()
        for _ in range(config.epochs):
            theta, loss, opt = update_step(theta, batch, config.learning_rate, scene, opt)
        final = prediction_loss(theta, batch, scene)
        loss_ref = loss_ref if loss_ref is not None else prediction_loss(
            ParamVector.from_params(initial_params), batch, scene
        )
        row = {
            "update_idx": len(loss_curve), "env_steps": steps, "loss": final,
            "loss_norm": final / loss_ref if loss_ref > 0 else 0.0, "mu": theta.to_params().mu,
            "sigma": theta.to_params().sigma,
        }
        loss_curve.append(row)
        if callback is not None:
            callback("update", row)
    return TrainingResult(theta, loss_curve, cost_curve, steps, buffer.batch())


def write_curves(result, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["update_idx", "loss_norm"])
        for r in result.loss_curve:
            w.writerow([r["update_idx"], repr(r["loss_norm"])])
    with open(directory / "cost_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rollout_idx", "cost_norm"])
        for r in result.cost_curve:
            w.writerow([r["rollout_idx"], repr(r["cost_norm"])])


def collect_random_transitions(env, n_steps, rng, scale=1.0):
    """Transitions under uniformly random bounded controls (fixture data)."""
    buf = []
    scene = env.scene
    for _ in range(n_steps):
        u = scale * rng.uniform(scene.u_lb, scene.u_ub)
        q = env.state
        env.step(u)
        buf.append(Transition(q, u, env.state))
    return buf


def collect_scripted_transitions(env, n_steps, rng, spin=0.4, noise=0.5):
    """Transitions where every finger presses towards the object with a tangential bias.

    Fingers are held near the object's mid-height, so most steps are in
    contact; ``spin`` sets the sign and size of the tangential component that
    turns the object and ``noise`` the uniform exploration added on top.
    """
    scene = env.scene
    buf = []
    for _ in range(n_steps):
        q = env.state
        fingers = q.robot_config.reshape(-1, 3)
        d = q.object_position - fingers
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-9)
        t = np.cross(d, [0.0, 0.0, 1.0])
        t /= np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-9)
        step = 0.6 * d + spin * t + noise * rng.uniform(-1.0, 1.0, d.shape)
        step[:, 2] = -2.0 * (fingers[:, 2] - q.object_position[2]) / np.max(scene.u_ub)
        u = np.clip(np.max(scene.u_ub) * step.ravel(), scene.u_lb, scene.u_ub)
        env.step(u)
        buf.append(Transition(q, u, env.state))
    return buf


__all__ = [
    "AdamState", "NonFiniteGradient", "NonFiniteLoss", "ParamVector", "SIGMA_FLOOR", "TrainingConfig",
    "TrainingResult", "Transition", "TransitionBuffer", "collect_random_transitions", "collect_scripted_transitions", "on_mpc_training",
    "params_from_json", "params_to_json", "planted_initial_params", "pose_loss", "prediction_loss", "prediction_loss_fd",
    "update_step", "write_curves",
]
