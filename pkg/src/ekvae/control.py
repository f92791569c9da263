"""Goal encoding and policy learning in the disentangled latent space.

Rewards are negative squared distances on a block of latent dimensions:
positions live in the first D_a dimensions (pinned there by the frozen
rectangular-identity emission), velocities in the remaining ones. Policies
are trained by pathwise gradients through the differentiable transition
model; no value function, no likelihood-ratio estimators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import gauss, model as mdl, pendulum, ssm
from .autodiff import Tape, Tensor
from .nn import MLP, ParamStore


@dataclass
class LatentGoal:
    kind: str  # "position" | "velocity"
    value: np.ndarray

    def __post_init__(self):
        if self.kind not in ("position", "velocity"):
            raise ValueError(f"unknown goal kind: {self.kind!r}")
        self.value = np.atleast_1d(np.asarray(self.value, dtype=np.float64))


class Policy:
    """Gaussian policy u = u_max * tanh(mean + std * eps) over latent states."""

    def __init__(self, d_z: int, d_u: int, u_max: float,
                 hidden: tuple = (64, 64), seed: int = 0):
        self.store = ParamStore()
        self.d_z = d_z
        self.d_u = d_u
        self.u_max = u_max
        self.hidden = tuple(hidden)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x90]))
        self.net = MLP(self.store, "policy.net", rng,
                       [d_z, *hidden, d_u], heads=2, logvar_bias=-2.0)

    def action(self, z, eps=None) -> Tensor:
        """Squashed action; deterministic (mean action) when eps is None."""
        mean, logvar = self.net(ad._lift(z))
        if eps is not None:
            mean = ad.add(mean, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))
        return ad.mul(ad.tanh(mean), self.u_max)

    def save(self, path: str):
        self.store.save(path)
        meta = {"d_z": self.d_z, "d_u": self.d_u, "u_max": self.u_max,
                "hidden": list(self.hidden)}
        with open(path + ".json", "w") as f:
            json.dump(meta, f, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "Policy":
        with open(path + ".json") as f:
            meta = json.load(f)
        p = cls(meta["d_z"], meta["d_u"], meta["u_max"],
                hidden=tuple(meta["hidden"]))
        p.store.load(path)
        return p


# -- goals ------------------------------------------------------------------------

def encode_goal_position(model: mdl.EkvaeModel, x_goal: np.ndarray) -> LatentGoal:
    """Goal = encoder mean of a single target frame."""
    x_goal = np.asarray(x_goal, dtype=np.float64).reshape(-1)
    mean, _ = model.enc(Tensor(x_goal))
    return LatentGoal("position", mean.data)


def encode_goal_velocity(model: mdl.EkvaeModel, x_seq: np.ndarray,
                         u_seq: np.ndarray) -> LatentGoal:
    """Goal = velocity block of the smoothed latents of a demonstration,
    averaged over interior timesteps (the ends carry boundary effects)."""
    x_seq = np.asarray(x_seq, dtype=np.float64)
    T = x_seq.shape[-2]
    if T < 5:
        raise ValueError(f"velocity demonstration needs at least 5 frames, got {T}")
    a_mean, _ = model.enc(Tensor(x_seq))
    traj = ssm.filter_sequence(model.init, model.trans, model.emis,
                               a_mean, Tensor(np.asarray(u_seq, dtype=np.float64)))
    ssm.smooth_sequence(traj, model.trans)
    z = np.stack([m.data for m, _ in traj.smoothed], axis=-2)
    interior = z[..., 2:T - 2, model.d_a:]
    value = interior.mean(axis=tuple(range(interior.ndim - 1)))
    return LatentGoal("velocity", value)


def reward(z, goal: LatentGoal, d_a: int):
    """Negative squared distance on the goal's latent block; differentiable.

    Position goals read dims 1..D_a, velocity goals the rest; any other
    dimension is ignored exactly. ``z`` may be a Tensor or an array.
    """
    z = ad._lift(z)
    if goal.kind == "position":
        block = ad.getitem(z, (..., slice(0, d_a)))
    else:
        block = ad.getitem(z, (..., slice(d_a, None)))
    if block.shape[-1] != goal.value.shape[-1]:
        raise ValueError(
            f"goal dim {goal.value.shape[-1]} does not match latent block "
            f"{block.shape[-1]}"
        )
    diff = ad.sub(block, goal.value)
    return ad.mul(ad.sum_(ad.mul(diff, diff), axis=-1), -1.0)


# -- policy training ---------------------------------------------------------------

def _require_disentangled(model: mdl.EkvaeModel):
    if not model.cfg.disentangled:
        raise ValueError(
            "latent rewards need the disentangled emission (frozen "
            "rectangular-identity H); this model was trained without it"
        )


def latent_start_states(model: mdl.EkvaeModel, frames: np.ndarray,
                        actions: np.ndarray, n: int,
                        rng: np.random.Generator,
                        prefix_len: int = 5) -> np.ndarray:
    """Draw start states by filtering random dataset prefixes; returns the
    filtered mean at the end of each prefix, (n, D_z)."""
    idx = rng.integers(0, frames.shape[0], size=n)
    a_mean, _ = model.enc(Tensor(frames[idx, :prefix_len]))
    traj = ssm.filter_sequence(model.init, model.trans, model.emis,
                               a_mean, Tensor(actions[idx, :prefix_len]))
    return traj.filtered[-1][0].data


def policy_objective(model: mdl.EkvaeModel, policy: Policy, z0,
                     goal: LatentGoal, horizon: int, eps_u, eps_z) -> Tensor:
    """J = sum over the horizon of mean next-state reward, reparameterized.

    ``z0`` is (n, D_z); ``eps_u`` (n, horizon-1, D_u); ``eps_z`` the same for
    the transition noise. Differentiable w.r.t. policy parameters.
    """
    _require_disentangled(model)
    z = ad._lift(z0)
    J = Tensor(np.zeros(()))
    for t in range(horizon - 1):
        u = policy.action(z, eps=eps_u[..., t, :])
        mean, Q = ssm.transition_density(model.trans, z, u)
        L = gauss.t_chol_jitter(Q, "transition covariance")
        z = ad.add(mean, ad.matvec(L, eps_z[..., t, :]))
        J = ad.add(J, ad.mean_(reward(z, goal, model.d_a)))
    return J


def train_policy(model: mdl.EkvaeModel, goal: LatentGoal, frames: np.ndarray,
                 actions: np.ndarray, horizon: int = 15, episodes: int = 300,
                 seed: int = 0, batch: int = 64, lr: float = 3e-3,
                 u_max: float | None = None, hidden: tuple = (64, 64),
                 log=None) -> Policy:
    """Gradient ascent on the rollout objective; keeps the iterate that
    scores best on a held-out set of start states."""
    _require_disentangled(model)
    if u_max is None:
        u_max = pendulum.DEFAULTS["u_max"]
    policy = Policy(model.d_z, model.d_u, u_max, hidden=hidden, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9011]))
    val_z0 = latent_start_states(model, frames, actions, 256, rng)
    val_eps_u = rng.standard_normal((256, horizon - 1, model.d_u))
    val_eps_z = rng.standard_normal((256, horizon - 1, model.d_z))

    def validation_J():
        return float(policy_objective(model, policy, val_z0, goal, horizon,
                                      val_eps_u, val_eps_z).data)

    best_J = validation_J()
    best = {n: p.data.copy() for n, p in policy.store.params.items()}
    for it in range(episodes):
        z0 = latent_start_states(model, frames, actions, batch, rng)
        eps_u = rng.standard_normal((batch, horizon - 1, model.d_u))
        eps_z = rng.standard_normal((batch, horizon - 1, model.d_z))
        with Tape() as tape:
            J = policy_objective(model, policy, z0, goal, horizon, eps_u, eps_z)
            if not np.isfinite(J.data):
                raise FloatingPointError(
                    f"policy objective diverged at iteration {it} (J={J.data})"
                )
            loss = ad.mul(J, -1.0)
            grads = tape.backward(loss, policy.store.tensors())
        policy.store.adam_step(dict(zip(policy.store.names(), grads)), lr)
        if (it + 1) % 10 == 0 or it == episodes - 1:
            v = validation_J()
            if log:
                log({"iter": it + 1, "J_train": float(J.data), "J_val": v})
            if v > best_J:
                best_J = v
                best = {n: p.data.copy() for n, p in policy.store.params.items()}
    for n, p in policy.store.params.items():
        p.data[...] = best[n]
    return policy


# -- simulator rollouts --------------------------------------------------------------

def rollout_on_simulator(model: mdl.EkvaeModel, policy, goal_angle: float,
                         episodes: int = 100, T: int = 30, seed: int = 0,
                         start_angle_spread: float = 0.5,
                         start_speed: float = 0.5,
                         success_tol: float = 0.3,
                         constants: dict | None = None) -> dict:
    """Closed-loop test on the true pendulum: render, encode, filter, act.

    ``policy`` is either a Policy (mean action used) or a callable
    z -> action array (e.g. a random baseline). Success means every one of
    the final 3 steps is within ``success_tol`` rad of the goal angle.
    """
    c = dict(pendulum.DEFAULTS)
    if constants:
        c.update(constants)
    successes = 0
    final_errors = []
    for ep in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, ep]))
        phi = pendulum.wrap_angle(
            goal_angle + rng.uniform(-start_angle_spread, start_angle_spread))
        state = pendulum.PendulumState(phi, rng.uniform(-start_speed, start_speed))
        m, P = Tensor(model.init.m0.copy()), Tensor(model.init.P0.copy())
        u_prev = None
        errors = []
        for t in range(T):
            frame = pendulum.render(state.phi)
            a_mean, _ = model.enc(Tensor(frame))
            if u_prev is not None:
                m, P, _ = ssm.ekf_predict(m, P, model.trans, Tensor(u_prev))
            m, P = ssm.kalman_update(m, P, model.emis, a_mean)
            if isinstance(policy, Policy):
                u = np.atleast_1d(policy.action(m).data)
            else:
                u = np.atleast_1d(policy(m.data, rng))
            state = pendulum.step(state, float(u[0]), dt=c["dt"], mass=c["mass"],
                                  length=c["length"], gravity=c["gravity"],
                                  friction=c["friction"])
            errors.append(abs(pendulum.wrap_angle(state.phi - goal_angle)))
            u_prev = u
        final = errors[-3:]
        final_errors.append(final[-1])
        if all(e <= success_tol for e in final):
            successes += 1
    return {
        "success_rate": successes / episodes,
        "episodes": episodes,
        "mean_final_error": float(np.mean(final_errors)),
        "horizon": T,
        "goal_angle": goal_angle,
        "tolerance": success_tol,
    }


def random_policy(u_max: float):
    """Baseline: uniform torque, ignoring the state."""
    def act(z, rng):
        return rng.uniform(-u_max, u_max, size=1)
    return act
