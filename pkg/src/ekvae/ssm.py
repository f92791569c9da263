"""Locally-linear latent transitions and closed-form filtering/smoothing.

The transition model mixes M learned base matrices with state/action
dependent softmax weights; the mixed (F, B, Q) serve directly as the local
linearisation in the extended Kalman prediction step, so no Taylor expansion
of an explicit dynamics function is ever needed. The update step and the
backward (RTS) recursion are the classic Kalman forms because the auxiliary
emission a = H z + r is linear Gaussian.

Everything here runs on autodiff tensors with an arbitrary leading batch
axis; gradients flow through the full recursions (means and covariances).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import gauss
from .autodiff import Tensor
from .nn import MLP, ParamStore

Q_FLOOR = 1e-6


@dataclass
class TransitionParams:
    """Base matrices {F, B, Q-factor} plus the mixing-weight network."""

    F_bases: Tensor  # (M, Dz, Dz)
    B_bases: Tensor  # (M, Dz, Du)
    Q_factors: Tensor  # (M, Dz, Dz); lower triangle used, Q = L L^T + floor*I
    alpha_net: Callable[[Tensor], Tensor]  # (.., Dz+Du) -> (.., M) logits

    @property
    def M(self) -> int:
        return self.F_bases.shape[0]

    @property
    def d_z(self) -> int:
        return self.F_bases.shape[-1]

    @property
    def d_u(self) -> int:
        return self.B_bases.shape[-1]


def make_transition(store: ParamStore, rng: np.random.Generator, d_z: int,
                    d_u: int, M: int, hidden: int = 64,
                    q_scale: float = 0.1) -> TransitionParams:
    """Fresh transition parameters: F bases near identity, small B, modest Q."""
    F0 = np.eye(d_z) + 0.05 * rng.standard_normal((M, d_z, d_z))
    B0 = 0.05 * rng.standard_normal((M, d_z, d_u))
    Q0 = np.tile(q_scale * np.eye(d_z), (M, 1, 1))
    Q0 += 0.01 * rng.standard_normal((M, d_z, d_z))
    net = MLP(store, "dyn.alpha", rng, [d_z + d_u, hidden, M], heads=1)
    return TransitionParams(
        F_bases=store.add("dyn.F_bases", F0),
        B_bases=store.add("dyn.B_bases", B0),
        Q_factors=store.add("dyn.Q_factors", Q0),
        alpha_net=net,
    )


@dataclass
class EmissionParams:
    """Time-invariant linear emission a = H z + r, r ~ N(0, diag R)."""

    H: Tensor  # (Da, Dz)
    R_logdiag: Tensor  # (Da,)
    disentangled: bool = False

    @property
    def d_a(self) -> int:
        return self.H.shape[0]

    def R(self) -> Tensor:
        return gauss.t_diag_embed(ad.exp(self.R_logdiag))


def rectangular_identity(d_a: int, d_z: int) -> np.ndarray:
    return np.eye(d_a, d_z)


def make_emission(store: ParamStore, d_a: int, d_z: int,
                  disentangled: bool = False, r_init: float = 0.01,
                  freeze_r: bool = False) -> EmissionParams:
    """Learned H (or frozen rectangular identity in disentangled mode)."""
    if disentangled:
        H = Tensor(rectangular_identity(d_a, d_z))
    else:
        H = store.add("dyn.H", rectangular_identity(d_a, d_z))
    R_logdiag = store.add("dyn.R_logdiag", np.full(d_a, np.log(r_init)))
    if freeze_r:
        store.freeze("dyn.R_logdiag")
    return EmissionParams(H=H, R_logdiag=R_logdiag, disentangled=disentangled)


@dataclass
class InitialBelief:
    """Broad fixed prior for the filter's t=1 predictive distribution."""

    m0: np.ndarray
    P0: np.ndarray

    @classmethod
    def broad(cls, d_z: int, sigma0: float = 10.0) -> "InitialBelief":
        return cls(np.zeros(d_z), sigma0 ** 2 * np.eye(d_z))


@dataclass
class BeliefTrajectory:
    """Per-timestep beliefs; lists of (mean, cov) Tensor pairs of length T."""

    predicted: list = field(default_factory=list)
    filtered: list = field(default_factory=list)
    smoothed: list = field(default_factory=list)
    F_used: list = field(default_factory=list)  # F_used[t] linearised t-1 -> t
    gains: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.filtered)


# -- transition ----------------------------------------------------------------

def mix_alpha(params: TransitionParams, z: Tensor, u: Tensor) -> Tensor:
    """Softmax mixture weights alpha(z, u), batched; sums to 1 on the last axis."""
    zu = ad.concat([z, u], axis=-1)
    return ad.softmax(params.alpha_net(zu))


def linearize(params: TransitionParams, z: Tensor, u: Tensor):
    """Mixed (F, B, Q) at the given state/action; Q is symmetric PD."""
    alpha = mix_alpha(params, z, u)  # (.., M)
    aw = ad.reshape(alpha, alpha.shape + (1, 1))  # (.., M, 1, 1)
    d = params.d_z
    mask = np.tril(np.ones((d, d)))
    L = ad.mul(params.Q_factors, mask)
    Q_bases = ad.add(ad.matmul(L, ad.transpose_last(L)), Q_FLOOR * np.eye(d))
    F = ad.sum_(ad.mul(aw, params.F_bases), axis=-3)
    B = ad.sum_(ad.mul(aw, params.B_bases), axis=-3)
    Q = ad.sum_(ad.mul(aw, Q_bases), axis=-3)
    return F, B, Q


def transition_density(params: TransitionParams, z: Tensor, u: Tensor):
    """Mean and covariance of p(z' | z, u) = N(F z + B u, Q)."""
    F, B, Q = linearize(params, z, u)
    mean = ad.add(ad.matvec(F, z), ad.matvec(B, u))
    return mean, Q


# -- filtering / smoothing -------------------------------------------------------

def ekf_predict(mean: Tensor, cov: Tensor, params: TransitionParams, u: Tensor):
    """Prediction step linearised at the current mean.

    Returns (pred_mean, pred_cov, F) with pred_cov = F P F^T + Q.
    """
    F, B, Q = linearize(params, mean, u)
    m = ad.add(ad.matvec(F, mean), ad.matvec(B, u))
    P = ad.add(ad.matmul(ad.matmul(F, cov), ad.transpose_last(F)), Q)
    return m, P, F


def kalman_update(pred_mean: Tensor, pred_cov: Tensor, emission: EmissionParams,
                  a_obs: Tensor):
    """Classic Kalman update against the linear emission, in Joseph form."""
    H = emission.H
    Ht = ad.transpose_last(H)
    R = emission.R()
    S = ad.add(ad.matmul(ad.matmul(H, pred_cov), Ht), R)
    try:
        S_inv = ad.inv(S)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("innovation covariance is singular") from None
    K = ad.matmul(ad.matmul(pred_cov, Ht), S_inv)
    innov = ad.sub(a_obs, ad.matvec(H, pred_mean))
    mean = ad.add(pred_mean, ad.matvec(K, innov))
    d_z = pred_mean.shape[-1]
    ImKH = ad.sub(np.eye(d_z), ad.matmul(K, H))
    cov = ad.add(
        ad.matmul(ad.matmul(ImKH, pred_cov), ad.transpose_last(ImKH)),
        ad.matmul(ad.matmul(K, R), ad.transpose_last(K)),
    )
    return mean, cov


def _symmetrize(P: Tensor) -> Tensor:
    return ad.mul(ad.add(P, ad.transpose_last(P)), 0.5)


def filter_sequence(init: InitialBelief, params: TransitionParams,
                    emission: EmissionParams, a_seq: Tensor,
                    u_seq: Tensor) -> BeliefTrajectory:
    """Forward pass: predicted and filtered beliefs for t = 1..T.

    ``a_seq`` is (.., T, Da) and ``u_seq`` (.., T, Du); u at the final index
    is unused. The t=1 predicted belief is the fixed broad initial prior.
    """
    T = a_seq.shape[-2]
    batch = a_seq.shape[:-2]
    traj = BeliefTrajectory()
    m = Tensor(np.broadcast_to(init.m0, batch + init.m0.shape).copy())
    P = Tensor(np.broadcast_to(init.P0, batch + init.P0.shape).copy())
    for t in range(T):
        if t > 0:
            u_t = ad.getitem(u_seq, (..., t - 1, slice(None)))
            m, P, F = ekf_predict(m, P, params, u_t)
            P = _symmetrize(P)
            traj.F_used.append(F)
        else:
            traj.F_used.append(None)
        traj.predicted.append((m, P))
        a_t = ad.getitem(a_seq, (..., t, slice(None)))
        m, P = kalman_update(m, P, emission, a_t)
        P = _symmetrize(P)
        traj.filtered.append((m, P))
    return traj


def smooth_sequence(traj: BeliefTrajectory, params: TransitionParams) -> BeliefTrajectory:
    """Backward RTS recursion; fills ``traj.smoothed`` and ``traj.gains``."""
    if not traj.filtered:
        raise ValueError("filter pass must be run before smoothing")
    T = traj.T
    smoothed = [None] * T
    gains = [None] * T
    smoothed[T - 1] = traj.filtered[T - 1]
    for t in range(T - 2, -1, -1):
        m_f, P_f = traj.filtered[t]
        m_pred, P_pred = traj.predicted[t + 1]
        F = traj.F_used[t + 1]
        try:
            P_pred_inv = ad.inv(P_pred)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(
                f"predicted covariance at t={t + 2} is singular"
            ) from None
        G = ad.matmul(ad.matmul(P_f, ad.transpose_last(F)), P_pred_inv)
        m_s_next, P_s_next = smoothed[t + 1]
        m_s = ad.add(m_f, ad.matvec(G, ad.sub(m_s_next, m_pred)))
        P_s = ad.add(P_f, ad.matmul(ad.matmul(G, ad.sub(P_s_next, P_pred)),
                                    ad.transpose_last(G)))
        smoothed[t] = (m_s, _symmetrize(P_s))
        gains[t] = G
    traj.smoothed = smoothed
    traj.gains = gains
    return traj
