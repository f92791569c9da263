"""The full model: auxiliary-variable VAE wrapped around the linear-Gaussian
state space, a learned hierarchical start-state prior, and the rate/distortion
objective terms in both smoother and filter flavours.

Observation path: x --encoder--> q(a|x) --sample--> a, treated as an exact
pseudo-observation of the latent state through a = H z + r. Reconstruction
goes back through the decoder p(x|a). The rate couples the encoder to the
dynamics via closed-form Gaussian KLs evaluated at single samples.

Parameter groups (ParamStore name prefixes): ``enc`` encoder, ``dec`` decoder,
``dyn`` transition + emission, ``prior0`` start-prior net p(z1|zeta),
``post0`` start-posterior net q(zeta|z1). The trainer masks on these tags.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import gauss, ssm
from .autodiff import Tensor
from .nn import MLP, ParamStore

DEC_VAR_FLOOR = 1e-3


@dataclass
class ModelConfig:
    d_x: int = 256
    d_a: int = 2
    d_z: int = 3
    d_u: int = 1
    n_bases: int = 16
    d_zeta: int = 3
    enc_hidden: tuple = (128, 128, 128)
    dec_hidden: tuple = (128, 128, 128)
    alpha_hidden: int = 64
    vhp_hidden: tuple = (64, 64)
    disentangled: bool = False
    freeze_r: bool = False
    dec_var: float | None = None
    q_var_floor: float = 0.0
    sigma0: float = 10.0
    r_init: float = 0.01
    q_scale: float = 0.1

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("enc_hidden", "dec_hidden", "vhp_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("enc_hidden", "dec_hidden", "vhp_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class EkvaeModel:
    """Encoder/decoder, locally-linear dynamics, and the start-state prior."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE4]))
        c = cfg
        self.enc = MLP(self.store, "enc.net", rng,
                       [c.d_x, *c.enc_hidden, c.d_a], heads=2, logvar_bias=-2.0)
        if c.dec_var is not None and c.dec_var <= 0.0:
            raise ValueError(f"dec_var must be positive, got {c.dec_var}")
        if c.q_var_floor < 0.0:
            raise ValueError(
                f"q_var_floor must be nonnegative, got {c.q_var_floor}")
        # pinned variance keeps the reconstruction term proportional to the
        # pixel MSE; a learned per-pixel variance can silently absorb
        # reconstruction error instead of fixing the code
        dec_heads = 2 if c.dec_var is None else 1
        self.dec = MLP(self.store, "dec.net", rng,
                       [c.d_a, *c.dec_hidden, c.d_x], heads=dec_heads,
                       logvar_bias=-2.0)
        self.trans = ssm.make_transition(self.store, rng, c.d_z, c.d_u,
                                         c.n_bases, hidden=c.alpha_hidden,
                                         q_scale=c.q_scale)
        self.emis = ssm.make_emission(self.store, c.d_a, c.d_z,
                                      disentangled=c.disentangled,
                                      r_init=c.r_init, freeze_r=c.freeze_r)
        # q(zeta|z1) and p(z1|zeta); p(zeta) is the fixed standard normal
        self.post0 = MLP(self.store, "post0.net", rng,
                         [c.d_z, *c.vhp_hidden, c.d_zeta], heads=2)
        self.prior0 = MLP(self.store, "prior0.net", rng,
                          [c.d_zeta, *c.vhp_hidden, c.d_z], heads=2)
        self.init = ssm.InitialBelief.broad(c.d_z, sigma0=c.sigma0)

    # convenience dims
    @property
    def d_x(self):
        return self.cfg.d_x

    @property
    def d_a(self):
        return self.cfg.d_a

    @property
    def d_z(self):
        return self.cfg.d_z

    @property
    def d_u(self):
        return self.cfg.d_u


def draw_noise(rng: np.random.Generator, batch: tuple, T: int,
               cfg: ModelConfig) -> dict:
    """All stochastic inputs for one objective evaluation, drawn up front.

    Freezing this dict makes every objective below a deterministic function
    of the parameters, which is what the finite-difference tests rely on.
    """
    return {
        "a": rng.standard_normal(batch + (T, cfg.d_a)),
        "z": rng.standard_normal(batch + (T, cfg.d_z)),
        "zeta": rng.standard_normal(batch + (cfg.d_zeta,)),
    }


# -- encoder / decoder -----------------------------------------------------------

def encoder_dist(model: EkvaeModel, x):
    """Encoder Gaussian q(a|x) as (mean, logvar), with the variance floor.

    The floor (var = exp(logvar) + q_var_floor, kept differentiable) stops
    the posterior variance from collapsing under reconstruction pressure;
    a collapsed q raises the rate floor through log(sigma_p/sigma_q) and
    traps the dynamics in a broad-noise optimum.
    """
    mean, logvar = model.enc(ad._lift(x))
    if model.cfg.q_var_floor > 0.0:
        logvar = ad.log(ad.add(ad.exp(logvar), model.cfg.q_var_floor))
    return mean, logvar


def encode_sequence(model: EkvaeModel, x_seq, eps=None, rng=None):
    """Per-frame diagonal Gaussians q(a_t|x_t) and one reparameterized sample.

    ``x_seq`` is (.., T, D_x). Returns (a_samples, (mean, logvar)).
    """
    x_seq = ad._lift(x_seq)
    mean, logvar = encoder_dist(model, x_seq)
    if eps is None:
        if rng is None:
            raise ValueError("encode_sequence needs eps or rng")
        eps = rng.standard_normal(mean.shape)
    std = ad.exp(ad.mul(logvar, 0.5))
    a = ad.add(mean, ad.mul(std, eps))
    return a, (mean, logvar)


def decode(model: EkvaeModel, a):
    """Decoder Gaussian p(x|a).

    Variance is either learned per pixel (floored at 1e-3) or pinned to the
    configured constant.
    """
    if model.cfg.dec_var is not None:
        mean = model.dec(ad._lift(a))
        return mean, Tensor(np.asarray(model.cfg.dec_var))
    mean, logvar = model.dec(ad._lift(a))
    var = ad.add(ad.exp(logvar), DEC_VAR_FLOOR)
    return mean, var


def distortion(model: EkvaeModel, x_seq, a_samples) -> Tensor:
    """-sum_t log p(x_t|a_t), per sequence; mean over any leading batch."""
    mean, var = decode(model, a_samples)
    ll = gauss.t_logpdf_from_var(ad._lift(x_seq), mean, var)  # (.., T)
    per_seq = ad.sum_(ll, axis=-1)
    return ad.mul(ad.mean_(per_seq), -1.0)


# -- start-state prior ------------------------------------------------------------

def vhp_term(model: EkvaeModel, z1, eps_zeta=None, rng=None) -> Tensor:
    """Single-sample estimate of E_q(zeta|z1)[log p(z1|zeta) p(zeta) / q(zeta|z1)].

    ``z1`` is (.., D_z); returns the batch-mean scalar.
    """
    z1 = ad._lift(z1)
    q_mean, q_logvar = model.post0(z1)
    if eps_zeta is None:
        if rng is None:
            raise ValueError("vhp_term needs eps_zeta or rng")
        eps_zeta = rng.standard_normal(q_mean.shape)
    zeta = ad.add(q_mean, ad.mul(ad.exp(ad.mul(q_logvar, 0.5)), eps_zeta))
    p_mean, p_logvar = model.prior0(zeta)
    log_p_z1 = gauss.t_logpdf_diag(z1, p_mean, p_logvar)
    log_p_zeta = gauss.t_logpdf_diag(zeta, Tensor(np.zeros(q_mean.shape[-1])),
                                     Tensor(np.zeros(q_mean.shape[-1])))
    log_q_zeta = gauss.t_logpdf_diag(zeta, q_mean, q_logvar)
    return ad.mean_(ad.sub(ad.add(log_p_z1, log_p_zeta), log_q_zeta))


# -- rate -------------------------------------------------------------------------

def _sample_marginal(mean: Tensor, cov: Tensor, eps) -> Tensor:
    L = gauss.t_chol_jitter(cov, "posterior marginal covariance")
    return ad.add(mean, ad.matvec(L, eps))


def _aux_predictive(model: EkvaeModel, z_prev: Tensor, u_prev: Tensor):
    """Closed-form p(a_t | z_{t-1}, u_{t-1}) under the local linearisation.

    Marginalising z_t out of the transition followed by the linear emission
    gives N(H (F z + B u), H Q H^T + R) with (F, B, Q) mixed at z_prev.
    """
    F, B, Q = ssm.linearize(model.trans, z_prev, u_prev)
    H = model.emis.H
    Ht = ad.transpose_last(H)
    mean = ad.matvec(H, ad.add(ad.matvec(F, z_prev), ad.matvec(B, u_prev)))
    cov = ad.add(ad.matmul(ad.matmul(H, Q), Ht), model.emis.R())
    return mean, cov


def _rate(model: EkvaeModel, x_seq, u_seq, a_samples, eps, mode: str,
          q_dists=None) -> Tensor:
    """Shared KL decomposition; ``mode`` picks the z-marginal family."""
    x_seq = ad._lift(x_seq)
    u_seq = ad._lift(u_seq)
    a_samples = ad._lift(a_samples)
    T = x_seq.shape[-2]
    if q_dists is None:
        q_dists = encoder_dist(model, x_seq)
    q_mean, q_logvar = q_dists
    q_var = ad.exp(q_logvar)

    traj = ssm.filter_sequence(model.init, model.trans, model.emis,
                               a_samples, u_seq)
    if mode == "smoother":
        ssm.smooth_sequence(traj, model.trans)
        marginals = traj.smoothed
    elif mode == "filter":
        marginals = traj.filtered
    else:
        raise ValueError(f"unknown rate mode: {mode!r}")

    def q_at(t):
        m = ad.getitem(q_mean, (..., t, slice(None)))
        v = ad.getitem(q_var, (..., t, slice(None)))
        return m, v

    def z_at(t):
        m, P = marginals[t]
        return _sample_marginal(m, P, eps["z"][..., t, :])

    z1 = z_at(0)
    H = model.emis.H

    # initial terms: a1 against the emission at z1, the start marginal
    # against the learned prior p(z1|zeta), and q(zeta|z1) against N(0, I)
    qm1, qv1 = q_at(0)
    total = gauss.t_kl_full(qm1, gauss.t_diag_embed(qv1),
                            ad.matvec(H, z1), model.emis.R())

    zeta_qm, zeta_qlv = model.post0(z1)
    zeta = ad.add(zeta_qm, ad.mul(ad.exp(ad.mul(zeta_qlv, 0.5)), eps["zeta"]))
    p0_mean, p0_logvar = model.prior0(zeta)
    m1, P1 = marginals[0]
    total = ad.add(total, gauss.t_kl_full(
        m1, P1, p0_mean, gauss.t_diag_embed(ad.exp(p0_logvar))))
    total = ad.add(total, gauss.t_kl_diag_std(zeta_qm, zeta_qlv))

    for t in range(1, T):
        z_prev = z_at(t - 1)
        u_prev = ad.getitem(u_seq, (..., t - 1, slice(None)))
        p_mean, p_cov = _aux_predictive(model, z_prev, u_prev)
        qm, qv = q_at(t)
        total = ad.add(total, gauss.t_kl_full(qm, gauss.t_diag_embed(qv),
                                              p_mean, p_cov))
        if mode == "smoother":
            ms, Ps = traj.smoothed[t - 1]
            mf, Pf = traj.filtered[t - 1]
            total = ad.add(total, gauss.t_kl_full(ms, Ps, mf, Pf))
    return ad.mean_(total)


def rate_smoother(model: EkvaeModel, x_seq, u_seq, a_samples, eps=None,
                  rng=None) -> Tensor:
    """Rate with z sampled from smoothed marginals, including the
    smoothed-vs-filtered KL terms."""
    if eps is None:
        eps = _default_eps(model, x_seq, rng)
    return _rate(model, x_seq, u_seq, a_samples, eps, "smoother")


def rate_filter(model: EkvaeModel, x_seq, u_seq, a_samples, eps=None,
                rng=None) -> Tensor:
    """Rate with z sampled from filtered marginals; no smoothing pass."""
    if eps is None:
        eps = _default_eps(model, x_seq, rng)
    return _rate(model, x_seq, u_seq, a_samples, eps, "filter")


def _default_eps(model, x_seq, rng):
    if rng is None:
        raise ValueError("rate term needs eps or rng")
    shape = np.shape(x_seq.data if isinstance(x_seq, Tensor) else x_seq)
    return draw_noise(rng, shape[:-2], shape[-2], model.cfg)


def elbo(model: EkvaeModel, x_seq, u_seq, mode: str = "smoother", eps=None,
         rng=None) -> dict:
    """Batch-mean distortion and rate; elbo = -distortion - rate."""
    if eps is None:
        shape = np.shape(x_seq.data if isinstance(x_seq, Tensor) else x_seq)
        eps = draw_noise(rng, shape[:-2], shape[-2], model.cfg) if rng is not None else None
        if eps is None:
            raise ValueError("elbo needs eps or rng")
    a, q_dists = encode_sequence(model, x_seq, eps=eps["a"])
    d = distortion(model, x_seq, a)
    r = _rate(model, x_seq, u_seq, a, eps, mode, q_dists=q_dists)
    return {"elbo": ad.mul(ad.add(d, r), -1.0), "distortion": d, "rate": r}


# -- generation / prediction ------------------------------------------------------

def generate(model: EkvaeModel, T: int, n: int, seed: int,
             actions: np.ndarray | None = None) -> np.ndarray:
    """Ancestral sampling: zeta, z1, transition rollout, emission, decode.

    Actions default to zeros. Returns (n, T, D_x) pixels clipped to [0, 1].
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E]))
    c = model.cfg
    if actions is None:
        actions = np.zeros((n, T, c.d_u))
    zeta = rng.standard_normal((n, c.d_zeta))
    p_mean, p_logvar = model.prior0(Tensor(zeta))
    z = p_mean.data + np.exp(0.5 * p_logvar.data) * rng.standard_normal((n, c.d_z))
    H = model.emis.H.data
    R_std = np.exp(0.5 * model.emis.R_logdiag.data)
    frames = np.empty((n, T, c.d_x))
    for t in range(T):
        a = z @ H.T + R_std * rng.standard_normal((n, c.d_a))
        x_mean, _ = decode(model, Tensor(a))
        frames[:, t] = np.clip(x_mean.data, 0.0, 1.0)
        if t < T - 1:
            u_t = actions[:, t]
            F, B, Q = ssm.linearize(model.trans, Tensor(z), Tensor(u_t))
            mean = (F.data @ z[..., None])[..., 0] + (B.data @ u_t[..., None])[..., 0]
            L = np.linalg.cholesky(Q.data)
            z = mean + (L @ rng.standard_normal((n, c.d_z, 1)))[..., 0]
    return frames


def predict(model: EkvaeModel, x_prefix: np.ndarray, u_actions: np.ndarray,
            T_total: int) -> np.ndarray:
    """Conditioned rollout: smooth the prefix, start from the smoothed mean
    at t=1, propagate transition means forward, decode means.

    ``x_prefix`` is (.., T_pre, D_x); ``u_actions`` must cover at least
    T_total - 1 steps. Deterministic (encoder/decoder means, no noise).
    Returns (.., T_total, D_x) clipped to [0, 1].
    """
    c = model.cfg
    x_prefix = np.asarray(x_prefix, dtype=np.float64)
    u_actions = np.asarray(u_actions, dtype=np.float64)
    T_pre = x_prefix.shape[-2]
    if u_actions.shape[-2] < T_total - 1:
        raise ValueError(
            f"need {T_total - 1} actions for a {T_total}-step rollout, "
            f"got {u_actions.shape[-2]}"
        )
    a_mean, _ = model.enc(Tensor(x_prefix))
    traj = ssm.filter_sequence(model.init, model.trans, model.emis,
                               a_mean, Tensor(u_actions[..., :T_pre, :]))
    ssm.smooth_sequence(traj, model.trans)
    z = traj.smoothed[0][0].data  # smoothed mean at the first step
    H = model.emis.H.data
    frames = np.empty(x_prefix.shape[:-2] + (T_total, c.d_x))
    for t in range(T_total):
        a = z @ H.T
        x_mean, _ = decode(model, Tensor(a))
        frames[..., t, :] = np.clip(x_mean.data, 0.0, 1.0)
        if t < T_total - 1:
            u_t = u_actions[..., t, :]
            F, B, _ = ssm.linearize(model.trans, Tensor(z), Tensor(u_t))
            z = (F.data @ z[..., None])[..., 0] + (B.data @ u_t[..., None])[..., 0]
    return frames


# -- persistence ------------------------------------------------------------------

def dataset_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_model(model: EkvaeModel, path: str, extra: dict | None = None):
    """Checkpoint plus a JSON sidecar (<path>.json) with config and flags."""
    model.store.save(path)
    sidecar = {"version": 1, "config": model.cfg.to_dict()}
    if extra:
        sidecar.update(extra)
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, sort_keys=True, indent=1)


def load_model(path: str) -> EkvaeModel:
    with open(path + ".json") as f:
        sidecar = json.load(f)
    cfg = ModelConfig.from_dict(sidecar["config"])
    model = EkvaeModel(cfg, seed=0)
    model.store.load(path)
    return model
