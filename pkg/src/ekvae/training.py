"""Training loops: the constrained optimizer with multiplicative Lagrange
multiplier updates and a two-phase schedule, plus a beta-annealing baseline.

The constrained trainer minimizes L = rate + lambda * (distortion - d0) and
steers lambda with a multiplicative-exponential rule so the distortion
constraint D <= d0 is driven to satisfaction first (reconstruction phase),
after which the rate is compressed. The trainer is model-agnostic: it only
needs batch-mean (distortion, rate) tensors and parameter-group tags.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import Tape

EXP_CLAMP = 50.0
LAM_MAX = 1e6  # compounding e^50 steps overflow float64 within ~15 updates
INITIAL_GROUPS = ("enc", "dec")  # trained during the reconstruction phase
DELTA_NEG_FLOOR_FRAC = 0.9  # fraction of the stability bound 2/(nu*tau1)


@dataclass
class CoConfig:
    nu: float = 300.0
    tau1: float = 10.0
    tau2: float = 0.01
    alpha_ema: float = 0.9
    d0_override: float | None = None
    lr: float = 1e-3
    epochs: int = 300

    @classmethod
    def from_dict(cls, d: dict) -> "CoConfig":
        return cls(**{k: d[k] for k in asdict(cls()) if k in d})


@dataclass
class TrainerState:
    lam: float = 1.0
    d_ema: float | None = None  # moving-average distortion; None until batch 1
    phase: str = "initial"
    step: int = 0
    d0: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerState":
        return cls(**d)


def f_lambda(lam: float, delta: float, tau1: float, tau2: float) -> float:
    """Step-direction factor for the multiplier update.

    (1 - H(delta)) * tanh(tau1 * (1/lam - 1)) - tau2 * H(delta), with the
    Heaviside convention H(0) = 1 (irrelevant to the update at delta = 0).
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    h = 1.0 if delta >= 0 else 0.0
    return (1.0 - h) * float(np.tanh(tau1 * (1.0 / lam - 1.0))) - tau2 * h


def lambda_update(lam: float, delta: float, nu: float, tau1: float,
                  tau2: float) -> float:
    """lam * exp(-nu * f_lambda(lam, delta) * delta), exponent clamped to +-50.

    The multiplier is additionally capped at LAM_MAX: while the constraint is
    badly violated the exponent saturates at +50 every step and the product
    would overflow within a handful of updates. At the cap the objective is
    already distortion-dominated, so the cap changes nothing downstream.
    """
    exponent = -nu * f_lambda(lam, delta, tau1, tau2) * delta
    if abs(exponent) > EXP_CLAMP:
        # static message so the warnings machinery deduplicates the spam
        warnings.warn(f"multiplier update exponent clamped to +-{EXP_CLAMP}",
                      RuntimeWarning, stacklevel=2)
        exponent = float(np.clip(exponent, -EXP_CLAMP, EXP_CLAMP))
    return min(lam * float(np.exp(exponent)), LAM_MAX)


def ema_update(d_ema: float | None, d_batch: float, alpha_ema: float) -> float:
    """Moving average of distortion; the first batch seeds the average."""
    if d_ema is None:
        return d_batch
    return (1.0 - alpha_ema) * d_batch + alpha_ema * d_ema


def d0_heuristic(d_max: float) -> float:
    """Distortion target as a fixed fraction of the pre-run's best value."""
    return 0.9 * d_max


def anneal_schedule(step: int, total_steps: int, ramp_frac: float = 0.5) -> float:
    """Linear 0 -> 1 over the first ``ramp_frac`` of training, then 1."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    ramp = max(1, int(round(ramp_frac * total_steps)))
    return min(1.0, step / ramp)


def _masked_grads(store, grads: list[np.ndarray], groups: tuple | None) -> dict:
    names = store.names()
    out = {}
    for name, g in zip(names, grads):
        if groups is None or store.group_of(name) in groups:
            out[name] = g
    return out


def rewo_step(model: mdl.EkvaeModel, x_batch, u_batch, state: TrainerState,
              cfg: CoConfig, rng: np.random.Generator,
              mode: str = "smoother") -> dict:
    """One constrained-optimization step; mutates model parameters and state.

    During the initial phase only encoder/decoder parameters move; the
    dynamics and start-prior gradients are masked. The phase flips to main
    permanently once the distortion average reaches the target.
    """
    eps = mdl.draw_noise(rng, x_batch.shape[:-2], x_batch.shape[-2], model.cfg)
    with Tape() as tape:
        out = mdl.elbo(model, x_batch, u_batch, mode=mode, eps=eps)
        loss = ad.add(out["rate"],
                      ad.mul(ad.sub(out["distortion"], state.d0), state.lam))
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise FloatingPointError(
                f"non-finite loss at step {state.step} "
                f"(distortion={float(out['distortion'].data):.6g}, "
                f"rate={float(out['rate'].data):.6g}, lambda={state.lam:.6g})"
            )
        grads = tape.backward(loss, model.store.tensors())
    groups = INITIAL_GROUPS if state.phase == "initial" else None
    model.store.adam_step(_masked_grads(model.store, grads, groups), cfg.lr)

    d_batch = float(out["distortion"].data)
    state.d_ema = ema_update(state.d_ema, d_batch, cfg.alpha_ema)
    # The multiplier responds to the relative constraint violation. With
    # distortion in raw nats over a whole sequence the update exponent would
    # saturate its overflow clamp at every step and the multiplier could
    # never settle near its fixed point.
    delta = (state.d_ema - state.d0) / max(1.0, abs(state.d0))
    # The discrete multiplier update is only stable near its fixed point
    # lambda=1 when nu * tau1 * |delta| < 2; beyond that it overshoots and
    # relays between the clamps. Violations (delta > 0) must pass through
    # untouched so the constraint keeps its full pull, but once satisfied
    # the magnitude of the slack carries no information, so the negative
    # side is floored just inside the stability bound.
    if delta < 0.0:
        delta = max(delta, -DELTA_NEG_FLOOR_FRAC * 2.0 / (cfg.nu * cfg.tau1))
    state.lam = lambda_update(state.lam, delta, cfg.nu, cfg.tau1, cfg.tau2)
    if state.phase == "initial" and state.d_ema <= state.d0:
        state.phase = "main"
        # the reconstruction phase leaves second moments of order
        # (lambda * grad)^2 behind; starting the joint phase with fresh
        # optimizer state lets rate gradients move the encoder again
        model.store.reset_moments()
    state.step += 1
    return {
        "loss": loss_val,
        "elbo": float(out["elbo"].data),
        "distortion": d_batch,
        "rate": float(out["rate"].data),
        "lambda": state.lam,
        "d_ema": state.d_ema,
        "phase": state.phase,
    }


def anneal_step(model: mdl.EkvaeModel, x_batch, u_batch, beta: float,
                lr: float, rng: np.random.Generator, step: int,
                mode: str = "smoother") -> dict:
    """One step of the baseline: minimize distortion + beta * rate."""
    eps = mdl.draw_noise(rng, x_batch.shape[:-2], x_batch.shape[-2], model.cfg)
    with Tape() as tape:
        out = mdl.elbo(model, x_batch, u_batch, mode=mode, eps=eps)
        loss = ad.add(out["distortion"], ad.mul(out["rate"], beta))
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise FloatingPointError(
                f"non-finite loss at step {step} "
                f"(distortion={float(out['distortion'].data):.6g}, "
                f"rate={float(out['rate'].data):.6g}, beta={beta:.6g})"
            )
        grads = tape.backward(loss, model.store.tensors())
    model.store.adam_step(_masked_grads(model.store, grads, None), lr)
    return {
        "loss": loss_val,
        "elbo": float(out["elbo"].data),
        "distortion": float(out["distortion"].data),
        "rate": float(out["rate"].data),
        "beta": beta,
    }


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # per-epoch streams make resumed runs bit-identical to uninterrupted ones
    return np.random.default_rng(np.random.SeedSequence([seed, 0x7247, epoch]))


CO_COLUMNS = ("epoch", "elbo", "distortion", "rate", "lambda", "d_ema",
              "phase", "wall_seconds")
ANNEAL_COLUMNS = ("epoch", "elbo", "distortion", "rate", "beta", "wall_seconds")


def _write_rows(path: str | None, columns: tuple, rows: list[dict]):
    if path is None:
        return
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], str)
                        else f"{row[c]:.17g}" for c in columns])


def train_anneal(model: mdl.EkvaeModel, frames: np.ndarray, actions: np.ndarray,
                 epochs: int, lr: float = 1e-3, batch_size: int = 500,
                 seed: int = 0, mode: str = "smoother", ramp_frac: float = 0.5,
                 csv_path: str | None = None, start_epoch: int = 0,
                 log=None) -> list[dict]:
    """Annealing baseline over the dataset; returns per-epoch metric rows."""
    n = frames.shape[0]
    steps_per_epoch = int(np.ceil(n / batch_size))
    total_steps = epochs * steps_per_epoch
    rows = []
    t_start = time.monotonic()
    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, epochs):
        rng = _epoch_rng(seed, epoch)
        acc = []
        for idx in _epoch_batches(n, batch_size, rng):
            beta = anneal_schedule(step, total_steps, ramp_frac)
            acc.append(anneal_step(model, frames[idx], actions[idx], beta, lr,
                                   rng, step, mode=mode))
            step += 1
        row = {k: float(np.mean([a[k] for a in acc]))
               for k in ("elbo", "distortion", "rate", "beta")}
        row["epoch"] = epoch
        row["wall_seconds"] = time.monotonic() - t_start
        rows.append(row)
        if log:
            log(row)
    _write_rows(csv_path, ANNEAL_COLUMNS, rows)
    return rows


def pretrain_d_max(cfg_model: mdl.ModelConfig, frames, actions, epochs: int,
                   lr: float, batch_size: int, seed: int,
                   mode: str = "smoother") -> float:
    """Short annealing pre-run on a throwaway model; returns its best
    (lowest) epoch-mean training distortion, used for the distortion target."""
    probe = mdl.EkvaeModel(cfg_model, seed=seed)
    rows = train_anneal(probe, frames, actions, epochs=max(1, epochs),
                        lr=lr, batch_size=batch_size,
                        seed=seed ^ 0x5EED, mode=mode)
    return min(r["distortion"] for r in rows)


def train_co(model: mdl.EkvaeModel, frames: np.ndarray, actions: np.ndarray,
             cfg: CoConfig, batch_size: int = 500, seed: int = 0,
             mode: str = "smoother", csv_path: str | None = None,
             state: TrainerState | None = None, start_epoch: int = 0,
             log=None) -> tuple[list[dict], TrainerState]:
    """Constrained-optimization training over the dataset.

    If no trainer state is supplied, the distortion target comes from
    ``cfg.d0_override`` or a quarter-budget annealing pre-run.
    """
    n = frames.shape[0]
    if state is None:
        if cfg.d0_override is not None:
            d0 = cfg.d0_override
        else:
            d0 = d0_heuristic(pretrain_d_max(
                model.cfg, frames, actions, epochs=cfg.epochs // 4,
                lr=cfg.lr, batch_size=batch_size, seed=seed, mode=mode))
        state = TrainerState(d0=d0)
    rows = []
    t_start = time.monotonic()
    for epoch in range(start_epoch, cfg.epochs):
        rng = _epoch_rng(seed, epoch)
        acc = []
        for idx in _epoch_batches(n, batch_size, rng):
            acc.append(rewo_step(model, frames[idx], actions[idx], state, cfg,
                                 rng, mode=mode))
        row = {k: float(np.mean([a[k] for a in acc]))
               for k in ("elbo", "distortion", "rate", "lambda", "d_ema")}
        row["epoch"] = epoch
        row["phase"] = acc[-1]["phase"]
        row["wall_seconds"] = time.monotonic() - t_start
        rows.append(row)
        if log:
            log(row)
    if state.lam > 1.0:
        warnings.warn(
            f"final multiplier {state.lam:.4g} exceeds 1; the rate bound "
            "interpretation of the objective does not apply",
            RuntimeWarning, stacklevel=2,
        )
    _write_rows(csv_path, CO_COLUMNS, rows)
    return rows, state


# -- warm start and staged schedule -------------------------------------------------

def slow_feature_targets(frames: np.ndarray, n_components: int = 24) -> np.ndarray:
    """Unsupervised 2-D embedding of pendulum frames on the unit circle.

    Whitened PCA to ``n_components``, then the two directions whose frame-
    to-frame differences have the smallest variance (the slowest features),
    whitened again and projected radially onto the unit circle. For a rigid
    rotating object these recover (sin, cos) of the pose angle up to a
    rotation. ``frames`` is (N, T, D_x); returns (N * T, 2).
    """
    N, T, d_x = frames.shape
    X = frames.reshape(-1, d_x)
    Xc = X - X.mean(axis=0)
    _, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    k = min(n_components, S.size)
    Y = Xc @ (Vt[:k] / (S[:k, None] / np.sqrt(X.shape[0]))).T
    dY = np.diff(Y.reshape(N, T, k), axis=1).reshape(-1, k)
    _, evecs = np.linalg.eigh(dY.T @ dY / dY.shape[0])
    f = Y @ evecs[:, :2]
    f -= f.mean(axis=0)
    g = f @ np.linalg.cholesky(np.linalg.inv(np.cov(f.T)))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def warm_start_encoder(model: mdl.EkvaeModel, frames: np.ndarray,
                       steps: int = 1500, batch_size: int = 500,
                       lr: float = 1e-3, target_var: float = 2.5e-3,
                       seed: int = 0) -> float:
    """Distill the encoder onto slow-feature targets before joint training.

    A reconstruction-dominated start wedges the encoder into a curled
    embedding of the pose that later rate pressure cannot untangle; starting
    from the (label-free) circle embedding avoids that optimum. Mean head is
    regressed onto the targets, log-variance head onto log(target_var);
    optimizer moments are reset afterwards. Returns the final batch loss.
    """
    if model.cfg.d_a != 2:
        raise ValueError(
            f"slow-feature warm start assumes d_a=2, got {model.cfg.d_a}")
    X = frames.reshape(-1, model.cfg.d_x)
    targets = slow_feature_targets(frames)
    enc_names = [n for n in model.store.names() if n.startswith("enc.")]
    log_tv = float(np.log(target_var))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5FA]))
    loss_val = np.nan
    for _ in range(steps):
        idx = rng.choice(X.shape[0], min(batch_size, X.shape[0]),
                         replace=False)
        with Tape() as tape:
            mean, logvar = model.enc(ad._lift(X[idx]))
            dm = ad.sub(mean, ad._lift(targets[idx]))
            dv = ad.sub(logvar, log_tv)
            loss = ad.add(ad.mean_(ad.mul(dm, dm)), ad.mean_(ad.mul(dv, dv)))
            loss_val = float(loss.data)
            grads = tape.backward(loss, [model.store.params[n]
                                         for n in enc_names])
        model.store.adam_step(dict(zip(enc_names, grads)), lr)
    model.store.reset_moments()
    return loss_val


FLOOR_STAGES = ((0.0, 2.5e-3), (0.5, 2.5e-4), (0.75, 2.5e-5))


def _floor_at(epoch: int, stage_epochs: list) -> float:
    floor = 0.0
    for e0, f in stage_epochs:
        if epoch >= e0:
            floor = f
    return floor


def _val_prediction_mse(model: mdl.EkvaeModel, frames: np.ndarray,
                        actions: np.ndarray, prefix_len: int = 5) -> float:
    pred = mdl.predict(model, frames[:, :prefix_len], actions,
                       frames.shape[1])
    return float(np.mean((pred - frames) ** 2))


def train_co_staged(model: mdl.EkvaeModel, frames: np.ndarray,
                    actions: np.ndarray, cfg: CoConfig,
                    batch_size: int = 500, seed: int = 0,
                    mode: str = "smoother", warm_start_steps: int = 1500,
                    floor_stages: tuple = FLOOR_STAGES,
                    select_every: int = 50, val_frac: float = 0.125,
                    csv_path: str | None = None,
                    state: TrainerState | None = None, start_epoch: int = 0,
                    log=None) -> tuple[list[dict], TrainerState, dict]:
    """Constrained training with warm start, variance-floor decay, and
    best-checkpoint selection. Returns (rows, state, selection info).

    ``floor_stages`` are (epoch fraction, floor) pairs: the encoder variance
    floor steps down as training progresses, because the floor that keeps
    the posterior from collapsing early also caps tracking precision late.
    Every ``select_every`` epochs the open-loop prediction MSE on the last
    ``val_frac`` of the training sequences (a label-free metric) is
    evaluated and the best parameters are kept; the velocity subspace can
    degrade late in training while reconstruction still improves. Resumed
    runs (start_epoch > 0) skip the warm start and restart selection from
    the resume point.
    """
    stage_epochs = sorted((int(round(fr * cfg.epochs)), f)
                          for fr, f in floor_stages)
    if warm_start_steps > 0 and start_epoch == 0:
        warm_start_encoder(model, frames, steps=warm_start_steps, seed=seed)
    n_val = max(1, int(round(val_frac * frames.shape[0])))
    val_frames, val_actions = frames[-n_val:], actions[-n_val:]
    best = {"val_mse": np.inf, "epoch": -1, "params": None, "floor": None}

    def snapshot(epoch):
        mse = _val_prediction_mse(model, val_frames, val_actions)
        if mse < best["val_mse"]:
            best.update(val_mse=mse, epoch=epoch, floor=model.cfg.q_var_floor,
                        params={nm: model.store.params[nm].data.copy()
                                for nm in model.store.names()})

    def hook(row):
        if log:
            log(row)
        e = row["epoch"]
        if select_every and (e + 1) % select_every == 0:
            snapshot(e)
        model.cfg.q_var_floor = _floor_at(e + 1, stage_epochs)

    model.cfg.q_var_floor = _floor_at(start_epoch, stage_epochs)
    rows, state = train_co(model, frames, actions, cfg,
                           batch_size=batch_size, seed=seed, mode=mode,
                           csv_path=csv_path, state=state,
                           start_epoch=start_epoch, log=hook)
    snapshot(cfg.epochs - 1)
    if best["params"] is not None:
        for nm in model.store.names():
            model.store.params[nm].data = best["params"].pop(nm)
        model.cfg.q_var_floor = best["floor"]
        model.store.reset_moments()
    return rows, state, {"best_epoch": best["epoch"],
                         "best_val_mse": best["val_mse"]}
