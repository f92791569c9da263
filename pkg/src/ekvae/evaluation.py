"""System-identification metrics: OLS R-squared between inferred latents and
ground-truth pendulum state, prediction MSE, and latent dumps for plotting.

All metrics are deterministic: they use posterior means, never samples.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import model as mdl
from . import ssm
from .autodiff import Tensor
from .pendulum import Dataset


@dataclass
class OlsFit:
    weights: np.ndarray  # (D+1, K), first row is the intercept
    r2: np.ndarray  # (K,)


@dataclass
class EvalReport:
    r2_angle: float
    r2_velocity: float
    mse_predict: float
    n_sequences: int
    mode: str
    elbo: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def ols_r2(latents: np.ndarray, targets: np.ndarray) -> OlsFit:
    """Least squares with intercept; per-column coefficient of determination.

    Normal equations with an lstsq fallback (and a warning) when the design
    is rank-deficient. A constant target column is an error: R-squared is
    undefined when the target has no variance.
    """
    latents = np.asarray(latents, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[:, None]
    n, d = latents.shape
    if n <= d + 1:
        raise ValueError(f"need more than {d + 1} rows for {d} regressors, got {n}")
    ss_tot = np.sum((targets - targets.mean(axis=0)) ** 2, axis=0)
    for k, s in enumerate(ss_tot):
        if s == 0.0:
            raise ValueError(f"target column {k} is constant; R^2 undefined")
    X = np.concatenate([np.ones((n, 1)), latents], axis=1)
    gram = X.T @ X
    try:
        w = np.linalg.solve(gram, X.T @ targets)
    except np.linalg.LinAlgError:
        warnings.warn("rank-deficient regression design; using least-squares "
                      "pseudo-solution", RuntimeWarning, stacklevel=2)
        w = np.linalg.lstsq(X, targets, rcond=None)[0]
    resid = targets - X @ w
    r2 = 1.0 - np.sum(resid ** 2, axis=0) / ss_tot
    return OlsFit(weights=w, r2=r2)


def split_dataset(ds: Dataset, test_frac: float = 0.2) -> tuple[Dataset, Dataset]:
    """Deterministic split: the last fraction of sequences is held out."""
    n_test = max(1, int(round(test_frac * ds.n_seq)))
    cut = ds.n_seq - n_test
    train = Dataset(ds.frames[:cut], ds.actions[:cut], ds.truth[:cut], ds.header)
    test = Dataset(ds.frames[cut:], ds.actions[cut:], ds.truth[cut:], ds.header)
    return train, test


def smoothed_latents(model: mdl.EkvaeModel, frames: np.ndarray,
                     actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed z means and encoder a means, (N, T, D_z) and (N, T, D_a)."""
    a_mean, _ = model.enc(Tensor(frames))
    traj = ssm.filter_sequence(model.init, model.trans, model.emis,
                               a_mean, Tensor(actions))
    ssm.smooth_sequence(traj, model.trans)
    z = np.stack([m.data for m, _ in traj.smoothed], axis=-2)
    return z, a_mean.data


def angle_velocity_r2(model: mdl.EkvaeModel, ds: Dataset) -> tuple[float, float]:
    """Three regressions of smoothed latents onto sin(phi), cos(phi), phi_dot.

    Returns (mean of the two angle R-squared values, velocity R-squared).
    """
    z, _ = smoothed_latents(model, ds.frames, ds.actions)
    lat = z.reshape(-1, model.d_z)
    phi = ds.truth[..., 0].reshape(-1)
    phi_dot = ds.truth[..., 1].reshape(-1)
    r2_sin = ols_r2(lat, np.sin(phi)).r2[0]
    r2_cos = ols_r2(lat, np.cos(phi)).r2[0]
    r2_vel = ols_r2(lat, phi_dot).r2[0]
    return float(0.5 * (r2_sin + r2_cos)), float(r2_vel)


def disentanglement_r2(model: mdl.EkvaeModel, ds: Dataset) -> tuple[float, float]:
    """R-squared of the static latent block against (sin, cos) and of the
    remaining block against angular velocity."""
    z, _ = smoothed_latents(model, ds.frames, ds.actions)
    lat = z.reshape(-1, model.d_z)
    phi = ds.truth[..., 0].reshape(-1)
    phi_dot = ds.truth[..., 1].reshape(-1)
    d_a = model.d_a
    static = ols_r2(lat[:, :d_a], np.stack([np.sin(phi), np.cos(phi)], axis=1)).r2
    vel = ols_r2(lat[:, d_a:], phi_dot).r2
    return float(np.mean(static)), float(vel[0])


def prediction_mse(model: mdl.EkvaeModel, ds: Dataset, prefix_len: int = 5,
                   n: int = 500) -> float:
    """Mean squared per-pixel error of conditioned rollouts.

    Each sequence is predicted from its first ``prefix_len`` frames and the
    true action sequence; the error covers all T frames.
    """
    n = min(n, ds.n_seq)
    frames = ds.frames[:n]
    actions = ds.actions[:n]
    T = ds.T
    pred = mdl.predict(model, frames[:, :prefix_len], actions, T)
    return float(np.mean((pred - frames) ** 2))


def test_elbo(model: mdl.EkvaeModel, ds: Dataset, seed: int = 0,
              mode: str = "smoother") -> float:
    """Batch-mean ELBO on the dataset with a fixed evaluation noise draw."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    eps = mdl.draw_noise(rng, (ds.n_seq,), ds.T, model.cfg)
    out = mdl.elbo(model, ds.frames, ds.actions, mode=mode, eps=eps)
    return float(out["elbo"].data)


def evaluate(model: mdl.EkvaeModel, ds: Dataset, prefix_len: int = 5,
             n_predict: int = 500, seed: int = 0) -> EvalReport:
    r2_angle, r2_velocity = angle_velocity_r2(model, ds)
    mse = prediction_mse(model, ds, prefix_len=prefix_len, n=n_predict)
    return EvalReport(
        r2_angle=r2_angle, r2_velocity=r2_velocity, mse_predict=mse,
        n_sequences=ds.n_seq, mode="smoothed",
        elbo=test_elbo(model, ds, seed=seed),
    )


def dump_latents(model: mdl.EkvaeModel, ds: Dataset, path: str):
    """CSV of smoothed latents, encoder means, and ground truth per frame."""
    z, a = smoothed_latents(model, ds.frames, ds.actions)
    cols = (["t", "seq_id"]
            + [f"z{i + 1}" for i in range(model.d_z)]
            + [f"a{i + 1}" for i in range(model.d_a)]
            + ["phi", "phi_dot"])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for s in range(ds.n_seq):
            for t in range(ds.T):
                row = [t, s] + [f"{v:.17g}" for v in
                                (*z[s, t], *a[s, t], *ds.truth[s, t])]
                w.writerow(row)
