"""Multivariate Gaussian algebra.

Two layers live here:

* ``Gaussian`` and the module-level functions operate on plain numpy arrays.
  They are exact closed-form implementations used for evaluation and as the
  brute-force oracle (``condition_joint``) in filter/smoother tests.
* The ``t_``-prefixed helpers operate on autodiff ``Tensor`` values and are
  the differentiable building blocks of the model's rate terms. They support
  leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
JITTER = 1e-9


def chol_with_jitter(cov: np.ndarray, what: str = "covariance") -> np.ndarray:
    """Lower Cholesky factor; on failure retry once with a 1e-9 ridge."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eye = np.eye(cov.shape[-1])
        try:
            return np.linalg.cholesky(cov + JITTER * eye)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(
                f"{what} is not positive definite (even after 1e-9 jitter)"
            ) from None


@dataclass
class Gaussian:
    """Mean vector plus SPD covariance, with its Cholesky factor cached."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.mean.ndim == 0:
            self.mean = self.mean.reshape(1)
        if self.cov.ndim == 0:
            self.cov = self.cov.reshape(1, 1)
        if self.cov.shape[-1] != self.mean.shape[-1]:
            raise ValueError(
                f"mean dim {self.mean.shape[-1]} != cov dim {self.cov.shape[-1]}"
            )
        asym = np.max(np.abs(self.cov - np.swapaxes(self.cov, -1, -2)))
        if asym > 1e-8:
            raise ValueError(f"covariance is not symmetric (max asymmetry {asym:.3e})")
        self.cov = 0.5 * (self.cov + np.swapaxes(self.cov, -1, -2))
        if self.chol is None:
            self.chol = chol_with_jitter(self.cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def log_density(g: Gaussian, x: np.ndarray) -> float:
    """Exact multivariate normal log-density via the Cholesky factor."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape[-1] != g.dim:
        raise ValueError(f"x dim {x.shape[-1]} != Gaussian dim {g.dim}")
    diff = x - g.mean
    y = np.linalg.solve(g.chol, diff[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(g.chol, axis1=-2, axis2=-1)), axis=-1)
    quad = np.sum(y * y, axis=-1)
    return -0.5 * (g.dim * LOG_2PI + logdet + quad)


def kl(p: Gaussian, q: Gaussian) -> float:
    """Closed-form KL(p || q) between Gaussians of equal dimension."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    d = p.dim
    q_inv = np.linalg.inv(q.cov)
    diff = q.mean - p.mean
    tr = np.trace(q_inv @ p.cov, axis1=-2, axis2=-1)
    quad = np.einsum("...i,...ij,...j->...", diff, q_inv, diff)
    logdet_p = 2.0 * np.sum(np.log(np.diagonal(p.chol, axis1=-2, axis2=-1)), axis=-1)
    logdet_q = 2.0 * np.sum(np.log(np.diagonal(q.chol, axis1=-2, axis2=-1)), axis=-1)
    return 0.5 * (tr + quad - d + logdet_q - logdet_p)


def sample_reparam(g: Gaussian, eps: np.ndarray) -> np.ndarray:
    """mean + chol @ eps for a standard-normal draw eps."""
    eps = np.atleast_1d(np.asarray(eps, dtype=np.float64))
    if eps.shape[-1] != g.dim:
        raise ValueError(f"eps dim {eps.shape[-1]} != Gaussian dim {g.dim}")
    return g.mean + (g.chol @ eps[..., None])[..., 0]


def condition_joint(joint: Gaussian, observed_b: np.ndarray, dim_a: int) -> Gaussian:
    """Condition a joint Gaussian over (x_a, x_b) on x_b = observed_b.

    Standard formulas: mu_{a|b} = mu_a + S_ab S_bb^-1 (b - mu_b) and
    S_{a|b} = S_aa - S_ab S_bb^-1 S_ba. Used as the exact oracle for
    filter/smoother equivalence tests.
    """
    observed_b = np.atleast_1d(np.asarray(observed_b, dtype=np.float64))
    d = joint.dim
    dim_b = d - dim_a
    if observed_b.shape[-1] != dim_b:
        raise ValueError(f"observed block has dim {observed_b.shape[-1]}, expected {dim_b}")
    mu_a = joint.mean[:dim_a]
    mu_b = joint.mean[dim_a:]
    S_aa = joint.cov[:dim_a, :dim_a]
    S_ab = joint.cov[:dim_a, dim_a:]
    S_bb = joint.cov[dim_a:, dim_a:]
    try:
        solve_b = np.linalg.solve(S_bb, np.concatenate([S_ab.T, (observed_b - mu_b)[:, None]], axis=1))
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("observed-block covariance is singular") from None
    gain = solve_b[:, :-1].T
    innov = solve_b[:, -1]
    mean = mu_a + S_ab @ innov
    cov = S_aa - gain @ S_ab.T
    cov = 0.5 * (cov + cov.T)
    return Gaussian(mean, cov)


# -- differentiable Tensor helpers (batched over leading axes) -----------------

def t_chol_jitter(cov: Tensor, what: str = "covariance") -> Tensor:
    try:
        return ad.cholesky(cov)
    except np.linalg.LinAlgError:
        eye = np.eye(cov.shape[-1])
        try:
            return ad.cholesky(ad.add(cov, JITTER * eye))
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(
                f"{what} is not positive definite (even after 1e-9 jitter)"
            ) from None


def t_diag_embed(v: Tensor) -> Tensor:
    """(..., d) -> (..., d, d) diagonal matrices."""
    d = v.shape[-1]
    eye = np.eye(d)
    return ad.mul(ad.reshape(v, v.shape + (1,)), eye)


def t_logdet(cov: Tensor, what: str = "covariance") -> Tensor:
    L = t_chol_jitter(cov, what)
    return ad.mul(ad.sum_(ad.log(ad.diagonal_last(L)), axis=-1), 2.0)


def t_kl_full(mean_p: Tensor, cov_p: Tensor, mean_q: Tensor, cov_q: Tensor) -> Tensor:
    """Closed-form KL between full-covariance Gaussians; batched.

    Returns a tensor of batch shape (scalar for unbatched inputs).
    """
    d = mean_p.shape[-1]
    try:
        q_inv = ad.inv(cov_q)
    except np.linalg.LinAlgError:
        # variance underflow in a learned diagonal; ridge keeps the KL finite
        cov_q = ad.add(cov_q, JITTER * np.eye(d))
        q_inv = ad.inv(cov_q)
    diff = ad.sub(mean_q, mean_p)
    tr = ad.sum_(ad.diagonal_last(ad.matmul(q_inv, cov_p)), axis=-1)
    qd = ad.matvec(q_inv, diff)
    quad = ad.sum_(ad.mul(diff, qd), axis=-1)
    logdets = ad.sub(t_logdet(cov_q, "KL q-covariance"),
                     t_logdet(cov_p, "KL p-covariance"))
    inner = ad.add(ad.add(tr, quad), ad.sub(logdets, float(d)))
    return ad.mul(inner, 0.5)


def t_kl_diag_std(mean: Tensor, logvar: Tensor) -> Tensor:
    """KL( N(mean, diag(exp logvar)) || N(0, I) ), summed over the last axis."""
    var = ad.exp(logvar)
    term = ad.sub(ad.add(var, ad.mul(mean, mean)), ad.add(logvar, 1.0))
    return ad.mul(ad.sum_(term, axis=-1), 0.5)


def t_logpdf_diag(x, mean: Tensor, logvar: Tensor) -> Tensor:
    """Diagonal-Gaussian log-density, summed over the last axis; batched."""
    var = ad.exp(logvar)
    diff = ad.sub(x, mean)
    quad = ad.div(ad.mul(diff, diff), var)
    per = ad.add(ad.add(quad, logvar), LOG_2PI)
    return ad.mul(ad.sum_(per, axis=-1), -0.5)


def t_logpdf_from_var(x, mean: Tensor, var: Tensor) -> Tensor:
    """As ``t_logpdf_diag`` but with the variance given directly (e.g. floored)."""
    diff = ad.sub(x, mean)
    quad = ad.div(ad.mul(diff, diff), var)
    per = ad.add(ad.add(quad, ad.log(var)), LOG_2PI)
    return ad.mul(ad.sum_(per, axis=-1), -0.5)
