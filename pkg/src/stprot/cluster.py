"""Gaussian-mixture clustering of spot embeddings, fit by EM with full covariances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateCluster, KTooLarge, ShapeMismatch

N_RESTARTS = 5
KMEANS_ITERS = 10
MAX_ITER = 300
REL_TOL = 1e-6
RIDGE_SCALE = 1e-6


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, P)
    covariances: np.ndarray  # (K, P, P)
    log_likelihood_trace: tuple[float, ...]

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def log_likelihood(self) -> float:
        return self.log_likelihood_trace[-1]


def _log_gauss(z: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """``(N, K)`` log densities of each point under each component."""
    n, p = z.shape
    out = np.empty((n, len(means)))
    for k, (mu, cov) in enumerate(zip(means, covs)):
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise DegenerateCluster(f"component {k} covariance is not positive definite") from exc
        sol = np.linalg.solve(chol, (z - mu).T)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        out[:, k] = -0.5 * (np.sum(sol * sol, axis=0) + logdet + p * np.log(2 * np.pi))
    return out


def _kmeans_init(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding followed by a few Lloyd iterations; returns hard labels."""
    n = len(z)
    centers = [z[rng.integers(n)]]
    d2 = np.sum((z - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        # all points coincide with chosen centers: fall back to a uniform pick
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(z[idx])
        d2 = np.minimum(d2, np.sum((z - z[idx]) ** 2, axis=1))
    centers = np.array(centers)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(KMEANS_ITERS):
        dist = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(dist, axis=1)
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = z[members].mean(axis=0)
    return labels


def _m_step(z: np.ndarray, resp: np.ndarray, ridge: float):
    n, p = z.shape
    nk = resp.sum(axis=0)
    if np.any(nk < 1.0):
        raise DegenerateCluster(f"component(s) {np.flatnonzero(nk < 1.0).tolist()} hold < 1 expected member")
    weights = nk / n
    means = (resp.T @ z) / nk[:, None]
    covs = np.empty((len(nk), p, p))
    for k in range(len(nk)):
        d = z - means[k]
        covs[k] = (resp[:, k, None] * d).T @ d / nk[k] + ridge * np.eye(p)
    return weights, means, covs


def _e_step(z, weights, means, covs):
    logp = _log_gauss(z, means, covs) + np.log(weights)
    norm = logsumexp(logp, axis=1)
    return np.exp(logp - norm[:, None]), float(norm.sum())


def _fit_once(z: np.ndarray, k: int, ridge: float, rng: np.random.Generator) -> GmmModel:
    labels = _kmeans_init(z, k, rng)
    resp = np.zeros((len(z), k))
    resp[np.arange(len(z)), labels] = 1.0
    params = _m_step(z, resp, ridge)
    resp, ll = _e_step(z, *params)
    trace = [ll]
    for _ in range(MAX_ITER):
        params = _m_step(z, resp, ridge)
        resp, ll = _e_step(z, *params)
        trace.append(ll)
        if abs(trace[-1] - trace[-2]) < REL_TOL * abs(trace[-2]):
            break
    return GmmModel(*params, log_likelihood_trace=tuple(trace))


def fit_gmm(z: np.ndarray, k: int, seed: int = 0) -> GmmModel:
    """Fit a ``k``-component full-covariance mixture; best of 5 seeded restarts.

    Every M-step adds ``1e-6 * trace(cov(z)) / P`` to the diagonal of each
    covariance. Iteration stops once the relative log-likelihood change
    drops below 1e-6, or after 300 iterations. Restart seeds are spawned from
    ``seed``; equal log-likelihoods keep the earlier restart.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or len(z) == 0:
        raise ShapeMismatch(f"expected a non-empty (N, P) matrix, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("embedding contains non-finite values")
    if not 1 <= k <= len(z):
        raise KTooLarge(f"K={k} must lie in [1, N={len(z)}]")
    p = z.shape[1]
    spread = np.trace(np.atleast_2d(np.cov(z, rowvar=False))) if len(z) > 1 else 0.0
    # constant data still needs a positive ridge
    ridge = RIDGE_SCALE * (spread / p if spread > 0 else 1.0)
    best, failures = None, []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(N_RESTARTS)):
        try:
            model = _fit_once(z, k, ridge, np.random.default_rng(child))
        except DegenerateCluster as exc:
            failures.append(f"restart {i}: {exc}")
            continue
        if best is None or model.log_likelihood > best.log_likelihood:
            best = model
    if best is None:
        raise DegenerateCluster("every EM restart collapsed; " + "; ".join(failures))
    return best


def responsibilities(model: GmmModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.means.shape[1]:
        raise ShapeMismatch(f"model has P={model.means.shape[1]}, data shape is {z.shape}")
    resp, _ = _e_step(z, model.weights, model.means, model.covariances)
    return resp


def assign(model: GmmModel, z: np.ndarray) -> np.ndarray:
    """Hard labels by maximum posterior; ``argmax`` resolves ties to the smaller index."""
    return np.argmax(responsibilities(model, z), axis=1)


__all__ = ["GmmModel", "fit_gmm", "assign", "responsibilities"]
