"""Local density estimators and decomposition weights.

Two estimator families back the one-shot protocol:
  * diagonal-covariance Gaussian mixtures fit by EM on the 256-dimensional
    real amplitude vectors (the practical estimator), and
  * exact Born-rule densities Tr(rho P_psi) from a client's density matrix
    (the oracle estimator used to check the decomposition theorem).

Densities travel in log space until the final normalization

    q_i = q~_i * p_i / sum_j q~_j * p_j,

where the max log value is subtracted before exponentiating; 256-dimensional
Gaussian densities overflow/underflow raw float64 otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .qsim import DensityMatrix, StateVector, born_probability

VARIANCE_FLOOR = 1e-6
DEFAULT_MAX_ITERS = 200
DEFAULT_TOL = 1e-6

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GmmDensityModel:
    """Diagonal-covariance Gaussian mixture; a client's local density model."""

    n_modes: int
    mix_weights: np.ndarray  # (n_modes,)
    means: np.ndarray  # (n_modes, dim)
    variances: np.ndarray  # (n_modes, dim), floored
    log_likelihood_trace: tuple[float, ...] = ()
    floored_modes: int = 0  # degenerate clusters whose variance hit the floor

    def __post_init__(self):
        w = np.asarray(self.mix_weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        if w.shape != (self.n_modes,) or mu.shape[0] != self.n_modes or var.shape != mu.shape:
            raise ValueError("inconsistent mixture shapes")
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError("mix weights must be non-negative and sum to 1")
        if np.any(var < VARIANCE_FLOOR * (1 - 1e-12)):
            raise ValueError(f"variances must respect the floor {VARIANCE_FLOOR}")
        for a in (w, mu, var):
            a.setflags(write=False)
        object.__setattr__(self, "mix_weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class DensityEstimate:
    """Per-client raw densities and the normalized decomposition weights q_i."""

    raw: np.ndarray  # q~_i, possibly rescaled by a common positive factor
    weights: np.ndarray  # q_i, sums to 1 (or the p_Ci fallback)
    used_fallback: bool = False  # all raw densities underflowed to zero

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if raw.shape != w.shape or raw.ndim != 1:
            raise ValueError("raw and weights must be 1-D with equal length")
        raw.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "weights", w)


# ---------------------------------------------------------------------------
# Gaussian mixture EM
# ---------------------------------------------------------------------------


def _log_gaussians(X: np.ndarray, model_means: np.ndarray, model_vars: np.ndarray) -> np.ndarray:
    """(N, M) table of log N(x_n; mu_m, diag var_m)."""
    const = -0.5 * np.sum(np.log(model_vars) + _LOG_2PI, axis=1)  # (M,)
    # quadratic term expanded to avoid an (N, M, D) intermediate
    inv = 1.0 / model_vars
    q = (
        (X**2) @ inv.T
        - 2.0 * X @ (model_means * inv).T
        + np.sum(model_means**2 * inv, axis=1)[None, :]
    )
    return const[None, :] - 0.5 * q


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _kmeanspp_centers(X: np.ndarray, n_modes: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: next center drawn proportional to squared distance."""
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(1, n_modes):
        d2 = np.min(
            np.stack([np.sum((X - c) ** 2, axis=1) for c in centers]), axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(n)])
            continue
        centers.append(X[rng.choice(n, p=d2 / total)])
    return np.stack(centers)


def gmm_fit(
    features,
    n_modes: int,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> GmmDensityModel:
    """EM for a diagonal GMM with k-means++-style seeded initialization.

    The per-iteration total log-likelihood is recorded and is non-decreasing
    (within 1e-9) whenever the variance floor does not bind.  Stops when the
    relative log-likelihood improvement falls below ``tol``.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        X = np.stack([np.asarray(f, dtype=np.float64) for f in features])
    n, dim = X.shape
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    if np.unique(X, axis=0).shape[0] < n_modes:
        raise ValueError(f"need at least {n_modes} distinct points, got fewer")

    rng = np.random.default_rng(seed)
    means = _kmeanspp_centers(X, n_modes, rng)
    # hard assignment to the seeds gives the initial responsibilities
    d2 = np.stack([np.sum((X - c) ** 2, axis=1) for c in means], axis=1)
    resp = np.zeros((n, n_modes))
    resp[np.arange(n), np.argmin(d2, axis=1)] = 1.0

    weights = np.full(n_modes, 1.0 / n_modes)
    variances = np.full((n_modes, dim), 1.0)
    trace: list[float] = []
    floored = 0
    prev_ll = -np.inf
    for iteration in range(max_iters + 1):
        # M step from current responsibilities
        counts = resp.sum(axis=0)
        empty = counts < 1e-10
        safe = np.maximum(counts, 1e-10)
        new_means = (resp.T @ X) / safe[:, None]
        new_vars = (resp.T @ (X**2)) / safe[:, None] - new_means**2
        if np.any(empty):
            # an emptied mode keeps its previous parameters at negligible weight
            new_means[empty] = means[empty]
            new_vars[empty] = variances[empty]
        means = new_means
        below = new_vars < VARIANCE_FLOOR
        if np.any(below):
            floored = max(floored, int(np.any(below, axis=1).sum()))
        variances = np.maximum(new_vars, VARIANCE_FLOOR)
        weights = np.where(empty, 1e-12, counts / n)
        weights = weights / weights.sum()

        # E step + log-likelihood under the updated parameters
        log_joint = _log_gaussians(X, means, variances) + np.log(weights)[None, :]
        log_norm = _logsumexp(log_joint, axis=1)
        ll = float(log_norm.sum())
        trace.append(ll)
        resp = np.exp(log_joint - log_norm[:, None])

        if iteration > 0 and abs(ll - prev_ll) <= tol * abs(prev_ll):
            break
        prev_ll = ll

    return GmmDensityModel(
        n_modes=n_modes,
        mix_weights=weights,
        means=means,
        variances=variances,
        log_likelihood_trace=tuple(trace),
        floored_modes=floored,
    )


def gmm_log_density(model: GmmDensityModel, x) -> float:
    """log sum_m w_m N(x; mu_m, diag var_m) via a stable log-sum-exp."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"expected a vector of length {model.dim}, got shape {x.shape}")
    return float(gmm_log_density_batch(model, x[None, :])[0])


def gmm_log_density_batch(model: GmmDensityModel, X: np.ndarray) -> np.ndarray:
    """Vectorized log density for rows of X; returns (N,)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValueError(f"expected (N, {model.dim}) features, got shape {X.shape}")
    log_joint = _log_gaussians(X, model.means, model.variances) + np.log(
        np.maximum(model.mix_weights, 1e-300)
    )
    return _logsumexp(log_joint, axis=1)


# ---------------------------------------------------------------------------
# Exact quantum density and decomposition weights
# ---------------------------------------------------------------------------


def quantum_density(rho: DensityMatrix, sample: StateVector) -> float:
    """Exact local density Tr(rho P_psi) = <psi| rho |psi> of a query state."""
    return born_probability(rho, sample)


def mixture_weights(raw, client_weights) -> DensityEstimate:
    """Normalize linear-domain densities: q_i = q~_i p_i / sum_j q~_j p_j.

    When every raw density is zero the ratio is 0/0; the estimate falls back
    to q_i = p_i and is flagged.
    """
    q_raw = np.asarray(raw, dtype=np.float64)
    p = np.asarray(client_weights, dtype=np.float64)
    if q_raw.shape != p.shape or q_raw.ndim != 1:
        raise ValueError("raw densities and client weights must be 1-D, equal length")
    if np.any(~np.isfinite(q_raw)):
        raise ValueError("raw densities must be finite")
    if np.any(q_raw < 0):
        raise ValueError("raw densities must be non-negative")
    if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError("client weights must be non-negative and sum to 1")
    mass = q_raw * p
    total = float(mass.sum())
    if total <= 0.0:
        return DensityEstimate(raw=q_raw, weights=p.copy(), used_fallback=True)
    return DensityEstimate(raw=q_raw, weights=mass / total, used_fallback=False)


def mixture_weights_from_log(log_raw, client_weights) -> DensityEstimate:
    """Log-domain variant: subtracts the max log density before exponentiating.

    The common rescaling cancels in the normalization (gauge invariance), so
    the returned ``raw`` values are the rescaled densities exp(log q~ - max).
    -inf entries denote zero density; if all are -inf the p_i fallback applies.
    """
    lr = np.asarray(log_raw, dtype=np.float64)
    p = np.asarray(client_weights, dtype=np.float64)
    if lr.shape != p.shape or lr.ndim != 1:
        raise ValueError("log densities and client weights must be 1-D, equal length")
    if np.any(np.isnan(lr)) or np.any(lr == np.inf):
        raise ValueError("log densities must be < +inf and not NaN")
    finite = lr > -np.inf
    if not np.any(finite):
        return DensityEstimate(raw=np.zeros_like(p), weights=p.copy(), used_fallback=True)
    shifted = np.where(finite, np.exp(lr - lr[finite].max()), 0.0)
    return mixture_weights(shifted, p)


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

DENSITY_FILE_VERSION = 1


def save_density_model(model: GmmDensityModel, path) -> None:
    doc = {
        "version": DENSITY_FILE_VERSION,
        "kind": "qfed-density",
        "n_modes": model.n_modes,
        "mix_weights": model.mix_weights.tolist(),
        "means": model.means.tolist(),
        "variances": model.variances.tolist(),
        "floored_modes": model.floored_modes,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_density_model(path) -> GmmDensityModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "qfed-density":
        raise ValueError(f"{path}: not a density model file")
    if doc.get("version") != DENSITY_FILE_VERSION:
        raise ValueError(f"{path}: unsupported density file version {doc.get('version')!r}")
    return GmmDensityModel(
        n_modes=doc["n_modes"],
        mix_weights=np.asarray(doc["mix_weights"], dtype=np.float64),
        means=np.asarray(doc["means"], dtype=np.float64),
        variances=np.asarray(doc["variances"], dtype=np.float64),
        floored_modes=doc.get("floored_modes", 0),
    )
