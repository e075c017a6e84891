"""Gaussian, Gaussian-mixture and bilateral log-normal densities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .numcore import RngStream, Tensor

LOG_2PI = math.log(2.0 * math.pi)


class SpecError(ValueError):
    pass


Covariance = Union[float, np.ndarray]


@dataclass
class GaussianSpec:
    """Multivariate normal with isotropic, diagonal or full covariance.

    ``cov`` is a scalar variance (isotropic), a length-d vector (diagonal)
    or a d x d symmetric positive-definite matrix.
    """

    mean: np.ndarray
    cov: Covariance = 1.0
    _chol: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        d = self.mean.shape[0]
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.ndim == 0:
            if not cov > 0:
                raise SpecError(f"isotropic variance must be positive, got {float(cov)}")
            self.cov = float(cov)
        elif cov.ndim == 1:
            if cov.shape != (d,):
                raise SpecError(f"diagonal covariance has length {cov.shape[0]}, expected {d}")
            if np.any(cov <= 0):
                raise SpecError("diagonal covariance entries must be positive")
            self.cov = cov
        elif cov.ndim == 2:
            if cov.shape != (d, d):
                raise SpecError(f"covariance shape {cov.shape} does not match dimension {d}")
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
                raise SpecError("covariance matrix is not symmetric")
            try:
                self._chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise SpecError("covariance matrix is not positive definite") from exc
            self.cov = cov
        else:
            raise SpecError("covariance must be a scalar, vector or matrix")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def kind(self) -> str:
        c = np.asarray(self.cov)
        return ("isotropic", "diagonal", "full")[c.ndim]

    def variance_diagonal(self) -> np.ndarray:
        c = np.asarray(self.cov)
        if c.ndim == 0:
            return np.full(self.dim, float(c))
        return c.copy() if c.ndim == 1 else np.diag(c).copy()

    def covariance_matrix(self) -> np.ndarray:
        c = np.asarray(self.cov)
        if c.ndim == 2:
            return c.copy()
        return np.diag(self.variance_diagonal())

    def sample(self, n: int, stream: RngStream) -> np.ndarray:
        eps = stream.normal((n, self.dim))
        c = np.asarray(self.cov)
        if c.ndim == 2:
            return self.mean + eps @ self._chol.T
        return self.mean + eps * np.sqrt(self.variance_diagonal())

    def to_dict(self) -> dict:
        c = np.asarray(self.cov)
        return {"mean": self.mean.tolist(), "cov": c.tolist() if c.ndim else float(c)}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianSpec":
        return cls(np.asarray(d["mean"]), d["cov"] if np.ndim(d["cov"]) == 0 else np.asarray(d["cov"]))


def gaussian_logpdf(x, spec: GaussianSpec):
    """Log-density of ``spec`` at ``x``; ``x`` may be one point or an (n, d) batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.dim:
        raise SpecError(f"point has dimension {x.shape[-1]}, distribution has {spec.dim}")
    d = spec.dim
    r = x - spec.mean
    c = np.asarray(spec.cov)
    if c.ndim == 0:
        var = float(c)
        out = -0.5 * d * math.log(2 * math.pi * var) - 0.5 * np.sum(r * r, axis=-1) / var
    elif c.ndim == 1:
        out = -0.5 * (d * LOG_2PI + np.sum(np.log(c))) - 0.5 * np.sum(r * r / c, axis=-1)
    else:
        L = spec._chol
        sol = np.linalg.solve(L, np.atleast_2d(r).T).T
        half_logdet = np.sum(np.log(np.diag(L)))
        out = -0.5 * d * LOG_2PI - half_logdet - 0.5 * np.sum(sol * sol, axis=-1)
        if x.ndim == 1:
            out = out[0]
    return float(out) if np.ndim(out) == 0 else out


def isotropic_logpdf(z: Tensor, mean: np.ndarray, var: float) -> Tensor:
    """Differentiable per-row log-density of N(mean, var I) for a batch tensor."""
    d = z.shape[-1]
    r = z - mean
    return (r * r).sum(axis=-1) * (-0.5 / var) - 0.5 * d * math.log(2 * math.pi * var)


def diagonal_logpdf(x: Tensor, mean: Tensor, var: Tensor) -> Tensor:
    """Differentiable per-row log-density of N(mean, diag(var))."""
    d = x.shape[-1]
    r = x - mean
    return ((r * r) / var + var.log()).sum(axis=-1) * -0.5 - 0.5 * d * LOG_2PI


@dataclass
class GaussianMixtureSpec:
    components: list[GaussianSpec]
    weights: np.ndarray

    def __post_init__(self):
        if len(self.components) < 1:
            raise SpecError("mixture needs at least one component")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.components),):
            raise SpecError("one weight per component required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise SpecError(f"weights must be a probability vector, got {self.weights}")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise SpecError(f"components have inconsistent dimensions {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def mean(self) -> np.ndarray:
        return sum(w * c.mean for w, c in zip(self.weights, self.components))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "components": [c.to_dict() for c in self.components],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixtureSpec":
        return cls([GaussianSpec.from_dict(c) for c in d["components"]], np.asarray(d["weights"]))


def gm_logpdf(x, spec: GaussianMixtureSpec):
    """Mixture log-density via max-subtracted log-sum-exp."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logw = np.log(spec.weights)
    terms = np.stack(
        [lw + np.asarray(gaussian_logpdf(x, c)) for lw, c in zip(logw, spec.components)], axis=0
    )
    m = np.max(terms, axis=0)
    out = m + np.log(np.sum(np.exp(terms - m), axis=0))
    return float(out) if np.ndim(out) == 0 else out


def gm_sample(spec: GaussianMixtureSpec, n: int, stream: RngStream) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    labels = stream.choice(len(spec.components), size=n, p=spec.weights)
    eps = stream.normal((n, spec.dim))
    out = np.empty((n, spec.dim))
    for k, comp in enumerate(spec.components):
        sel = labels == k
        if not np.any(sel):
            continue
        c = np.asarray(comp.cov)
        if c.ndim == 2:
            out[sel] = comp.mean + eps[sel] @ comp._chol.T
        else:
            out[sel] = comp.mean + eps[sel] * np.sqrt(comp.variance_diagonal())
    return out


@dataclass(frozen=True)
class BiLogNormalSpec:
    mu: float = 0.0
    sigma2: float = 1.0

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise SpecError("sigma2 must be positive")


def bilognormal_logpdf(x, spec: BiLogNormalSpec):
    """log(1/2) + LogNormal(|x|; mu, sigma2) log-density. Undefined at 0."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x == 0):
        raise ValueError("bilateral log-normal density is undefined at 0")
    a = np.abs(x)
    la = np.log(a)
    out = (
        -math.log(2.0)
        - la
        - 0.5 * math.log(2 * math.pi * spec.sigma2)
        - (la - spec.mu) ** 2 / (2 * spec.sigma2)
    )
    return float(out) if np.ndim(out) == 0 else out


def bilognormal_sample(spec: BiLogNormalSpec, shape, stream: RngStream) -> np.ndarray:
    """Random sign times exp of a N(mu, sigma2) draw."""
    logs = spec.mu + math.sqrt(spec.sigma2) * stream.normal(shape)
    signs = np.where(stream.uniform(size=shape) < 0.5, -1.0, 1.0)
    return signs * np.exp(logs)


def mixture_from_components(means: Sequence, covs: Sequence, weights=None) -> GaussianMixtureSpec:
    comps = [GaussianSpec(m, c) for m, c in zip(means, covs)]
    if weights is None:
        weights = np.full(len(comps), 1.0 / len(comps))
    return GaussianMixtureSpec(comps, weights)
