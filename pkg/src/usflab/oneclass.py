"""Deep SVDD and the radial density-inversion construction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .distributions import GaussianSpec, gaussian_logpdf
from .numcore import Parameter, RngStream, Tensor, as_tensor, backward, zero_grad

CENTER_EPS = 0.1


def svdd_widths(dim: int, depth: int) -> list[int]:
    """Decreasing width schedule: depth 2 -> [d, d], depth 6 -> [d, 16d, 8d, 4d, 2d, d]."""
    if not 2 <= depth <= 6:
        raise ValueError(f"encoder depth must be in 2..6, got {depth}")
    inner = [dim * 2 ** (depth - 2 - j) for j in range(depth - 2)]
    return [dim] + inner + [dim]


class SvddModel:
    """Bias-free encoder with a fixed, non-zero center.

    Hidden layers use leaky ReLU, which is unbounded and positively
    homogeneous; the last layer is linear.
    """

    def __init__(
        self,
        widths: Sequence[int],
        lam: float = 1e-6,
        stream: Optional[RngStream] = None,
        slope: float = 0.1,
    ):
        if lam < 0:
            raise ValueError("weight decay must be non-negative")
        self.widths = list(widths)
        self.lam = float(lam)
        self.slope = slope
        self.weights: list[Parameter] = []
        for k, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            W = np.eye(a, b) if stream is None else stream.normal((a, b)) * math.sqrt(2.0 / a)
            self.weights.append(Parameter(W, f"enc.W{k}"))
        self._center: Optional[np.ndarray] = None

    @property
    def center(self) -> np.ndarray:
        if self._center is None:
            raise RuntimeError("center not initialised; call init_center first")
        return self._center

    def set_center(self, c, allow_zero: bool = False) -> None:
        c = np.asarray(c, dtype=np.float64).copy()
        if c.shape != (self.widths[-1],):
            raise ValueError(f"center must have shape ({self.widths[-1]},)")
        if not allow_zero and not np.any(c):
            raise ValueError("the center must not be the zero vector")
        self._center = c

    def parameters(self) -> list[Parameter]:
        return list(self.weights)

    def encode(self, x) -> Tensor:
        h = as_tensor(x)
        if h.ndim == 1:
            h = h.reshape(1, -1)
        n = len(self.weights)
        for k, W in enumerate(self.weights):
            h = h @ W
            if k < n - 1:
                h = h.leaky_relu(self.slope)
        return h

    def __call__(self, x) -> np.ndarray:
        return self.encode(x).data


def svdd_loss(model: SvddModel, batch) -> Tensor:
    """Mean squared center distance plus ``lam/2`` times the squared Frobenius norms."""
    r = model.encode(batch) - model.center
    loss = (r * r).sum(axis=1).mean()
    if model.lam:
        reg = None
        for W in model.weights:
            t = (W * W).sum()
            reg = t if reg is None else reg + t
        loss = loss + reg * (0.5 * model.lam)
    return loss


def svdd_distance_loss(model: SvddModel, batch) -> float:
    r = model(batch) - model.center
    return float(np.mean(np.sum(r * r, axis=1)))


def svdd_score(model: SvddModel, x) -> np.ndarray | float:
    """Squared distance of the embedding to the center."""
    x = np.asarray(x, dtype=np.float64)
    r = model(x) - model.center
    s = np.sum(r * r, axis=1)
    return float(s[0]) if x.ndim == 1 else s


def init_center(encoder: Callable | SvddModel, data, eps: float = CENTER_EPS) -> np.ndarray:
    """Mean embedding of ``data``; shifted by ``eps`` per coordinate if its norm is below ``eps``."""
    emb = np.asarray(encoder(np.asarray(data, dtype=np.float64)))
    c = emb.mean(axis=0)
    if np.linalg.norm(c) < eps:
        c = c + eps
    if isinstance(encoder, SvddModel):
        encoder.set_center(c)
    return c


def pretrain_autoencoder(
    model: SvddModel,
    data: np.ndarray,
    stream: RngStream,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 128,
) -> list[float]:
    """Fit a mirrored bias-free decoder for reconstruction, updating the encoder weights in place."""
    from .training import AdamState, adam_step

    dec = []
    rev = model.widths[::-1]
    for k, (a, b) in enumerate(zip(rev[:-1], rev[1:])):
        dec.append(Parameter(stream.normal((a, b)) * math.sqrt(2.0 / a), f"dec.W{k}"))
    params = model.parameters() + dec
    state = AdamState.create(params)
    history = []
    n = data.shape[0]
    for _ in range(epochs):
        order = stream.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            xb = data[order[start : start + batch_size]]
            h = model.encode(xb)
            for k, W in enumerate(dec):
                h = h.leaky_relu(model.slope) @ W
            r = h - xb
            loss = (r * r).sum(axis=1).mean()
            zero_grad(params)
            backward(loss)
            adam_step(params, [p.grad for p in params], state, lr)
            total += float(loss) * xb.shape[0]
        history.append(total / n)
    return history


@dataclass(frozen=True)
class FAlphaMap:
    """Radial map ``x -> x / (alpha ||x||^2)`` with ``F(0) = 0``; ``||F(x)|| = 1/(alpha ||x||)``."""

    alpha: float
    dim: int

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.dim <= 2:
            raise ValueError("dimension must exceed 2")

    def __call__(self, x):
        return f_alpha_apply(self, x)


def f_alpha_apply(fmap: FAlphaMap, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != fmap.dim:
        raise ValueError(f"expected dimension {fmap.dim}, got {x.shape[-1]}")
    sq = np.sum(x * x, axis=-1, keepdims=True)
    safe = np.where(sq > 0, sq, 1.0)
    return np.where(sq > 0, x / (fmap.alpha * safe), 0.0)


def f_alpha_expected_loss(alpha: float, d: int) -> float:
    """Closed-form ``E ||F_alpha(x)||^2 = 1 / (alpha^2 (d - 2))`` for standard normal ``x``."""
    if d <= 2:
        raise ValueError("E[1/chi2_d] diverges for d <= 2")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return 1.0 / (alpha**2 * (d - 2))


def monte_carlo_estimate(
    alpha: float, d: int, n: int, stream: RngStream, return_stderr: bool = False, chunk: int = 100_000
):
    """Sample mean of ``||F_alpha(x)||^2`` over ``n`` standard normal draws."""
    fmap = FAlphaMap(alpha, d)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        x = stream.normal((m, d))
        v = np.sum(f_alpha_apply(fmap, x) ** 2, axis=1)
        total += v.sum()
        total_sq += (v * v).sum()
        done += m
    mean = total / n
    if not return_stderr:
        return mean
    var = max(total_sq / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return mean, math.sqrt(var / n)


def density_inversion_check(fmap: Callable, pairs, c=None) -> bool:
    """True iff ``||F(x)-c|| < ||F(y)-c||`` implies ``N(x) < N(y)`` for every pair.

    ``N`` is the standard normal density; all points must be non-zero.
    """
    pairs = list(pairs)
    if not pairs:
        return True
    X = np.array([p[0] for p in pairs], dtype=np.float64)
    Y = np.array([p[1] for p in pairs], dtype=np.float64)
    if np.any(~X.any(axis=1)) or np.any(~Y.any(axis=1)):
        raise ValueError("pairs must not contain the zero vector")
    d = X.shape[1]
    c = np.zeros(d) if c is None else np.asarray(c)
    fx = np.linalg.norm(np.asarray(fmap(X)) - c, axis=1)
    fy = np.linalg.norm(np.asarray(fmap(Y)) - c, axis=1)
    std = GaussianSpec(np.zeros(d), 1.0)
    nx = gaussian_logpdf(X, std)
    ny = gaussian_logpdf(Y, std)
    premise = fx < fy
    return bool(np.all(~premise | (nx < ny)))
