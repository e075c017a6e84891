"""Coupling flows built from LU-sandwiched blocks.

A model is ``A_final o B_n o ... o B_1`` with blocks ``B_i = A_i^-1 o C_i o A_i``.
``A_i`` are LU-parameterised affine maps and ``C_i`` masked coupling layers:
additive for uniformly scaling flows (``kind="usf"``), affine with a clamped
log-scale head otherwise (``kind="affine"``). Each ``A_i`` and its inverse
share parameters, so their log-determinants cancel exactly and are never
accumulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .distributions import GaussianSpec, SpecError, isotropic_logpdf
from .numcore import (
    NonFiniteError,
    Parameter,
    RngStream,
    Tensor,
    as_tensor,
    solve_triangular,
)

KINDS = ("usf", "affine")
DIAG_FLOOR = 1e-6
LOG_2PI = math.log(2 * math.pi)

ConditionerFn = Callable[[Tensor], tuple]


def _rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    return x


def alternating_mask(dim: int, parity: int = 0) -> np.ndarray:
    """``(1,0,1,0,...)`` for parity 0, its complement for parity 1."""
    m = (np.arange(dim) % 2 == 0).astype(np.float64)
    return m if parity % 2 == 0 else 1.0 - m


class Conditioner:
    """Fully connected network producing the coupling shift and, optionally, log-scale.

    The output layer is zero-initialised so a fresh coupling layer is the
    identity. With ``affine=True`` a second head gives
    ``log g = clamp * tanh(a)``, which keeps ``g = exp(log g)`` inside
    ``[exp(-clamp), exp(clamp)]``.
    """

    def __init__(
        self,
        dim: int,
        hidden: list[int],
        affine: bool = False,
        clamp: float = 2.0,
        stream: Optional[RngStream] = None,
        name: str = "cond",
    ):
        self.dim = dim
        self.hidden = list(hidden)
        self.affine = affine
        self.clamp = float(clamp)
        out_dim = 2 * dim if affine else dim
        widths = [dim] + self.hidden + [out_dim]
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        n_layers = len(widths) - 1
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            if k == n_layers - 1 or stream is None:
                W = np.zeros((a, b))
            else:
                W = stream.normal((a, b)) * math.sqrt(1.0 / a)
            self.weights.append(Parameter(W, f"{name}.W{k}"))
            self.biases.append(Parameter(np.zeros(b), f"{name}.b{k}"))

    def parameters(self) -> list[Parameter]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def __call__(self, h: Tensor):
        n = len(self.weights)
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if k < n - 1:
                h = h.silu()
        if not self.affine:
            return h, None
        d = self.dim
        return h[:, :d], h[:, d:].tanh() * self.clamp


def additive_coupling_forward(x, mask: np.ndarray, cond: ConditionerFn):
    """``y = x + (1-m) * f(m * x)``; log-determinant is identically zero."""
    x = _rows(x)
    shift, _ = cond(x * mask)
    y = x + shift * (1.0 - mask)
    return y, Tensor(np.zeros(x.shape[0]))


def additive_coupling_inverse(y, mask: np.ndarray, cond: ConditionerFn) -> Tensor:
    y = _rows(y)
    shift, _ = cond(y * mask)
    return y - shift * (1.0 - mask)


def affine_coupling_forward(x, mask: np.ndarray, cond: ConditionerFn):
    """``y = m*x + (1-m)*(g(m*x)*x + f(m*x))`` with ``g = exp(log_scale)``.

    Returns ``(y, logdet)`` with ``logdet = sum over unmasked coords of log g``.
    """
    x = _rows(x)
    shift, log_scale = cond(x * mask)
    if log_scale is None:
        log_scale = Tensor(np.zeros(x.shape))
    inv = 1.0 - mask
    y = x * mask + (x * log_scale.exp() + shift) * inv
    return y, (log_scale * inv).sum(axis=1)


def affine_coupling_inverse(y, mask: np.ndarray, cond: ConditionerFn) -> Tensor:
    y = _rows(y)
    shift, log_scale = cond(y * mask)
    if log_scale is None:
        log_scale = Tensor(np.zeros(y.shape))
    inv = 1.0 - mask
    return y * mask + (y - shift * inv) * (-log_scale).exp() * inv


class LULayer:
    """Affine map ``x -> L U x + b``.

    ``L`` is unit lower-triangular, ``U`` upper-triangular with diagonal
    ``u_i = s_i * (DIAG_FLOOR + exp(r_i))``; the signs ``s_i`` are fixed at
    construction and ``r_i`` are free, so ``|u_i| >= DIAG_FLOOR`` always.
    """

    def __init__(self, dim: int, sign: Optional[np.ndarray] = None, name: str = "lu"):
        self.dim = dim
        self.sign = np.ones(dim) if sign is None else np.asarray(sign, dtype=np.float64)
        self.lower = Parameter(np.zeros((dim, dim)), f"{name}.lower")
        self.upper = Parameter(np.zeros((dim, dim)), f"{name}.upper")
        self.log_diag = Parameter(np.full(dim, log_param_for(1.0)), f"{name}.log_diag")
        self.bias = Parameter(np.zeros(dim), f"{name}.bias")
        self._strict_lower = np.tril(np.ones((dim, dim)), -1)
        self._strict_upper = np.triu(np.ones((dim, dim)), 1)
        self._eye = np.eye(dim)

    def parameters(self) -> list[Parameter]:
        return [self.lower, self.upper, self.log_diag, self.bias]

    def abs_diag(self) -> Tensor:
        return self.log_diag.exp() + DIAG_FLOOR

    def log_abs_diag(self) -> Tensor:
        return self.abs_diag().log()

    def L(self) -> Tensor:
        return self.lower * self._strict_lower + self._eye

    def U(self) -> Tensor:
        return self.upper * self._strict_upper + self._eye * (self.abs_diag() * self.sign)

    def diag(self) -> np.ndarray:
        return self.sign * (np.exp(self.log_diag.data) + DIAG_FLOOR)

    def matrix(self) -> np.ndarray:
        return self.L().data @ self.U().data

    def logdet(self) -> Tensor:
        return self.log_abs_diag().sum()

    def set_diag(self, u: np.ndarray) -> None:
        u = np.asarray(u, dtype=np.float64)
        self.sign = np.where(u < 0, -1.0, 1.0)
        self.log_diag.data[...] = log_param_for(np.abs(u))


def log_param_for(abs_u):
    """Free parameter ``r`` giving ``|u| = DIAG_FLOOR + exp(r)``."""
    a = np.asarray(abs_u, dtype=np.float64)
    if np.any(a <= DIAG_FLOOR):
        raise ValueError(f"|u| must exceed {DIAG_FLOOR}")
    r = np.log(a - DIAG_FLOOR)
    return float(r) if r.ndim == 0 else r


def lu_forward(x, params: LULayer):
    """Returns ``(y, logdet)``; ``logdet = sum_i log|u_i|`` is a scalar tensor."""
    x = _rows(x)
    y = x @ params.U().T @ params.L().T + params.bias
    return y, params.logdet()


def lu_inverse(y, params: LULayer) -> Tensor:
    """Solve ``L z = y - b`` then ``U x = z`` by triangular substitution."""
    y = _rows(y)
    rhs = (y - params.bias).T
    z = solve_triangular(params.L(), rhs, lower=True, unit_diagonal=True)
    return solve_triangular(params.U(), z, lower=False).T


@dataclass
class FlowBlock:
    affine: LULayer
    conditioner: Conditioner
    mask: np.ndarray


class FlowModel:
    def __init__(self, blocks: list[FlowBlock], final: LULayer, base: GaussianSpec, kind: str):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
        if kind == "usf" and any(b.conditioner.affine for b in blocks):
            raise ValueError("uniformly scaling flows admit additive coupling only")
        if base.kind == "full":
            raise SpecError("flow base must have isotropic or diagonal covariance")
        self.blocks = blocks
        self.final = final
        self.base = base
        self.kind = kind

    @property
    def dim(self) -> int:
        return self.final.dim

    @property
    def center(self) -> np.ndarray:
        return self.base.mean

    def lu_layers(self) -> list[LULayer]:
        return [b.affine for b in self.blocks] + [self.final]

    def parameters(self) -> list[Parameter]:
        out = []
        for b in self.blocks:
            out += b.affine.parameters() + b.conditioner.parameters()
        return out + self.final.parameters()

    def _coupling(self, block: FlowBlock):
        return affine_coupling_forward if block.conditioner.affine else additive_coupling_forward

    def _coupling_inv(self, block: FlowBlock):
        return affine_coupling_inverse if block.conditioner.affine else additive_coupling_inverse

    def forward(self, x):
        x = _rows(x)
        n = x.shape[0]
        total = None
        for i, blk in enumerate(self.blocks):
            try:
                h, _ = lu_forward(x, blk.affine)
                h, ld = self._coupling(blk)(h, blk.mask, blk.conditioner)
                x = lu_inverse(h, blk.affine)
            except NonFiniteError as exc:
                raise NonFiniteError(exc.op, f"block {i}") from exc
            if blk.conditioner.affine:
                total = ld if total is None else total + ld
        try:
            z, ld = lu_forward(x, self.final)
        except NonFiniteError as exc:
            raise NonFiniteError(exc.op, "final affine") from exc
        ld = ld + np.zeros(n)
        total = ld if total is None else total + ld
        return z, total

    def inverse(self, z):
        z = _rows(z)
        x = lu_inverse(z, self.final)
        for i in reversed(range(len(self.blocks))):
            blk = self.blocks[i]
            try:
                h, _ = lu_forward(x, blk.affine)
                h = self._coupling_inv(blk)(h, blk.mask, blk.conditioner)
                x = lu_inverse(h, blk.affine)
            except NonFiniteError as exc:
                raise NonFiniteError(exc.op, f"block {i} inverse") from exc
        return x

    def base_logpdf(self, z: Tensor) -> Tensor:
        var = self.base.variance_diagonal()
        if self.base.kind == "isotropic":
            return isotropic_logpdf(z, self.base.mean, float(var[0]))
        r = z - self.base.mean
        return (r * r * (1.0 / var)).sum(axis=-1) * -0.5 - 0.5 * (
            self.dim * LOG_2PI + float(np.sum(np.log(var)))
        )

    def log_prob(self, x) -> Tensor:
        z, ld = self.forward(x)
        return self.base_logpdf(z) + ld

    def latent_norm(self, x) -> np.ndarray:
        z, _ = self.forward(x)
        return np.linalg.norm(z.data - self.center, axis=1)


def flow_forward(model: FlowModel, x):
    return model.forward(x)


def flow_inverse(model: FlowModel, z) -> np.ndarray:
    return model.inverse(z).data


def flow_nll(model: FlowModel, batch) -> Tensor:
    """Mean negative log-likelihood of ``batch`` under the change of variables."""
    batch = _rows(batch)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    return -model.log_prob(batch).mean()


def svdd_equivalence_gap(model: FlowModel, batch) -> float:
    """``|NLL - (mean ||z-c||^2 - logdet + (d/2) log pi)|`` for a USF with base N(c, I/2)."""
    if model.kind != "usf":
        raise ValueError("equivalence gap is defined for uniformly scaling flows only")
    var = model.base.variance_diagonal()
    if not np.all(var == 0.5):
        raise ValueError("equivalence gap requires base covariance I/2")
    batch = _rows(batch)
    nll = float(flow_nll(model, batch))
    z, ld = model.forward(batch)
    sq = np.sum((z.data - model.center) ** 2, axis=1).mean()
    rhs = sq - float(model.final.logdet()) + 0.5 * model.dim * math.log(math.pi)
    return abs(nll - rhs)


def det_prior_penalty(model: FlowModel, sigma0: float) -> Tensor:
    """Negative log bilateral log-normal prior on every LU diagonal entry.

    The density is taken with respect to the free log-scale parameter, so
    per entry it reads ``log 2 + log(sigma0 sqrt(2 pi)) + (log|u|)^2 / (2 sigma0^2)``.
    """
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    const = math.log(2.0) + 0.5 * math.log(2 * math.pi * sigma0**2)
    total = None
    for lu in model.lu_layers():
        ell = lu.log_abs_diag()
        term = (ell * ell).sum() * (0.5 / sigma0**2) + const * lu.dim
        total = term if total is None else total + term
    return total


def sample_lu_prior(dim: int, sigma0: float, stream: RngStream, name: str = "lu") -> LULayer:
    """LU layer whose diagonal is drawn from BiLogNormal(0, sigma0^2); off-diagonals zero."""
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    log_abs = sigma0 * stream.normal(dim)
    sign = np.where(stream.uniform(size=dim) < 0.5, -1.0, 1.0)
    layer = LULayer(dim, sign=sign, name=name)
    # |u| below DIAG_FLOOR is unrepresentable; such draws lie > 13 sigma0-units out
    abs_u = np.maximum(np.exp(log_abs), 2 * DIAG_FLOOR)
    layer.log_diag.data[...] = log_param_for(abs_u)
    return layer


def build_flow(
    dim: int,
    n_blocks: int,
    kind: str = "usf",
    hidden_layers: int = 2,
    hidden_width: Optional[int] = None,
    clamp: float = 2.0,
    base: Optional[GaussianSpec] = None,
    stream: Optional[RngStream] = None,
) -> FlowModel:
    """Identity-initialised flow with alternating masks.

    Hidden conditioner layers get random weights from ``stream`` (zeros if
    none is given); output layers and all LU layers start at the identity.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    width = hidden_width or 4 * dim
    base = base or GaussianSpec(np.zeros(dim), 1.0)
    blocks = []
    for i in range(n_blocks):
        cond = Conditioner(
            dim, [width] * hidden_layers, affine=(kind == "affine"), clamp=clamp,
            stream=stream, name=f"block{i}.cond",
        )
        blocks.append(FlowBlock(LULayer(dim, name=f"block{i}.lu"), cond, alternating_mask(dim, i)))
    return FlowModel(blocks, LULayer(dim, name="final"), base, kind)


def perturb_parameters(model, stream: RngStream, scale: float = 0.3) -> None:
    """Add ``scale`` * N(0,1) noise to every parameter (test and demo helper)."""
    for p in model.parameters():
        p.data += scale * stream.normal(p.shape)
