"""Toy VAE whose latent prior is a trainable flow."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .distributions import GaussianSpec, diagonal_logpdf
from .flows import FlowModel, build_flow
from .numcore import NonFiniteError, Parameter, RngStream, Tensor, as_tensor

LOG_2PI = math.log(2 * math.pi)


class MLP:
    """Dense network with SiLU between layers and a linear output."""

    def __init__(
        self,
        widths: Sequence[int],
        stream: Optional[RngStream],
        name: str,
        zero_last: bool = False,
    ):
        self.widths = list(widths)
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        n = len(self.widths) - 1
        for k, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if (zero_last and k == n - 1) or stream is None:
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

    def __call__(self, h: Tensor) -> Tensor:
        n = len(self.weights)
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if k < n - 1:
                h = h.silu()
        return h


class VaeModel:
    """Gaussian encoder, Gaussian decoder with fixed noise ``sigma_min``, flow prior over the latent.

    The encoder has a shared trunk and two zero-initialised heads, one for
    the posterior mean and one for the log-variance, so a fresh encoder
    outputs ``mu = 0`` and ``var = 1``.
    """

    def __init__(
        self,
        data_dim: int,
        latent_dim: int,
        hidden: Sequence[int] = (32,),
        prior: Optional[FlowModel] = None,
        prior_kind: str = "usf",
        prior_blocks: int = 2,
        sigma_min: float = 0.1,
        recon_weight: float = 1.0,
        stream: Optional[RngStream] = None,
    ):
        if latent_dim >= data_dim:
            raise ValueError("latent dimension must be smaller than the data dimension")
        if sigma_min <= 0:
            raise ValueError("sigma_min must be positive")
        if recon_weight < 0:
            raise ValueError("recon_weight must be non-negative")
        self.data_dim = data_dim
        self.latent_dim = latent_dim
        self.hidden = list(hidden)
        self.sigma_min = float(sigma_min)
        self.recon_weight = float(recon_weight)
        self.trunk = MLP([data_dim] + self.hidden, stream, "enc.trunk")
        h = self.hidden[-1] if self.hidden else data_dim
        self.mu_head = MLP([h, latent_dim], stream, "enc.mu", zero_last=True)
        self.logvar_head = MLP([h, latent_dim], stream, "enc.logvar", zero_last=True)
        self.decoder = MLP([latent_dim] + self.hidden[::-1] + [data_dim], stream, "dec")
        if prior is None:
            prior = build_flow(
                latent_dim, prior_blocks, prior_kind, base=GaussianSpec(np.zeros(latent_dim), 1.0),
                stream=stream,
            )
        if not (np.all(prior.base.mean == 0) and np.all(prior.base.variance_diagonal() == 1)):
            raise ValueError("prior flow base must be N(0, I)")
        if prior.dim != latent_dim:
            raise ValueError("prior flow dimension must equal the latent dimension")
        self.prior = prior

    def parameters(self) -> list[Parameter]:
        return (
            self.trunk.parameters()
            + self.mu_head.parameters()
            + self.logvar_head.parameters()
            + self.decoder.parameters()
            + self.prior.parameters()
        )

    def _trunk(self, x: Tensor) -> Tensor:
        h = self.trunk(x)
        return h.silu() if self.hidden else h

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)


def _rows(x) -> Tensor:
    x = as_tensor(x)
    return x.reshape(1, -1) if x.ndim == 1 else x


def encode(model: VaeModel, x):
    """Posterior mean and (strictly positive) diagonal variance."""
    h = model._trunk(_rows(x))
    return model.mu_head(h), model.logvar_head(h).exp()


def reparam_sample(mu, var, stream: RngStream, eps: Optional[np.ndarray] = None) -> Tensor:
    """``mu + sqrt(var) * eps`` with ``eps ~ N(0, I)`` drawn from ``stream`` unless given."""
    mu, var = as_tensor(mu), as_tensor(var)
    if eps is None:
        eps = stream.normal(mu.shape)
    return mu + var.sqrt() * eps


def _term(name: str, fn):
    try:
        return fn()
    except NonFiniteError as exc:
        raise NonFiniteError(exc.op, f"elbo {name} term") from exc


def elbo_terms(model: VaeModel, x, eps: np.ndarray) -> dict[str, Tensor]:
    """Per-row reconstruction, entropy and prior terms for fixed noise ``eps``.

    ``eps`` has shape ``(n_samples, n, latent_dim)``; terms are averaged over
    samples and returned per data row.
    """
    x = _rows(x)
    eps = np.asarray(eps, dtype=np.float64)
    S, n = eps.shape[0], x.shape[0]
    mu, var = encode(model, x)
    # all samples are stacked into one batch of S * n rows
    idx = np.tile(np.arange(n), S)
    mu_s, var_s = mu[idx], var[idx]
    z = reparam_sample(mu_s, var_s, None, eps=eps.reshape(S * n, model.latent_dim))
    D = model.data_dim
    s2 = model.sigma_min**2

    def rec():
        r = x.data[idx] - model.decode(z)
        return (r * r).sum(axis=1) * (-0.5 / s2) - 0.5 * D * math.log(2 * math.pi * s2)

    terms = {
        "reconstruction": _term("reconstruction", rec),
        "entropy": _term("entropy", lambda: -diagonal_logpdf(z, mu_s, var_s)),
        "prior": _term("prior", lambda: model.prior.log_prob(z)),
    }
    return {k: v.reshape(S, n).mean(axis=0) for k, v in terms.items()}


def elbo(model: VaeModel, x, stream: RngStream, n_samples: int = 1) -> Tensor:
    """Monte-Carlo ELBO averaged over the batch; a quantity to maximise."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    x = _rows(x)
    eps = stream.normal((n_samples, x.shape[0], model.latent_dim))
    t = elbo_terms(model, x, eps)
    return (t["reconstruction"] + t["entropy"] + t["prior"]).mean()


def vae_anomaly_score(model: VaeModel, x) -> np.ndarray | float:
    """Flow-prior NLL at the posterior mean plus ``recon_weight`` times squared reconstruction error."""
    xr = _rows(x)
    mu, _ = encode(model, xr)
    latent_nll = -model.prior.log_prob(mu).data
    r = xr.data - model.decode(mu).data
    score = latent_nll + model.recon_weight * np.sum(r * r, axis=1)
    return float(score[0]) if np.ndim(x) == 1 else score


def latent_norm(model: VaeModel, x) -> np.ndarray:
    """Norm of the prior-flow image of the posterior mean."""
    mu, _ = encode(model, _rows(x))
    z, _ = model.prior.forward(mu)
    return np.linalg.norm(z.data, axis=1)
