"""Numerical invariant checks shared by the ``check`` command and the demos."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .distributions import GaussianSpec
from .flows import FlowModel, build_flow, flow_nll, perturb_parameters, svdd_equivalence_gap
from .numcore import (
    RngStream,
    backward,
    finite_diff_grad,
    no_grad,
    relative_error,
    triangular_solve,
    zero_grad,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a map R^d -> R^d at ``x``."""
    d = x.shape[0]
    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        J[:, j] = (fn(x + e) - fn(x - e)) / (2 * step)
    return J


def logdet_spread(model: FlowModel, n: int = 1000, seed: int = 0) -> float:
    """Standard deviation of the total log-determinant over N(0, 4I) inputs."""
    x = 2.0 * RngStream(seed).normal((n, model.dim))
    with no_grad():
        _, ld = model.forward(x)
    return float(np.std(ld.data))


def roundtrip_error(model: FlowModel, n: int = 1000, seed: int = 0) -> float:
    s = RngStream(seed)
    x = s.normal((n, model.dim))
    with no_grad():
        z, _ = model.forward(x)
        back = model.inverse(z).data
        z2, _ = model.forward(s.normal((n, model.dim)))
        fwd_of_inv = model.forward(model.inverse(z2))[0].data
    return float(max(np.max(np.abs(back - x)), np.max(np.abs(fwd_of_inv - z2.data))))


def rank_equivalent(model: FlowModel, n: int = 1000, seed: int = 0) -> bool:
    x = 2.0 * RngStream(seed).normal((n, model.dim))
    with no_grad():
        z, ld = model.forward(x)
        nll = -(model.base_logpdf(z).data + ld.data)
    norms = np.linalg.norm(z.data - model.center, axis=1)
    return bool(np.array_equal(np.argsort(nll, kind="stable"), np.argsort(norms, kind="stable")))


def check_checkpoint(model, seed: int = 0) -> list[CheckResult]:
    out = []
    if isinstance(model, FlowModel):
        err = roundtrip_error(model, seed=seed)
        out.append(CheckResult("inverse round trip", err < 1e-6, f"max error {err:.3g}"))
        if model.kind == "usf":
            sd = logdet_spread(model, seed=seed)
            out.append(CheckResult("constant log-determinant", sd < 1e-9, f"stdev {sd:.3g}"))
            if model.base.kind == "isotropic":
                ok = rank_equivalent(model, seed=seed)
                out.append(CheckResult("NLL / latent-norm rank equivalence", ok, "exact ordering" if ok else "orderings differ"))
    return out


def builtin_suite(seed: int = 0) -> list[CheckResult]:
    """Invariants on freshly randomised models; independent of any checkpoint."""
    s = RngStream(seed)
    out = []

    worst = 0.0
    for d in (2, 8, 32):
        m = build_flow(d, 3, "usf", base=GaussianSpec(s.normal(d), 0.5), stream=s)
        perturb_parameters(m, s, 0.2)
        worst = max(worst, svdd_equivalence_gap(m, s.normal((64, d))))
    out.append(CheckResult("NLL equals SVDD distance minus log-det (+const)", worst < 1e-9, f"max gap {worst:.3g}"))

    worst_sd = 0.0
    for d in (2, 8, 32):
        m = build_flow(d, 4, "usf", stream=s)
        perturb_parameters(m, s, 0.3)
        worst_sd = max(worst_sd, logdet_spread(m, seed=seed))
    out.append(CheckResult("USF log-determinant constant", worst_sd < 1e-9, f"max stdev {worst_sd:.3g}"))

    worst_rel = 0.0
    for kind in ("usf", "affine"):
        for d in (2, 3):
            m = build_flow(d, 3, kind, stream=s)
            perturb_parameters(m, s, 0.3)
            x = s.normal(d)
            fn = lambda v: m.forward(v)[0].data[0]
            J = fd_jacobian(fn, x)
            ld = float(m.forward(x)[1].data[0])
            worst_rel = max(worst_rel, abs(abs(np.linalg.det(J)) - math.exp(ld)) / math.exp(ld))
    out.append(CheckResult("log-det matches finite-difference Jacobian", worst_rel < 1e-4, f"max rel error {worst_rel:.3g}"))

    m = build_flow(3, 2, "affine", stream=s)
    perturb_parameters(m, s, 0.3)
    x = s.normal((5, 3))
    params = m.parameters()
    zero_grad(params)
    backward(flow_nll(m, x))
    ad = [p.grad.copy() for p in params]
    fd = finite_diff_grad(lambda: flow_nll(m, x), params, 1e-5)
    rel = relative_error(ad, fd)
    out.append(CheckResult("flow NLL gradient vs finite differences", rel < 1e-5, f"rel error {rel:.3g}"))

    T = np.triu(s.normal((6, 6)))
    np.fill_diagonal(T, s.uniform(0.5, 2.0, 6) * np.where(s.uniform(size=6) < 0.5, -1, 1))
    y = s.normal(6)
    err = float(np.max(np.abs(triangular_solve(T, T @ y, lower=False) - y)))
    out.append(CheckResult("triangular solve round trip", err < 1e-10, f"max error {err:.3g}"))
    return out


def run_checks(model=None, seed: int = 0) -> list[CheckResult]:
    results = builtin_suite(seed)
    if model is not None:
        results += check_checkpoint(model, seed)
    return results
