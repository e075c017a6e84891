"""Rank correlations and density/latent-norm alignment reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.stats

from . import hybridvae
from .distributions import GaussianMixtureSpec, gm_logpdf
from .flows import FlowModel
from .hybridvae import VaeModel, vae_anomaly_score
from .numcore import NonFiniteError, no_grad
from .oneclass import SvddModel, svdd_score

SCATTER_COLUMNS = ("sample_id", "true_logpdf", "est_logpdf_or_score", "latent_norm")


class UndefinedCorrelationError(ValueError):
    pass


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("inputs must have equal length")
    if a.size < 2:
        raise ValueError("need at least two observations")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedCorrelationError("correlation is undefined for a constant input")
    return a, b


def spearman_rho(a, b) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    a, b = _check_pair(a, b)
    ra = scipy.stats.rankdata(a) - (a.size + 1) / 2.0
    rb = scipy.stats.rankdata(b) - (b.size + 1) / 2.0
    return float(np.dot(ra, rb) / np.sqrt(np.dot(ra, ra) * np.dot(rb, rb)))


def kendall_tau(a, b) -> float:
    """Kendall's tau-b, which corrects for ties in either input."""
    a, b = _check_pair(a, b)
    n0 = a.size * (a.size - 1) // 2
    untied_a, untied_b = n0 - _tied_pairs(a), n0 - _tied_pairs(b)
    denom_sq = untied_a * untied_b
    # scipy divides by two separate square roots; the concordant-minus-discordant
    # count is an integer, so recover it and divide once for an exact +-1
    tau = scipy.stats.kendalltau(a, b, variant="b").statistic
    numer = round(tau * math.sqrt(untied_a) * math.sqrt(untied_b))
    root = math.isqrt(denom_sq)
    denom = float(root) if root * root == denom_sq else math.sqrt(denom_sq)
    return numer / denom


def _tied_pairs(v: np.ndarray) -> int:
    counts = np.unique(v, return_counts=True)[1].astype(np.int64)
    return int(np.sum(counts * (counts - 1) // 2))


def _or_nan(fn, a, b) -> float:
    try:
        return fn(a, b)
    except UndefinedCorrelationError:
        return float("nan")


@dataclass
class AlignmentReport:
    """Per-sample columns plus rank statistics.

    ``estimate`` holds the model's log-density for flows and its anomaly
    score (higher = more anomalous) otherwise; ``estimate_kind`` says which.
    """

    true_logpdf: np.ndarray
    estimate: np.ndarray
    latent_norm: np.ndarray
    estimate_kind: str = "logpdf"
    rho_norm: float = float("nan")
    tau_norm: float = float("nan")
    rho_estimate: float = float("nan")
    tau_estimate: float = float("nan")

    def __post_init__(self):
        self.true_logpdf = np.asarray(self.true_logpdf, dtype=np.float64)
        self.estimate = np.asarray(self.estimate, dtype=np.float64)
        self.latent_norm = np.asarray(self.latent_norm, dtype=np.float64)
        n = self.true_logpdf.shape[0]
        if self.estimate.shape != (n,) or self.latent_norm.shape != (n,):
            raise ValueError("report columns must have equal length")

    @property
    def estimated_logpdf(self) -> np.ndarray:
        return self.estimate if self.estimate_kind == "logpdf" else -self.estimate

    def compute_statistics(self) -> "AlignmentReport":
        """Fill in the rank statistics; a constant column (a collapsed model) gives NaN."""
        neg_norm = -self.latent_norm
        self.rho_norm = _or_nan(spearman_rho, self.true_logpdf, neg_norm)
        self.tau_norm = _or_nan(kendall_tau, self.true_logpdf, neg_norm)
        self.rho_estimate = _or_nan(spearman_rho, self.true_logpdf, self.estimated_logpdf)
        self.tau_estimate = _or_nan(kendall_tau, self.true_logpdf, self.estimated_logpdf)
        return self

    def summary(self) -> dict:
        return {
            "n": int(self.true_logpdf.shape[0]),
            "estimate_kind": self.estimate_kind,
            "spearman_true_vs_neg_norm": self.rho_norm,
            "kendall_true_vs_neg_norm": self.tau_norm,
            "spearman_true_vs_estimate": self.rho_estimate,
            "kendall_true_vs_estimate": self.tau_estimate,
        }


def _evaluate(model, x: np.ndarray):
    if isinstance(model, FlowModel):
        z, ld = model.forward(x)
        est = model.base_logpdf(z).data + ld.data
        return est, np.linalg.norm(z.data - model.center, axis=1), "logpdf"
    if isinstance(model, SvddModel):
        s = svdd_score(model, x)
        return s, np.sqrt(s), "score"
    if isinstance(model, VaeModel):
        return vae_anomaly_score(model, x), hybridvae.latent_norm(model, x), "score"
    raise TypeError(f"unsupported model {type(model).__name__}")


def alignment_report(model, test_x, spec: GaussianMixtureSpec, chunk: int = 2048) -> AlignmentReport:
    test_x = np.asarray(test_x, dtype=np.float64)
    ests, norms = [], []
    kind = "logpdf"
    with no_grad():
        for start in range(0, test_x.shape[0], chunk):
            xb = test_x[start : start + chunk]
            try:
                e, nrm, kind = _evaluate(model, xb)
            except NonFiniteError as exc:
                raise NonFiniteError(
                    exc.op, f"samples {start}..{start + xb.shape[0] - 1}: {exc.where}"
                ) from exc
            ests.append(np.atleast_1d(e))
            norms.append(nrm)
    report = AlignmentReport(
        gm_logpdf(test_x, spec), np.concatenate(ests), np.concatenate(norms), kind
    )
    return report.compute_statistics()


def _fmt(v: float) -> str:
    return repr(float(v)) if not np.isfinite(v) else format(float(v), ".17g")


def emit_scatter_data(report: AlignmentReport, path=None) -> str:
    """CSV with a header row and one row per sample, 17 significant digits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCATTER_COLUMNS)
    for i, (t, e, n) in enumerate(zip(report.true_logpdf, report.estimate, report.latent_norm)):
        w.writerow((i, _fmt(t), _fmt(e), _fmt(n)))
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def parse_scatter_data(text: str, estimate_kind: Optional[str] = "logpdf") -> AlignmentReport:
    rows = list(csv.reader(io.StringIO(text)))
    if tuple(rows[0]) != SCATTER_COLUMNS:
        raise ValueError(f"unexpected header {rows[0]}")
    body = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(-1, 3)
    return AlignmentReport(body[:, 0], body[:, 1], body[:, 2], estimate_kind)
