"""Asymmetric Gaussian-mixture study: data, sweep, training and artifacts."""

from __future__ import annotations

import configparser
import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .alignment import alignment_report, emit_scatter_data
from .checkpoint import save_checkpoint
from .distributions import GaussianMixtureSpec, GaussianSpec, gm_sample
from .flows import build_flow
from .hybridvae import VaeModel
from .numcore import RngStream
from .oneclass import SvddModel, init_center, pretrain_autoencoder, svdd_widths
from .training import SearchResult, SearchSpace, hp_search

MODEL_KINDS = ("usf", "non-usf", "svdd", "vae-usf", "vae-non-usf")
ARTIFACTS = ("alignment.csv", "sweep.csv", "model.ckpt", "summary.json")


class ConfigError(ValueError):
    pass


def make_gm_spec(d: int, weights=(0.5, 0.5)) -> GaussianMixtureSpec:
    """Components N(1, I) and N(-1, diag(theta)); theta has ceil(d/2) entries 5.0, the rest 0.5."""
    if d < 2:
        raise ValueError("dimension must be at least 2")
    theta = np.full(d, 0.5)
    theta[: (d + 1) // 2] = 5.0
    return GaussianMixtureSpec(
        [GaussianSpec(np.ones(d), 1.0), GaussianSpec(-np.ones(d), theta)], np.asarray(weights)
    )


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"expected numbers, got {text!r}") from exc


def mixture_to_section(spec: GaussianMixtureSpec) -> dict[str, str]:
    out = {"components": str(len(spec.components)), "weights": ", ".join(repr(float(w)) for w in spec.weights)}
    for k, c in enumerate(spec.components):
        out[f"mean_{k}"] = ", ".join(repr(float(v)) for v in c.mean)
        cov = np.asarray(c.cov)
        tag = ("iso", "diag", "full")[cov.ndim]
        out[f"cov_{k}"] = f"{tag}: " + ", ".join(repr(float(v)) for v in np.ravel(cov))
    return out


def mixture_from_section(section) -> GaussianMixtureSpec:
    k = int(section["components"])
    comps = []
    for i in range(k):
        mean = np.asarray(_floats(section[f"mean_{i}"]))
        tag, _, vals = section[f"cov_{i}"].partition(":")
        v = np.asarray(_floats(vals))
        tag = tag.strip()
        if tag == "iso":
            cov = float(v[0])
        elif tag == "diag":
            cov = v
        elif tag == "full":
            cov = v.reshape(mean.size, mean.size)
        else:
            raise ConfigError(f"unknown covariance tag {tag!r}")
        comps.append(GaussianSpec(mean, cov))
    return GaussianMixtureSpec(comps, np.asarray(_floats(section["weights"])))


@dataclass
class ExperimentConfig:
    dim: int = 2
    model: str = "usf"
    n_train: int = 20000
    n_val: int = 5000
    n_test: int = 5000
    seed: int = 0
    out: str = "runs/gm"
    objective: str = "mle"
    prior_sigma: float = 1.0
    hidden_width: Optional[int] = None
    latent_dim: Optional[int] = None
    svdd_lambda: float = 1e-6
    svdd_pretrain: bool = False
    sigma_min: float = 0.1
    clamp: float = 2.0
    sweep: SearchSpace = field(default_factory=SearchSpace)
    mixture: Optional[GaussianMixtureSpec] = None

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError("dim must be at least 2")
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("sample counts must be at least 1")
        if self.objective not in ("mle", "map"):
            raise ConfigError("objective must be 'mle' or 'map'")
        if self.mixture is not None and self.mixture.dim != self.dim:
            raise ConfigError("mixture dimension does not match dim")

    def gm_spec(self) -> GaussianMixtureSpec:
        return self.mixture if self.mixture is not None else make_gm_spec(self.dim)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("sweep", "mixture")}
        d["sweep"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.sweep).items()}
        return d


_SWEEP_PAIRS = {
    "coupling_blocks": int,
    "conditioner_depth": int,
    "svdd_depth": int,
    "learning_rate": float,
}


def _coerce(name: str, raw: str, typ):
    try:
        if typ is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def load_config(path=None, text: Optional[str] = None, **overrides) -> ExperimentConfig:
    """Read an INI-style file with ``[experiment]``, ``[sweep]`` and optional ``[mixture]`` sections.

    Keyword overrides (``None`` values ignored) replace file values.
    """
    cp = configparser.ConfigParser()
    try:
        if path is not None:
            if not cp.read(path):
                raise ConfigError(f"cannot read config file {path}")
        elif text is not None:
            cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc

    types = {
        "dim": int, "model": str, "n_train": int, "n_val": int, "n_test": int, "seed": int,
        "out": str, "objective": str, "prior_sigma": float, "hidden_width": int,
        "latent_dim": int, "svdd_lambda": float, "svdd_pretrain": bool, "sigma_min": float,
        "clamp": float,
    }
    kw = {}
    if cp.has_section("experiment"):
        for key, raw in cp.items("experiment"):
            if key not in types:
                raise ConfigError(f"unknown [experiment] key {key!r}")
            if raw.strip():
                kw[key] = _coerce(key, raw, types[key])
    sweep_kw = {}
    if cp.has_section("sweep"):
        for key, raw in cp.items("sweep"):
            if key in _SWEEP_PAIRS:
                vals = _floats(raw)
                if len(vals) == 1:
                    vals = vals * 2
                if len(vals) != 2:
                    raise ConfigError(f"{key} needs 'low, high'")
                sweep_kw[key] = tuple(_SWEEP_PAIRS[key](v) for v in vals)
            elif key == "batch_sizes":
                sweep_kw[key] = tuple(int(v) for v in _floats(raw))
            elif key in ("trials", "max_epochs", "patience"):
                sweep_kw[key] = _coerce(key, raw, int)
            else:
                raise ConfigError(f"unknown [sweep] key {key!r}")
    try:
        if cp.has_section("mixture"):
            kw["mixture"] = mixture_from_section(cp["mixture"])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        kw["sweep"] = SearchSpace(**sweep_kw)
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_ini(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    exp = {k: ("" if v is None else str(v)) for k, v in cfg.to_dict().items() if k != "sweep"}
    cp["experiment"] = exp
    sw = {}
    for k, v in asdict(cfg.sweep).items():
        sw[k] = ", ".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)
    cp["sweep"] = sw
    if cfg.mixture is not None:
        cp["mixture"] = mixture_to_section(cfg.mixture)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def make_datasets(cfg: ExperimentConfig):
    """Train/val split of one pool plus an independent test draw, all from ``cfg.seed``."""
    spec = cfg.gm_spec()
    stream = RngStream(cfg.seed)
    pool = gm_sample(spec, cfg.n_train + cfg.n_val, stream)
    order = stream.permutation(pool.shape[0])
    train = pool[order[: cfg.n_train]]
    val = pool[order[cfg.n_train :]]
    test = gm_sample(spec, cfg.n_test, stream)
    return train, val, test


def objective_for(cfg: ExperimentConfig) -> str:
    if cfg.model == "svdd":
        return "svdd"
    if cfg.model.startswith("vae"):
        return "vae-elbo"
    return "flow-map" if cfg.objective == "map" else "flow-mle"


def model_builder(cfg: ExperimentConfig, train_x: np.ndarray) -> Callable[[dict, RngStream], object]:
    d = cfg.dim
    width = cfg.hidden_width or 4 * d

    def build(hp: dict, stream: RngStream):
        if cfg.model in ("usf", "non-usf"):
            return build_flow(
                d, hp["coupling_blocks"], "usf" if cfg.model == "usf" else "affine",
                hidden_layers=hp["conditioner_depth"], hidden_width=width, clamp=cfg.clamp,
                base=GaussianSpec(np.zeros(d), 1.0), stream=stream,
            )
        if cfg.model == "svdd":
            m = SvddModel(svdd_widths(d, hp["svdd_depth"]), lam=cfg.svdd_lambda, stream=stream)
            if cfg.svdd_pretrain:
                pretrain_autoencoder(m, train_x, stream)
            init_center(m, train_x)
            return m
        latent = cfg.latent_dim or max(1, d // 2)
        prior = build_flow(
            latent, hp["coupling_blocks"], "usf" if cfg.model == "vae-usf" else "affine",
            hidden_layers=hp["conditioner_depth"], hidden_width=cfg.hidden_width or 4 * latent,
            clamp=cfg.clamp, base=GaussianSpec(np.zeros(latent), 1.0), stream=stream,
        )
        return VaeModel(d, latent, hidden=(width,), prior=prior, sigma_min=cfg.sigma_min, stream=stream)

    return build


SWEEP_COLUMNS = (
    "trial", "seed", "coupling_blocks", "conditioner_depth", "svdd_depth", "learning_rate",
    "batch_size", "best_val_loss", "failed", "wall_time_seconds",
)


def sweep_csv(result: SearchResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for t in result.trials:
        hp = t.hyperparameters
        w.writerow((
            t.index, t.seed, hp["coupling_blocks"], hp["conditioner_depth"], hp["svdd_depth"],
            format(hp["learning_rate"], ".17g"), hp["batch_size"],
            format(t.record.best_val_loss, ".17g"), int(t.record.failed),
            format(t.record.wall_time, ".3f"),
        ))
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, log: Optional[Callable[[str], None]] = None) -> Path:
    """Generate data, sweep, and write the four artifacts into ``cfg.out``.

    Files: ``alignment.csv`` (per-sample scatter data), ``sweep.csv``,
    ``model.ckpt`` (best model) and ``summary.json``.
    """
    out = Path(cfg.out)
    spec = cfg.gm_spec()
    train_x, val_x, test_x = make_datasets(cfg)
    result = hp_search(
        cfg.sweep, objective_for(cfg), (train_x, val_x), cfg.seed,
        model_builder(cfg, train_x), base_config={"prior_sigma": cfg.prior_sigma}, log=log,
    )
    report = alignment_report(result.best_model, test_x, spec)

    out.mkdir(parents=True, exist_ok=True)
    emit_scatter_data(report, out / "alignment.csv")
    (out / "sweep.csv").write_text(sweep_csv(result))
    save_checkpoint(result.best_model, out / "model.ckpt")
    best = result.best
    summary = {
        "config": cfg.to_dict(),
        "alignment": report.summary(),
        "best_trial": best.index,
        "best_hyperparameters": best.hyperparameters,
        "best_val_loss": best.record.best_val_loss,
        "final_train_loss": best.record.train_losses[best.record.best_epoch],
        "test_mean_estimate": float(np.mean(report.estimate)),
        "trials": len(result.trials),
        "failed_trials": result.n_failed,
        "failures": [t.record.failure for t in result.trials if t.record.failed],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out
