"""Adam, early-stopped training and seeded random hyperparameter search."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .flows import FlowModel, det_prior_penalty, flow_nll
from .hybridvae import VaeModel, elbo
from .numcore import NonFiniteError, Parameter, RngStream, backward, no_grad, zero_grad
from .oneclass import SvddModel, svdd_loss

OBJECTIVES = ("flow-mle", "flow-map", "svdd", "vae-elbo")


class NoViableConfigurationError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def create(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match parameter list")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.data.shape:
            raise ValueError(f"state shape {m.shape} does not match parameter {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    objective: str = "flow-mle"
    seed: int = 0
    prior_sigma: float = 1.0
    elbo_samples: int = 1

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("learning rate and counts must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")


@dataclass
class TrainRecord:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    initial_val_loss: float = math.nan
    best_epoch: int = -1
    wall_time: float = 0.0
    checksum: str = ""
    failed: bool = False
    failure: Optional[str] = None

    @property
    def epochs_run(self) -> int:
        return len(self.val_losses)

    @property
    def best_val_loss(self) -> float:
        return self.val_losses[self.best_epoch] if self.best_epoch >= 0 else math.nan

    def to_json(self) -> str:
        d = asdict(self)
        d["best_val_loss"] = self.best_val_loss
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainRecord":
        d = json.loads(text)
        d.pop("best_val_loss", None)
        return cls(**d)


def parameter_checksum(params: Sequence[Parameter]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _chunks(data: np.ndarray, size: int = 4096):
    for start in range(0, data.shape[0], size):
        yield data[start : start + size]


def _objective(model, config: TrainConfig, n_train: int):
    """Return (batch loss tensor fn, validation loss fn) for the configured objective."""
    kind = config.objective
    if kind in ("flow-mle", "flow-map"):
        if not isinstance(model, FlowModel):
            raise TypeError(f"{kind} needs a FlowModel")
        sigma0 = config.prior_sigma / model.dim

        def batch_loss(xb, stream):
            loss = flow_nll(model, xb)
            if kind == "flow-map":
                loss = loss + det_prior_penalty(model, sigma0) * (1.0 / n_train)
            return loss

        def val_loss(data):
            with no_grad():
                tot = sum(float(flow_nll(model, c)) * c.shape[0] for c in _chunks(data))
            return tot / data.shape[0]

    elif kind == "svdd":
        if not isinstance(model, SvddModel):
            raise TypeError("svdd objective needs an SvddModel")

        def batch_loss(xb, stream):
            return svdd_loss(model, xb)

        def val_loss(data):
            with no_grad():
                return float(svdd_loss(model, data))

    else:
        if not isinstance(model, VaeModel):
            raise TypeError("vae-elbo objective needs a VaeModel")

        def batch_loss(xb, stream):
            return -elbo(model, xb, stream, config.elbo_samples)

        def val_loss(data):
            # fixed noise so that unchanged parameters give an unchanged value
            vs = RngStream(config.seed + 7919)
            with no_grad():
                tot = sum(-float(elbo(model, c, vs, config.elbo_samples)) * c.shape[0] for c in _chunks(data))
            return tot / data.shape[0]

    return batch_loss, val_loss


def _check_disjoint(train: np.ndarray, val: np.ndarray) -> None:
    seen = {row.tobytes() for row in np.ascontiguousarray(train)}
    if any(row.tobytes() in seen for row in np.ascontiguousarray(val)):
        raise ValueError("training and validation sets overlap")


def train(model, data: tuple[np.ndarray, np.ndarray], config: TrainConfig) -> TrainRecord:
    """Mini-batch Adam with early stopping on validation loss.

    The parameters with the lowest validation loss are restored at the
    end. A non-finite value aborts training; the record is then flagged
    ``failed`` with the epoch and batch where it happened.
    """
    train_x, val_x = (np.asarray(a, dtype=np.float64) for a in data)
    _check_disjoint(train_x, val_x)
    params = model.parameters()
    stream = RngStream(config.seed)
    state = AdamState.create(params)
    batch_loss, val_loss = _objective(model, config, train_x.shape[0])
    record = TrainRecord()
    t0 = time.perf_counter()
    best = [p.data.copy() for p in params]
    best_val = math.inf
    n = train_x.shape[0]
    epoch = batch_idx = -1
    try:
        record.initial_val_loss = val_loss(val_x)
        for epoch in range(config.max_epochs):
            order = stream.permutation(n)
            total = 0.0
            for batch_idx, start in enumerate(range(0, n, config.batch_size)):
                xb = train_x[order[start : start + config.batch_size]]
                loss = batch_loss(xb, stream)
                zero_grad(params)
                backward(loss)
                adam_step(params, [p.grad for p in params], state, config.learning_rate)
                total += float(loss) * xb.shape[0]
            batch_idx = -1
            v = val_loss(val_x)
            if not math.isfinite(v):
                raise NonFiniteError("validation", "validation loss")
            record.train_losses.append(total / n)
            record.val_losses.append(v)
            if v < best_val:
                best_val = v
                record.best_epoch = epoch
                best = [p.data.copy() for p in params]
            elif epoch - record.best_epoch >= config.patience:
                break
    except (NonFiniteError, FloatingPointError) as exc:
        record.failed = True
        where = f"epoch {epoch}" + (f" batch {batch_idx}" if batch_idx >= 0 else " validation")
        record.failure = f"{where}: {exc}"
    for p, b in zip(params, best):
        p.data[...] = b
    record.wall_time = time.perf_counter() - t0
    record.checksum = parameter_checksum(params)
    return record


@dataclass
class SearchSpace:
    coupling_blocks: tuple[int, int] = (2, 10)
    conditioner_depth: tuple[int, int] = (2, 3)
    svdd_depth: tuple[int, int] = (2, 6)
    learning_rate: tuple[float, float] = (1e-4, 1e-2)
    batch_sizes: tuple[int, ...] = (64, 128, 256)
    trials: int = 10
    max_epochs: int = 200
    patience: int = 10

    def __post_init__(self):
        for name in ("coupling_blocks", "conditioner_depth", "svdd_depth", "learning_rate"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty range for {name}")
        if not self.batch_sizes:
            raise ValueError("batch_sizes must be non-empty")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")

    def sample(self, stream: RngStream) -> dict[str, Any]:
        lo, hi = self.learning_rate
        lr = math.exp(stream.uniform(math.log(lo), math.log(hi)))
        return {
            "coupling_blocks": int(stream.integers(self.coupling_blocks[0], self.coupling_blocks[1] + 1)),
            "conditioner_depth": int(stream.integers(self.conditioner_depth[0], self.conditioner_depth[1] + 1)),
            "svdd_depth": int(stream.integers(self.svdd_depth[0], self.svdd_depth[1] + 1)),
            "learning_rate": float(lo if lo == hi else lr),
            "batch_size": int(self.batch_sizes[int(stream.integers(0, len(self.batch_sizes)))]),
        }


@dataclass
class Trial:
    index: int
    seed: int
    hyperparameters: dict[str, Any]
    config: TrainConfig
    record: TrainRecord


@dataclass
class SearchResult:
    best: Trial
    best_model: Any
    trials: list[Trial]

    @property
    def best_config(self) -> TrainConfig:
        return self.best.config

    @property
    def n_failed(self) -> int:
        return sum(t.record.failed for t in self.trials)


def hp_search(
    space: SearchSpace,
    objective: str,
    data: tuple[np.ndarray, np.ndarray],
    master_seed: int,
    build_model: Callable[[dict, RngStream], Any],
    base_config: Optional[dict] = None,
    log: Optional[Callable[[str], None]] = None,
) -> SearchResult:
    """Random search; trial hyperparameters and seeds derive from ``master_seed`` alone.

    The best trial has the lowest best-validation loss among trials that
    did not fail.
    """
    master = RngStream(master_seed)
    trials: list[Trial] = []
    best: Optional[Trial] = None
    best_model = None
    for i in range(space.trials):
        hp = space.sample(master)
        seed = master.spawn_seed()
        model = build_model(hp, RngStream(seed))
        cfg = TrainConfig(
            learning_rate=hp["learning_rate"],
            batch_size=hp["batch_size"],
            max_epochs=space.max_epochs,
            patience=min(space.patience, space.max_epochs),
            objective=objective,
            seed=seed,
            **(base_config or {}),
        )
        rec = train(model, data, cfg)
        trial = Trial(i, seed, hp, cfg, rec)
        trials.append(trial)
        if log:
            status = "FAILED " + str(rec.failure) if rec.failed else f"best val {rec.best_val_loss:.6g}"
            log(f"trial {i}: {hp} -> {status}")
        ok = not rec.failed and rec.best_epoch >= 0
        if ok and (best is None or rec.best_val_loss < best.record.best_val_loss):
            best, best_model = trial, model
    if best is None:
        raise NoViableConfigurationError(f"all {space.trials} trials failed")
    return SearchResult(best, best_model, trials)
