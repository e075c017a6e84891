"""Command-line harness for the Gaussian-mixture study.

Exit codes: 0 success, 2 configuration error, 3 training failure (no
viable trial), 4 invariant-check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .alignment import alignment_report, emit_scatter_data
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .experiment import (
    MODEL_KINDS,
    ConfigError,
    load_config,
    make_datasets,
    model_builder,
    objective_for,
    run_experiment,
)
from .flows import FlowModel, flow_nll
from .hybridvae import VaeModel, elbo
from .invariants import run_checks
from .numcore import RngStream, no_grad
from .oneclass import (
    FAlphaMap,
    SvddModel,
    density_inversion_check,
    f_alpha_expected_loss,
    monte_carlo_estimate,
    svdd_loss,
)
from .training import NoViableConfigurationError, TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_CHECK = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI experiment configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str)
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--dim", type=int)


def _config(args):
    return load_config(args.config, seed=args.seed, out=args.out, model=args.model, dim=args.dim)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usflab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gm-experiment", help="sweep, train and report on the Gaussian-mixture benchmark")
    _common(p)

    p = sub.add_parser("train", help="train one model with fixed hyperparameters")
    _common(p)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--depth", type=int, default=2, help="conditioner hidden layers")
    p.add_argument("--svdd-depth", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=10)

    for name, text in (("eval", "evaluate a checkpoint on fresh test data"),
                       ("alignment", "write the alignment scatter CSV for a checkpoint")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("check", help="run the invariant suite (optionally on a checkpoint)")
    _common(p)
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("falpha-demo", help="density-inversion construction: closed form vs Monte Carlo")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=1_000_000)
    return parser


def _eval_loss(model, test_x, seed: int) -> dict:
    with no_grad():
        if isinstance(model, FlowModel):
            return {"nll": float(flow_nll(model, test_x))}
        if isinstance(model, SvddModel):
            return {"svdd_loss": float(svdd_loss(model, test_x))}
        if isinstance(model, VaeModel):
            return {"elbo": float(elbo(model, test_x, RngStream(seed), 1))}
    raise TypeError(type(model).__name__)


def _cmd_gm_experiment(args) -> int:
    cfg = _config(args)
    out = run_experiment(cfg, log=lambda s: print(s, file=sys.stderr))
    print((out / "summary.json").read_text(), end="")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _config(args)
    train_x, val_x, _ = make_datasets(cfg)
    hp = {"coupling_blocks": args.blocks, "conditioner_depth": args.depth, "svdd_depth": args.svdd_depth}
    model = model_builder(cfg, train_x)(hp, RngStream(cfg.seed))
    tc = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.epochs,
        patience=min(args.patience, args.epochs), objective=objective_for(cfg), seed=cfg.seed,
        prior_sigma=cfg.prior_sigma,
    )
    rec = train(model, (train_x, val_x), tc)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_record.json").write_text(rec.to_json() + "\n")
    save_checkpoint(model, out / "model.ckpt")
    print(rec.to_json())
    return EXIT_TRAIN if rec.failed and rec.best_epoch < 0 else EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    _, _, test_x = make_datasets(cfg)
    print(json.dumps(_eval_loss(model, test_x, cfg.seed), indent=2))
    return EXIT_OK


def _cmd_alignment(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    _, _, test_x = make_datasets(cfg)
    report = alignment_report(model, test_x, cfg.gm_spec())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_scatter_data(report, out / "alignment.csv")
    print(json.dumps(report.summary(), indent=2))
    return EXIT_OK


def _cmd_check(args) -> int:
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    results = run_checks(model, seed=args.seed or 0)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def _cmd_falpha(args) -> int:
    ok = True
    print(f"{'alpha':>6} {'d':>4} {'closed form':>14} {'monte carlo':>14} {'rel diff':>10}")
    for alpha in (1.0, 2.0):
        for d in (3, 8, 32):
            exact = f_alpha_expected_loss(alpha, d)
            mc = monte_carlo_estimate(alpha, d, args.samples, RngStream(args.seed))
            rel = abs(mc - exact) / exact
            print(f"{alpha:6.1f} {d:4d} {exact:14.8f} {mc:14.8f} {rel:10.4%}")
    for d in (3, 8, 32):
        s = RngStream(args.seed + d)
        pairs = list(zip(s.normal((10_000, d)), s.normal((10_000, d))))
        inv = density_inversion_check(FAlphaMap(1.0, d), pairs)
        ok &= inv
        print(f"d={d}: closer to center implies less likely on all 10000 pairs: {inv}")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {
    "gm-experiment": _cmd_gm_experiment,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "alignment": _cmd_alignment,
    "check": _cmd_check,
    "falpha-demo": _cmd_falpha,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoViableConfigurationError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
