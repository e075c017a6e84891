"""Self-describing checkpoint files.

Layout: a first line holding the version header, followed by one JSON
document with the model kind, its architecture and every parameter value
in declaration order. Floats are written with ``repr`` precision, so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .distributions import GaussianSpec
from .flows import Conditioner, FlowBlock, FlowModel, LULayer
from .hybridvae import VaeModel
from .oneclass import SvddModel

HEADER = "usflab-ckpt-v1"


class CheckpointError(ValueError):
    pass


def _params_state(params) -> list[dict]:
    return [{"name": p.name, "shape": list(p.shape), "values": p.data.ravel().tolist()} for p in params]


def _load_params(params, entries) -> None:
    if len(params) != len(entries):
        raise CheckpointError(f"expected {len(params)} parameters, found {len(entries)}")
    for p, e in zip(params, entries):
        if p.name != e["name"] or list(p.shape) != list(e["shape"]):
            raise CheckpointError(f"parameter mismatch: {p.name}{p.shape} vs {e['name']}{e['shape']}")
        p.data[...] = np.asarray(e["values"], dtype=np.float64).reshape(p.shape)


def flow_state(model: FlowModel) -> dict:
    cond = model.blocks[0].conditioner if model.blocks else None
    return {
        "kind": model.kind,
        "dim": model.dim,
        "n_blocks": len(model.blocks),
        "conditioner_widths": cond.hidden if cond else [],
        "clamp": cond.clamp if cond else 2.0,
        "masks": [b.mask.astype(int).tolist() for b in model.blocks],
        "base": model.base.to_dict(),
        "lu_signs": [lu.sign.astype(int).tolist() for lu in model.lu_layers()],
        "parameters": _params_state(model.parameters()),
    }


def flow_from_state(state: dict) -> FlowModel:
    dim = state["dim"]
    affine = state["kind"] == "affine"
    signs = state["lu_signs"]
    blocks = []
    for i, mask in enumerate(state["masks"]):
        cond = Conditioner(dim, state["conditioner_widths"], affine=affine, clamp=state["clamp"],
                           name=f"block{i}.cond")
        blocks.append(FlowBlock(LULayer(dim, sign=signs[i], name=f"block{i}.lu"), cond,
                                np.asarray(mask, dtype=np.float64)))
    final = LULayer(dim, sign=signs[-1], name="final")
    model = FlowModel(blocks, final, GaussianSpec.from_dict(state["base"]), state["kind"])
    _load_params(model.parameters(), state["parameters"])
    return model


def model_state(model) -> dict:
    if isinstance(model, FlowModel):
        return flow_state(model)
    if isinstance(model, SvddModel):
        return {
            "kind": "svdd",
            "widths": model.widths,
            "lam": model.lam,
            "slope": model.slope,
            "center": model.center.tolist(),
            "parameters": _params_state(model.parameters()),
        }
    if isinstance(model, VaeModel):
        prior_ids = {id(p) for p in model.prior.parameters()}
        own = [p for p in model.parameters() if id(p) not in prior_ids]
        return {
            "kind": "vae-flow",
            "data_dim": model.data_dim,
            "latent_dim": model.latent_dim,
            "hidden": model.hidden,
            "sigma_min": model.sigma_min,
            "recon_weight": model.recon_weight,
            "prior": flow_state(model.prior),
            "parameters": _params_state(own),
        }
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def model_from_state(state: dict):
    kind = state.get("kind")
    if kind in ("usf", "affine"):
        return flow_from_state(state)
    if kind == "svdd":
        m = SvddModel(state["widths"], lam=state["lam"], slope=state["slope"])
        m.set_center(state["center"], allow_zero=True)
        _load_params(m.parameters(), state["parameters"])
        return m
    if kind == "vae-flow":
        prior = flow_from_state(state["prior"])
        m = VaeModel(state["data_dim"], state["latent_dim"], hidden=state["hidden"], prior=prior,
                     sigma_min=state["sigma_min"], recon_weight=state["recon_weight"])
        prior_ids = {id(p) for p in prior.parameters()}
        _load_params([p for p in m.parameters() if id(p) not in prior_ids], state["parameters"])
        return m
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def dumps(model) -> str:
    return HEADER + "\n" + json.dumps(model_state(model), separators=(",", ":")) + "\n"


def loads(text: str):
    header, _, body = text.partition("\n")
    if header.strip() != HEADER:
        raise CheckpointError(f"unrecognised checkpoint header {header[:40]!r}")
    return model_from_state(json.loads(body))


def save_checkpoint(model, path) -> Path:
    path = Path(path)
    path.write_text(dumps(model))
    return path


def load_checkpoint(path):
    return loads(Path(path).read_text())
