"""Checkpoint files round-trip every model kind bit-exactly."""

import numpy as np
import pytest

from conftest import half_base, random_flow
from usflab.checkpoint import HEADER, CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from usflab.flows import perturb_parameters
from usflab.hybridvae import VaeModel, vae_anomaly_score
from usflab.numcore import RngStream
from usflab.oneclass import SvddModel, init_center, svdd_score, svdd_widths


def _same_params(a, b):
    pa, pb = a.parameters(), b.parameters()
    assert [p.name for p in pa] == [p.name for p in pb]
    for x, y in zip(pa, pb):
        assert x.data.tobytes() == y.data.tobytes()


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["usf", "affine"])
    def test_flow(self, kind, tmp_path):
        m = random_flow(3, 3, kind, 1, base=half_base(3, 2))
        m.final.set_diag([-1.5, 0.7, 2.0])
        back = load_checkpoint(save_checkpoint(m, tmp_path / "m.ckpt"))
        _same_params(m, back)
        assert back.kind == kind
        np.testing.assert_array_equal(back.final.sign, m.final.sign)
        x = RngStream(3).normal((20, 3))
        assert m.forward(x)[0].data.tobytes() == back.forward(x)[0].data.tobytes()
        assert m.log_prob(x).data.tobytes() == back.log_prob(x).data.tobytes()

    def test_header(self):
        text = dumps(random_flow(2, 1, "usf", 4))
        assert text.splitlines()[0] == HEADER == "usflab-ckpt-v1"

    def test_svdd(self):
        s = RngStream(5)
        m = SvddModel(svdd_widths(3, 4), lam=1e-3, stream=s)
        init_center(m, s.normal((40, 3)))
        back = loads(dumps(m))
        _same_params(m, back)
        x = s.normal((10, 3))
        assert svdd_score(m, x).tobytes() == svdd_score(back, x).tobytes()
        assert back.lam == m.lam

    def test_vae(self):
        m = VaeModel(4, 2, hidden=(6,), prior_kind="affine", stream=RngStream(6))
        perturb_parameters(m, RngStream(7), 0.2)
        back = loads(dumps(m))
        _same_params(m, back)
        x = RngStream(8).normal((10, 4))
        assert vae_anomaly_score(m, x).tobytes() == vae_anomaly_score(back, x).tobytes()

    def test_bad_header(self):
        with pytest.raises(CheckpointError):
            loads("not-a-checkpoint\n{}\n")

    def test_unknown_kind(self):
        with pytest.raises(CheckpointError):
            loads(HEADER + '\n{"kind": "gan"}\n')

    def test_parameter_mismatch(self):
        text = dumps(random_flow(2, 2, "usf", 9))
        broken = text.replace('"block1.lu.lower"', '"block1.lu.upper"', 1)
        with pytest.raises(CheckpointError):
            loads(broken)
