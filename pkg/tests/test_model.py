import os

import numpy as np
import pytest
import torch

from msmatch import model as M
from oracles import desk_tiny_params, gradient_check

# reported parameter counts of the 1000-class reference networks
REFERENCE_PARAMS = {"B0": 5.3e6, "B1": 7.8e6, "B2": 9.2e6, "B3": 12e6}


@pytest.mark.parametrize("variant", ["B0", "B1", "B2", "B3"])
def test_efficientnet_parameter_counts(variant):
    net = M.build_classifier(M.ClassifierConfig(3, 1000, variant))
    assert M.parameter_count(net) == pytest.approx(REFERENCE_PARAMS[variant], rel=0.02)


def test_b2_vs_count_for_thirteen_bands_and_ten_classes():
    a = M.parameter_count(M.build_classifier(M.ClassifierConfig(3, 10, "B2")))
    b = M.parameter_count(M.build_classifier(M.ClassifierConfig(13, 10, "B2")))
    stem_out = 32
    assert b - a == 10 * stem_out * 3 * 3


@pytest.mark.parametrize("c,k", [(1, 2), (3, 4), (13, 10), (5, 21)])
def test_desk_tiny_closed_form(c, k):
    net = M.build_classifier(M.ClassifierConfig(c, k, "desk_tiny"))
    assert M.parameter_count(net) == M.desk_tiny_parameter_count(c, k) == desk_tiny_params(c, k)


def test_desk_tiny_frozen_count():
    assert M.desk_tiny_parameter_count(3, 4) == 23956


@pytest.mark.parametrize("variant", ["desk_tiny", "B0"])
def test_forward_shape_and_channel_check(variant):
    net = M.build_classifier(M.ClassifierConfig(13, 7, variant)).eval()
    with torch.no_grad():
        assert net(torch.zeros(2, 13, 32, 32)).shape == (2, 7)
    with pytest.raises(M.ModelError):
        net(torch.zeros(2, 3, 32, 32))


def test_config_validation():
    with pytest.raises(M.ModelError):
        M.ClassifierConfig(0, 10)
    with pytest.raises(M.ModelError):
        M.ClassifierConfig(3, 1)
    with pytest.raises(M.ModelError):
        M.ClassifierConfig(3, 10, "B7")
    assert M.ClassifierConfig().dropout == 0.3


@pytest.mark.parametrize("variant", ["desk_tiny", "B0"])
def test_seed_determines_weights(variant):
    cfg = M.ClassifierConfig(4, 5, variant)
    a = M.flat_parameters(M.build_classifier(cfg, seed=3))
    b = M.flat_parameters(M.build_classifier(cfg, seed=3))
    c = M.flat_parameters(M.build_classifier(cfg, seed=4))
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    before = torch.rand(1)
    torch.manual_seed(0)
    M.build_classifier(M.ClassifierConfig(3, 4, "desk_tiny"), seed=9)
    assert torch.equal(torch.rand(1), before)


@pytest.mark.parametrize("variant", ["desk_tiny", "B0"])
def test_channel_neutrality(variant):
    """Extra input planes with zero stem weights leave the logits unchanged."""
    rgb = M.build_classifier(M.ClassifierConfig(3, 6, variant), seed=1).eval()
    ms = M.build_classifier(M.ClassifierConfig(13, 6, variant), seed=2).eval()
    state = {k: v.clone() for k, v in rgb.state_dict().items()}
    stem_key = [k for k, v in ms.state_dict().items() if v.ndim == 4][0]
    wide = torch.zeros_like(ms.state_dict()[stem_key])
    wide[:, :3] = state[stem_key]
    state[stem_key] = wide
    ms.load_state_dict(state)
    x = torch.randn(2, 13, 32, 32)
    x_zero = x.clone()
    x_zero[:, 3:] = 0
    with torch.no_grad():
        ref = rgb(x[:, :3])
        torch.testing.assert_close(ms(x), ref, atol=1e-5, rtol=0)
        torch.testing.assert_close(ms(x_zero), ref, atol=1e-5, rtol=0)


def test_gradient_check_float64():
    net = M.build_classifier(M.ClassifierConfig(3, 4, "desk_tiny", 0.0), seed=0).double().eval()
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    y = torch.tensor([1, 3])
    results = gradient_check(net, lambda: torch.nn.functional.cross_entropy(net(x), y), n_coords=20, h=1e-3)
    assert len(results) == 20
    assert max(r[2] for r in results) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    cfg = M.ClassifierConfig(3, 4, "desk_tiny", 0.0)
    net = M.build_classifier(cfg, seed=5)
    opt = torch.optim.SGD(net.parameters(), lr=0.1, momentum=0.9)
    net(torch.randn(2, 3, 8, 8)).sum().backward()
    opt.step()
    path = tmp_path / "sub" / "ck.pt"
    M.save_checkpoint(path, net, opt, step=11, manifest_hash="abc", extra={"k": 1})
    assert [p.name for p in path.parent.iterdir()] == ["ck.pt"]  # no temp files left
    back, payload = M.load_checkpoint(path)
    assert back.config == cfg and payload["step"] == 11 and payload["manifest_hash"] == "abc"
    assert torch.equal(M.flat_parameters(back), M.flat_parameters(net))
    assert payload["optimizer"]["state"]


def test_checkpoint_write_is_atomic(tmp_path, monkeypatch):
    net = M.build_classifier(M.ClassifierConfig(3, 4, "desk_tiny"))
    path = tmp_path / "ck.pt"
    M.save_checkpoint(path, net)
    before = path.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(torch, "save", boom)
    with pytest.raises(OSError):
        M.save_checkpoint(path, net, step=99)
    assert path.read_bytes() == before
    assert os.listdir(tmp_path) == ["ck.pt"]
