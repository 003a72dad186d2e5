import json

import numpy as np
import pytest
import torch

from rrdcodec.entropy import SIGMA_MIN
from rrdcodec.nets import (
    ModelConfig, RRDModel, RandomFeatureLoss, load_checkpoint, save_checkpoint, timestep_embedding,
)
from rrdcodec.sampler import cfg_blend


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return RRDModel().eval()


def test_autoencoder_shapes(model):
    x = torch.rand(2, 3, 64, 64)
    z = model.ae.encode_image(x)
    assert z.shape == (2, 4, 8, 8)
    assert model.ae.decode_latent(z).shape == x.shape
    assert model.cfg.factor == 8


def test_autoencoder_odd_latent_sizes(model):
    x = torch.rand(1, 3, 72, 40)
    z = model.ae.encode_image(x)
    assert z.shape == (1, 4, 9, 5)
    assert model.ae.decode_latent(z).shape == x.shape


def test_autoencoder_rejects(model):
    with pytest.raises(ValueError):
        model.ae.encode_image(torch.rand(1, 3, 65, 64))
    bad = torch.rand(1, 3, 64, 64)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        model.ae.encode_image(bad)
    with pytest.raises(ValueError):
        model.ae.encode_image(torch.rand(3, 64, 64))


@torch.no_grad()
def test_zero_image_deterministic_and_clamped(model):
    x = torch.zeros(1, 3, 64, 64)
    a, b = model.ae.encode_image(x), model.ae.encode_image(x)
    assert torch.isfinite(a).all() and torch.equal(a, b)
    out = model.ae.decode_latent(10 * torch.randn(1, 4, 8, 8))
    assert out.min() >= 0 and out.max() <= 1
    assert torch.equal(model.ae.decode_latent(a), model.ae.decode_latent(b))


@torch.no_grad()
def test_codec_heads_and_entropy_params(model):
    z0 = torch.randn(2, 4, 9, 9)
    out = model.codec(z0, "eval")
    assert out["c"].shape == (2, model.cfg.cond_channels, 9, 9)
    assert out["z_c"].shape == z0.shape
    assert out["y"].shape == (2, model.cfg.y_channels, 5, 5)
    assert out["l_p"].shape == (2, model.cfg.side_channels, 3, 3)
    assert torch.isfinite(out["c"]).all() and torch.isfinite(out["z_c"]).all()
    assert torch.all(out["params"].sigma >= SIGMA_MIN)
    r = out["y_hat"] - out["params"].mu
    assert torch.allclose(r, torch.round(r), atol=1e-5)
    assert torch.all(out["bits"] >= 0)


@torch.no_grad()
def test_denoiser_shapes_and_zero_init_control(model):
    z = torch.randn(2, 4, 8, 8)
    c = torch.randn(2, model.cfg.cond_channels, 8, 8)
    eps_c = model.denoise_cond(z, c, 17)
    eps_b = model.denoise_base(z, 17)
    assert eps_c.shape == z.shape
    # zero-initialised injections leave the base estimate untouched
    assert torch.equal(eps_c, eps_b)
    assert torch.equal(cfg_blend(eps_b, eps_c, 1.0), eps_c)
    per_sample = model.denoise_cond(z, c, torch.tensor([3, 250]))
    assert per_sample.shape == z.shape
    with pytest.raises(ValueError):
        model.control(z, c[:, :, :4], 5)


def test_control_width_ratio(model):
    assert model.control.width == round(0.2 * model.cfg.denoiser_width)


def test_timestep_embedding():
    e = timestep_embedding(torch.tensor([0, 5, 300]), 16)
    assert e.shape == (3, 16)
    assert torch.equal(e[0, :8], torch.ones(8))
    for bad in (-1, float("nan")):
        with pytest.raises(ValueError):
            timestep_embedding(bad, 16)


def test_perceptual_proxy():
    a = RandomFeatureLoss()
    b = RandomFeatureLoss()
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q) and not p.requires_grad
    x = torch.rand(2, 3, 32, 32)
    assert float(a(x, x)) == 0.0
    assert float(a(x, 1 - x)) > 0


def test_start_mode_validation():
    with pytest.raises(ValueError):
        RRDModel(ModelConfig(start="pure"))
    assert RRDModel(ModelConfig(start="noise")).horizon == 1000
    assert RRDModel().horizon == 300


def test_model_hash_tracks_parameters_not_usage():
    torch.manual_seed(1)
    m = RRDModel()
    h = m.model_hash()
    assert len(h) == 8
    m.codec.codebook.usage += 5
    assert m.model_hash() == h
    with torch.no_grad():
        m.codec.g_a[0].bias[0] += 1e-6
    assert m.model_hash() != h


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(2)
    m = RRDModel(ModelConfig(codebook_size=64))
    path = save_checkpoint(m, tmp_path / "m.npz", {"stage": "1", "config_hash": "abc", "lambda_r": 0.5})
    m2, header = load_checkpoint(path)
    assert header["model_hash"] == m.model_hash().hex() == m2.model_hash().hex()
    assert header["config_hash"] == "abc" and header["meta"]["lambda_r"] == 0.5
    assert header["topology"]["codebook_size"] == 64
    for (k, v), (k2, v2) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)


def _rewrite(path, mutate):
    with np.load(path) as d:
        arrays = {k: d[k] for k in d.files}
    mutate(arrays)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def test_checkpoint_rejects_tampering(tmp_path):
    torch.manual_seed(3)
    path = save_checkpoint(RRDModel(), tmp_path / "m.npz")

    def bump(arrays):
        arrays["param/base.out.bias"] = arrays["param/base.out.bias"] + 1

    _rewrite(path, bump)
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(path)

    path = save_checkpoint(RRDModel(), tmp_path / "v.npz")

    def version(arrays):
        h = json.loads(arrays["__header__"].tobytes())
        h["format_version"] = 99
        arrays["__header__"] = np.frombuffer(json.dumps(h).encode(), dtype=np.uint8)

    _rewrite(path, version)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)

    path = save_checkpoint(RRDModel(), tmp_path / "k.npz")
    _rewrite(path, lambda a: a.pop("param/base.out.bias"))
    with pytest.raises(ValueError, match="incompatible"):
        load_checkpoint(path)

    np.savez(tmp_path / "plain.npz", x=np.zeros(3))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "plain.npz")
