import numpy as np
import torch

from hbgs.gaussian_decode import (ALPHA_CULL, DEFAULT_K, DecoderBank, decode_all, decode_color, decode_covariance,
                                  decode_opacity, decode_positions, visible)
from hbgs.image_features import Mlp


def zero_bank(dim=4, k=3, offset_scale=0.5, opacity_bias=0.0):
    def z(n_in, n_out, bias=0.0):
        return Mlp([(np.zeros((8, n_in)), np.zeros(8)), (np.zeros((n_out, 8)), np.zeros(n_out) + bias)])

    return DecoderBank(z(dim + 1, k, opacity_bias), z(dim, 4 * k), z(dim, 3 * k), z(dim, 3 * k), z(dim, 3 * k), k,
                       offset_scale)


def test_default_k_is_ten():
    assert DEFAULT_K == 10
    bank = DecoderBank.init(np.random.default_rng(0), 32)
    h = torch.zeros(2, 32, dtype=torch.float64)
    assert decode_opacity(bank, h, torch.zeros(2)).shape == (2, 10)
    assert decode_color(bank, h).shape == (2, 10, 3)


def test_zero_weight_heads():
    bank = zero_bank()
    h = torch.ones(2, 4, dtype=torch.float64)
    assert torch.all(decode_opacity(bank, h, torch.ones(2)) == 0.5)
    assert torch.all(decode_color(bank, h) == 0.5)
    q, s = decode_covariance(bank, h)
    assert torch.all(q == torch.tensor([1.0, 0, 0, 0], dtype=torch.float64))
    assert torch.all(s == 0.5)
    pos = torch.tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], dtype=torch.float64)
    assert torch.equal(decode_positions(bank, pos, h), pos[:, None, :].expand(2, 3, 3))


def test_covariances_positive_definite(rng):
    bank = DecoderBank.init(rng, 8, 4, offset_scale=0.1)
    h = torch.from_numpy(rng.normal(size=(50, 8)) * 3)
    g = decode_all(bank, h, torch.from_numpy(rng.uniform(size=50)), torch.zeros(50, 3, dtype=torch.float64),
                   torch.arange(50))
    assert bool((torch.linalg.eigvalsh(g.covariances()) > 0).all())
    assert torch.allclose(torch.linalg.vector_norm(g.quats, dim=-1), torch.ones(200, dtype=torch.float64))
    assert bool(((g.colors > 0) & (g.colors < 1)).all())


def test_quaternion_sign_does_not_change_covariance(rng):
    bank = DecoderBank.init(rng, 8, 4)
    g = decode_all(bank, torch.from_numpy(rng.normal(size=(5, 8))), torch.zeros(5), torch.zeros(5, 3), torch.arange(5))
    flipped = type(g)(g.means, g.opacity, -g.quats, g.scales, g.colors, g.anchor_index)
    assert torch.allclose(g.covariances(), flipped.covariances(), atol=1e-15)


def test_position_gradient_is_identity(rng):
    bank = DecoderBank.init(rng, 8, 3)
    h = torch.from_numpy(rng.normal(size=(1, 8)))
    pos = torch.zeros(1, 3, dtype=torch.float64, requires_grad=True)
    jac = torch.autograd.functional.jacobian(lambda p: decode_positions(bank, p, h), pos)
    # every Gaussian moves one for one with its anchor
    for j in range(3):
        assert torch.equal(jac[0, j, :, 0, :], torch.eye(3, dtype=torch.float64))


def test_three_anchors_at_most_thirty_gaussians(rng):
    bank = DecoderBank.init(rng, 8)
    g = decode_all(bank, torch.from_numpy(rng.normal(size=(3, 8))), torch.zeros(3), torch.zeros(3, 3),
                   torch.tensor([0, 4, 7]))
    assert len(g) == 30 and len(visible(g)) <= 30
    assert sorted(set(g.anchor_index.tolist())) == [0, 4, 7]


def test_very_negative_opacity_culls_everything():
    bank = zero_bank(opacity_bias=-10.0)
    g = decode_all(bank, torch.zeros(3, 4, dtype=torch.float64), torch.zeros(3), torch.zeros(3, 3), torch.arange(3))
    assert float(g.opacity.max()) < ALPHA_CULL
    assert len(visible(g)) == 0


def test_no_matches_decode_nothing(rng):
    bank = DecoderBank.init(rng, 8)
    assert len(decode_all(bank, torch.zeros(0, 8), torch.zeros(0), torch.zeros(0, 3), torch.zeros(0, dtype=torch.long))) == 0
