import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from aptbench.config import LossWeights
from aptbench.losses import (
    EPS,
    ZeroDirection,
    apt_total,
    fooling_loss,
    l2_distance,
    locality_sample,
    locality_step,
    loss_pt,
    loss_R,
    loss_rec,
    noise_reg,
    perceptual_distance,
    pg_from_scores,
)

from conftest import micro_fixtures



@pytest.fixture(autouse=True)
def _float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def _feats(x):
    # two fixed "taps": the image itself and a 2x2-pooled copy with 2 channels
    a = x
    b = torch.nn.functional.avg_pool2d(torch.cat([x, x.square()], dim=1), 2)
    return [a, b]


def _brute_perceptual(x, y):
    out = []
    for i in range(x.shape[0]):
        total = 0.0
        for fx, fy in zip(_feats(x[i : i + 1]), _feats(y[i : i + 1])):
            fx, fy = fx[0].numpy(), fy[0].numpy()
            c, h, w = fx.shape
            acc = 0.0
            for r in range(h):
                for s in range(w):
                    u = fx[:, r, s] / math.sqrt((fx[:, r, s] ** 2).sum() + 1e-10)
                    v = fy[:, r, s] / math.sqrt((fy[:, r, s] ** 2).sum() + 1e-10)
                    acc += ((u - v) ** 2).sum()
            total += acc / (h * w)
        out.append(total)
    return np.array(out)


def test_perceptual_distance_matches_per_pixel_loop():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(3, 1, 4, 4, generator=g)
    y = torch.randn(3, 1, 4, 4, generator=g)
    got = perceptual_distance(x, y, _feats).numpy()
    np.testing.assert_allclose(got, _brute_perceptual(x, y), rtol=1e-12)


def test_perceptual_distance_zero_on_self_and_symmetric():
    x = torch.randn(4, 1, 4, 4)
    y = torch.randn(4, 1, 4, 4)
    assert torch.allclose(perceptual_distance(x, x, _feats), torch.zeros(4), atol=1e-14)
    assert torch.allclose(perceptual_distance(x, y, _feats), perceptual_distance(y, x, _feats))
    assert (perceptual_distance(x, y, _feats) >= 0).all()


def test_perceptual_distance_shape_mismatch():
    with pytest.raises(ValueError):
        perceptual_distance(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2), _feats)


def test_l2_is_mean_squared_error():
    x = torch.zeros(2, 1, 2, 2)
    y = torch.ones(2, 1, 2, 2) * torch.tensor([1.0, 2.0]).reshape(2, 1, 1, 1)
    assert torch.equal(l2_distance(x, y), torch.tensor([1.0, 4.0]))


def _noise_reg_loop(n):
    n = n.clone()
    total = 0.0
    while min(n.shape[-2:]) >= 4:
        a = n.numpy()
        h, w = a.shape
        right = sum(a[i, j] * a[i, (j - 1) % w] for i in range(h) for j in range(w)) / (h * w)
        down = sum(a[i, j] * a[(i - 1) % h, j] for i in range(h) for j in range(w)) / (h * w)
        total += right**2 + down**2
        n = torch.nn.functional.avg_pool2d(n[None, None], 2)[0, 0]
    return total


def test_noise_reg_matches_loop():
    g = torch.Generator().manual_seed(1)
    maps = [torch.randn(2, 1, 8, 8, generator=g), torch.randn(2, 1, 4, 4, generator=g)]
    got = noise_reg(maps)
    for b in range(2):
        want = sum(_noise_reg_loop(m[b, 0]) for m in maps)
        assert got[b].item() == pytest.approx(want, rel=1e-12)


def test_noise_reg_zero_for_checkerboard_free_pattern():
    # alternating columns: horizontal autocorrelation -1, vertical +1 -> both squared
    n = torch.tensor([[1.0, -1.0, 1.0, -1.0]] * 4)[None, None]
    assert noise_reg([n]).item() == pytest.approx(2.0)


def test_noise_reg_needs_a_large_enough_map():
    with pytest.raises(ValueError):
        noise_reg([torch.randn(1, 1, 2, 2)])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=8, max_size=8),
    st.lists(st.floats(-5, 5), min_size=8, max_size=8),
    st.floats(0.0, 50.0),
)
def test_locality_step_norm_equals_alpha(wp, wz, alpha):
    w_p = torch.tensor(wp).reshape(1, 2, 4)
    w_z = torch.tensor(wz).reshape(1, 2, 4)
    if torch.equal(w_p, w_z):
        with pytest.raises(ZeroDirection):
            locality_step(w_p, w_z, alpha)
        return
    diff = (w_z - w_p).norm()
    if diff < 1e-9:
        return
    w_r = locality_step(w_p, w_z, alpha)
    assert abs((w_r - w_p).norm().item() - alpha) <= 1e-9 * max(1.0, alpha)
    # direction is toward w_z
    if alpha > 1e-6:
        cos = ((w_r - w_p).flatten() @ (w_z - w_p).flatten()) / ((w_r - w_p).norm() * diff)
        assert cos.item() == pytest.approx(1.0, abs=1e-9)


def test_locality_sample_redraws_degenerate_z():
    w_p = torch.zeros(1, 2, 3)
    calls = []

    def mapping(z, c):
        calls.append(z.clone())
        # first draw lands exactly on the pivot
        return torch.zeros(1, 2, 3) if len(calls) == 1 else torch.ones(1, 2, 3)

    w_r = locality_sample(w_p, torch.zeros(1, 2), torch.tensor([0]), 2.0, mapping, torch.Generator().manual_seed(0))
    assert len(calls) == 2
    assert w_r.norm().item() == pytest.approx(2.0)


def test_locality_sample_gives_up():
    with pytest.raises(ZeroDirection):
        locality_sample(torch.zeros(1, 1, 2), torch.zeros(1, 2), torch.tensor([0]), 1.0, lambda z, c: torch.zeros(1, 1, 2), retries=3)


def test_fooling_loss_values():
    p = torch.tensor([[0.2, 0.5, 0.3], [1.0, 0.0, 0.0]])
    got = fooling_loss(p, torch.tensor([1, 2]))
    assert got[0].item() == pytest.approx(-math.log(0.5))
    # a zero probability is clamped, not infinite
    assert got[1].item() == pytest.approx(-math.log(EPS))


def test_pg_sums_log_one_minus_score():
    s = [torch.tensor([0.5, 0.1]), torch.tensor([0.25, 0.0])]
    got = pg_from_scores(s)
    want = torch.tensor([math.log(0.5) + math.log(0.75), math.log(0.9) + 0.0])
    assert torch.allclose(got, want)


def _rec_setup(seed):
    fx = micro_fixtures(seed)
    G = fx.G
    g = torch.Generator().manual_seed(seed)
    b = 3
    x = torch.rand(b, 1, 4, 4, generator=g) * 2 - 1
    w_p = torch.randn(b, G.cfg.num_layers, G.cfg.style_dim, generator=g)
    noise = G.make_noise(b, g)
    w_z = torch.randn(b, G.cfg.num_layers, G.cfg.style_dim, generator=g)
    theta = G.synthesis.params()
    theta_hat = {k: (v + 0.05 * torch.randn(v.shape, generator=g)).unsqueeze(0).repeat(b, *[1] * v.dim()) for k, v in theta.items()}
    return fx, x, w_p, noise, w_z, theta, theta_hat


@pytest.mark.parametrize("seed", range(5))
def test_loss_rec_equals_independent_terms(seed):
    fx, x, w_p, noise, w_z, theta, theta_hat = _rec_setup(seed)
    G = fx.G
    W = LossWeights(lambda_l2_p=0.3, lambda_l2_r=0.7)
    alpha = 0.8
    L_rec, parts = loss_rec(x, w_p, noise, G.synthesize, theta, theta_hat, w_z, alpha, W, fx.pnet.features)
    # independent recomputation
    w_r = w_p + alpha * (w_z - w_p) / (w_z - w_p).flatten(1).norm(dim=1).reshape(-1, 1, 1)
    x_p = G.synthesize(w_p, noise, theta_hat)
    x_r_star = G.synthesize(w_r, noise, theta_hat)
    x_r = G.synthesize(w_r, noise, theta)
    pt = perceptual_distance(x, x_p, fx.pnet.features) + 0.3 * ((x - x_p) ** 2).flatten(1).mean(1)
    r = perceptual_distance(x_r, x_r_star, fx.pnet.features) + 0.7 * ((x_r - x_r_star) ** 2).flatten(1).mean(1)
    assert torch.allclose(parts["L_pt"], pt, rtol=0, atol=1e-12)
    assert torch.allclose(parts["L_R"], r, rtol=0, atol=1e-12)
    assert torch.allclose(L_rec, pt + r, rtol=0, atol=1e-12)
    assert torch.allclose(parts["L_pt"], loss_pt(x, x_p, W, fx.pnet.features), rtol=0, atol=1e-12)
    assert torch.allclose(parts["L_R"], loss_R(x_r, x_r_star, W, fx.pnet.features), rtol=0, atol=1e-12)


def test_locality_term_vanishes_at_original_weights():
    fx, x, w_p, noise, w_z, theta, _ = _rec_setup(0)
    _, parts = loss_rec(x, w_p, noise, fx.G.synthesize, theta, theta, w_z, 1.0, LossWeights(), fx.pnet.features)
    assert torch.allclose(parts["L_R"], torch.zeros(3), atol=1e-12)


def test_apt_total_weighting():
    W = LossWeights(lambda_ce=0.5, lambda_pg=0.25, lambda_rec=2.0)
    one = torch.ones(2)
    parts = {k: one for k in ("lpips", "l2", "L_pt", "L_R")}
    total, br = apt_total(torch.tensor([1.0, 2.0]), parts, torch.tensor([4.0, 0.0]), torch.tensor([-8.0, 4.0]), W)
    assert torch.equal(total, torch.tensor([2.0 + 2.0 - 2.0, 4.0 + 0.0 + 1.0]))
    assert br.record(1)["total"] == 5.0
