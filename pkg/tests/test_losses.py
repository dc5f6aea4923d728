import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from posetransfer.errors import ConfigError, DimensionError, NumericError
from posetransfer.losses import (
    Discriminator,
    FeatureExtractor,
    LossWeights,
    coarse_loss,
    full_loss,
    gram,
    lsgan_d_loss,
    lsgan_g_loss,
    perceptual_loss,
    recon_loss,
    style_loss,
)

from _helpers import fd_vs_analytic, rel_err, sample_coords


def test_default_weights():
    w = LossWeights()
    assert (w.gan, w.perceptual, w.recon, w.style) == (1.0, 5.0, 10.0, 5.0)


# ------------------------------------------------------------------- recon

def test_recon_is_mean_abs():
    rng = np.random.default_rng(0)
    a = torch.from_numpy(rng.normal(size=(2, 3, 5, 5)))
    b = torch.from_numpy(rng.normal(size=(2, 3, 5, 5)))
    assert abs(float(recon_loss(a, b)) - np.abs(a.numpy() - b.numpy()).mean()) < 1e-12


def test_recon_rejects_shape_mismatch():
    with pytest.raises(DimensionError):
        recon_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


# -------------------------------------------------------------------- gram

def brute_gram(f):
    c, h, w = f.shape
    g = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            g[i, j] = (f[i] * f[j]).sum() / (c * h * w)
    return g


def test_gram_matches_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(30):
        c, h, w = (int(rng.integers(2, 7)) for _ in range(3))
        f = rng.normal(size=(c, h, w))
        got = gram(torch.from_numpy(f)).numpy()
        assert np.allclose(got, brute_gram(f), atol=1e-12)


def test_gram_batched_matches_per_sample():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(3, 4, 5, 6))
    batched = gram(torch.from_numpy(f)).numpy()
    for i in range(3):
        assert np.allclose(batched[i], brute_gram(f[i]), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gram_symmetric_nonneg_diagonal(seed):
    f = torch.from_numpy(np.random.default_rng(seed).normal(size=(4, 3, 3)))
    g = gram(f).numpy()
    assert np.allclose(g, g.T, atol=1e-12)
    assert (np.diag(g) >= 0).all()


# -------------------------------------------------------------- perceptual

def test_perceptual_with_identity_extractor_is_pixel_l1():
    rng = np.random.default_rng(3)
    a = torch.from_numpy(rng.normal(size=(2, 3, 6, 6)))
    b = torch.from_numpy(rng.normal(size=(2, 3, 6, 6)))
    got = float(perceptual_loss(a, b, FeatureExtractor.identity()))
    assert abs(got - float(recon_loss(a, b))) < 1e-12


def test_perceptual_sums_over_stages():
    fx = FeatureExtractor.fixed_random(seed=5, widths=(4, 8)).double()
    rng = np.random.default_rng(4)
    a = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)))
    b = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)))
    fa, fb = fx(a), fx(b)
    want = sum(float((la - lb).abs().mean()) for la, lb in zip(fa, fb))
    assert abs(float(perceptual_loss(a, b, fx)) - want) < 1e-12


# ------------------------------------------------------------------- style

def test_style_loss_matches_numpy_mirror():
    fx = FeatureExtractor.fixed_random(seed=6, widths=(4, 8)).double()
    rng = np.random.default_rng(5)
    a = torch.from_numpy(rng.normal(size=(2, 3, 8, 8)))
    b = torch.from_numpy(rng.normal(size=(2, 3, 8, 8)))
    want = 0.0
    for la, lb in zip(fx(a), fx(b)):
        _, c, h, w = la.shape
        per_sample = []
        for s in range(la.shape[0]):
            d = brute_gram(la[s].numpy()) - brute_gram(lb[s].numpy())
            per_sample.append((d ** 2).sum())
        want += np.mean(per_sample) / (c * h * w)
    assert abs(float(style_loss(a, b, fx)) - want) < 1e-10


def test_style_loss_zero_for_identical_inputs():
    fx = FeatureExtractor.fixed_random(seed=7, widths=(4,))
    a = torch.rand(1, 3, 8, 8)
    assert float(style_loss(a, a.clone(), fx)) == 0.0


# ----------------------------------------------------------------- extractor

def test_fixed_random_extractor_is_deterministic():
    a = FeatureExtractor.fixed_random(seed=11)
    b = FeatureExtractor.fixed_random(seed=11)
    x = torch.rand(1, 3, 16, 16)
    for fa, fb in zip(a(x), b(x)):
        assert torch.equal(fa, fb)
    c = FeatureExtractor.fixed_random(seed=12)
    assert not torch.equal(a(x)[0], c(x)[0])


def test_extractor_parameters_are_frozen():
    fx = FeatureExtractor.fixed_random(seed=1)
    assert all(not p.requires_grad for p in fx.parameters())


def test_extractor_provenance_roundtrip():
    fx = FeatureExtractor.from_provenance("fixed-random(seed=9)")
    assert fx.provenance == "fixed-random(seed=9)"
    assert FeatureExtractor.from_provenance("identity").provenance == "identity"
    with pytest.raises(ConfigError):
        FeatureExtractor.from_provenance("vgg19-imagenet")


# ------------------------------------------------------------------- lsgan

def make_discs(double=False):
    torch.manual_seed(0)
    d_app = Discriminator(3, base_channels=4, num_layers=2)
    d_shape = Discriminator(18, base_channels=4, num_layers=2)
    if double:
        d_app.double()
        d_shape.double()
    return d_app, d_shape


def test_lsgan_d_loss_matches_score_formula():
    d_app, _ = make_discs()
    torch.manual_seed(1)
    cond, real, fake = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
    got = float(lsgan_d_loss(d_app, cond, real, fake).detach())
    with torch.no_grad():
        sr = d_app(cond, real).numpy()
        sf = d_app(cond, fake).numpy()
    want = 0.5 * (((sr - 1) ** 2).mean() + (sf ** 2).mean())
    assert abs(got - want) < 1e-6


def test_lsgan_g_loss_matches_score_formula():
    d_app, d_shape = make_discs()
    torch.manual_seed(2)
    src, pose, fake = torch.rand(2, 3, 8, 8), torch.rand(2, 18, 8, 8), torch.rand(2, 3, 8, 8)
    got = float(lsgan_g_loss(d_app, d_shape, src, pose, fake).detach())
    with torch.no_grad():
        sa = d_app(src, fake).numpy()
        ss = d_shape(pose, fake).numpy()
    want = 0.5 * (((sa - 1) ** 2).mean() + ((ss - 1) ** 2).mean())
    assert abs(got - want) < 1e-6


def test_lsgan_d_loss_detaches_fake():
    d_app, _ = make_discs()
    gen_param = torch.rand(1, 3, 8, 8, requires_grad=True)
    fake = gen_param * 0.5
    loss = lsgan_d_loss(d_app, torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8), fake)
    loss.backward()
    assert gen_param.grad is None
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in d_app.parameters())


def test_discriminator_input_contracts():
    d_app, _ = make_discs()
    with pytest.raises(ConfigError):
        d_app(torch.rand(1, 4, 8, 8), torch.rand(1, 3, 8, 8))
    with pytest.raises(DimensionError):
        d_app(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 16, 16))


def test_discriminator_outputs_patch_map():
    d_app, _ = make_discs()
    out = d_app(torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16))
    assert out.shape[0] == 2 and out.shape[1] == 1
    assert out.shape[-1] > 1  # patch scores, not a scalar


# --------------------------------------------------------- combined losses

def test_coarse_loss_combines_terms():
    fx = FeatureExtractor.fixed_random(seed=8, widths=(4,))
    w = LossWeights()
    a, b = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
    total, parts = coarse_loss(a, b, fx, w)
    want = w.recon * float(recon_loss(a, b)) + w.perceptual * float(perceptual_loss(a, b, fx))
    assert abs(float(total.detach()) - want) < 1e-6
    assert set(parts) == {"recon", "perceptual"}


def test_full_loss_combines_terms():
    fx = FeatureExtractor.fixed_random(seed=9, widths=(4,))
    d_app, d_shape = make_discs()
    w = LossWeights()
    torch.manual_seed(3)
    final, tgt = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
    src, pose = torch.rand(1, 3, 8, 8), torch.rand(1, 18, 8, 8)
    total, parts = full_loss(final, tgt, d_app, d_shape, src, pose, fx, w)
    want = (
        w.recon * float(recon_loss(final, tgt))
        + w.perceptual * float(perceptual_loss(final, tgt, fx))
        + w.style * float(style_loss(final, tgt, fx))
        + w.gan * float(lsgan_g_loss(d_app, d_shape, src, pose, final).detach())
    )
    assert abs(float(total.detach()) - want) < 1e-5
    assert set(parts) == {"recon", "perceptual", "style", "adv_g"}


def test_non_finite_inputs_raise():
    fx = FeatureExtractor.identity()
    bad = torch.full((1, 3, 4, 4), float("nan"))
    with pytest.raises(NumericError):
        coarse_loss(bad, torch.zeros(1, 3, 4, 4), fx, LossWeights())


# ------------------------------------------------------- gradient fidelity

def test_loss_gradients_match_finite_differences():
    torch.manual_seed(4)
    rng = np.random.default_rng(6)
    fx = FeatureExtractor.fixed_random(seed=10, widths=(4, 8)).double()
    d_app, d_shape = make_discs(double=True)
    b = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)))
    src = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)))
    pose = torch.from_numpy(rng.normal(size=(1, 18, 8, 8)))
    a = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)))
    a.requires_grad_(True)

    cases = {
        "recon": lambda: recon_loss(a, b),
        "perceptual": lambda: perceptual_loss(a, b, fx),
        "style": lambda: style_loss(a, b, fx),
        "adv_g": lambda: lsgan_g_loss(d_app, d_shape, src, pose, a),
        "coarse": lambda: coarse_loss(a, b, fx, LossWeights())[0],
        "full": lambda: full_loss(a, b, d_app, d_shape, src, pose, fx, LossWeights())[0],
    }
    coords = sample_coords(rng, a.shape, 6)
    for name, make in cases.items():
        an, fd = fd_vs_analytic(make, a, coords)
        assert rel_err(an, fd) < 1e-3, f"{name}: analytic {an} vs fd {fd}"


def test_discriminator_param_gradients_match_finite_differences():
    torch.manual_seed(5)
    rng = np.random.default_rng(7)
    d_app, _ = make_discs(double=True)
    cond = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)))
    real = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)))
    fake = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)))
    weight = next(d_app.parameters())
    coords = sample_coords(rng, weight.shape, 4)
    an, fd = fd_vs_analytic(lambda: lsgan_d_loss(d_app, cond, real, fake), weight, coords)
    assert rel_err(an, fd) < 1e-3
