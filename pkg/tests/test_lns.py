import numpy as np
import pytest

from lnseg.lns import (
    CONTROL_SIGMA,
    DegenerateStackError,
    SegmentationConfig,
    control_samples,
    delta_stack,
    latent_decodings,
    noise_rng,
    pca2d_diagnostic,
    segment,
)
from lnseg.metrics import adjusted_rand_index
from lnseg.model import Model


class LinearModel:
    """Stand-in with Dec(z) = J z + b; encode returns a fixed code."""

    def __init__(self, J, bias, mu):
        self.J, self.bias, self.mu = J, bias, mu

    def encode(self, image):
        return self.mu.copy(), None

    def decode_batch(self, z):
        h, w, c, _ = self.J.shape
        out = np.einsum("hwcd,nd->nchw", self.J, z) + self.bias.transpose(2, 0, 1)[None]
        return out


def proportional_model(parts, d=6, seed=0):
    """Every pixel of a part gets a positive multiple of that part's Jacobian block."""
    rng = np.random.default_rng(seed)
    h, w = parts.shape
    blocks = rng.normal(size=(parts.max() + 1, 3, d))
    scale = rng.uniform(0.5, 2.0, (h, w))
    J = scale[..., None, None] * blocks[parts]
    return LinearModel(J, rng.uniform(size=(h, w, 3)), rng.normal(size=d))


@pytest.fixture
def parts():
    p = np.zeros((8, 8), np.int64)
    p[2:6, 1:4] = 1
    p[1:7, 5:7] = 2
    return p


def test_linear_decoder_differences_are_exact(parts):
    model = proportional_model(parts)
    cfg = SegmentationConfig(N=6, sigma=0.1, seed=3)
    image = np.zeros((8, 8, 3), np.float32)
    outs = latent_decodings(model, image, cfg)
    stack = delta_stack(outs)
    assert stack.shape == (8, 8, 3, 5)
    xi = outs_to_noise(model, outs)
    expected = np.einsum("hwcd,nd->hwcn", model.J, np.diff(xi, axis=0))
    np.testing.assert_allclose(stack, expected, atol=1e-12)


def outs_to_noise(model, outs):
    # recover xi from the decodings by least squares on the linear map
    h, w, c, d = model.J.shape
    A = model.J.reshape(-1, d)
    y = (outs - model.bias.transpose(2, 0, 1)[None]).transpose(0, 2, 3, 1).reshape(len(outs), -1)
    z = np.linalg.lstsq(A, y.T, rcond=None)[0].T
    return z - model.mu


def test_proportional_parts_are_recovered(parts):
    model = proportional_model(parts)
    for N in (2, 5, 20):
        res = segment(model, np.zeros((8, 8, 3), np.float32), 3, SegmentationConfig(N=N, sigma=0.01, seed=1))
        assert adjusted_rand_index(parts, res.labels) == 1.0
        assert res.zero_rows == 0


def test_two_draws_give_one_difference(parts):
    model = proportional_model(parts)
    res = segment(model, np.zeros((8, 8, 3), np.float32), 3, SegmentationConfig(N=2, sigma=0.5))
    assert res.stack.shape == (8, 8, 3, 1)


def test_sigma_zero_is_rejected(parts):
    model = proportional_model(parts)
    with pytest.raises(DegenerateStackError):
        segment(model, np.zeros((8, 8, 3), np.float32), 3, SegmentationConfig(sigma=0.0))


def test_constant_decoder_is_degenerate():
    model = LinearModel(np.zeros((4, 4, 3, 2)), np.ones((4, 4, 3)), np.zeros(2))
    with pytest.raises(DegenerateStackError):
        segment(model, np.zeros((4, 4, 3), np.float32), 2, SegmentationConfig(N=4, sigma=0.1))


def test_config_validation():
    with pytest.raises(ValueError):
        SegmentationConfig(N=1)
    with pytest.raises(ValueError):
        SegmentationConfig(sigma=-1.0)
    with pytest.raises(ValueError):
        SegmentationConfig(mode="pixel")


def test_noise_depends_on_seed_and_image(parts):
    cfg = SegmentationConfig(seed=4)
    a = np.zeros((8, 8, 3), np.float32)
    b = a + 0.5
    x = noise_rng(cfg, a, "latent-noise").normal(5)
    np.testing.assert_array_equal(x, noise_rng(cfg, a, "latent-noise").normal(5))
    assert not np.allclose(x, noise_rng(cfg, b, "latent-noise").normal(5))
    assert not np.allclose(x, noise_rng(SegmentationConfig(seed=5), a, "latent-noise").normal(5))


def test_smaller_N_reuses_leading_draws(parts):
    model = proportional_model(parts)
    img = np.zeros((8, 8, 3), np.float32)
    long = latent_decodings(model, img, SegmentationConfig(N=10, sigma=0.1))
    short = latent_decodings(model, img, SegmentationConfig(N=4, sigma=0.1))
    np.testing.assert_array_equal(long[:4], short)


@pytest.fixture(scope="module")
def real_model():
    return Model.create(0, "AE")


def test_real_model_segmentation_is_deterministic(real_model):
    img = np.random.default_rng(0).uniform(size=(64, 64, 3)).astype(np.float32)
    cfg = SegmentationConfig(N=3, sigma=0.1, seed=2)
    a = segment(real_model, img, 3, cfg)
    b = segment(real_model, img, 3, cfg)
    assert a.labels.shape == (64, 64)
    assert set(np.unique(a.labels)) == {0, 1, 2}
    np.testing.assert_array_equal(a.labels, b.labels)


def test_control_noise_is_pixel_space_gaussian(real_model):
    img = np.random.default_rng(1).uniform(size=(64, 64, 3)).astype(np.float32)
    cfg = SegmentationConfig(N=20, mode="control")
    stack = control_samples(real_model, img, cfg)
    assert stack.shape == (64, 64, 3, 20)
    mu, _ = real_model.encode(img)
    recon = real_model.decode(mu).astype(np.float64)
    resid = stack - recon[..., None]
    assert abs(resid.mean()) < 0.01 * CONTROL_SIGMA
    assert resid.std() == pytest.approx(CONTROL_SIGMA, rel=0.01)


def test_pca_diagnostic(parts):
    model = proportional_model(parts)
    res = segment(model, np.zeros((8, 8, 3), np.float32), 3, SegmentationConfig(N=5, sigma=0.1))
    coords, explained, deficient = pca2d_diagnostic(res.stack)
    assert coords.shape == (64, 2)
    assert explained[0] >= explained[1] > 0
    assert not deficient
    _, explained1, deficient1 = pca2d_diagnostic(np.ones((4, 4, 3, 2)))
    assert deficient1 and explained1[1] == 0
