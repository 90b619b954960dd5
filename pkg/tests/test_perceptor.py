import pytest
import torch

from blobcf.numerics import finite_diff_check, make_rng
from blobcf.perceptor import Perceptor


@pytest.fixture(scope="module")
def perceptor():
    return Perceptor(32, seed=1234)


def _image(seed, n=32):
    return torch.from_numpy(make_rng(seed).uniform(0, 1, (n, n)))


def test_shapes_and_determinism(perceptor):
    x = _image(1)
    a, b = perceptor.extract(x), perceptor.extract(x)
    assert a.layer1.shape == (1, 8, 16, 16)
    assert a.layer2.shape == (1, 16, 8, 8)
    assert a.pooled.shape == (1, 24)
    assert a.grid.shape == (1, 256)
    for f in ("layer1", "layer2", "pooled", "grid"):
        assert torch.equal(getattr(a, f), getattr(b, f))


def test_zero_image_gives_zero_features(perceptor):
    f = perceptor.extract(torch.zeros(32, 32))
    assert torch.count_nonzero(f.layer1) == 0 and torch.count_nonzero(f.pooled) == 0


def test_resolution_mismatch(perceptor):
    with pytest.raises(ValueError):
        perceptor.extract(torch.zeros(64, 64))


@pytest.mark.parametrize("coord", [0, 5, 13, 23])
def test_pooled_gradient(perceptor, coord):
    x = _image(2) * 0.8 + 0.1
    rng = make_rng(coord)
    idx = rng.choice(32 * 32, 60, replace=False)
    err = finite_diff_check(lambda im: perceptor.extract(im.reshape(32, 32)).pooled[0, coord],
                            x.reshape(-1), coords=idx)
    assert err < 1e-3


def test_perceptual_gradient(perceptor):
    a, b = _image(3), _image(4)
    idx = make_rng(5).choice(32 * 32, 60, replace=False)
    err = finite_diff_check(lambda im: perceptor.perceptual_distance(im.reshape(32, 32), b)[0],
                            a.reshape(-1), coords=idx)
    assert err < 1e-3


def test_distance_identity_and_symmetry(perceptor):
    for seed in range(5):
        a, b = _image(10 + seed), _image(20 + seed)
        assert perceptor.perceptual_distance(a, a).item() == 0.0
        assert perceptor.perceptual_distance(a, b).item() == perceptor.perceptual_distance(b, a).item()
        assert perceptor.perceptual_distance(a, b).item() > 0


def test_translation_covariance(perceptor):
    img = torch.zeros(32, 32)
    img[12, 12] = 1.0
    shifted = torch.zeros(32, 32)
    shifted[16, 16] = 1.0
    a = perceptor.extract(img).layer2[0]
    b = perceptor.extract(shifted).layer2[0]
    assert torch.allclose(b[:, 1:, 1:], a[:, :-1, :-1], atol=1e-14)
