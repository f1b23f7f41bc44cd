import numpy as np
import pytest
import torch

from animsyn import codec


def test_basis_is_orthonormal_and_seeded():
    B = codec.codec_basis()
    np.testing.assert_allclose(B @ B.T, np.eye(4), atol=1e-14)
    assert not np.allclose(codec.codec_basis(7)[3], B[3])
    np.testing.assert_array_equal(codec.codec_basis(7)[:3], B[:3])


def test_encode_decode_round_trip(rng):
    z = rng.standard_normal((2, 4, 3, 5))
    np.testing.assert_allclose(codec.encode_latent(codec.decode_latent(z)), z, atol=1e-12)


def test_decode_is_projection(rng):
    x = rng.uniform(size=(3, 16, 24))
    p = codec.decode_latent(codec.encode_latent(x))
    np.testing.assert_allclose(codec.decode_latent(codec.encode_latent(p)), p, atol=1e-12)
    # residual is orthogonal to the codec range
    assert abs(np.sum((x - p) * p)) < 1e-10


def test_flat_patch_is_reproduced_exactly():
    x = np.zeros((3, 8, 16))
    x[0, :, :8], x[1, :, 8:], x[2] = 0.2, 0.9, 0.5
    np.testing.assert_allclose(codec.decode_latent(codec.encode_latent(x)), x, atol=1e-12)


def test_model_latent_scaling():
    grey = np.full((3, 8, 8), 0.5)
    np.testing.assert_allclose(codec.to_model_latent(grey)[:3], 0.0, atol=1e-14)
    white = np.ones((3, 8, 8))
    np.testing.assert_allclose(codec.to_model_latent(white)[:3], 1.0, atol=1e-14)
    z = codec.to_model_latent(white)
    np.testing.assert_allclose(codec.from_model_latent(torch.tensor(z, dtype=torch.float32)), white, atol=1e-6)


@pytest.mark.parametrize("shape", [(3, 12, 16), (4, 16, 16), (16, 16)])
def test_shape_errors(shape):
    with pytest.raises(ValueError):
        codec.encode_latent(np.zeros(shape))


def test_decode_rejects_wrong_channels():
    with pytest.raises(ValueError):
        codec.decode_latent(np.zeros((3, 2, 2)))
