import numpy as np
import pytest

from diffusion_fiqa.errors import ContractError
from diffusion_fiqa.toyfaces import ToyFaceConfig, generate, symmetric_face


def test_deterministic_per_seed():
    a = generate(ToyFaceConfig(n_identities=3, seed=4))
    b = generate(ToyFaceConfig(n_identities=3, seed=4))
    assert a.images.tobytes() == b.images.tobytes()
    assert not np.array_equal(a.images, generate(ToyFaceConfig(n_identities=3, seed=5)).images)


def test_shapes_range_and_identities():
    d = generate(ToyFaceConfig(size=32, n_identities=5, samples_per_identity=3))
    assert d.images.shape == (15, 32, 32, 1)
    assert d.images.min() >= -1 and d.images.max() <= 1
    assert np.bincount(d.identities).tolist() == [3] * 5
    assert len(d.refs()) == 15


def test_each_identity_needs_two_samples():
    with pytest.raises(ContractError):
        ToyFaceConfig(samples_per_identity=1)


def test_zero_jitter_render_is_symmetric():
    d = generate(ToyFaceConfig(n_identities=2, pose_jitter=0, illumination_jitter=0))
    np.testing.assert_allclose(d.images, d.images[:, :, ::-1], atol=1e-6)
    f = symmetric_face(16, 3)
    assert np.array_equal(f, f[:, ::-1])
