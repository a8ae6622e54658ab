import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hcml import tensor as tn
from hcml.backbone import MotionNetwork, NetworkConfig, cross_entropy
from hcml.tensor import Tensor


@pytest.fixture(scope="module")
def net():
    return MotionNetwork(NetworkConfig(), seed=0)


def test_level_extents(net, rng):
    clip = rng.uniform(0, 1, (2, 3, 8, 32, 32)).astype(np.float32)
    with tn.no_grad():
        res = net.forward(clip)
    assert [f.shape[2:] for f in res.features] == [(8, 32, 32), (8, 16, 16), (4, 8, 8)]
    assert [f.shape[2:] for f in res.features] == [s[1:] for s in net.backbone.level_shapes(clip.shape)]
    assert res.logits.shape == (2, 6) and np.isfinite(res.logits.data).all()
    assert res.flow.shape == (2, 2, 7, 32, 32)


def test_baseline_equals_motion_at_zero_fusion(net, rng):
    clip = rng.uniform(0, 1, (1, 3, 4, 16, 16)).astype(np.float32)
    with tn.no_grad():
        a = net.forward(clip, mode="baseline").logits.data
        b = net.forward(clip, mode="with_motion").logits.data
    np.testing.assert_array_equal(a, b)


def test_baseline_network_matches_zero_fusion(rng):
    clip = rng.uniform(0, 1, (1, 3, 4, 16, 16)).astype(np.float32)
    plain = MotionNetwork(NetworkConfig(), seed=3, motion=False)
    with tn.no_grad():
        np.testing.assert_array_equal(plain.forward(clip, mode="baseline").logits.data,
                                      MotionNetwork(NetworkConfig(), seed=3).forward(clip, mode="baseline").logits.data)
    with pytest.raises(ValueError):
        plain.forward(clip, mode="with_motion")


def test_forward_rejects_bad_clip(net):
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 4, 2, 8, 8), np.float32))
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 3, 2, 8, 8), np.float32), mode="other")


def test_misconfiguration_rejected():
    with pytest.raises(ValueError):
        MotionNetwork(NetworkConfig(channels=(16, 30, 64)), seed=0)


def test_param_count_stable():
    a = MotionNetwork(NetworkConfig(), seed=0).param_count()
    assert a == MotionNetwork(NetworkConfig(), seed=5).param_count() > 0


def test_cross_entropy_examples():
    assert cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3])).item() == pytest.approx(np.log(4))
    logits = np.zeros((1, 4)); logits[0, 2] = 100
    assert cross_entropy(Tensor(logits), np.array([2])).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 4))), np.array([4]))


@given(seed=st.integers(0, 2**32 - 1), c=st.floats(-50, 50))
def test_cross_entropy_shift_invariant(seed, c):
    r = np.random.default_rng(seed)
    z, y = r.standard_normal((3, 5)), r.integers(0, 5, 3)
    assert cross_entropy(Tensor(z + c), y).item() == pytest.approx(cross_entropy(Tensor(z), y).item(), abs=1e-9)
