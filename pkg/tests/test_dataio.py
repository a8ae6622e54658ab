import numpy as np
import pytest

from hcml import tensor as tn
from hcml.dataio import (MOTIONS, Checkpoint, FormatError, SyntheticSpec, generate, load_checkpoint,
                         load_dataset, save_checkpoint, save_dataset)
from hcml.flow_head import endpoint_error
from hcml.trainer import linear_probe

from conftest import SMALL_SPEC


def test_translate_right_flow():
    spec = SyntheticSpec(speed=(1.0, 1.0), seed=3)
    ds = generate(spec, 6)
    i = MOTIONS.index("translate_right")
    s = ds[i]
    v = s.valid[0] > 0
    assert v.any()
    np.testing.assert_allclose(s.flow[0][v], 1.0)
    np.testing.assert_allclose(s.flow[1][v], 0.0)
    assert np.all(s.flow[:, ~v] == 0)


def test_deterministic_and_balanced():
    a, b = generate(SMALL_SPEC, 18), generate(SMALL_SPEC, 18)
    assert a.checksum() == b.checksum()
    assert np.bincount(a.labels).tolist() == [3] * 6


def test_streams_disjoint():
    a, b = generate(SMALL_SPEC, 6, stream=0), generate(SMALL_SPEC, 6, stream=1)
    assert not np.array_equal(a.clips, b.clips)


def test_oversized_motion_rejected():
    with pytest.raises(ValueError):
        SyntheticSpec(height=8, width=8)


def test_pixels_in_range():
    ds = generate(SMALL_SPEC, 6)
    assert ds.clips.dtype == np.float32 and ds.clips.min() >= 0 and ds.clips.max() <= 1


def test_texture_statistics_match_across_classes():
    ds = generate(SMALL_SPEC, 1200)
    means = np.array([ds.clips[ds.labels == c, :, 0].mean() for c in range(6)])
    per_clip = ds.clips[:, :, 0].mean(axis=(1, 2, 3))
    se = per_clip.std() / np.sqrt(200)
    assert np.ptp(means) < 5 * se


def test_zero_flow_error_equals_speed():
    spec = SyntheticSpec(height=16, width=16, radius=(2.5, 3.5), orbit_radius=(2.0, 3.0), speed=(0.8, 0.8))
    ds = generate(spec, 4)
    for i in range(4):               # translations
        assert endpoint_error(np.zeros_like(ds.flow[i:i + 1]), ds.flow[i:i + 1], ds.valid[i:i + 1]) == \
            pytest.approx(0.8, rel=1e-5)


def test_ground_truth_flow_warps_back():
    ds = generate(SMALL_SPEC, 12)
    for i in range(12):
        s = ds[i]
        frames = s.clip[None].astype(np.float64)
        warped, mask = tn.bilinear_warp(tn.Tensor(frames[:, :, 1:]), tn.Tensor(s.flow[None].astype(np.float64)))
        interior = s.valid[0] > 0
        # shrink to the interior by requiring valid neighbours
        core = interior.copy()
        core[:, 1:-1, 1:-1] &= interior[:, :-2, 1:-1] & interior[:, 2:, 1:-1] & interior[:, 1:-1, :-2] & interior[:, 1:-1, 2:]
        core[:, [0, -1]] = False
        core[:, :, [0, -1]] = False
        err = np.abs(warped.data[0] - frames[0, :, :-1])[:, core]
        assert err.size == 0 or np.median(err) < 0.05


def test_appearance_only_probe_near_chance():
    tr, te = generate(SMALL_SPEC, 600), generate(SMALL_SPEC, 300, stream=1)
    feats = lambda d: d.clips[:, :, 0].reshape(len(d), -1)
    _, acc = linear_probe(feats(tr), tr.labels, feats(te), te.labels, epochs=200, num_classes=6)
    assert acc <= 100 / 6 + 5


def test_dataset_round_trip():
    ds = generate(SMALL_SPEC, 5)
    back = load_dataset(save_dataset(ds))
    assert back.checksum() == ds.checksum() and back.spec == ds.spec


def test_dataset_corruption_detected():
    raw = save_dataset(generate(SMALL_SPEC, 3))
    with pytest.raises(FormatError):
        load_dataset(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_dataset(raw[:-10])


def test_checkpoint_round_trip(rng):
    params = {"a.w": rng.standard_normal((3, 4)).astype(np.float32), "b": np.array([1.5], np.float32)}
    ck = Checkpoint(params, stage="level1", meta={"epoch": 2, "rng": {"x": [1, 2]}})
    back = load_checkpoint(save_checkpoint(ck))
    assert back.stage == "level1" and back.meta == ck.meta
    for k in params:
        assert back.params[k].tobytes() == params[k].tobytes()


def test_checkpoint_little_endian(rng):
    ck = Checkpoint({"w": np.array([1.0], np.float32)})
    assert np.array([1.0], "<f4").tobytes() in save_checkpoint(ck)


def test_checkpoint_corruption(rng):
    raw = save_checkpoint(Checkpoint({"w": rng.standard_normal(10).astype(np.float32)}))
    for bad in (raw[:-3], b"HCML-XX1" + raw[8:], raw[:8] + (99).to_bytes(4, "little") + raw[12:]):
        with pytest.raises(FormatError):
            load_checkpoint(bad)
