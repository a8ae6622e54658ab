import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hcml import tensor as tn
from hcml.autodiff import backward
from hcml.backbone import MotionNetwork, NetworkConfig
from hcml.contrastive import contrastive_loss
from hcml.tensor import Tensor
from hcml.trainer import (FrozenParameterError, LossWeights, StageOrderError, TrainConfig, Trainer,
                          UndefinedScoreError, efficacy_score, knn_eval, linear_probe, lr_at, sgd_step,
                          total_loss, write_metrics_csv)

TINY = NetworkConfig(channels=(8, 8, 16), motion_channels=(8, 8, 8), beta=(1, 2, 2), flow_growth=4,
                     predictor_hidden=16)


def tiny_trainer(seed=0, **kw):
    return Trainer(MotionNetwork(TINY, seed=seed, motion=kw.pop("motion", True)), seed=seed, **kw)


QUICK = TrainConfig(lr=0.01, warmup_epochs=0, epochs=1, batch_size=4)


def test_lr_schedule_examples():
    cfg = TrainConfig(lr=0.2, warmup_epochs=2, epochs=10)
    assert lr_at(0, 0.0, cfg) == 0.0
    assert lr_at(2, 0.0, cfg) == pytest.approx(0.2)
    assert lr_at(6, 0.0, cfg) == pytest.approx(0.1)


@given(epoch=st.integers(0, 9), frac=st.floats(0, 0.999))
def test_lr_nonnegative_and_continuous(epoch, frac):
    cfg = TrainConfig(lr=0.1, warmup_epochs=3, epochs=10)
    assert lr_at(epoch, frac, cfg) >= 0
    assert abs(lr_at(2, 0.999999, cfg) - lr_at(3, 0.0, cfg)) < 1e-6


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=5, epochs=5)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_sgd_examples():
    p = {"w": Tensor(np.full(3, 2.0))}
    sgd_step(p, {"w": np.ones(3)}, lr=1.0, momentum=0.0, velocity={})
    np.testing.assert_array_equal(p["w"].data, 1.0)
    sgd_step(p, {"w": np.zeros(3)}, lr=1.0, momentum=0.0, velocity={})
    np.testing.assert_array_equal(p["w"].data, 1.0)
    q, vel = {"w": Tensor(np.zeros(2))}, {}
    for _ in range(2):
        sgd_step(q, {"w": np.ones(2)}, lr=1.0, momentum=0.9, velocity=vel)
    np.testing.assert_allclose(q["w"].data, -2.9)


def test_sgd_non_finite_names_parameter():
    with pytest.raises(FloatingPointError, match="level0.w"):
        sgd_step({"level0.w": Tensor(np.zeros(2))}, {"level0.w": np.array([np.nan, 0])}, 0.1, 0.9, {})


def test_total_loss_example():
    assert total_loss(0.5, 0.01, (0.2, 0.3), LossWeights()) == pytest.approx(0.775)
    with pytest.raises(ValueError):
        LossWeights(reconstruct=-1)


def test_total_loss_matches_components(tiny_split):
    tr, _ = tiny_split
    t = tiny_trainer(detach_targets=True)
    t.rng = np.random.default_rng(5)
    total, m = t.stage_loss("joint", tr.clips[:4], tr.labels[:4])
    w = t.weights
    ref = m["classification"] + w.reconstruct * m["reconstruct"] + \
        w.contrastive[0] * m["contrastive_l1"] + w.contrastive[1] * m["contrastive_l2"]
    assert total.item() == pytest.approx(ref, abs=1e-5)        # float32 network


def test_efficacy_examples():
    assert efficacy_score(99, 66) == pytest.approx(3.0)
    assert efficacy_score(80, 40) == pytest.approx(2.0)
    with pytest.raises(UndefinedScoreError):
        efficacy_score(70, 70)


def test_knn_examples(rng):
    X = rng.standard_normal((10, 4))
    y = rng.integers(0, 3, 10)
    assert knn_eval(X, y, X[3:4], y[3:4], k=1) == 100.0
    # k = n with balanced classes: every class ties, nearest neighbour decides
    Xb = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.1], [0.1, -1.0]])
    yb = np.array([0, 1, 0, 1])
    assert knn_eval(Xb, yb, np.array([[0.9, 0.1]]), np.array([0]), k=4) == 100.0
    assert knn_eval(Xb, yb, np.array([[0.1, 0.9]]), np.array([1]), k=4) == 100.0
    with pytest.raises(ValueError):
        knn_eval(np.zeros((0, 2)), [], X, y, 1)
    with pytest.raises(ValueError):
        knn_eval(X, y, X, y, 11)


def test_knn_random_is_chance():
    r = np.random.default_rng(0)
    acc = knn_eval(r.standard_normal((400, 8)), r.integers(0, 4, 400), r.standard_normal((2000, 8)),
                   r.integers(0, 4, 2000), k=5)
    assert abs(acc - 25) < 4 * 100 * np.sqrt(0.25 * 0.75 / 2000)


def test_linear_probe_examples(rng):
    X = np.concatenate([rng.normal(-2, 0.3, (40, 3)), rng.normal(2, 0.3, (40, 3))])
    y = np.repeat([0, 1], 40)
    a_tr, a_te = linear_probe(X, y, X, y, epochs=100)
    assert a_tr == 100.0
    Xr = rng.standard_normal((300, 5))
    _, a_te = linear_probe(Xr[:200], rng.permutation(np.repeat([0, 1], 100)), Xr[200:],
                           rng.integers(0, 2, 100), epochs=100)
    assert abs(a_te - 50) < 20


def test_probe_leaves_network_unchanged(tiny_split):
    tr, te = tiny_split
    t = tiny_trainer()
    before = {k: p.data.tobytes() for k, p in t.net.params.items()}
    f = t.motion_features(tr.clips, 1)
    linear_probe(f, tr.labels, t.motion_features(te.clips, 1), te.labels, epochs=10)
    assert before == {k: p.data.tobytes() for k, p in t.net.params.items()}


def test_stage_order_enforced(tiny_split):
    tr, _ = tiny_split
    t = tiny_trainer()
    with pytest.raises(StageOrderError):
        t.train_stage("level2", tr, QUICK)
    with pytest.raises(StageOrderError):
        t.train_stage("level1", tr, QUICK)
    with pytest.raises(StageOrderError):
        tiny_trainer(motion=False).train_stage("recon", tr, QUICK)


def test_progressive_freezing_bitwise(tiny_split):
    tr, _ = tiny_split
    t = tiny_trainer()
    t.train_stage("recon", tr, QUICK)
    frozen = {k: p.data.tobytes() for k, p in t.net.params.items() if k.startswith("level0.")}
    t.train_stage("level1", tr, QUICK)
    assert frozen == {k: t.net.params[k].data.tobytes() for k in frozen}
    assert set(frozen) <= t.state.frozen


def test_frozen_mutation_aborts(tiny_split, monkeypatch):
    tr, _ = tiny_split
    t = tiny_trainer()
    t.train_stage("recon", tr, QUICK)
    original = t.stage_loss

    def tamper(*a, **k):
        t.net.params["level0.stem.b"].data += 1.0
        return original(*a, **k)

    monkeypatch.setattr(t, "stage_loss", tamper)
    with pytest.raises(FrozenParameterError):
        t.train_stage("level1", tr, QUICK)


def test_joint_contrastive_path_does_not_reach_lower_level(tiny_split):
    tr, _ = tiny_split
    t = tiny_trainer()
    for p in t.net.params.values():
        p.requires_grad = True
    res = t.net.forward(tr.clips[:4], upto=1, logits=False)
    lower = t.net.aligned_lower(res.motion[0], 1)
    loss, _, _ = contrastive_loss(res.motion[1], lower, t.net.predictors[1], t.contrastive,
                                  np.random.default_rng(0), detach_lower=True)
    backward(loss)
    probe = t.net.params["level0.pmb.combine.w"]
    assert probe.grad is None or not np.any(probe.grad)
    assert np.any(t.net.params["level1.pmb.combine.w"].grad)


def test_single_batch_overfit():
    r = np.random.default_rng(0)
    clips = r.uniform(0, 1, (4, 3, 4, 8, 8)).astype(np.float32)
    labels = np.array([0, 1, 2, 3])

    class One:
        pass

    data = One()
    data.clips, data.labels = clips, labels
    data.__class__.__len__ = lambda self: 4
    cfg = NetworkConfig(num_classes=4, channels=(8, 8, 16), motion_channels=(8, 8, 8), beta=(1, 2, 2),
                        flow_growth=4, predictor_hidden=16, steps=(1,))
    from hcml.contrastive import ContrastiveConfig
    t = Trainer(MotionNetwork(cfg, seed=0), contrastive=ContrastiveConfig(steps=(1,), locations=4), seed=0)
    logs = t.train_stage("joint", data, TrainConfig(lr=0.01, warmup_epochs=0, epochs=200, batch_size=4))
    assert min(r["classification"] for r in logs) < 0.05


def test_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv([{"epoch": 0, "stage": "recon", "lr": 0.1, "total": 1.0}], path)
    write_metrics_csv([{"epoch": 1, "stage": "recon", "lr": 0.05, "total": 0.5}], path, append=True)
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("epoch,stage,lr")


def test_checkpoint_restores_state(tiny_split, tmp_path):
    tr, _ = tiny_split
    t = tiny_trainer()
    t.train_stage("recon", tr, QUICK)
    t.save(tmp_path / "c.ck")
    u = tiny_trainer(seed=9)
    u.load(tmp_path / "c.ck")
    assert u.state.completed == ["recon"]
    for k, p in t.net.params.items():
        assert p.data.tobytes() == u.net.params[k].data.tobytes()
    assert u.rng.bit_generator.state == t.rng.bit_generator.state


def test_resume_matches_uninterrupted(tiny_split, tmp_path):
    tr, _ = tiny_split
    cfg = TrainConfig(lr=0.05, warmup_epochs=1, epochs=3, batch_size=4)
    a = tiny_trainer()
    full = a.train_stage("recon", tr, cfg)
    b = tiny_trainer()
    b.train_stage("recon", tr, cfg, stop_epoch=2)
    b.save(tmp_path / "p.ck")
    c = tiny_trainer(seed=4)
    c.load(tmp_path / "p.ck")
    rest = c.train_stage("recon", tr, cfg, start_epoch=c.state.epoch)
    for k in ("total", "photometric", "smoothness"):
        assert rest[0][k] == pytest.approx(full[2][k], abs=1e-6)


def test_contrastive_stage_logs_feature_spread(tiny_split):
    train, _ = tiny_split
    tr = tiny_trainer()
    tr.train_stage("recon", train, QUICK)
    row = tr.train_stage("level1", train, QUICK)[-1]
    assert row["feature_std_l1"] > 0
    assert "feature_std_l2" not in row
