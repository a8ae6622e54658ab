import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from hcml.backbone import NetworkConfig
from hcml.estimator import CosineKNNClassifier, HCMLClassifier, LinearProbe
from hcml.validation import check_clips, check_features

TINY = NetworkConfig(channels=(8, 8, 16), motion_channels=(8, 8, 8), beta=(1, 2, 2), flow_growth=4,
                     predictor_hidden=16)


def test_check_clips():
    ok = check_clips(np.zeros((2, 3, 2, 4, 4)))
    assert ok.dtype == np.float32
    for bad in (np.zeros((2, 3, 4, 4)), np.zeros((2, 1, 2, 4, 4)), np.zeros((2, 3, 1, 4, 4)),
                np.full((1, 3, 2, 2, 2), 2.0), np.full((1, 3, 2, 2, 2), np.nan), np.zeros((0, 3, 2, 2, 2))):
        with pytest.raises(ValueError):
            check_clips(bad)
    with pytest.raises(ValueError):
        check_features(np.zeros(3))


@pytest.mark.parametrize("variant", ["full", "pmb", "baseline"])
def test_classifier_api(tiny_split, variant):
    tr, te = tiny_split
    names = np.array(["r", "l", "d", "u", "cw", "ccw"])
    clf = HCMLClassifier(variant=variant, recon_epochs=1, level1_epochs=1, level2_epochs=1, joint_epochs=1,
                         network=TINY, batch_size=8)
    clf.fit(tr.clips, names[tr.labels])
    proba = clf.predict_proba(te.clips)
    assert proba.shape == (len(te), 6)
    np.testing.assert_allclose(proba.sum(1), 1.0, rtol=1e-6)
    assert set(clf.predict(te.clips)) <= set(names)
    assert 0.0 <= clf.score(te.clips, names[te.labels]) <= 1.0
    feats = clf.transform(te.clips)
    assert feats.ndim == 2 and len(feats) == len(te)
    assert clone(clf).get_params()["variant"] == variant


def test_classifier_rejects_bad_input(tiny_split):
    with pytest.raises(ValueError):
        HCMLClassifier(variant="other").fit(tiny_split[0].clips, tiny_split[0].labels)
    with pytest.raises(ValueError):
        HCMLClassifier().fit(tiny_split[0].clips, tiny_split[0].labels[:-1])


def test_knn_and_probe_estimators(rng):
    X = np.concatenate([rng.normal(0, 0.2, (30, 4)) + [3, 0, 0, 0], rng.normal(0, 0.2, (30, 4)) + [0, 3, 0, 0]])
    y = np.repeat(["a", "b"], 30)
    for est in (CosineKNNClassifier(3), LinearProbe(epochs=50)):
        est.fit(X, y)
        assert est.score(X, y) == 1.0
    pipe = make_pipeline(LinearProbe(epochs=50))
    assert pipe.fit(X, y).predict(X[:2]).tolist() == ["a", "a"]
    with pytest.raises(ValueError):
        CosineKNNClassifier().fit(X, y).predict(X[:, :2])
