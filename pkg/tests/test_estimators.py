import numpy as np
import pytest
from sklearn.base import clone

from latentdistill import data as D
from latentdistill.estimators import ConvNetClassifier, DatasetDistiller


@pytest.fixture(scope="module")
def glyphs():
    d = D.gen_glyph_dataset(3, 20, 16, 0)
    return d.train(), d.val()


def test_classifier_fit_predict_score(glyphs):
    (x, y), (xv, yv) = glyphs
    clf = ConvNetClassifier(depth=1, width=8, warmup_epochs=2, decay_epochs=6, lr=0.05, random_state=0)
    clf.fit(x, np.array(["a", "b", "c"])[y])
    proba = clf.predict_proba(xv)
    assert proba.shape == (len(xv), 3) and np.allclose(proba.sum(axis=1), 1)
    assert set(clf.predict(xv)) <= {"a", "b", "c"}
    assert clf.score(xv, np.array(["a", "b", "c"])[yv]) > 1 / 3


def test_classifier_accepts_flat_rows(glyphs):
    (x, y), _ = glyphs
    clf = ConvNetClassifier(family="mlp", depth=1, width=8, warmup_epochs=1, decay_epochs=1,
                            image_shape=(3, 16, 16))
    clf.fit(x.reshape(len(x), -1), y)
    assert clf.predict(x.reshape(len(x), -1)[:5]).shape == (5,)
    with pytest.raises(ValueError):
        ConvNetClassifier().fit(x.reshape(len(x), -1), y)


def test_params_and_clone():
    est = DatasetDistiller(method="dc", ipc=2, random_state=7)
    assert est.get_params()["ipc"] == 2
    twin = clone(est).set_params(space="pixel")
    assert twin.get_params()["method"] == "dc" and twin.space == "pixel" and est.space == "f2"


@pytest.mark.parametrize("method,space", [("dm", "f1"), ("mtt", "pixel")])
def test_distiller_fit(glyphs, method, space):
    (x, y), _ = glyphs
    labels = np.array([10, 20, 30])[y]
    est = DatasetDistiller(method=method, space=space, ipc=2, iterations=2, real_batch=4, depth=1, width=4,
                           mtt_N=2, mtt_M=1, mtt_T_plus=0, expert_epochs=1).fit(x, labels)
    assert est.images_.shape == (6, 3, 16, 16)
    assert list(est.labels_) == [10, 10, 20, 20, 30, 30]
    assert len(est.loss_log_) == 2 and np.all(np.isfinite(est.loss_log_))
    again = clone(est).fit(x, labels)
    assert np.array_equal(again.images_, est.images_)
