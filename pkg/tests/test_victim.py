import json

import numpy as np
import pytest
from scipy import stats

from retouchattack import diffnet
from retouchattack.imagecore import rgb_to_hsv
from retouchattack.victim import (
    SHAPES,
    SyntheticDatasetSpec,
    ToyVictim,
    evaluate,
    generate_dataset,
    load_split,
)


def foreground_hue(img):
    """Circular mean hue of the strongly saturated (foreground) pixels."""
    h, s, _ = rgb_to_hsv(img)
    sel = h[s > 0.55]
    return np.mod(np.angle(np.mean(np.exp(1j * sel))), 2 * np.pi)


def hue_label_table(spec, tmp_path):
    generate_dataset(spec, tmp_path)
    images, labels, _ = load_split(tmp_path, "train")
    sectors = [int(foreground_hue(img) / (2 * np.pi / 5) + 0.5) % 5 for img in images]
    table = np.zeros((5, 5))
    np.add.at(table, (labels, sectors), 1)
    return table


def test_rho_zero_hue_independent(tmp_path):
    table = hue_label_table(SyntheticDatasetSpec(size=24, rho=0.0, n_train=500, n_test=5, seed=1), tmp_path)
    assert stats.chi2_contingency(table).pvalue > 0.01


def test_default_rho_couples_hue(tmp_path):
    table = hue_label_table(SyntheticDatasetSpec(size=24, n_train=200, n_test=5, seed=1), tmp_path)
    assert stats.chi2_contingency(table).pvalue < 1e-6
    assert np.trace(table) / table.sum() > 0.7


def test_generation_deterministic_and_balanced(tmp_path):
    spec = SyntheticDatasetSpec(size=16, n_train=23, n_test=11, seed=4)
    a = generate_dataset(spec, tmp_path / "a")
    b = generate_dataset(spec, tmp_path / "b")
    assert a == b
    for entry in a:
        assert (tmp_path / "a" / entry["file"]).read_bytes() == (tmp_path / "b" / entry["file"]).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert {e["label"] for e in manifest} == set(range(len(SHAPES)))
    for split, count in (("train", 23), ("test", 11)):
        labels = [e["label"] for e in manifest if e["split"] == split]
        assert len(labels) == count
        counts = np.bincount(labels, minlength=5)
        assert np.all(np.abs(counts - count / 5) <= 1)


def test_spec_validation(tmp_path):
    for bad in (dict(rho=1.5), dict(n_train=3), dict(size=4)):
        with pytest.raises(ValueError):
            generate_dataset(SyntheticDatasetSpec(**bad), tmp_path)
    with pytest.raises(FileNotFoundError):
        load_split(tmp_path / "none", "train")


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(SyntheticDatasetSpec(size=16, n_train=100, n_test=25, seed=0), root)
    return root


def test_victim_training_deterministic(small_data):
    x, y, _ = load_split(small_data, "train")
    a = ToyVictim(epochs=4, lr=0.003, random_state=3).fit(x, y)
    b = ToyVictim(epochs=4, lr=0.003, random_state=3).fit(x, y)
    assert all(a.weights_[k].tobytes() == b.weights_[k].tobytes() for k in a.weights_)
    assert a.history_[-1] < a.history_[0]
    assert a.predict_proba(x[:3]).sum(axis=1) == pytest.approx(np.ones(3))


def test_victim_weights_round_trip(small_data, tmp_path):
    x, y, _ = load_split(small_data, "test")
    model = ToyVictim(epochs=1, random_state=0).fit(x, y)
    model.save(tmp_path / "v.rtwf")
    back = ToyVictim.from_weights(tmp_path / "v.rtwf")
    assert back.net_.input_shape == (16, 16, 3)
    np.testing.assert_array_equal(back.decision_function(x), model.decision_function(x))
    with pytest.raises(diffnet.ShapeError):
        ToyVictim.from_weights(tmp_path / "v.rtwf", (32, 32, 3))
    with pytest.raises(diffnet.ShapeError):
        ToyVictim.from_weights({"layer0.w": np.zeros(1)})


def test_input_gradient_matches_network(small_data):
    x, y, _ = load_split(small_data, "test")
    model = ToyVictim(epochs=1, random_state=0).fit(x, y)
    loss, grad, logits = model.loss_and_input_grad(x[0], int(y[0]))
    assert grad.shape == x[0].shape and grad.dtype == np.float64
    assert loss == pytest.approx(diffnet.softmax_cross_entropy(logits[None], [y[0]])[0], rel=1e-6)


class _Oracle:
    classes_ = np.arange(5)

    def __init__(self, labels):
        self.labels = labels

    def predict(self, images):
        return self.labels


class _Constant:
    classes_ = np.arange(5)

    def predict(self, images):
        return np.zeros(len(images), dtype=int)


def test_evaluate_baselines(small_data):
    x, y, _ = load_split(small_data, "test")
    acc, conf = evaluate(_Oracle(y), x, y)
    assert acc == 1.0 and conf.sum() == len(y)
    np.testing.assert_array_equal(np.diag(conf), np.bincount(y, minlength=5))
    acc, conf = evaluate(_Constant(), x, y)
    assert acc == pytest.approx(0.2, abs=0.05)
    assert conf.sum() == len(y)


def test_evaluate_constant_logit_network(small_data):
    x, y, _ = load_split(small_data, "test")
    net = diffnet.victim_network(5, (16, 16, 3))
    weights = {k: np.zeros_like(v) for k, v in net.init_weights().items()}
    model = ToyVictim.from_weights(weights)
    acc, _ = evaluate(model, x, y)
    assert acc == pytest.approx(0.2, abs=0.05)
