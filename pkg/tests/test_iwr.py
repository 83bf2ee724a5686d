import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weathermoe import nncore as nn
from weathermoe.iwr import PointFeatureRouter, WeatherClassifier, route, top_k, train_classifier
from weathermoe.weathersim import WeatherClass, make_frame


def test_route_reference_cases():
    d = route(np.array([5.0, 0, 0, 0, 0, 0, 0]), 1)
    assert d.selected == (0,) and d.probs[0] == pytest.approx(np.exp(5) / (np.exp(5) + 6), abs=1e-12)
    # e^5 / (e^5 + 6) = 0.9611 with seven classes (0.967 would need six)
    assert d.probs[0] == pytest.approx(0.9611, abs=1e-4)
    z = np.array([0.1, 0.5, -1, 2, 0.3, 0.0, 1.0])
    assert route(z, 7).selected == tuple(np.argsort(-z, kind="stable"))
    assert route(np.zeros(7), 2).selected == (0, 1)
    for k in (0, 8):
        with pytest.raises(ValueError):
            route(np.zeros(7), k)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=7, max_size=7), st.integers(1, 7), st.floats(-50, 50))
def test_route_is_shift_invariant_and_sized(z, k, shift):
    z = np.array(z, dtype=float)
    a, b = route(z, k), route(z + shift, k)
    assert a.selected == b.selected and len(a.selected) == k
    # ties on integer logits always resolve to the lower index
    order = a.selected
    for i, j in zip(order, order[1:]):
        assert z[i] > z[j] or (z[i] == z[j] and i < j)


def test_top_k_tie_rule():
    assert top_k(np.array([0.2, 0.4, 0.4]), 2) == (1, 2)


def test_classifier_is_small_and_zero_at_init():
    clf = WeatherClassifier().initialize()
    assert clf.n_params < 100_000
    img = make_frame(0, 0, "Fog").image
    np.testing.assert_array_equal(clf.classify(img), np.zeros(7))
    d = clf.route(img, 2)
    assert d.selected == (0, 1)


def test_classify_does_not_mutate_the_model():
    clf = WeatherClassifier().initialize()
    before = nn.param_hash(clf.net_)
    clf.classify(make_frame(0, 1, "Rain").image)
    assert nn.param_hash(clf.net_) == before
    assert all(layer._cache is None for layer in clf.net_.layers)


def test_classifier_input_validation():
    clf = WeatherClassifier().initialize()
    with pytest.raises(ValueError):
        clf.decision_function(np.zeros((1, 3, 10, 10)))
    with pytest.raises(ValueError):
        WeatherClassifier().fit(np.zeros((0, 3, 64, 96)), [])
    with pytest.raises(ValueError):
        WeatherClassifier().fit(np.zeros((2, 3, 64, 96)), [0, 9])


def test_get_params_roundtrip():
    clf = WeatherClassifier(lr=0.2, epochs=3)
    assert WeatherClassifier(**clf.get_params()).get_params() == clf.get_params()


@pytest.fixture(scope="module")
def small_frames():
    return [make_frame(21, i, WeatherClass(i % 7)) for i in range(56)]


def test_training_is_deterministic_and_loss_trends_down(small_frames):
    cfg = {"epochs": 6, "seed": 3}
    a = train_classifier(small_frames, cfg)
    b = train_classifier(small_frames, cfg)
    assert nn.dump_tensors(a.to_tensors()) == nn.dump_tensors(b.to_tensors())
    assert a.loss_curve_[-1] <= a.loss_curve_[0]


def test_single_class_training_fits_perfectly(small_frames):
    one = [f for f in small_frames if f.weather == WeatherClass.FOG]
    clf = train_classifier(one, {"epochs": 3})
    X = np.stack([f.image for f in one])
    assert (clf.predict(X) == 2).all()


def test_empty_training_set_is_rejected():
    with pytest.raises(ValueError):
        train_classifier([], {})


def test_checkpoint_roundtrip(tmp_path, small_frames):
    clf = train_classifier(small_frames[:14], {"epochs": 1})
    clf.save(tmp_path / "c.ckpt")
    back = WeatherClassifier.load(tmp_path / "c.ckpt")
    img = small_frames[3].image
    np.testing.assert_array_equal(back.classify(img), clf.classify(img))


def test_pfr_zero_gate_is_uniform_and_learns_separable_data():
    g = PointFeatureRouter().initialize(4)
    d = g.pfr_route(np.zeros((4, 3, 3)), 2)
    np.testing.assert_allclose(d.probs, np.full(7, 1 / 7))
    assert d.selected == (0, 1)
    r = nn.Rng(0)
    y = np.repeat(np.arange(7), 20)
    X = np.eye(7)[y] * 3 + r.normal(0, 0.3, size=(140, 7))
    g = PointFeatureRouter(epochs=30).fit(X, y)
    assert (g.predict(X) == y).mean() > 0.95
