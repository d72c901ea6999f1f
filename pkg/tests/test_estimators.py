import numpy as np
import pytest
from sklearn.base import clone

from probegen.datasets import synthetic_digits
from probegen.estimators import (
    ProbeResponses, ProbingClassifier, ProbingRegressor, StatNNFeatures, check_models,
)
from probegen.exceptions import ConfigError, NonFiniteError, ShapeError
from probegen.experiment import load_checkpoint, save_checkpoint
from probegen.zoo import InrFitConfig, generate_inr_zoo


def weights_bytes(models):
    return b"".join(w.tobytes() + b.tobytes() for m in models for w, b in m.weights)


def test_sklearn_params_roundtrip():
    est = ProbingClassifier(method="vanilla", n_probes=8, epochs=3)
    params = est.get_params()
    assert params["method"] == "vanilla" and params["n_probes"] == 8
    twin = clone(est)
    assert twin.get_params() == params
    assert est.set_params(epochs=5).epochs == 5


def test_check_models_rejects_mixed_shapes(small_inr_zoo, small_cnn_zoo):
    with pytest.raises(ShapeError):
        check_models([small_inr_zoo.records[0].model, small_cnn_zoo.records[0].model])
    with pytest.raises(TypeError):
        check_models([np.zeros(3)])


@pytest.mark.parametrize("params", [
    dict(method="statnn", n_probes=4),
    dict(method="probegen", n_probes=0),
    dict(method="nope"),
    dict(method="vanilla", generator_kind="conv-linear"),
    dict(method="synthetic-uniform", generator_kind="fc-linear"),
    dict(method="probegen", standardize=True),
    dict(method="synthetic-dead-leaves"),  # INR models take coordinates
    dict(method="entropy-only"),  # INR models have one output
    dict(precision="float16"),
])
def test_config_errors(small_inr_zoo, params):
    X, y = small_inr_zoo.split("train")
    with pytest.raises(ConfigError):
        ProbingClassifier(epochs=1, **params).fit(X, y)


def test_uniform_probes_need_coordinates(small_cnn_zoo):
    X, y = small_cnn_zoo.split("train")
    with pytest.raises(ConfigError):
        ProbingRegressor(method="synthetic-uniform", epochs=1).fit(X, y)


@pytest.fixture(scope="module")
def random_inr_zoo():
    """200 unfitted INRs over a balanced label set (labels carry no signal)."""
    ds = synthetic_digits(200, 8, seed=9)
    return generate_inr_zoo(ds, 200, InrFitConfig(steps=0, mse_ceiling=np.inf), seed=9)


def test_untrained_classifier_is_at_chance(random_inr_zoo):
    models = [r.model for r in random_inr_zoo.records]
    labels = np.array([r.label for r in random_inr_zoo.records])
    assert np.bincount(labels).tolist() == [20] * 10
    clf = ProbingClassifier(n_probes=16, epochs=0).fit(models, labels)
    assert clf.history_ == []
    assert abs(clf.score(models, labels) - 0.1) <= 0.05


def test_single_model_memorization(small_inr_zoo):
    model = small_inr_zoo.records[0].model
    clf = ProbingClassifier(n_probes=8, epochs=50, random_state=1).fit([model], [3])
    assert clf.score([model], [3]) == 1.0
    losses = [h["train_loss"] for h in clf.history_]
    assert all(losses[e + 5] <= losses[e] for e in range(len(losses) - 5))


@pytest.mark.parametrize("method", ["probegen", "vanilla", "synthetic-uniform", "statnn"])
def test_fit_predict_inr(small_inr_zoo, method):
    X, y = small_inr_zoo.split("train")
    Xt, yt = small_inr_zoo.split("test")
    before = weights_bytes(X)
    k = 0 if method == "statnn" else 8
    clf = ProbingClassifier(method=method, n_probes=k, epochs=2, head_hidden=32).fit(X, y, eval_set=(Xt, yt))
    assert weights_bytes(X) == before  # models stay frozen
    proba = clf.predict_proba(Xt)
    np.testing.assert_allclose(proba.sum(axis=1), 1, rtol=1e-6)
    assert set(clf.predict(Xt)) <= set(clf.classes_)
    assert len(clf.history_) == 2 and "val_metric" in clf.history_[0]


@pytest.mark.parametrize("method", ["probegen", "vanilla", "synthetic-dead-leaves", "statnn", "entropy-only"])
def test_fit_predict_cnn(small_cnn_zoo, method):
    X, y = small_cnn_zoo.split("train")
    k = 0 if method == "statnn" else 4
    reg = ProbingRegressor(method=method, n_probes=k, epochs=2, head_hidden=16,
                           standardize=method == "statnn").fit(X, y)
    pred = reg.predict(X)
    assert pred.shape == (len(X),) and np.isfinite(pred).all()
    assert -1 <= reg.score(X, y) <= 1


def test_fit_is_deterministic(small_inr_zoo):
    X, y = small_inr_zoo.split("train")
    a = ProbingClassifier(n_probes=8, epochs=2, random_state=4).fit(X, y)
    b = ProbingClassifier(n_probes=8, epochs=2, random_state=4).fit(X, y)
    assert a.history_ == b.history_
    assert a.decision_function(X).tobytes() == b.decision_function(X).tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_diagnostics(small_cnn_zoo):
    X, y = small_cnn_zoo.split("train")
    with pytest.raises(NonFiniteError, match=r"epoch \d+, batch \d+"):
        ProbingRegressor(method="vanilla", n_probes=4, epochs=5, learning_rate=1e35).fit(X, y)


def test_checkpoint_roundtrip(tmp_path, small_inr_zoo):
    X, y = small_inr_zoo.split("train")
    clf = ProbingClassifier(n_probes=8, epochs=1).fit(X, y)
    save_checkpoint(clf, tmp_path / "pipe", X[0].spec)
    assert (tmp_path / "pipe.pgzw").read_bytes()[:5] == b"PGZW\x01"
    again, spec = load_checkpoint(tmp_path / "pipe")
    assert spec == X[0].spec
    np.testing.assert_array_equal(again.predict_proba(X), clf.predict_proba(X))
    np.testing.assert_array_equal(again.current_probes(), clf.current_probes())


def test_transformers(small_cnn_zoo):
    X, _ = small_cnn_zoo.split("train")
    feats = StatNNFeatures().fit_transform(X)
    assert feats.shape == (len(X), 14 * 4)
    probes = np.random.default_rng(0).random((3, 1, 8, 8)).astype(np.float32)
    assert ProbeResponses(probes).fit_transform(X).shape == (len(X), 30)
    assert ProbeResponses(probes, entropy=True).fit_transform(X).shape == (len(X), 3)


def test_generated_probes_start_over_input_domain(small_inr_zoo, small_cnn_zoo):
    X, y = small_cnn_zoo.split("train")
    p = ProbingRegressor(n_probes=16, epochs=0).fit(X, y).current_probes()
    assert p.mean() == pytest.approx(0.5, abs=1e-4) and p.std() == pytest.approx(12 ** -0.5, rel=1e-4)
    X, y = small_inr_zoo.split("train")
    p = ProbingClassifier(n_probes=16, epochs=0).fit(X, y).current_probes()
    assert p.mean() == pytest.approx(0.0, abs=1e-4) and p.std() == pytest.approx(3 ** -0.5, rel=1e-4)
