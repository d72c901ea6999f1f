import numpy as np
import pytest

from probegen.autodiff import Graph, check_gradients
from probegen.exceptions import ContractError, ShapeError
from probegen.models import (
    ArchitectureSpec, Layer, ProbedModel, cnn_spec, init_weights, inr_spec, permute_hidden_neurons,
)
from probegen.predictors import (
    MLPHead, Representation, build_probe_features, entropy_features, head_predict,
    probe_representation, probe_representation_batch, stack_weights, statnn_features,
)


def inr(seed):
    spec = inr_spec()
    return ProbedModel(spec, init_weights(spec, np.random.default_rng(seed)), f"m{seed}")


def cnn(seed):
    spec = cnn_spec([4, 5, 3], 1, 8)
    return ProbedModel(spec, init_weights(spec, np.random.default_rng(seed)), f"c{seed}")


def test_inr_representation_layout():
    probes = np.array([[0.1, 0.2], [-0.5, 0.4], [0.9, -0.9]], dtype=np.float32)
    rep = probe_representation(inr(0), probes)
    assert rep.features.shape == (1, 3) and rep.layout == "probe-concat"
    from probegen.models import model_forward
    np.testing.assert_allclose(rep.features[0], model_forward(inr(0), probes)[:, 0], rtol=1e-6)


def test_cnn_representation_layout():
    probes = np.random.default_rng(0).random((2, 1, 8, 8)).astype(np.float32)
    rep = probe_representation(cnn(0), probes)
    assert rep.features.shape == (1, 20)
    assert rep.column_names()[:2] == ["p0_o0", "p0_o1"]


def test_probe_shape_mismatch():
    with pytest.raises(ShapeError):
        probe_representation(inr(0), np.zeros((3, 3)))


def test_permuted_model_same_representation():
    rng = np.random.default_rng(1)
    probes = rng.uniform(-1, 1, (16, 2))
    for model in (inr(2), cnn(3)):
        if model.spec.input_shape != (2,):
            probes = rng.random((4, 1, 8, 8))
        perm = rng.permutation(model.spec.weighted_layers[1].out_dim)
        a = probe_representation(model, probes, np.float64).features
        b = probe_representation(permute_hidden_neurons(model, 1, perm), probes, np.float64).features
        np.testing.assert_allclose(b, a, rtol=1e-5, atol=1e-9)


def test_stacked_and_looped_paths_agree():
    models = [inr(i) for i in range(5)]
    probes = np.random.default_rng(0).uniform(-1, 1, (7, 2))
    stacked = probe_representation_batch(models, probes, np.float64).features
    g = Graph(np.float64, frozen_grads=False)
    loop = []
    for m in models:
        out = build_probe_features(g, [m], g.constant(probes))
        loop.append(g.evaluate(outputs=[out])[out])
    np.testing.assert_allclose(stacked, np.concatenate(loop), rtol=1e-12)


def test_probe_swap_swaps_blocks():
    probes = np.random.default_rng(0).random((3, 1, 8, 8))
    a = probe_representation(cnn(1), probes, np.float64).features.reshape(3, 10)
    b = probe_representation(cnn(1), probes[[2, 1, 0]], np.float64).features.reshape(3, 10)
    np.testing.assert_array_equal(a[[2, 1, 0]], b)


def test_gradients_reach_probes_not_weights():
    models = [inr(i) for i in range(3)]
    before = [w.tobytes() for m in models for w, _ in m.weights]
    g = Graph(np.float64)
    p = g.param(np.random.default_rng(0).uniform(-1, 1, (4, 2)), name="probes")
    feats = build_probe_features(g, models, p, stack_weights(models))
    loss = g.mean(g.mul(feats, feats))
    g.evaluate()
    grads = g.named_grads(g.backward(loss))
    assert set(grads) == {"probes"} and np.abs(grads["probes"]).max() > 0
    assert before == [w.tobytes() for m in models for w, _ in m.weights]


def two_layer_model(w1, b1):
    spec = ArchitectureSpec((Layer("affine", 2, 2, "relu"), Layer("affine", 2, 1)), (2,))
    return ProbedModel(spec, ((w1, b1), (np.ones((1, 2)), np.zeros(1))))


def test_statnn_constant_weights():
    spec = ArchitectureSpec((Layer("affine", 2, 2),), (2,))
    model = ProbedModel(spec, ((np.full((2, 2), 2.0), np.full(2, 2.0)),))
    np.testing.assert_array_equal(statnn_features(model).features[0, :7], [2, 0, 2, 2, 2, 2, 2])


def test_statnn_direct_formula():
    model = two_layer_model(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.0, 1.0]))
    f = statnn_features(model).features[0]
    np.testing.assert_allclose(f[:7], [2.5, 1.25, 1, 1.75, 2.5, 3.25, 4])
    assert f.shape == (28,)


def test_statnn_permutation_invariant():
    model = cnn(4)
    perm = np.random.default_rng(0).permutation(4)
    a = statnn_features(model).features
    b = statnn_features(permute_hidden_neurons(model, 0, perm)).features
    np.testing.assert_array_equal(a, b)


def test_statnn_empty_layer():
    spec = ArchitectureSpec((Layer("affine", 0, 1),), (0,))
    with pytest.raises(ValueError):
        statnn_features(ProbedModel(spec, ((np.zeros((1, 0)), np.zeros(1)),)))


def test_entropy_uniform_logits():
    rep = Representation(np.zeros((1, 20)), "probe-concat", 2, 10)
    np.testing.assert_allclose(entropy_features(rep).features, np.log(10), rtol=1e-12)
    assert abs(np.log(10) - 2.302585) < 1e-6


def test_entropy_peaked_logits():
    logits = np.zeros((1, 10))
    logits[0, 3] = 1000
    assert entropy_features(Representation(logits, "probe-concat", 1, 10)).features[0, 0] <= 1e-6


def test_entropy_two_logits():
    got = entropy_features(Representation(np.array([[1.0, 0.0]]), "probe-concat", 1, 2)).features[0, 0]
    s = 1 / (1 + np.exp(-1.0))
    assert got == pytest.approx(-(s * np.log(s) + (1 - s) * np.log(1 - s)), rel=1e-12)
    assert got == pytest.approx(0.582, abs=5e-4)


def test_entropy_shift_invariant():
    x = np.random.default_rng(0).standard_normal((3, 4 * 10))
    shifted = x.reshape(3, 4, 10) + np.array([0.0, 5.0, -3.0, 100.0])[None, :, None]
    a = entropy_features(Representation(x, "probe-concat", 4, 10)).features
    b = entropy_features(Representation(shifted.reshape(3, -1), "probe-concat", 4, 10)).features
    assert np.abs(a - b).max() < 1e-6


def test_entropy_requires_probe_layout():
    with pytest.raises(ContractError):
        entropy_features(Representation(np.zeros((1, 14)), "stat-features"))


def test_graph_entropy_matches_numpy():
    x = np.random.default_rng(0).standard_normal((3, 4, 10))
    g = Graph(np.float64)
    out = g.softmax_entropy(g.constant(x))
    got = g.evaluate(outputs=[out])[out]
    np.testing.assert_allclose(got, entropy_features(Representation(x.reshape(3, -1), "probe-concat", 4, 10)).features)


def test_head_zero_weights_output_bias():
    head = MLPHead(4, 3, depth=3, hidden=5, rng=0)
    for k in head.params:
        head.params[k] = np.zeros_like(head.params[k])
    head.params["head.2.b"] = np.array([1.0, -2.0, 0.5], dtype=np.float32)
    np.testing.assert_allclose(head_predict(head, np.ones((2, 4))), [[1, -2, 0.5]] * 2)


def test_single_layer_head_is_affine():
    head = MLPHead(2, 2, depth=1, rng=0)
    head.params["head.0.w"] = np.eye(2, dtype=np.float32)
    head.params["head.0.b"] = np.array([0.5, -1.0], dtype=np.float32)
    np.testing.assert_array_equal(head_predict(head, np.array([[3.0, 4.0]])), [[3.5, 3.0]])


def test_head_dim_mismatch():
    with pytest.raises(ShapeError):
        head_predict(MLPHead(4, 2, rng=0), np.ones((1, 5)))


def test_head_gradient_wrt_representation():
    rng = np.random.default_rng(0)
    head = MLPHead(6, 3, depth=3, hidden=8, rng=1)
    head.params = {k: v.astype(np.float64) for k, v in head.params.items()}
    g = Graph(np.float64)
    x = g.input(name="rep", requires_grad=True)
    loss = g.softmax_cross_entropy(head.build(g, x), np.array([0, 2, 1, 1]))
    g.evaluate({"rep": rng.standard_normal((4, 6))})
    assert check_gradients(g, loss) <= 1e-4


def test_representation_csv(tmp_path):
    rep = Representation(np.arange(6, dtype=float).reshape(2, 3), "probe-concat", 3, 1)
    rep.to_csv(tmp_path / "r.csv", ["a", "b"], [1, 0])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "# layout=probe-concat n_probes=3 per_probe=1"
    assert lines[1] == "identifier,label,p0_o0,p1_o0,p2_o0"
    assert lines[2] == "a,1,0.0,1.0,2.0"
