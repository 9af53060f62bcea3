import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cabcnn.acb import (
    ACB,
    AttentionUnit,
    ClassifierBank,
    ClassifierUnit,
    acb_forward,
    attend,
    classify,
    temporal_average,
)
from cabcnn.errors import ConfigError, DegenerateError, ShapeError
from cabcnn.layers import DenseLayer
from cabcnn.tensor import Tensor, finite_difference_grad, relative_error, tsum


def _np_softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def _np_mlp(layers, x):
    h = x
    for i, layer in enumerate(layers):
        h = layer.weights.data @ h + layer.bias.data
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return _np_softmax(h)


def _zero_unit(cls, dims):
    return cls(*[DenseLayer.from_arrays(np.zeros((o, i)), np.zeros(o)) for i, o in zip(dims[:-1], dims[1:])])


def _fixed_classifier(feature_dim, probs_logits):
    unit = _zero_unit(ClassifierUnit, (feature_dim, 8, 4, len(probs_logits)))
    unit.head.bias = Tensor(np.asarray(probs_logits, dtype=np.float64))
    return unit


# --- classify / attend --------------------------------------------------------

def test_classify_sums_to_one(rng):
    unit = ClassifierUnit.create(16, 3, rng)
    out = classify(unit, Tensor(rng.standard_normal(16) * 10))
    assert abs(out.data.sum() - 1.0) <= 1e-12


def test_classify_zero_weights_uniform():
    out = classify(_zero_unit(ClassifierUnit, (16, 8, 4, 3)), Tensor(np.ones(16)))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_classify_matches_composition(rng):
    unit = ClassifierUnit.create(16, 3, rng)
    for layer in (unit.dense1, unit.dense2, unit.head):
        layer.bias = Tensor(rng.uniform(-0.5, 0.5, layer.out_dim))
    x = rng.standard_normal(16)
    np.testing.assert_allclose(classify(unit, Tensor(x)).data, _np_mlp([unit.dense1, unit.dense2, unit.head], x), atol=1e-14)


def test_attend_zero_weights_uniform():
    out = attend(_zero_unit(AttentionUnit, (16, 160, 80, 5)), Tensor(np.ones(16)))
    np.testing.assert_allclose(out.data, [0.2] * 5, rtol=0, atol=1e-15)


def test_attend_positive_and_normalised(rng):
    out = attend(AttentionUnit.create(16, 7, rng), Tensor(rng.standard_normal(16))).data
    assert (out > 0).all()
    assert abs(out.sum() - 1.0) <= 1e-12


def test_attend_matches_composition(rng):
    unit = AttentionUnit.create(12, 4, rng)
    x = rng.standard_normal(12)
    np.testing.assert_allclose(attend(unit, Tensor(x)).data, _np_mlp([unit.dense1, unit.dense2, unit.head], x), atol=1e-14)


# --- acb_forward --------------------------------------------------------------

def test_one_hot_attention_selects_classifier(rng):
    block = ACB.create(8, 4, 3, rng)
    block.attention.head.weights = Tensor(np.zeros((4, 80)))
    block.attention.head.bias = Tensor(np.array([0.0, 0.0, 1000.0, 0.0]))
    x = Tensor(rng.standard_normal(8))
    expected = classify(block.classifiers.unit(2), x).data
    np.testing.assert_array_equal(acb_forward(block, x).data, expected)


def test_two_classifier_hand_example():
    bank = ClassifierBank.from_units([_fixed_classifier(6, [1000.0, 0, 0]), _fixed_classifier(6, [0, 1000.0, 0])])
    block = ACB(bank, _zero_unit(AttentionUnit, (6, 160, 80, 2)))
    np.testing.assert_array_equal(acb_forward(block, Tensor(np.ones(6))).data, [0.5, 0.5, 0.0])


def test_acb_matches_loop(rng):
    block = ACB.create(10, 5, 3, rng)
    x = Tensor(rng.standard_normal(10))
    alpha = attend(block.attention, x).data
    want = sum(alpha[i] * classify(block.classifiers.unit(i), x).data for i in range(5))
    np.testing.assert_allclose(acb_forward(block, x).data, want, rtol=0, atol=1e-14)


def test_bank_matches_units(rng):
    bank = ClassifierBank.create(6, 10, 3, rng)
    a = rng.standard_normal((4, 10))
    out = bank(Tensor(a)).data
    for i in range(6):
        unit = bank.unit(i)
        for r in range(4):
            np.testing.assert_allclose(out[i, r], classify(unit, Tensor(a[r])).data, atol=1e-14)


def test_bank_round_trip_through_units(rng):
    bank = ClassifierBank.create(3, 5, 2, rng)
    again = ClassifierBank.from_units([bank.unit(i) for i in range(3)])
    for w, v in zip(bank.weights + bank.biases, again.weights + again.biases):
        np.testing.assert_array_equal(w.data, v.data)


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(2, 4))
def test_convex_bound_and_probability(seed, n, m):
    g = np.random.default_rng(seed)
    block = ACB.create(8, n, m, g)
    out = block.run(Tensor(g.standard_normal((5, 8)) * 3))
    c, alpha, ci = out.context.data, out.attention.data, out.classifier_probs.data
    for arr in (c, alpha, ci):
        assert (arr >= 0).all()
        np.testing.assert_allclose(arr.sum(axis=-1), 1.0, rtol=0, atol=1e-10)
    tol = 1e-15
    assert (ci.min(axis=0) - tol <= c).all() and (c <= ci.max(axis=0) + tol).all()


@given(st.integers(0, 2**31))
def test_permutation_consistency(seed):
    g = np.random.default_rng(seed)
    n = 5
    block = ACB.create(8, n, 3, g)
    x = Tensor(g.standard_normal((3, 8)))
    base = block(x).data
    perm = g.permutation(n)
    bank = ClassifierBank(
        [Tensor(w.data[perm]) for w in block.classifiers.weights],
        [Tensor(b.data[perm]) for b in block.classifiers.biases],
    )
    att = block.attention
    head = DenseLayer.from_arrays(att.head.weights.data[perm], att.head.bias.data[perm])
    permuted = ACB(bank, AttentionUnit(att.dense1, att.dense2, head))
    np.testing.assert_allclose(permuted(x).data, base, rtol=0, atol=1e-15)


def test_acb_gradients(rng):
    block = ACB.create(6, 3, 3, rng)
    a = Tensor(rng.uniform(-1, 1, (2, 6)), requires_grad=True)
    proj = rng.uniform(-1, 1, (2, 3))
    tensors = [a] + [t for _, t in block.parameters()]
    for t in tensors:
        t.requires_grad, t.grad = True, None

    def loss():
        return tsum(block(a) * proj)

    loss().backward()
    for t in tensors:
        original = t.data

        def f(probe, t=t):
            t.data = probe.data
            return loss()

        numeric = finite_difference_grad(f, Tensor(original))
        t.data = original
        assert relative_error(t.grad, numeric) < 1e-4


def test_acb_rejects_bad_sizes(rng):
    with pytest.raises(ConfigError):
        ACB.create(8, 0, 3, rng)
    with pytest.raises(ConfigError):
        ACB.create(8, 2, 1, rng)
    with pytest.raises(ConfigError):
        ACB(ClassifierBank.create(3, 8, 3, rng), AttentionUnit.create(8, 4, rng))
    with pytest.raises(ShapeError):
        ACB.create(8, 2, 3, rng)(Tensor(np.zeros((2, 7))))


# --- temporal_average ---------------------------------------------------------

def test_average_single_step():
    c = Tensor([0.2, 0.3, 0.5])
    np.testing.assert_array_equal(temporal_average([c]).data, c.data)


def test_average_constant_sequence():
    c = np.array([0.1, 0.6, 0.3])
    np.testing.assert_allclose(temporal_average([Tensor(c)] * 7).data, c, rtol=0, atol=1e-15)


def test_average_symmetry():
    out = temporal_average(Tensor(np.eye(3)))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_average_empty():
    with pytest.raises(DegenerateError):
        temporal_average([])
