import math

import numpy as np
import pytest

from sot_head.errors import ConfigurationError, ContractError
from sot_head.gradcheck import max_relative_error, numerical_grad
from sot_head.head import (
    SCHEMES,
    Affine,
    HeadOutput,
    HeadParams,
    cross_entropy,
    cross_entropy_grad,
    dropout_mask,
    head_backward,
    head_forward,
    head_forward_cached,
    init_head,
    softmax,
)
from sot_head.normalization import SvpnConfig
from sot_head.pooling import TokenBatch, init_mgcrp


def tokens(rng, p=4, q=6):
    return TokenBatch(rng.standard_normal(p), rng.standard_normal((p, q)))


def test_softmax_values():
    np.testing.assert_allclose(softmax(np.zeros(4)), np.full(4, 0.25))
    np.testing.assert_allclose(softmax(np.array([0.0, math.log(3.0)])), [0.25, 0.75])
    assert np.all(np.isfinite(softmax(np.array([1000.0, -1000.0]))))


def test_cross_entropy_values():
    out = HeadOutput(np.array([0.25, 0.75]), "probability_vector")
    assert cross_entropy(out, 1) == pytest.approx(-math.log(0.75))
    # smoothing 0.2 over 2 classes: targets (0.1, 0.9)
    assert cross_entropy(out, 1, 0.2) == pytest.approx(-(0.1 * math.log(0.25) + 0.9 * math.log(0.75)))


def test_cross_entropy_late_scores_renormalized():
    out = HeadOutput(np.array([0.5, 1.5]), "probability_sum")
    assert cross_entropy(out, 1) == pytest.approx(-math.log(0.75))
    np.testing.assert_allclose(out.probabilities, [0.25, 0.75])


@pytest.mark.parametrize("kind", ["probability_vector", "probability_sum"])
def test_cross_entropy_grad_matches_finite_differences(kind):
    s = np.array([0.3, 0.9, 0.5]) if kind == "probability_sum" else np.array([0.2, 0.5, 0.3])
    an = cross_entropy_grad(HeadOutput(s, kind), 2, 0.1)
    num = numerical_grad(lambda: cross_entropy(HeadOutput(s, kind), 2, 0.1), s)
    assert max_relative_error(an, num) < 1e-6


def test_dropout_mask():
    np.testing.assert_array_equal(dropout_mask(0.0, 5, 0), np.ones(5))
    m = dropout_mask(0.5, 10000, 7)
    assert set(np.unique(m)) <= {0.0, 2.0}
    assert abs(m.mean() - 1.0) < 0.05
    np.testing.assert_array_equal(m, dropout_mask(0.5, 10000, 7))


def test_head_params_validation():
    fc = Affine(np.zeros((3, 4)), np.zeros(3))
    with pytest.raises(ConfigurationError):
        HeadParams("max", 3, fc_class=fc)
    with pytest.raises(ConfigurationError):
        HeadParams("concat", 3, fc_class=fc)
    with pytest.raises(ConfigurationError):
        HeadParams("late", 3, fc_class=fc)
    with pytest.raises(ConfigurationError):
        HeadParams("sum", 2, fc_class=fc)
    with pytest.raises(ConfigurationError):
        HeadParams("sum", 3, fc_class=fc, dropout_rate=1.0)
    assert not HeadParams("sum", 3, fc_class=fc).uses_pooling


def test_baseline_ignores_words():
    rng = np.random.default_rng(0)
    head = init_head(rng, "sum", 4, None, 3)
    t = tokens(rng)
    a = head_forward(t, None, head).scores
    b = head_forward(TokenBatch(t.class_token, t.words * 100), None, head).scores
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, softmax(head.fc_class(t.class_token)))


def test_init_head_zero_bias_and_small_weights():
    head = init_head(np.random.default_rng(1), "concat", 16, "gcp", 5)
    assert head.fc_joint.weight.shape == (5, 16 + 256)
    np.testing.assert_array_equal(head.fc_joint.bias, 0.0)
    assert abs(head.fc_joint.weight.std() - 0.02) < 0.002


def test_missing_pooling_is_configuration_error():
    rng = np.random.default_rng(2)
    head = init_head(rng, "sum", 4, "gap", 3)
    with pytest.raises(ConfigurationError):
        head_forward(tokens(rng), None, head)


def test_size_mismatch_is_configuration_error():
    rng = np.random.default_rng(3)
    head = init_head(rng, "sum", 4, "gcp", 3)
    with pytest.raises(ConfigurationError):
        head_forward(tokens(rng), "gap", head)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_scheme_forward_definitions(scheme):
    rng = np.random.default_rng(4)
    t = tokens(rng)
    head = init_head(rng, scheme, 4, "gap", 3)
    out = head_forward(t, "gap", head)
    z0, pz = t.class_token, t.words.mean(axis=1)
    if scheme == "sum":
        expected = softmax(head.fc_class(z0) + head.fc_words(pz))
    elif scheme == "concat":
        expected = softmax(head.fc_joint(np.concatenate([z0, pz])))
    elif scheme == "aggr_all":
        expected = softmax(head.fc_joint(t.all_tokens().mean(axis=1)))
    else:
        expected = softmax(head.fc_class(z0)) + softmax(head.fc_words(pz))
    np.testing.assert_allclose(out.scores, expected, atol=1e-15)
    assert out.scores.sum() == pytest.approx(2.0 if scheme == "late" else 1.0)


def test_dropout_only_in_training():
    rng = np.random.default_rng(5)
    t = tokens(rng)
    head = init_head(rng, "sum", 4, "gap", 3, dropout_rate=0.5)
    base = head_forward(t, "gap", head).scores
    np.testing.assert_array_equal(head_forward(t, "gap", head, train=False, seed=1).scores, base)
    _, cache = head_forward_cached(t, "gap", head, train=True, seed=1)
    np.testing.assert_array_equal(cache.pooled, t.words.mean(axis=1) * cache.mask)


POOLINGS = ["gap", "gcp", "mgcrp"]


@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("pool_name", POOLINGS)
def test_head_backward_matches_finite_differences(scheme, pool_name):
    rng = np.random.default_rng(SCHEMES.index(scheme) * 10 + POOLINGS.index(pool_name))
    p = 4
    t = tokens(rng, p, 7)
    pooling = init_mgcrp(rng, p, 2, 2, 3, SvpnConfig(0.5, 1, 2)) if pool_name == "mgcrp" else pool_name
    head = init_head(rng, scheme, p, pooling, 3, dropout_rate=0.3)
    # scale weights up so gradients are not vanishingly small
    for fc in (head.fc_class, head.fc_words, head.fc_joint):
        if fc is not None:
            fc.weight[...] *= 50
            fc.bias[...] = rng.standard_normal(fc.bias.shape)
    label, smoothing = 1, 0.1

    def loss():
        out = head_forward(t, pooling, head, train=True, seed=11)
        return cross_entropy(out, label, smoothing)

    _, cache = head_forward_cached(t, pooling, head, train=True, seed=11)
    grads = head_backward(cache, label=label, smoothing=smoothing)
    assert max_relative_error(grads.class_token, numerical_grad(loss, t.class_token)) < 1e-4
    assert max_relative_error(grads.words, numerical_grad(loss, t.words)) < 1e-4
    for name, (g_w, g_b) in grads.head.items():
        fc = getattr(head, name)
        assert max_relative_error(g_w, numerical_grad(loss, fc.weight)) < 1e-4
        assert max_relative_error(g_b, numerical_grad(loss, fc.bias)) < 1e-4
    if pool_name == "mgcrp":
        for hd, (g_w, g_r) in zip(pooling.heads, grads.pooling.heads):
            assert max_relative_error(g_w, numerical_grad(loss, hd.w)) < 1e-4
            assert max_relative_error(g_r, numerical_grad(loss, hd.r)) < 1e-4


def test_head_backward_contract():
    rng = np.random.default_rng(6)
    head = init_head(rng, "sum", 4, "gap", 3)
    _, cache = head_forward_cached(tokens(rng), "gap", head)
    with pytest.raises(ContractError):
        head_backward(cache)
    with pytest.raises(ContractError):
        head_backward(cache, grad_scores=np.ones(2))
