import itertools

import numpy as np
import pytest

from dpm import hem
from dpm.numeric import ShapeError, Tensor, backward, grad_check


def softmax_oracle(q, k):
    # explicit loop over heads; no shared code with the library path
    n, d, dh = k.shape
    out = np.empty((n, d))
    for h in range(n):
        logits = [float(np.dot(q[h], k[h, j])) / np.sqrt(dh) for j in range(d)]
        top = max(logits)
        e = [np.exp(v - top) for v in logits]
        out[h] = np.array(e) / sum(e)
    return out


def test_identical_keys_give_uniform_attention(rng, f64):
    q = rng.normal(size=(3, 4))
    k = np.tile(rng.normal(size=(1, 1, 4)), (3, 7, 1))
    a = hem.class_attention(Tensor(q), Tensor(k)).data
    np.testing.assert_allclose(a, 1.0 / 7, atol=1e-15)


def test_dominant_key_saturates(f64):
    dh = 4
    q = np.zeros((1, dh))
    q[0, 0] = 1.0
    k = np.zeros((1, 5, dh))
    k[0, 2, 0] = 30.0 * np.sqrt(dh)   # logit margin of exactly 30
    a = hem.class_attention(Tensor(q), Tensor(k)).data
    assert a[0, 2] > 1.0 - 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_class_attention_matches_direct_softmax(seed, f64):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(4, 16)), rng.normal(size=(4, 21, 16))
    a = hem.class_attention(Tensor(q), Tensor(k)).data
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
    assert np.all(a >= 0)
    np.testing.assert_allclose(a, softmax_oracle(q, k), atol=1e-12)


def test_class_attention_batched_and_shape_errors(rng, f64):
    q, k = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 6, 3))
    a = hem.class_attention(Tensor(q), Tensor(k)).data
    assert a.shape == (2, 4, 6)
    for b in range(2):
        np.testing.assert_allclose(a[b], softmax_oracle(q[b], k[b]), atol=1e-12)
    with pytest.raises(ShapeError):
        hem.class_attention(Tensor(q), Tensor(k[..., :2]))


def test_hem_loss_examples(f64):
    assert hem.hem_loss(Tensor(np.eye(4, 9))).item() == pytest.approx(0.0, abs=1e-15)
    same = np.tile(np.full((1, 21), 1 / 21), (4, 1))
    assert hem.hem_loss(Tensor(same)).item() == pytest.approx(12.0, abs=1e-12)
    assert hem.hem_loss(Tensor(np.random.default_rng(0).uniform(size=(1, 21)))).item() == pytest.approx(0.0, abs=1e-15)


def test_hem_loss_batched_is_mean(f64):
    a = np.stack([np.eye(4, 9), np.tile(np.full((1, 9), 1 / 9), (4, 1))])
    assert hem.hem_loss(Tensor(a)).item() == pytest.approx(6.0, abs=1e-12)


def frobenius_oracle(a):
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    g = an @ an.T
    return sum((g[i, j] - (i == j)) ** 2 for i in range(len(a)) for j in range(len(a)))


@pytest.mark.parametrize("seed", range(5))
def test_hem_loss_properties(seed, f64):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 6)), int(rng.integers(3, 12))
    a = rng.dirichlet(np.ones(d), size=n)
    loss = hem.hem_loss(Tensor(a)).item()
    assert loss >= 0.0
    assert loss == pytest.approx(frobenius_oracle(a), rel=1e-12)
    for perm in itertools.islice(itertools.permutations(range(n)), 6):
        assert hem.hem_loss(Tensor(a[list(perm)])).item() == pytest.approx(loss, rel=1e-12)
    scaled = a * rng.uniform(0.1, 10.0, size=(n, 1))
    assert hem.hem_loss(Tensor(scaled)).item() == pytest.approx(loss, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_hem_gradient_through_softmax_and_normalisation(seed, f64):
    rng = np.random.default_rng(seed)
    q = Tensor(rng.normal(size=(4, 3)))
    k = Tensor(rng.normal(size=(4, 6, 3)))
    rep_q = grad_check(lambda t: hem.hem_loss(hem.class_attention(t, k)), q, tol=1e-4)
    rep_k = grad_check(lambda t: hem.hem_loss(hem.class_attention(q, t)), k, tol=1e-4)
    assert rep_q.passed and rep_k.passed, (rep_q.worst, rep_k.worst)


def test_crosscorr_examples():
    same = np.tile(np.array([[0.2, 0.3, 0.5]]), (3, 1))
    np.testing.assert_allclose(hem.diag_head_crosscorr(same), np.ones((3, 3)), atol=1e-12)
    np.testing.assert_allclose(hem.diag_head_crosscorr(np.eye(3, 5)), np.eye(3), atol=1e-15)
    assert hem.mean_off_diagonal(np.ones((3, 3))) == pytest.approx(1.0)
    assert hem.mean_off_diagonal(np.eye(3)) == 0.0


def test_crosscorr_matches_loss(rng, f64):
    a = rng.dirichlet(np.ones(8), size=4)
    g = hem.diag_head_crosscorr(a)
    loss = hem.hem_loss(Tensor(a)).item()
    assert loss == pytest.approx(((g - np.eye(4)) ** 2).sum(), rel=1e-10)


def test_loss_gradient_vanishes_for_orthogonal_heads(f64):
    a = Tensor(np.eye(3, 6) + 1e-3 * np.eye(3, 6, k=3), requires_grad=True)
    loss = hem.hem_loss(a)
    backward(loss)
    np.testing.assert_allclose(a.grad, 0.0, atol=1e-12)
