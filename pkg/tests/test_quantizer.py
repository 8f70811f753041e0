import numpy as np
import pytest

from dvam import autodiff as ad
from dvam.autodiff import Tensor, backward
from dvam.errors import ContractViolation
from dvam.quantizer import (
    CodeBook,
    ema_update,
    codebook_report,
    init_codebook,
    quantize,
    revive_dead_codes,
    straight_through,
)


def make_book(vectors, **kw):
    return CodeBook(vectors=Tensor(np.asarray(vectors, dtype=float), requires_grad=True), **kw)


def brute_force_nearest(vectors, row):
    # independent oracle: exhaustive argmin over plain euclidean distances
    best, best_d = 0, float("inf")
    for j, e in enumerate(vectors):
        d = float(np.linalg.norm(row - e))
        if d < best_d:
            best, best_d = j, d
    return best


def test_quantize_hand_computed():
    book = make_book([[0.0, 0.0], [1.0, 1.0]])
    res = quantize(book, np.array([[0.9, 0.8]]))
    assert res.indices.tolist() == [1]  # distances^2: 1.45 vs 0.05
    np.testing.assert_array_equal(res.quantized.data, [[1.0, 1.0]])


def test_quantize_exact_match_zero_commit():
    book = make_book([[0.0, 1.0], [2.0, 3.0]])
    res = quantize(book, np.array([[2.0, 3.0]]))
    assert res.indices.tolist() == [1]
    assert res.commit_term.item() == 0.0


def test_quantize_matches_brute_force_oracle():
    rng = np.random.default_rng(11)
    book = make_book(rng.normal(size=(64, 16)))
    hidden = rng.normal(size=(100, 16))
    res = quantize(book, hidden)
    for t in range(100):
        assert res.indices[t] == brute_force_nearest(book.vectors.data, hidden[t])


def test_quantize_tie_breaks_to_smallest_index():
    book = make_book([[1.0, 0.0], [1.0, 0.0], [5.0, 5.0]])  # duplicated codes
    res = quantize(book, np.array([[1.0, 0.1], [0.9, 0.0]]))
    assert res.indices.tolist() == [0, 0]


def test_quantize_posterior_is_one_hot():
    # q(z_t = k | x) is 1 exactly at the brute-force argmin and 0 elsewhere
    rng = np.random.default_rng(12)
    book = make_book(rng.normal(size=(8, 4)))
    hidden = rng.normal(size=(20, 4))
    res = quantize(book, hidden)
    for t in range(20):
        one_hot = np.zeros(8)
        one_hot[brute_force_nearest(book.vectors.data, hidden[t])] = 1.0
        chosen = np.zeros(8)
        chosen[res.indices[t]] = 1.0
        np.testing.assert_array_equal(chosen, one_hot)


def test_quantize_dimension_mismatch():
    book = make_book([[0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ContractViolation):
        quantize(book, np.zeros((3, 5)))


def test_commit_term_nonnegative_and_zero_iff_on_codes():
    rng = np.random.default_rng(13)
    book = make_book(rng.normal(size=(4, 3)))
    res = quantize(book, rng.normal(size=(6, 3)))
    assert res.commit_term.item() > 0.0
    exact = book.vectors.data[[0, 2, 1]]
    assert quantize(book, exact).commit_term.item() == 0.0


def test_commit_mask_drops_rows():
    rng = np.random.default_rng(14)
    book = make_book(rng.normal(size=(4, 3)))
    hidden = rng.normal(size=(5, 3))
    full = quantize(book, hidden).commit_term.item()
    masked = quantize(book, hidden, mask=np.array([1, 1, 0, 0, 0.0])).commit_term.item()
    first_two = quantize(book, hidden[:2]).commit_term.item()
    assert masked == pytest.approx(first_two)
    assert masked < full


def test_straight_through_forward_bitwise():
    h = Tensor(np.array([[0.3, 0.4]]), requires_grad=True)
    q = Tensor(np.array([[1.0, 2.0]]))
    out = straight_through(h, q)
    np.testing.assert_array_equal(out.data, q.data)


def test_straight_through_identity_backward():
    h = Tensor(np.array([[0.3, 0.4], [0.1, 0.2]]), requires_grad=True)
    q = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    backward(ad.tsum(straight_through(h, q)))
    np.testing.assert_array_equal(h.grad, np.ones((2, 2)))


def test_straight_through_gradient_evaluated_at_quantized_point():
    # loss = ||out||^2 with fixed q: grad(h) = 2q -- the gradient of the loss
    # at the quantized point, passed straight through to h
    q = np.array([[1.0, -2.0, 0.5]])
    h = Tensor(np.array([[0.3, 0.4, -0.1]]), requires_grad=True)
    out = straight_through(h, Tensor(q))
    backward(ad.tsum(out * out))
    np.testing.assert_allclose(h.grad, 2.0 * q)
    # finite-difference oracle on the pass-through path: perturb the point the
    # loss is actually evaluated at (the quantized one) and difference ||x||^2
    eps = 1e-5
    numeric = np.zeros_like(q)
    for i in range(q.shape[1]):
        up, down = q.copy(), q.copy()
        up[0, i] += eps
        down[0, i] -= eps
        numeric[0, i] = ((up**2).sum() - (down**2).sum()) / (2 * eps)
    np.testing.assert_allclose(h.grad, numeric, rtol=1e-4)


def test_composite_backward_equals_identity_path():
    # gradient through quantize -> straight_through equals the gradient an
    # identity layer would give at the same (quantized) point
    rng = np.random.default_rng(15)
    book = make_book(rng.normal(size=(6, 4)))
    hidden = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 2))

    h1 = Tensor(hidden, requires_grad=True)
    res = quantize(book, h1)
    out = straight_through(h1, res.quantized)
    backward(ad.tsum((out @ Tensor(w)) ** 2.0))

    h2 = Tensor(res.quantized.data.copy(), requires_grad=True)
    backward(ad.tsum((h2 @ Tensor(w)) ** 2.0))
    np.testing.assert_allclose(h1.grad, h2.grad, atol=1e-12)


def test_codebook_receives_no_gradient_through_ste():
    rng = np.random.default_rng(16)
    book = make_book(rng.normal(size=(6, 4)))
    h = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    res = quantize(book, h)
    out = straight_through(h, res.quantized)
    backward(ad.tsum(out * out) + res.commit_term)
    assert book.vectors.grad is None
    assert h.grad is not None


def test_ema_decay_zero_snaps_to_mean():
    book = make_book([[5.0, 5.0], [9.0, 9.0]], ema_decay=0.0)
    ema_update(book, np.array([[1.0, 2.0]]), np.array([0]))
    np.testing.assert_array_equal(book.vectors.data[0], [1.0, 2.0])
    np.testing.assert_array_equal(book.vectors.data[1], [9.0, 9.0])


def test_ema_decay_one_is_noop():
    book = make_book([[5.0, 5.0], [9.0, 9.0]], ema_decay=1.0)
    before = book.vectors.data.copy()
    ema_update(book, np.array([[1.0, 2.0], [0.0, 0.0]]), np.array([0, 1]))
    np.testing.assert_array_equal(book.vectors.data, before)


def test_ema_standard_decay_formula():
    book = make_book([[0.0, 0.0], [7.0, 7.0]], ema_decay=0.99)
    ema_update(book, np.array([[1.0, 1.0]]), np.array([0]))
    np.testing.assert_allclose(book.vectors.data[0], [0.01, 0.01])
    assert book.ema_counts[0] == pytest.approx(0.01)


def test_ema_repeated_updates_converge_geometrically():
    # fixed assignment: error to the cluster mean shrinks by a factor of decay
    g = 0.9
    book = make_book([[0.0, 0.0], [50.0, 50.0]], ema_decay=g)
    target = np.array([2.0, -1.0])
    errors = []
    for _ in range(20):
        ema_update(book, target[None, :], np.array([0]))
        errors.append(np.linalg.norm(book.vectors.data[0] - target))
    logs = np.log(errors)
    slopes = np.diff(logs)
    np.testing.assert_allclose(slopes, np.log(g), rtol=5e-2)


def test_revive_none_when_all_live():
    book = make_book([[0.0, 0.0], [1.0, 1.0]], dead_threshold=1.0)
    book.ema_counts[:] = 5.0
    before = book.vectors.data.copy()
    assert revive_dead_codes(book, np.array([[9.0, 9.0]]), np.random.default_rng(0)) == 0
    np.testing.assert_array_equal(book.vectors.data, before)


def test_revive_single_dead_code():
    book = make_book([[0.0, 0.0], [1.0, 1.0]], dead_threshold=1.0)
    book.ema_counts[:] = [0.0, 5.0]
    n = revive_dead_codes(book, np.array([[9.0, 8.0]]), np.random.default_rng(0))
    assert n == 1
    np.testing.assert_array_equal(book.vectors.data[0], [9.0, 8.0])
    assert book.ema_counts[0] == 1.0


def test_revive_deterministic_under_seed():
    rng_pool = np.random.default_rng(2)
    pool = rng_pool.normal(size=(20, 3))
    results = []
    for _ in range(2):
        book = make_book(np.zeros((5, 3)), dead_threshold=1.0)
        revive_dead_codes(book, pool, np.random.default_rng(77))
        results.append(book.vectors.data.copy())
    np.testing.assert_array_equal(results[0], results[1])


def test_init_codebook_samples_hidden_rows():
    rng = np.random.default_rng(3)
    hidden = rng.normal(size=(40, 6))
    book = init_codebook(hidden, K=8, rng=np.random.default_rng(4))
    for k in range(8):
        assert any(np.array_equal(book.vectors.data[k], row) for row in hidden)


def test_codebook_report_shape():
    book = make_book([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
    rows = codebook_report(book)
    assert len(rows) == 3
    ids, counts, norms, nearest = zip(*rows)
    assert ids == (0, 1, 2)
    assert nearest[0] == 1 and nearest[1] == 0
