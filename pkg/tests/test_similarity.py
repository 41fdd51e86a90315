import numpy as np
import pytest

from specprune.activations import ActivationSet, FlatView
from specprune.errors import DegenerateInputError, ValidationError
from specprune.similarity import (GramMatrix, SimilarityMatrix,
                                  channel_similarity, cka, gram, hsic1,
                                  layer_similarity)

from oracles import naive_cka, naive_gram, naive_hsic1


def fv(array) -> FlatView:
    a = np.asarray(array, dtype=np.float32)
    return FlatView(rows=a.shape[0], cols=a.shape[1], data=a)


def random_view(rng, rows, cols) -> FlatView:
    return fv(rng.standard_normal((rows, cols)))


# -- gram ---------------------------------------------------------------------

def test_gram_small_example():
    view = fv([[1, 0], [0, 1], [0, 0], [1, 1]])
    g = gram(view)
    expected = np.array([
        [1, 0, 0, 1],
        [0, 1, 0, 1],
        [0, 0, 0, 0],
        [1, 1, 0, 2],
    ], dtype=np.float64)
    assert np.array_equal(g.data, expected)


def test_gram_identical_rows_rank_one(rng):
    row = rng.standard_normal(6).astype(np.float32)
    view = fv(np.tile(row, (5, 1)))
    g = gram(view)
    assert np.allclose(g.data, g.data[0, 0])
    assert np.array_equal(g.data, g.data.T)


def test_gram_matches_loop_oracle(rng):
    view = random_view(rng, 8, 32)
    g = gram(view)
    expected = naive_gram(view.data)
    assert np.allclose(g.data, expected, rtol=1e-10, atol=0)


def test_gram_requires_four_rows():
    with pytest.raises(ValidationError, match="4 rows"):
        gram(fv(np.zeros((3, 2))))


# -- hsic1 --------------------------------------------------------------------

def test_hsic_zero_grams():
    z = GramMatrix(dim=6, data=np.zeros((6, 6)))
    assert hsic1(z, z) == 0.0


def test_hsic_matches_loop_oracle(rng):
    for _ in range(10):
        x = rng.standard_normal((8, 5))
        y = rng.standard_normal((8, 7))
        k = GramMatrix(8, x @ x.T)
        l = GramMatrix(8, y @ y.T)
        ours = hsic1(k, l)
        theirs = naive_hsic1(k.data, l.data)
        assert ours == pytest.approx(theirs, rel=1e-12)


def test_hsic_symmetric_in_arguments(rng):
    for _ in range(20):
        x = rng.standard_normal((6, 4))
        y = rng.standard_normal((6, 4))
        k = GramMatrix(6, x @ x.T)
        l = GramMatrix(6, y @ y.T)
        assert hsic1(k, l) == hsic1(l, k)


def test_hsic_dimension_mismatch():
    with pytest.raises(ValidationError, match="mismatch"):
        hsic1(GramMatrix(4, np.zeros((4, 4))), GramMatrix(5, np.zeros((5, 5))))


def test_hsic_constant_shift_invariance(rng):
    # constant offsets on every Gram entry sit in the estimator's null space
    x = rng.standard_normal((10, 6))
    y = rng.standard_normal((10, 6))
    k = x @ x.T
    l = y @ y.T
    base = hsic1(GramMatrix(10, k), GramMatrix(10, l))
    shifted = hsic1(GramMatrix(10, k + 3.7), GramMatrix(10, l))
    assert shifted == pytest.approx(base, rel=1e-9, abs=1e-9)


# -- cka ----------------------------------------------------------------------

def test_cka_self_is_one(rng):
    view = random_view(rng, 8, 16)
    assert cka(view, view) == pytest.approx(1.0, abs=1e-9)


def test_cka_scale_invariance(rng):
    x = rng.standard_normal((8, 12)).astype(np.float32)
    y = rng.standard_normal((8, 10)).astype(np.float32)
    base = cka(fv(x), fv(y))
    for alpha in (0.01, 1.0, 100.0):
        for beta in (0.01, 1.0, 100.0):
            assert cka(fv(alpha * x), fv(beta * y)) == pytest.approx(base, abs=1e-9)


def test_cka_symmetry_bit_exact(rng):
    x = random_view(rng, 8, 5)
    y = random_view(rng, 8, 9)
    assert cka(x, y) == cka(y, x)


def test_cka_matches_oracle_composition(rng):
    x = rng.standard_normal((16, 32))
    y = rng.standard_normal((16, 32))
    ours = cka(fv(x), fv(y))
    theirs = naive_cka(fv(x).data, fv(y).data)
    assert ours == pytest.approx(theirs, rel=1e-12)


def test_cka_orthogonal_invariance(rng):
    # right-multiplying the features by an orthogonal matrix leaves CKA alone
    x = rng.standard_normal((8, 12))
    y = rng.standard_normal((8, 12))
    q, _ = np.linalg.qr(rng.standard_normal((12, 12)))

    def f64(a):
        return FlatView(rows=a.shape[0], cols=a.shape[1], data=a)

    base = cka(f64(x), f64(y))
    rotated = cka(f64(x @ q), f64(y))
    assert rotated == pytest.approx(base, abs=1e-9)


def test_cka_degenerate_input():
    flat = fv(np.ones((6, 4)))  # zero variance across samples
    with pytest.raises(DegenerateInputError):
        cka(flat, flat)


def test_cka_row_count_mismatch(rng):
    with pytest.raises(ValidationError, match="row mismatch"):
        cka(random_view(rng, 8, 3), random_view(rng, 6, 3))


# -- layer similarity -----------------------------------------------------------

def layer_set(rng, shapes: dict[str, tuple]) -> ActivationSet:
    return ActivationSet({
        nid: rng.standard_normal(shape).astype(np.float32)
        for nid, shape in shapes.items()
    })


def test_identical_layers_fully_similar(rng):
    t = rng.standard_normal((8, 2, 3, 3)).astype(np.float32)
    aset = ActivationSet({"a": t, "b": t.copy()})
    s = layer_similarity(aset, ["a", "b"])
    assert s.data[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert s.data[0, 0] == 1.0


def test_layer_similarity_matches_pairwise_oracle(rng):
    t = rng.standard_normal((8, 2, 2, 2)).astype(np.float32)
    aset = ActivationSet({
        "a": t,
        "b": t.copy(),
        "c": rng.standard_normal((8, 2, 2, 2)).astype(np.float32),
    })
    ids = ["a", "b", "c"]
    s = layer_similarity(aset, ids)
    flat = {nid: aset.tensor(nid).reshape(8, -1) for nid in ids}
    for i, u in enumerate(ids):
        for j, v in enumerate(ids):
            if i == j:
                continue
            expected = min(1.0, max(0.0, naive_cka(flat[u], flat[v])))
            assert s.data[i, j] == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_layer_similarity_single_unit(rng):
    aset = layer_set(rng, {"a": (8, 2, 2, 2)})
    s = layer_similarity(aset, ["a"])
    assert s.data.shape == (1, 1)
    assert s.data[0, 0] == 1.0


def test_layer_similarity_invariants(rng):
    aset = layer_set(rng, {f"u{i}": (8, 3, 2, 2) for i in range(5)})
    s = layer_similarity(aset, [f"u{i}" for i in range(5)])
    s.check()  # symmetric bit-exact, entries in [0, 1], unit diagonal
    assert np.array_equal(np.diag(s.data), np.ones(5))


def test_layer_similarity_degenerate_unit_named(rng):
    aset = ActivationSet({
        "good": rng.standard_normal((8, 2, 2, 2)).astype(np.float32),
        "flat": np.ones((8, 2, 2, 2), dtype=np.float32),
    })
    with pytest.raises(DegenerateInputError, match="flat"):
        layer_similarity(aset, ["good", "flat"])


# -- channel similarity ---------------------------------------------------------

def test_scaled_channel_pair_fully_similar(rng):
    base = rng.standard_normal((8, 1, 3, 3)).astype(np.float32)
    t = np.concatenate([base, 2.0 * base], axis=1)
    aset = ActivationSet({"x": t})
    s, degenerate = channel_similarity(aset, "x")
    assert degenerate == []
    assert s.data[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_zero_channel_reported_degenerate(rng):
    t = rng.standard_normal((8, 3, 2, 2)).astype(np.float32)
    t[:, 1] = 0.0
    aset = ActivationSet({"x": t})
    s, degenerate = channel_similarity(aset, "x")
    assert degenerate == [1]
    assert s.labels == [0, 2]
    assert s.data.shape == (2, 2)


def test_channel_similarity_matches_pairwise_oracle(rng):
    t = rng.standard_normal((8, 4, 2, 2)).astype(np.float32)
    aset = ActivationSet({"x": t})
    s, _ = channel_similarity(aset, "x")
    for p in range(4):
        for q in range(4):
            if p == q:
                continue
            expected = naive_cka(t[:, p].reshape(8, -1), t[:, q].reshape(8, -1))
            expected = min(1.0, max(0.0, expected))
            assert s.data[p, q] == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_all_channels_degenerate_errors():
    aset = ActivationSet({"x": np.zeros((8, 3, 2, 2), dtype=np.float32)})
    with pytest.raises(DegenerateInputError, match="keep channel 0"):
        channel_similarity(aset, "x")


def test_similarity_matrix_check_rejects_asymmetry():
    bad = SimilarityMatrix(dim=2, data=np.array([[1.0, 0.5], [0.4, 1.0]]),
                           kind="layer", labels=["a", "b"])
    with pytest.raises(ValidationError):
        bad.check()


from hypothesis import given, settings
from hypothesis import strategies as st


@settings(max_examples=25, deadline=None)
@given(shift=st.floats(min_value=-50.0, max_value=50.0,
                       allow_nan=False, allow_infinity=False),
       seed=st.integers(0, 2 ** 16))
def test_hsic_shift_invariance_property(shift, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((8, 5))
    y = rng.standard_normal((8, 5))
    k = x @ x.T
    l = y @ y.T
    base = hsic1(GramMatrix(8, k), GramMatrix(8, l))
    moved = hsic1(GramMatrix(8, k + shift), GramMatrix(8, l))
    assert moved == pytest.approx(base, rel=1e-9, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(4, 12), cols=st.integers(1, 16), seed=st.integers(0, 2 ** 16))
def test_gram_exactly_symmetric_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    g = gram(fv(rng.standard_normal((rows, cols))))
    assert np.array_equal(g.data, g.data.T)
