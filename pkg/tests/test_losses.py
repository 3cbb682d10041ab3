import itertools
import zlib

import numpy as np
import pytest

from mtl2r import autodiff as ad
from mtl2r.autodiff import Tape
from mtl2r.losses import KINDS, LossSpec, lambda_weights, loss

TRANSLATION_INVARIANT = ("ranknet", "listnet", "listmle", "softmax-ce", "approx-ndcg", "lambdarank",
                         "rank-hinge")


def random_lists(rng, B=3, L=6, max_label=4):
    s = rng.standard_normal((B, L))
    y = rng.integers(0, max_label + 1, (B, L)).astype(float)
    mask = np.ones((B, L), dtype=bool)
    for b in range(B):
        mask[b, rng.integers(2, L + 1):] = False
    return s, y, mask


def value(kind, s, y, mask, **params):
    return loss(LossSpec(kind, params), ad.Tensor(s), y, mask).item()


def near_hinge_kink(s, margin=1.0, gap=1e-3):
    diff = s[:, :, None] - s[:, None, :]
    return bool(np.any(np.abs(np.abs(diff) - margin) < gap))


def dcg(labels):
    return sum((2.0 ** l - 1) / np.log2(i + 2) for i, l in enumerate(labels))


class TestGradients:
    @pytest.mark.parametrize("kind", KINDS)
    def test_finite_differences(self, kind):
        rng = np.random.default_rng(zlib.crc32(kind.encode()))
        worst = 0.0
        for _ in range(50):
            s, y, mask = random_lists(rng, L=int(rng.integers(2, 9)))
            while kind == "rank-hinge" and near_hinge_kink(s):
                s = rng.standard_normal(s.shape)
            worst = max(worst, ad.finite_diff_check(lambda p: loss(kind, p, y, mask), s))
        assert worst <= 1e-5, f"{kind}: {worst:.2e}"


class TestExamples:
    def test_mse_perfect_fit(self):
        y = np.array([[3.0, 1.0, 0.0]])
        assert value("mse", y, y, np.ones_like(y, bool)) == 0.0

    def test_ranknet_large_gap(self):
        s = np.array([[10.0, -10.0]])
        got = value("ranknet", s, np.array([[1.0, 0.0]]), np.ones((1, 2), bool))
        np.testing.assert_allclose(got, np.log1p(np.exp(-20.0)), rtol=1e-12)
        np.testing.assert_allclose(got, 2.06e-9, rtol=1e-2)

    def test_listnet_shifted_labels_have_zero_gradient(self):
        y = np.array([[3.0, 1.0, 2.0, 0.0]])
        tape = Tape()
        s = tape.variable(y + 5.0)
        (g,) = tape.grad(loss("listnet", s, y, np.ones_like(y, bool)), [s])
        assert np.linalg.norm(g) <= 1e-8

    def test_rank_hinge_value(self):
        s = np.array([[0.2, 0.0]])
        got = value("rank-hinge", s, np.array([[1.0, 0.0]]), np.ones((1, 2), bool))
        assert got == pytest.approx(0.8, abs=1e-15)

    def test_listmle_two_items(self):
        s = np.array([[0.5, 1.5]])
        got = value("listmle", s, np.array([[2.0, 0.0]]), np.ones((1, 2), bool))
        # -log P(item0 first) = log(e^0.5 + e^1.5) - 0.5; then the last item is certain
        np.testing.assert_allclose(got, np.log(np.exp(0.5) + np.exp(1.5)) - 0.5, rtol=1e-12)

    def test_approx_ndcg_close_to_exact_when_scores_are_well_separated(self):
        y = np.array([[3.0, 0.0, 2.0, 1.0]])
        s = 1000.0 * y  # soft ranks become hard ranks
        got = value("approx-ndcg", s, y, np.ones_like(y, bool))
        assert got == pytest.approx(0.0, abs=1e-9)
        s_rev = -1000.0 * y
        exact = dcg([0.0, 1.0, 2.0, 3.0]) / dcg([3.0, 2.0, 1.0, 0.0])
        assert value("approx-ndcg", s_rev, y, np.ones_like(y, bool)) == pytest.approx(1 - exact)

    def test_ordinal_bce_scales_labels(self):
        s = np.array([[0.0]])
        got = value("ordinal-bce", s, np.array([[4.0]]), np.ones((1, 1), bool))
        assert got == pytest.approx(np.log(2.0))

    def test_list_without_label_variation_contributes_zero(self):
        s = np.array([[0.3, -0.1, 2.0]])
        y = np.ones((1, 3))
        for kind in ("ranknet", "lambdarank", "rank-hinge", "listnet", "listmle", "softmax-ce"):
            assert value(kind, s, y, np.ones((1, 3), bool)) == 0.0, kind


class TestInvariants:
    @pytest.mark.parametrize("kind", TRANSLATION_INVARIANT)
    def test_translation_invariance(self, kind):
        rng = np.random.default_rng(1)
        for _ in range(20):
            s, y, mask = random_lists(rng)
            shift = rng.normal(size=(s.shape[0], 1)) * 3
            assert value(kind, s + shift, y, mask) == pytest.approx(value(kind, s, y, mask),
                                                                    abs=1e-9)

    @pytest.mark.parametrize("kind", ["mse", "ordinal-bce"])
    def test_pointwise_kinds_are_not_translation_invariant(self, kind):
        s, y, mask = np.array([[0.1, 0.4]]), np.array([[1.0, 0.0]]), np.ones((1, 2), bool)
        assert abs(value(kind, s + 1.0, y, mask) - value(kind, s, y, mask)) > 1e-3

    @pytest.mark.parametrize("kind", KINDS)
    def test_duplicated_and_padded_lists_give_the_same_loss(self, kind):
        rng = np.random.default_rng(2)
        for _ in range(10):
            s, y, mask = random_lists(rng, B=2)
            base = value(kind, s, y, mask)
            pad = 3
            s2 = np.concatenate([np.vstack([s, s]), rng.normal(size=(4, pad))], axis=1)
            y2 = np.concatenate([np.vstack([y, y]), rng.integers(0, 5, (4, pad))], axis=1)
            m2 = np.concatenate([np.vstack([mask, mask]), np.zeros((4, pad), bool)], axis=1)
            assert value(kind, s2, y2, m2) == pytest.approx(base, abs=1e-9)

    @pytest.mark.parametrize("kind", ["ranknet", "lambdarank", "rank-hinge"])
    def test_raising_the_better_item_never_hurts(self, kind):
        y, mask = np.array([[2.0, 0.0]]), np.ones((1, 2), bool)
        grid = np.linspace(-3, 3, 61)
        vals = [value(kind, np.array([[t, 0.0]]), y, mask) for t in grid]
        assert np.all(np.diff(vals) <= 1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            loss("mse", ad.Tensor(np.zeros((2, 3))), np.zeros((2, 4)), np.ones((2, 3), bool))


class TestLossSpec:
    def test_defaults_and_parse(self):
        assert LossSpec.parse("lambdarank").params == {"sigma": 1.0, "k": 30}
        spec = LossSpec.parse({"kind": "approx-ndcg", "temperature": 0.5})
        assert spec.params["temperature"] == 0.5
        assert LossSpec.parse(spec.to_dict()) == spec

    @pytest.mark.parametrize("bad", [
        {"kind": "approx-ndcg", "temperature": 0.0},
        {"kind": "lambdarank", "k": 0},
        {"kind": "ranknet", "margin": 1.0},
        {"kind": "hinge"},
    ])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            LossSpec.parse(bad)


class TestLambdaWeights:
    def test_equal_labels_give_zero(self):
        np.testing.assert_array_equal(lambda_weights(np.full(5, 2.0), 3), np.zeros((5, 5)))

    def test_two_items_in_wrong_order(self):
        y = np.array([1.0, 0.0])
        w = lambda_weights(y, 2, scores=np.array([0.0, 1.0]))  # item 1 ranked first
        deficit = 1.0 - dcg([0.0, 1.0]) / dcg([1.0, 0.0])
        np.testing.assert_allclose([w[0, 1], w[1, 0]], [deficit, deficit], rtol=1e-14)

    def test_symmetric_with_zero_diagonal(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            L = int(rng.integers(2, 10))
            w = lambda_weights(rng.integers(0, 5, L), int(rng.integers(1, 12)), rng.normal(size=L))
            np.testing.assert_array_equal(w, w.T)
            np.testing.assert_array_equal(np.diag(w), 0.0)

    def test_matches_brute_force_swaps(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            L, k = int(rng.integers(2, 7)), int(rng.integers(1, 7))
            y, s = rng.integers(0, 5, L).astype(float), rng.normal(size=L)
            order = list(np.lexsort((np.arange(L), -s)))
            ideal = sum((2.0 ** l - 1) / np.log2(i + 2) for i, l in enumerate(sorted(y)[::-1][:k]))

            def ndcg(o):
                if ideal == 0:
                    return 0.0
                return sum((2.0 ** y[j] - 1) / np.log2(i + 2) for i, j in enumerate(o[:k])) / ideal

            w = lambda_weights(y, k, s)
            for i, j in itertools.combinations(range(L), 2):
                o = order.copy()
                a, b = o.index(i), o.index(j)
                o[a], o[b] = o[b], o[a]
                assert w[i, j] == pytest.approx(abs(ndcg(o) - ndcg(order)), abs=1e-12)
