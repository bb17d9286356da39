import numpy as np
import pytest

from sctlab.encoders import EncoderDims, build_encoders, encode_image, text_features
from sctlab.extraction import (
    extract_entropy,
    extract_prob,
    extract_rank,
    label_ranks,
    rank_of_label,
    region_probs,
    select_entropy,
    select_prob,
    select_rank,
)
from sctlab.numerics import make_rng, softmax
from sctlab.tuning import class_probs


def brute_force_rank(p, y):
    """Full-sort oracle with the same deterministic tie rule: equal probability
    at a lower index outranks y."""
    order = sorted(range(len(p)), key=lambda m: (-p[m], m))
    return order.index(y) + 1


def random_prob_matrix(rng, n_rows, m):
    # coarse grid so ties actually occur
    raw = rng.integers(1, 6, size=(n_rows, m)).astype(float)
    return raw / raw.sum(axis=1, keepdims=True)


@pytest.fixture(scope="module")
def small_world():
    dims = EncoderDims(d_lat=5, d_emb=6, d_feat=8, grid_h=2, grid_w=2, n_classes=4)
    enc = build_encoders(dims, 42)
    rng = make_rng(1234)
    patches = rng.normal(size=(4, 5))
    fm = encode_image(patches, enc.image)
    rng2 = make_rng(99)
    omega = rng2.normal(0, 0.1, size=(2, 6))
    text = text_features(omega, enc.vocab, enc.text)
    return fm, text


class TestRankOfLabel:
    def test_unique_max_is_rank_one(self):
        assert rank_of_label([0.7, 0.2, 0.1], 0) == 1

    def test_hand_example(self):
        assert rank_of_label([0.2, 0.5, 0.3], 0) == 3
        assert rank_of_label([0.2, 0.5, 0.3], 0) == brute_force_rank([0.2, 0.5, 0.3], 0)

    def test_uniform_tie_rule(self):
        p = [0.25, 0.25, 0.25, 0.25]
        assert rank_of_label(p, 0) == 1
        assert rank_of_label(p, 1) == 2
        assert rank_of_label(p, 3) == 4

    def test_agrees_with_bruteforce(self):
        rng = make_rng(7)
        for _ in range(200):
            m = int(rng.integers(2, 12))
            p = random_prob_matrix(rng, 1, m)[0]
            y = int(rng.integers(0, m))
            assert rank_of_label(p, y) == brute_force_rank(p, y)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            rank_of_label([0.5, 0.5], 2)


class TestSelectRank:
    def test_k_zero_selects_everything(self):
        rng = make_rng(3)
        probs = random_prob_matrix(rng, 6, 5)
        assert list(select_rank(probs, 2, 0)) == list(range(6))

    def test_k_at_least_m_selects_nothing(self):
        rng = make_rng(4)
        probs = random_prob_matrix(rng, 6, 5)
        assert len(select_rank(probs, 2, 5)) == 0
        assert len(select_rank(probs, 2, 9)) == 0

    def test_hand_example(self):
        probs = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]])
        assert list(select_rank(probs, 0, 1)) == [1]

    def test_oracle_and_monotonicity(self):
        rng = make_rng(5)
        for _ in range(100):
            m = int(rng.integers(2, 50))
            n_rows = int(rng.integers(1, 64))
            probs = random_prob_matrix(rng, n_rows, m)
            y = int(rng.integers(0, m))
            ranks = [brute_force_rank(probs[i], y) for i in range(n_rows)]
            prev = None
            for k in sorted({0, 1, 2, m - 1, m, m + 3}):
                got = set(select_rank(probs, y, k).tolist())
                want = {i for i, r in enumerate(ranks) if r > k}
                assert got == want
                if prev is not None:
                    assert got <= prev  # larger k never adds regions
                prev = got

    def test_batched_label_ranks_matches_rowwise(self):
        rng = make_rng(6)
        probs = random_prob_matrix(rng, 10, 7)
        for y in range(7):
            expect = [rank_of_label(probs[i], y) for i in range(10)]
            assert list(label_ranks(probs, y)) == expect


class TestSelectProb:
    def test_uniform_not_selected(self):
        probs = np.full((3, 4), 0.25)
        assert len(select_prob(probs, 1)) == 0  # p_y == 1/m, strict inequality

    def test_low_prob_selected(self):
        probs = np.array([[0.1, 0.5, 0.2, 0.2]])
        assert list(select_prob(probs, 0)) == [0]

    def test_hand_enumeration(self):
        probs = np.array(
            [[0.3, 0.3, 0.2, 0.2], [0.1, 0.4, 0.3, 0.2], [0.25, 0.25, 0.25, 0.25], [0.24, 0.26, 0.25, 0.25]]
        )
        assert list(select_prob(probs, 0)) == [1, 3]


class TestSelectEntropy:
    def test_one_hot_selected(self):
        probs = np.array([[1.0, 0.0, 0.0]])
        assert list(select_entropy(probs)) == [0]

    def test_uniform_not_selected(self):
        probs = np.full((2, 3), 1.0 / 3.0)
        assert len(select_entropy(probs)) == 0

    def test_two_class_hand_value(self):
        # H(0.9, 0.1) ~ 0.325 < (log 2)/2 ~ 0.347 -> selected
        assert list(select_entropy(np.array([[0.9, 0.1]]))) == [0]
        # H(0.8, 0.2) ~ 0.500 > 0.347 -> not selected
        assert len(select_entropy(np.array([[0.8, 0.2]]))) == 0


class TestFeatureMapLevel:
    def test_single_region_matches_class_probs(self, small_world):
        fm, text = small_world
        probs = region_probs(fm, text, 0.7)
        lone = class_probs(fm.local_feats[0], text, 0.7)
        np.testing.assert_allclose(probs[0], lone, atol=1e-12)

    def test_identical_locals_identical_probs(self):
        dims = EncoderDims(d_lat=5, d_emb=6, d_feat=8, grid_h=2, grid_w=2, n_classes=4)
        enc = build_encoders(dims, 42)
        patch = make_rng(2).normal(size=5)
        fm = encode_image(np.tile(patch, (4, 1)), enc.image)
        text = text_features(make_rng(3).normal(0, 0.1, (2, 6)), enc.vocab, enc.text)
        probs = region_probs(fm, text, 1.0)
        for i in range(1, 4):
            np.testing.assert_allclose(probs[i], probs[0], atol=1e-12)

    def test_extract_variants_agree_with_selectors(self, small_world):
        fm, text = small_world
        probs = region_probs(fm, text, 1.0)
        sel = extract_rank(fm, text, y=1, k=1, tau=1.0)
        assert set(sel.indices) == set(select_rank(probs, 1, 1).tolist())
        assert sel.method == "rank" and sel.rank_k == 1
        assert sel.per_region_probs.shape == probs.shape

        selp = extract_prob(fm, text, y=1, tau=1.0)
        assert set(selp.indices) == set(select_prob(probs, 1).tolist())

        sele = extract_entropy(fm, text, tau=1.0)
        assert set(sele.indices) == set(select_entropy(probs).tolist())

    def test_permutation_equivariance(self):
        dims = EncoderDims(d_lat=5, d_emb=6, d_feat=8, grid_h=2, grid_w=2, n_classes=4)
        enc = build_encoders(dims, 42)
        rng = make_rng(10)
        patches = rng.normal(size=(4, 5))
        text = text_features(make_rng(11).normal(0, 0.1, (2, 6)), enc.vocab, enc.text)
        perm = np.array([2, 0, 3, 1])
        sel = extract_rank(encode_image(patches, enc.image), text, 0, 1, 1.0)
        sel_p = extract_rank(encode_image(patches[perm], enc.image), text, 0, 1, 1.0)
        # region i of the permuted grid is region perm[i] of the original
        assert set(sel_p.indices) == {list(perm).index(i) for i in sel.indices}


class TestRaisingConfidenceNeverSelects:
    """Raising p_y (others renormalized) can only deselect a region under the
    rank and prob criteria. The entropy criterion is label-free and excluded:
    it selects confident regions, so raising p_y can turn it on."""

    def _raise_py(self, p, y, bump):
        q = p.copy()
        rest = 1.0 - q[y]
        new_py = min(1.0, q[y] + bump)
        if rest > 0:
            q = q * (1.0 - new_py) / rest
        q[y] = new_py
        return q / q.sum()

    def test_rank_and_prob(self):
        rng = make_rng(12)
        for _ in range(100):
            m = int(rng.integers(2, 10))
            p = random_prob_matrix(rng, 1, m)[0]
            y = int(rng.integers(0, m))
            q = self._raise_py(p, y, float(rng.uniform(0, 1)))
            for k in (1, 2):
                before = len(select_rank(p[None], y, k)) > 0
                after = len(select_rank(q[None], y, k)) > 0
                assert not (after and not before)
            before = len(select_prob(p[None], y)) > 0
            after = len(select_prob(q[None], y)) > 0
            assert not (after and not before)
