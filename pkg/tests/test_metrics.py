import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sctlab.metrics import auroc, auroc_pairs, ece, fpr_at_tpr, fpr_at_tpr_scan, id_accuracy
from sctlab.numerics import make_rng

score_lists = st.lists(
    st.floats(min_value=-100, max_value=100, allow_nan=False), min_size=1, max_size=40
)


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([3.0, 2.0], [1.0]) == 1.0

    def test_identical_multisets(self):
        assert auroc([1.0, 2.0, 3.0], [3.0, 1.0, 2.0]) == 0.5

    def test_tied_pairs_hand_count(self):
        # pairs (2,2)=0.5 (2,1)=1 (1,2)=0 (1,1)=0.5 -> 2/4
        assert auroc([2.0, 1.0], [2.0, 1.0]) == 0.5

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            auroc([], [1.0])
        with pytest.raises(ValueError):
            auroc([1.0], [])

    def test_rank_equals_bruteforce_with_ties(self):
        rng = make_rng(42)
        for trial in range(100):
            n_id = int(rng.integers(1, 200))
            n_ood = int(rng.integers(1, 200))
            # coarse grid forces plenty of ties
            ids = rng.integers(0, 12, size=n_id) / 4.0
            oods = rng.integers(0, 12, size=n_ood) / 4.0
            assert auroc(ids, oods) == auroc_pairs(ids, oods)

    @settings(deadline=None, max_examples=50)
    @given(
        st.lists(st.integers(min_value=-1000, max_value=1000), min_size=1, max_size=40),
        st.lists(st.integers(min_value=-1000, max_value=1000), min_size=1, max_size=40),
    )
    def test_monotone_transform_invariance(self, ids, oods):
        # affine map on integer-valued scores is exact in floats, so the
        # transform is genuinely strictly increasing (no float collisions)
        f = lambda x: 3.0 * np.asarray(x, dtype=float) - 5.0
        assert auroc(ids, oods) == auroc(f(ids), f(oods))

    @settings(deadline=None, max_examples=50)
    @given(score_lists, score_lists)
    def test_complement_symmetry(self, ids, oods):
        # holds exactly for tie-free inputs; ties shift both toward 0.5
        if len(set(ids) | set(oods)) == len(ids) + len(oods):
            assert auroc(ids, oods) + auroc(oods, ids) == pytest.approx(1.0, abs=1e-12)


class TestFprAtTpr:
    def test_spec_example(self):
        ids = [0.9, 0.8, 0.7, 0.6, 0.5]
        oods = [0.55, 0.4, 0.3]
        assert fpr_at_tpr(ids, oods, 0.95) == pytest.approx(1.0 / 3.0)

    def test_disjoint_ranges(self):
        for target in (0.5, 0.95, 1.0):
            assert fpr_at_tpr([5.0, 6.0, 7.0], [1.0, 2.0], target) == 0.0

    def test_identical_multisets_match_scan(self):
        ids = [1.0, 2.0, 3.0, 4.0]
        assert fpr_at_tpr(ids, ids, 0.95) == fpr_at_tpr_scan(ids, ids, 0.95)

    def test_matches_exhaustive_scan(self):
        rng = make_rng(17)
        for trial in range(60):
            ids = rng.integers(0, 15, size=int(rng.integers(1, 60))) / 3.0
            oods = rng.integers(0, 15, size=int(rng.integers(1, 60))) / 3.0
            for target in (0.5, 0.8, 0.95, 1.0):
                assert fpr_at_tpr(ids, oods, target) == fpr_at_tpr_scan(ids, oods, target)

    def test_monotone_in_target(self):
        rng = make_rng(18)
        for trial in range(30):
            ids = rng.normal(size=40)
            oods = rng.normal(size=40)
            values = [fpr_at_tpr(ids, oods, t) for t in (0.2, 0.5, 0.8, 0.9, 0.95, 1.0)]
            assert all(a <= b for a, b in zip(values, values[1:]))

    def test_bad_target_raises(self):
        with pytest.raises(ValueError):
            fpr_at_tpr([1.0], [0.0], 0.0)
        with pytest.raises(ValueError):
            fpr_at_tpr([1.0], [0.0], 1.5)


class TestIdAccuracy:
    def test_all_equal(self):
        assert id_accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_none_equal(self):
        assert id_accuracy([1, 2, 3], [2, 3, 1]) == 0.0

    def test_three_of_four(self):
        assert id_accuracy([0, 1, 2, 3], [0, 1, 2, 9]) == 0.75

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            id_accuracy([1], [1, 2])


class TestEce:
    def test_perfectly_confident_and_correct(self):
        assert ece([1.0, 1.0, 1.0], [True, True, True], 15) == 0.0

    def test_single_bin_hand_value(self):
        # |acc - conf| = |0.5 - 0.9| = 0.4
        assert ece([0.9, 0.9], [True, False], 1) == pytest.approx(0.4, abs=1e-12)

    def test_two_bin_hand_value(self):
        # bin (0,.5]: conf .25, acc .5 -> contribution .5*.25
        # bin (.5,1]: conf .85, acc 1. -> contribution .5*.15
        got = ece([0.2, 0.3, 0.8, 0.9], [False, True, True, True], 2)
        assert got == pytest.approx(0.2, abs=1e-12)

    def test_zero_confidence_goes_to_first_bin(self):
        # one sample at conf 0: bin 1 -> |0 - 0| = 0 if incorrect... acc=0, conf=0
        assert ece([0.0], [False], 10) == 0.0
        assert ece([0.0], [True], 10) == pytest.approx(1.0)

    def test_right_inclusive_binning(self):
        # conf exactly 0.5 with 2 bins belongs to the first bin
        v = ece([0.5, 0.9], [True, True], 2)
        expected = 0.5 * abs(1.0 - 0.5) + 0.5 * abs(1.0 - 0.9)
        assert v == pytest.approx(expected, abs=1e-12)

    def test_zero_when_bins_calibrated(self):
        # in every bin the mean confidence equals the accuracy
        conf = [0.5, 0.5, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9]
        corr = [True, False] + [True] * 9 + [False]
        assert ece(conf, corr, 2) == pytest.approx(0.0, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            ece([1.2], [True], 10)
        with pytest.raises(ValueError):
            ece([], [], 10)
        with pytest.raises(ValueError):
            ece([0.5], [True], 0)
