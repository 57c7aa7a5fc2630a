import numpy as np
import pytest

from gmvae_osr.errors import ContractError
from gmvae_osr.scan import (CoveringCurve, matched_difference, recommend_k, subcluster_scan,
                            truncate_early)
from gmvae_osr.trainer import TrainConfig

# (K1->K2, K2->K3) mean covering differences with the conclusion drawn from each
REPORTED_PAIRS = [((1.23, -0.09), 2), ((0.86, 0.22), 2), ((1.31, -1.47), 2), ((0.82, 0.5), 2)]


class TestRecommend:
    @pytest.mark.parametrize("diffs,expected", REPORTED_PAIRS)
    def test_reported_pairs(self, diffs, expected):
        assert recommend_k(diffs) == expected

    def test_no_improvement(self):
        assert recommend_k([0.0, 0.0]) == 1
        assert recommend_k([]) == 1

    def test_sustained_drops(self):
        assert recommend_k([1.0, 0.9, 0.8]) == 4
        assert recommend_k([0.2, 1.0]) == 3

    def test_thresholds(self):
        assert recommend_k([0.3]) == 2
        assert recommend_k([np.nextafter(0.3, 0)]) == 1


class TestCurves:
    def test_truncate(self):
        curve = np.arange(30.0).reshape(10, 3)
        assert truncate_early(curve)[0, 0] == 6.0
        assert len(truncate_early(curve[:1])) == 1
        with pytest.raises(ContractError):
            truncate_early(curve, 1.0)

    def test_matched_difference(self):
        a = np.array([[1, 10.0, 5.0], [2, 8.0, 4.0]])
        b = np.array([[1, 9.9, 3.0], [2, 7.0, 1.0], [3, 8.2, 2.0]])
        # 10.0 pairs with 9.9, 8.0 with 8.2
        assert matched_difference(a, b) == pytest.approx(((5 - 3) + (4 - 2)) / 2)

    def test_consecutive_k(self):
        with pytest.raises(ContractError):
            CoveringCurve({1: np.zeros((1, 3)), 3: np.zeros((1, 3))}, [0.0], 1)

    def test_csv(self):
        curve = CoveringCurve({1: np.array([[3, 1.5, 0.25]]), 2: np.array([[3, 1.0, 0.5]])}, [-0.25], 1)
        assert curve.to_csv().splitlines() == ["K,epoch,reconstruction,latent_covering",
                                               "1,3,1.5,0.25", "2,3,1.0,0.5"]


def test_scan_runs_and_validates(rng):
    x = (rng.random((40, 8)) < 0.5).astype(float)
    curve = subcluster_scan(x, 2, TrainConfig(max_epochs=5, patience=5), hidden=(8,))
    assert sorted(curve.curves) == [1, 2] and len(curve.diffs) == 1
    assert len(curve.curves[1]) == 4
    assert curve.recommended in (1, 2)
    with pytest.raises(ContractError):
        subcluster_scan(x, 0, TrainConfig())
