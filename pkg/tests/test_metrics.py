import numpy as np
import pytest
from sklearn.metrics import f1_score

from gmvae_osr.errors import ContractError
from gmvae_osr.metrics import confusion_matrix, macro_f1, per_label_f1


def test_perfect():
    assert macro_f1([1, 2, 3, 3], [1, 2, 3, 3], 3) == 1.0


def test_hand_confusion():
    assert macro_f1([1, 2, 2], [1, 1, 2], 2) == pytest.approx(2 / 3, abs=1e-15)
    assert confusion_matrix([1, 2, 2], [1, 1, 2], 2).tolist() == [[1, 1], [0, 1]]


def test_single_predicted_label():
    assert macro_f1([1, 1, 1, 1], [1, 1, 2, 2], 2) == pytest.approx(1 / 3, abs=1e-15)


def test_absent_label_excluded_predicted_label_counted():
    # label 3 never occurs: excluded; label 2 predicted but never true: counted as 0
    f1 = per_label_f1(confusion_matrix([1, 2], [1, 1], 3))
    assert np.isnan(f1[2]) and f1[1] == 0.0
    assert macro_f1([1, 2], [1, 1], 3) == pytest.approx(np.mean([2 / 3, 0.0]))


def test_matches_sklearn(rng):
    for _ in range(20):
        t = rng.integers(1, 5, size=60)
        p = np.where(rng.random(60) < 0.6, t, rng.integers(1, 5, size=60))
        assert macro_f1(p, t, 4) == pytest.approx(f1_score(t, p, average="macro"), abs=1e-12)


def test_permutation_invariant(rng):
    t = rng.integers(1, 4, size=40)
    p = rng.integers(1, 4, size=40)
    perm = np.array([0, 3, 1, 2])
    assert macro_f1(perm[p], perm[t], 3) == pytest.approx(macro_f1(p, t, 3), abs=1e-15)


def test_errors():
    with pytest.raises(ContractError):
        macro_f1([1, 2], [1], 2)
    with pytest.raises(ContractError):
        macro_f1([3], [1], 2)
    with pytest.raises(ContractError):
        macro_f1([], [], 2)
