# tests/test_gradcheck.py
import numpy as np
import pytest

from markerforge.gradcheck import GradientChecker, random_rank2_fundamental



def test_random_fundamental_is_rank_two():
    f = random_rank2_fundamental(np.random.default_rng(3))
    assert np.linalg.matrix_rank(f.matrix, tol=1e-10) == 2
    assert np.linalg.norm(f.matrix) == pytest.approx(1.0)


def test_all_gradients_pass():
    results = GradientChecker(seed=0).run_all_checks()
    assert results['passed']
    for name in ('l_syn', 'l_sed'):
        assert results[name]['checked'] > 0
        assert results[name]['failures'] == 0


def test_other_seed_passes():
    results = GradientChecker(seed=11, pixels_per_loss=200).run_all_checks()
    assert results['passed']
