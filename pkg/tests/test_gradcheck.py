import numpy as np
import pytest

from depthlab.gradcheck import CASES, check, relative_error, run_gradcheck
from depthlab.tensor import Tensor, default_dtype


def _leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def test_relative_error():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
    assert relative_error(np.array([1e-12]), np.zeros(1), floor=1e-6) == pytest.approx(1e-6)


def test_correct_gradient_passes():
    with default_dtype(np.float64):
        x = _leaf(np.random.default_rng(0).normal(size=(3, 4)))
        err, n = check(lambda: (x.exp() * x).sum(), [x], np.random.default_rng(1), max_entries=5)
    assert err < 1e-6 and n == 5


def test_wrong_gradient_is_detected():
    def bad_square(t):
        return Tensor._make(t.data**2, (t,), lambda g: (g * t.data,))  # missing the factor 2

    with default_dtype(np.float64):
        x = _leaf(np.random.default_rng(0).normal(size=6))
        err, _ = check(lambda: bad_square(x).sum(), [x], np.random.default_rng(1))
    assert err == pytest.approx(0.5, rel=1e-6)


def test_kinks_do_not_spoil_the_check():
    # eps far larger than the distance to the ReLU kink
    with default_dtype(np.float64):
        x = _leaf(np.array([1e-5, -1e-5, 0.5, -0.5]))
        err, _ = check(lambda: (x.relu() * x).sum(), [x], np.random.default_rng(0), eps=1e-3)
    assert err < 1e-9


def test_case_registry_covers_the_graphs():
    for name in ("conv2d_stride2", "batch_norm_train", "bilinear_sample", "inverse_warp", "ssim",
                 "total_loss_semi_supervised", "scaffnet", "segguided", "posenet"):
        assert name in CASES


def test_run_gradcheck_subset():
    results = run_gradcheck(range(2), ["max_pool2d", "rodrigues", "smoothness_loss"])
    assert len(results) == 6
    assert all(r.passed and r.max_rel_error < 1e-3 and r.checked > 0 for r in results)
