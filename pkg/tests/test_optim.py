import numpy as np
import pytest

from vmsim.optim import (
    TrainConfig,
    central_difference,
    clip_by_global_norm,
    max_relative_error,
    sgd_update,
)


def test_clip_scales_to_max_norm():
    g = [np.array([3.0]), np.array([4.0])]
    out = clip_by_global_norm(g, 1.0)
    assert np.isclose(np.sqrt(sum(np.sum(x * x) for x in out)), 1.0)
    assert np.allclose(out[0] / out[1], 0.75)


def test_clip_leaves_small_gradients():
    g = [np.array([0.3, 0.4])]
    assert np.array_equal(clip_by_global_norm(g, 1.0)[0], g[0])
    assert np.array_equal(clip_by_global_norm(g, None)[0], g[0])


def test_sgd_update_in_place():
    p = [np.array([1.0, 2.0])]
    sgd_update(p, [np.array([1.0, -1.0])], 0.5)
    assert p[0].tolist() == [0.5, 2.5]


def test_central_difference_quadratic():
    w = np.array([1.0, -2.0, 0.5])
    g = central_difference(lambda: float(np.sum(w ** 2)), [w])[0]
    assert np.allclose(g, 2 * w, atol=1e-8)
    assert w.tolist() == [1.0, -2.0, 0.5]


def test_relative_error_forms():
    a = [np.array([1.0, 0.0])]
    n = [np.array([1.0, 1e-12])]
    assert max_relative_error(a, n) < 1e-11
    assert max_relative_error([np.array([0.0])], [np.array([1e-9])], per_entry=True) > 0.09
    assert max_relative_error([np.zeros(2)], [np.zeros(2)]) == 0.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(bptt_window=0)
