import numpy as np
import pytest

from synthdetect.model import (
    CnnConfig,
    FineToCoarseCnn,
    full_scale_config,
    reduced_scale_config,
)
from synthdetect.tensor import GradTape, ShapeError, Tensor, backward, sum_all

from helpers import assert_grads_close, fd_gradient_coords


def test_full_scale_shape_pipeline():
    cfg = full_scale_config()
    assert cfg.stage_sizes() == [(220, 109), (105, 51), (47, 22)]
    assert cfg.feature_dim == 15488


def test_reduced_scale_shape_pipeline():
    cfg = reduced_scale_config()
    assert cfg.stage_sizes() == [(30, 15), (13, 6), (4, 2)]
    assert cfg.feature_dim == 128


def test_filters_must_increase():
    with pytest.raises(ValueError):
        CnnConfig(filters=(16, 16, 32))


def test_forward_feature_count_full_scale():
    cnn = FineToCoarseCnn(full_scale_config(), rng=np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).random((2, 3, 224, 224)))
    z = cnn.forward_features(x, training=False)
    assert z.shape == (2, 15488)
    assert np.isfinite(z.data).all()


def test_zero_input_zero_bias_gives_half_activations():
    cnn = FineToCoarseCnn(reduced_scale_config(), rng=np.random.default_rng(0))
    x = Tensor(np.zeros((1, 3, 32, 32)))
    stage1 = cnn.stage_activations(x)[0]
    assert np.allclose(stage1.data, 0.5)


def test_stage_activations_in_unit_interval():
    cnn = FineToCoarseCnn(reduced_scale_config(), rng=np.random.default_rng(5))
    x = Tensor(np.random.default_rng(6).random((2, 3, 32, 32)))
    for act in cnn.stage_activations(x):
        assert np.all(act.data > 0.0)
        assert np.all(act.data < 1.0)


def test_forward_rejects_wrong_shape():
    cnn = FineToCoarseCnn(reduced_scale_config(), rng=np.random.default_rng(0))
    with pytest.raises(ShapeError):
        cnn.forward_features(Tensor(np.zeros((1, 3, 16, 16))), training=False)


def test_forward_deterministic():
    def run():
        cnn = FineToCoarseCnn(reduced_scale_config(), rng=np.random.default_rng(3))
        x = Tensor(np.random.default_rng(4).random((2, 3, 32, 32)))
        return cnn.forward_features(x, training=False).data

    assert np.array_equal(run(), run())


def test_xavier_bound_and_moments():
    cnn = FineToCoarseCnn(full_scale_config(), rng=np.random.default_rng(12))
    k1 = cnn.kernels[0].data
    bound = np.sqrt(6.0 / (3 * 25 + 16 * 25))
    assert bound == pytest.approx(0.11239, abs=1e-5)
    assert np.all(np.abs(k1) <= bound)
    draws = FineToCoarseCnn(
        CnnConfig(input_size=224, filters=(40, 41, 42)),
        rng=np.random.default_rng(13)).kernels[0].data.reshape(-1)
    n = draws.size
    assert n >= 1000
    assert abs(draws.mean()) <= 3 * bound / np.sqrt(n) * 2  # loose CLT bound
    for b in cnn.biases:
        assert np.array_equal(b.data, np.zeros(b.shape))


def test_xavier_mean_large_sample():
    rng = np.random.default_rng(99)
    fan_in, fan_out = 75, 400
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    samples = rng.uniform(-bound, bound, size=10 ** 5)
    assert abs(samples.mean()) < 3 * bound / np.sqrt(10 ** 5)


def test_state_round_trip():
    cnn = FineToCoarseCnn(reduced_scale_config(), rng=np.random.default_rng(7))
    x = Tensor(np.random.default_rng(8).random((4, 3, 32, 32)))
    cnn.forward_features(x, training=True)  # moves running stats
    state = cnn.state_arrays()
    other = FineToCoarseCnn(reduced_scale_config())
    other.load_state_arrays(state)
    za = cnn.forward_features(x, training=False).data
    zb = other.forward_features(x, training=False).data
    assert np.array_equal(za, zb)


def test_composed_gradient_matches_finite_differences():
    cnn = FineToCoarseCnn(reduced_scale_config(), rng=np.random.default_rng(20))
    x = Tensor(np.random.default_rng(21).random((3, 3, 32, 32)))
    proj = np.random.default_rng(22).normal(size=(3, 128))

    def objective() -> float:
        with GradTape() as tape:
            z = cnn.forward_features(x, training=True)
            loss = sum_all(z * proj)
        return loss.item(), tape

    def value_only() -> float:
        cnn.bn_mean[:] = 0.0  # running buffers do not affect train mode
        cnn.bn_var[:] = 1.0
        with GradTape():
            z = cnn.forward_features(x, training=True)
            return sum_all(z * proj).item()

    loss_val, tape = objective()
    with GradTape() as tape:
        z = cnn.forward_features(x, training=True)
        loss = sum_all(z * proj)
    grads = backward(loss, tape)

    rng = np.random.default_rng(23)
    for name, p in cnn.parameters():
        n_coords = min(12, p.size)
        coords = rng.choice(p.size, size=n_coords, replace=False)
        numeric = fd_gradient_coords(value_only, p, coords)
        analytic = grads[p.uid].reshape(-1)[coords]
        assert_grads_close(analytic, numeric)
