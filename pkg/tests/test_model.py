"""Training core: architecture bookkeeping, backprop correctness, SGD contract."""

import numpy as np
import pytest

from anycostfl import rngs
from anycostfl.model import (
    DataShard,
    GlobalModel,
    GradientUpdate,
    ModelArch,
    TrainingDiverged,
    evaluate,
    global_loss,
    init_model,
    local_train,
)


def test_arch_shapes_chain():
    arch = ModelArch(input_dim=2, hidden_sizes=(3,), output_dim=2)
    model = init_model(arch, rngs.stream(0, rngs.INIT))
    assert [w.shape for w in model.weights] == [(3, 2), (2, 3)]
    assert [b.shape for b in model.biases] == [(3,), (2,)]


def test_arch_counts():
    arch = ModelArch(input_dim=4, hidden_sizes=(5, 6), output_dim=3)
    assert arch.param_count() == (4 * 5 + 5) + (5 * 6 + 6) + (6 * 3 + 3)
    assert arch.flop_count() == 4 * 5 + 5 * 6 + 6 * 3
    assert arch.dims == (4, 5, 6, 3)


def test_arch_validation():
    with pytest.raises(ValueError):
        ModelArch(input_dim=0, hidden_sizes=(4,), output_dim=2)
    with pytest.raises(ValueError):
        ModelArch(input_dim=4, hidden_sizes=(), output_dim=2)
    with pytest.raises(ValueError):
        ModelArch(input_dim=4, hidden_sizes=(4,), output_dim=2, activation="gelu")


def test_init_deterministic_and_seed_sensitive():
    arch = ModelArch(input_dim=6, hidden_sizes=(8,), output_dim=4)
    a = init_model(arch, rngs.stream(7, rngs.INIT))
    b = init_model(arch, rngs.stream(7, rngs.INIT))
    c = init_model(arch, rngs.stream(8, rngs.INIT))
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    assert any(not np.array_equal(wa, wc) for wa, wc in zip(a.weights, c.weights))


def test_init_bounds_and_zero_biases():
    arch = ModelArch(input_dim=10, hidden_sizes=(20,), output_dim=5)
    model = init_model(arch, rngs.stream(1, rngs.INIT))
    for w, b in zip(model.weights, model.biases):
        fan_out, fan_in = w.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.abs(w).max() <= bound
        assert np.array_equal(b, np.zeros(fan_out, dtype=np.float32))
        assert w.dtype == np.float32


def test_uniform_logits_loss_and_accuracy():
    # all-zero weights emit identical logits: loss is ln C, argmax everything
    # to class 0, so accuracy equals the share of label 0
    arch = ModelArch(input_dim=4, hidden_sizes=(6,), output_dim=5)
    model = init_model(arch, rngs.stream(0, rngs.INIT))
    model.weights = [np.zeros_like(w) for w in model.weights]
    rng = rngs.stream(3, 1000)
    x = rng.normal(size=(200, 4)).astype(np.float32)
    y = np.repeat(np.arange(5), 40)
    res = evaluate(model, x, y)
    assert res.loss == pytest.approx(np.log(5.0), rel=1e-6)
    assert res.accuracy == pytest.approx(0.2)


def _loss64(weights, biases, x, y):
    """Float64 forward + mean cross-entropy, the finite-difference reference."""
    a = x.astype(np.float64)
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w.T.astype(np.float64) + b.astype(np.float64)
        a = z if l == last else np.maximum(z, 0.0)
    shifted = a - a.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(logz - shifted[np.arange(len(y)), y]))


def test_single_step_matches_finite_differences():
    arch = ModelArch(input_dim=4, hidden_sizes=(5,), output_dim=3)
    model = init_model(arch, rngs.stream(11, rngs.INIT))
    rng = rngs.stream(11, 1001)
    x = rng.normal(size=(6, 4)).astype(np.float32)
    # keep pre-activations away from the relu kink so the numeric derivative
    # is clean
    x[np.abs(model.weights[0] @ x.T).max(axis=0) < 1e-3] += 0.5
    y = rng.integers(0, 3, size=6)
    shard = DataShard(features=x, labels=y)

    lr = 0.25
    update = local_train(model, shard, epochs=1, lr=lr, batch_size=6, rng=rngs.stream(11, 1))
    eps = 1e-5
    for l in range(2):
        grad = update.weights[l] / lr
        it = np.nditer(grad, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            ws = [w.copy() for w in model.weights]
            ws[l][idx] += eps
            up = _loss64(ws, model.biases, x, y)
            ws[l][idx] -= 2 * eps
            down = _loss64(ws, model.biases, x, y)
            numeric = (up - down) / (2 * eps)
            assert grad[idx] == pytest.approx(numeric, abs=5e-4)
        bias_grad = update.biases[l] / lr
        for j in range(len(bias_grad)):
            bs = [b.copy() for b in model.biases]
            bs[l][j] += eps
            up = _loss64(model.weights, bs, x, y)
            bs[l][j] -= 2 * eps
            down = _loss64(model.weights, bs, x, y)
            numeric = (up - down) / (2 * eps)
            assert bias_grad[j] == pytest.approx(numeric, abs=5e-4)


def test_single_sample_linear_softmax_hand_gradient():
    # identity first layer on a positive sample makes the network linear, so
    # the chain rule collapses to the classic softmax-regression gradient
    arch = ModelArch(input_dim=3, hidden_sizes=(3,), output_dim=2)
    model = init_model(arch, rngs.stream(2, rngs.INIT))
    model.weights[0] = np.eye(3, dtype=np.float32)
    model.biases[0] = np.zeros(3, dtype=np.float32)
    x = np.array([[0.5, 1.0, 2.0]], dtype=np.float32)
    y = np.array([1])
    lr = 0.1

    update = local_train(
        model, DataShard(features=x, labels=y), epochs=1, lr=lr, batch_size=1,
        rng=rngs.stream(2, 1),
    )
    w1, b1 = model.weights[1].astype(np.float64), model.biases[1].astype(np.float64)
    logits = x[0].astype(np.float64) @ w1.T + b1
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    delta = probs.copy()
    delta[1] -= 1.0
    np.testing.assert_allclose(update.weights[1], lr * np.outer(delta, x[0]), atol=1e-6)
    np.testing.assert_allclose(update.biases[1], lr * delta, atol=1e-6)
    # relu'(x) = 1 on this positive sample, so layer 0 is the outer product of
    # the back-propagated delta with the input
    np.testing.assert_allclose(
        update.weights[0], lr * np.outer(delta @ w1, x[0]), atol=1e-6
    )


def test_zero_epochs_zero_update():
    arch = ModelArch(input_dim=4, hidden_sizes=(4,), output_dim=2)
    model = init_model(arch, rngs.stream(0, rngs.INIT))
    rng = rngs.stream(0, 1002)
    shard = DataShard(
        features=rng.normal(size=(8, 4)).astype(np.float32),
        labels=rng.integers(0, 2, size=8),
    )
    update = local_train(model, shard, epochs=0, lr=0.1, batch_size=4, rng=rng)
    assert update.norm_sq() == 0.0
    for w in update.weights:
        assert np.array_equal(w, np.zeros_like(w))


def test_local_train_deterministic():
    arch = ModelArch(input_dim=5, hidden_sizes=(6,), output_dim=3)
    model = init_model(arch, rngs.stream(4, rngs.INIT))
    rng = rngs.stream(4, 1003)
    shard = DataShard(
        features=rng.normal(size=(30, 5)).astype(np.float32),
        labels=rng.integers(0, 3, size=30),
    )
    a = local_train(model, shard, epochs=2, lr=0.05, batch_size=8, rng=rngs.stream(4, 5))
    b = local_train(model, shard, epochs=2, lr=0.05, batch_size=8, rng=rngs.stream(4, 5))
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    c = local_train(model, shard, epochs=2, lr=0.05, batch_size=8, rng=rngs.stream(4, 6))
    assert any(not np.array_equal(wa, wc) for wa, wc in zip(a.weights, c.weights))


def test_divergence_raises():
    arch = ModelArch(input_dim=4, hidden_sizes=(8,), output_dim=3)
    model = init_model(arch, rngs.stream(9, rngs.INIT))
    rng = rngs.stream(9, 1004)
    shard = DataShard(
        features=rng.normal(size=(32, 4)).astype(np.float32),
        labels=rng.integers(0, 3, size=32),
    )
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged):
        local_train(model, shard, epochs=5, lr=1e18, batch_size=4, rng=rng)


def test_memorizes_separable_set():
    arch = ModelArch(input_dim=4, hidden_sizes=(16,), output_dim=2)
    model = init_model(arch, rngs.stream(5, rngs.INIT))
    rng = rngs.stream(5, 1005)
    x = np.concatenate(
        [rng.normal(size=(10, 4)) + 4.0, rng.normal(size=(10, 4)) - 4.0]
    ).astype(np.float32)
    y = np.repeat([0, 1], 10)
    shard = DataShard(features=x, labels=y)
    for step in range(40):
        update = local_train(model, shard, epochs=1, lr=0.2, batch_size=5,
                             rng=rngs.stream(5, step))
        for l in range(len(model.weights)):
            model.weights[l] -= update.weights[l]
            model.biases[l] -= update.biases[l]
    assert evaluate(model, x, y).accuracy == 1.0


def test_random_labels_chance_accuracy():
    arch = ModelArch(input_dim=6, hidden_sizes=(8,), output_dim=4)
    model = init_model(arch, rngs.stream(6, rngs.INIT))
    rng = rngs.stream(6, 1006)
    n = 4000
    x = rng.normal(size=(n, 6)).astype(np.float32)
    accs = []
    for trial in range(5):
        y = rngs.stream(6, 1007, trial).integers(0, 4, size=n)
        accs.append(evaluate(model, x, y).accuracy)
    sigma = np.sqrt(0.25 * 0.75 / n)
    assert abs(np.mean(accs) - 0.25) < 4 * sigma


def test_global_loss_weighting():
    assert global_loss([2.0, 4.0], [1, 1]) == pytest.approx(3.0)
    assert global_loss([2.0, 4.0], [3, 1]) == pytest.approx(2.5)
    assert global_loss([1.7], [42]) == pytest.approx(1.7)


def test_update_norm_sq():
    update = GradientUpdate(
        weights=[np.array([[3.0, 0.0]], dtype=np.float32)],
        biases=[np.array([4.0], dtype=np.float32)],
    )
    assert update.norm_sq() == pytest.approx(25.0)


def test_shard_validation():
    with pytest.raises(ValueError):
        DataShard(features=np.zeros((3, 2)), labels=np.zeros(4, dtype=np.int64))
    with pytest.raises(ValueError):
        DataShard(features=np.zeros(3), labels=np.zeros(3, dtype=np.int64))


def test_copy_is_deep():
    arch = ModelArch(input_dim=3, hidden_sizes=(3,), output_dim=2)
    model = init_model(arch, rngs.stream(0, rngs.INIT))
    clone = model.copy()
    clone.weights[0][0, 0] += 1.0
    assert model.weights[0][0, 0] != clone.weights[0][0, 0]
