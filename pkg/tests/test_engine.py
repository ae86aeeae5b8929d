import numpy as np
import pytest

from zoforge.engine import (
    AvgPool,
    Batch,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    MaxPool,
    ModelSpec,
    ParamVector,
    ReLU,
    build_segments,
    forward,
    forward_from,
    init_params,
    param_count,
    predict,
)
from zoforge.errors import ShapeError, StaleCacheError

from reference_impls import brute_force_forward


def make_pv(spec, values, dtype=np.float64):
    return ParamVector(np.asarray(values, dtype=dtype), build_segments(spec))


# --------------------------------------------------------------------------
# parameter counting


def test_param_count_dense_with_bias():
    spec = ModelSpec([Dense(2, 3)], (2,))
    assert param_count(spec) == 9


def test_param_count_dense_no_bias():
    spec = ModelSpec([Dense(4, 1, bias=False)], (4,))
    assert param_count(spec) == 4


def test_param_count_conv_block_cnn():
    # one conv block (conv, bn, relu, maxpool), then avgpool + classifier
    spec = ModelSpec(
        [
            Conv2d(1, 8, 3, stride=1, padding=1),
            BatchNorm(8),
            ReLU(),
            MaxPool(2),
            AvgPool(2),
            Flatten(),
            Dense(32, 10),
        ],
        (1, 8, 8),
    )
    # independent hand count, layer by layer
    conv = 8 * 1 * 3 * 3 + 8
    bn = 8 + 8
    dense = 32 * 10 + 10
    assert param_count(spec) == conv + bn + dense == 426


def test_param_count_rejects_non_composing_layers():
    spec = ModelSpec([Dense(2, 3), Dense(4, 1)], (2,))
    with pytest.raises(ShapeError):
        param_count(spec)
    with pytest.raises(ShapeError):
        param_count(ModelSpec([Conv2d(2, 4, 3)], (1, 8, 8)))
    with pytest.raises(ShapeError):
        param_count(ModelSpec([MaxPool(3), Flatten(), Dense(4, 2)], (1, 8, 8)))


# --------------------------------------------------------------------------
# forward: closed-form cases


def test_forward_uniform_logits_is_log2():
    spec = ModelSpec([Dense(1, 2, bias=False)], (1,))
    pv = make_pv(spec, [0.0, 0.0])
    batch = Batch(np.array([[1.0]]), [0])
    loss, logits, _ = forward(spec, pv, batch)
    assert logits.shape == (1, 2)
    assert loss == pytest.approx(np.log(2.0), abs=1e-12)


def test_forward_uniform_logits_is_logC():
    for c in (3, 5, 7):
        spec = ModelSpec([Dense(2, c, bias=False)], (2,))
        pv = make_pv(spec, np.zeros(2 * c))
        batch = Batch(np.array([[0.3, -0.7], [1.0, 2.0]]), [0, c - 1])
        loss, _, _ = forward(spec, pv, batch)
        assert loss == pytest.approx(np.log(c), abs=1e-12)


def test_forward_identity_dense_one_hot():
    spec = ModelSpec([Dense(2, 2, bias=False)], (2,))
    pv = make_pv(spec, np.eye(2).ravel())
    batch = Batch(np.array([[1.0, 0.0]]), [0])
    loss, _, _ = forward(spec, pv, batch)
    expected = np.log1p(np.exp(-1.0))  # -ln(e / (e + 1))
    assert loss == pytest.approx(expected, abs=1e-12)
    assert loss == pytest.approx(0.3132616875182229, abs=1e-12)


def test_loss_nonnegative_random_models():
    rng = np.random.default_rng(11)
    spec = ModelSpec([Dense(6, 8), ReLU(), Dense(8, 3)], (6,))
    for seed in range(5):
        pv = init_params(spec, seed, dtype=np.float64)
        batch = Batch(rng.standard_normal((9, 6)), rng.integers(0, 3, 9))
        loss, _, _ = forward(spec, pv, batch)
        assert loss >= 0.0


def tiny_cnn_spec():
    return ModelSpec(
        [
            Conv2d(2, 4, 3, stride=1, padding=1),
            ReLU(),
            MaxPool(2),
            Conv2d(4, 4, 3, stride=1, padding=0, bias=False),
            ReLU(),
            Flatten(),
            Dense(4, 3),
        ],
        (2, 6, 6),
    )


def test_forward_matches_brute_force_cnn():
    spec = tiny_cnn_spec()
    rng = np.random.default_rng(3)
    pv = init_params(spec, 5, dtype=np.float64)
    inputs = rng.standard_normal((4, 2, 6, 6))
    labels = rng.integers(0, 3, 4)
    loss, logits, _ = forward(spec, pv, Batch(inputs, labels))
    ref_loss, ref_logits = brute_force_forward(spec, pv.data, inputs, labels)
    assert abs(loss - ref_loss) <= 1e-6 * max(1.0, abs(ref_loss))
    np.testing.assert_allclose(logits, ref_logits, rtol=1e-9, atol=1e-12)


def test_forward_matches_brute_force_with_batchnorm_and_avgpool():
    spec = ModelSpec(
        [
            Conv2d(1, 3, 3, stride=1, padding=1),
            BatchNorm(3),
            ReLU(),
            AvgPool(2),
            Flatten(),
            Dense(12, 2),
        ],
        (1, 4, 4),
    )
    rng = np.random.default_rng(9)
    pv = init_params(spec, 2, dtype=np.float64)
    pv.data += 0.05 * rng.standard_normal(pv.dim)  # nonzero biases and shifts
    inputs = rng.standard_normal((5, 1, 4, 4))
    labels = rng.integers(0, 2, 5)
    loss, _, _ = forward(spec, pv, Batch(inputs, labels))
    ref_loss, _ = brute_force_forward(spec, pv.data, inputs, labels)
    assert abs(loss - ref_loss) <= 1e-6 * max(1.0, abs(ref_loss))


def test_forward_stride_2_conv_matches_brute_force():
    spec = ModelSpec(
        [Conv2d(2, 3, 3, stride=2, padding=1), ReLU(), Flatten(), Dense(3 * 3 * 3, 2)],
        (2, 5, 5),
    )
    rng = np.random.default_rng(21)
    pv = init_params(spec, 8, dtype=np.float64)
    inputs = rng.standard_normal((3, 2, 5, 5))
    labels = [0, 1, 1]
    loss, _, _ = forward(spec, pv, Batch(inputs, labels))
    ref_loss, _ = brute_force_forward(spec, pv.data, inputs, labels)
    assert abs(loss - ref_loss) <= 1e-6 * max(1.0, abs(ref_loss))


def test_forward_deterministic_bits():
    spec = tiny_cnn_spec()
    rng = np.random.default_rng(1)
    pv = init_params(spec, 0, dtype=np.float32)
    batch = Batch(
        rng.standard_normal((4, 2, 6, 6)).astype(np.float32), rng.integers(0, 3, 4)
    )
    l1, g1, _ = forward(spec, pv, batch)
    l2, g2, _ = forward(spec, pv, batch)
    assert l1 == l2
    assert g1.tobytes() == g2.tobytes()


def test_forward_rejects_wrong_shapes():
    spec = tiny_cnn_spec()
    pv = init_params(spec, 0)
    with pytest.raises(ShapeError):
        forward(spec, pv, Batch(np.zeros((2, 2, 5, 5)), [0, 1]))
    # parameter vector sized for a different model
    with pytest.raises(ShapeError):
        forward(ModelSpec([Dense(3, 2)], (3,)), pv, Batch(np.zeros((1, 3)), [0]))
    # segment table must cover the data exactly
    with pytest.raises(ShapeError):
        ParamVector(np.zeros(pv.dim - 1), build_segments(spec))


def test_forward_rejects_label_out_of_range():
    spec = ModelSpec([Dense(2, 3)], (2,))
    pv = init_params(spec, 0)
    with pytest.raises(ShapeError):
        forward(spec, pv, Batch(np.zeros((1, 2)), [3]))


# --------------------------------------------------------------------------
# feature reuse


def eight_layer_spec():
    return ModelSpec(
        [
            Conv2d(1, 4, 3, stride=1, padding=1),
            BatchNorm(4),
            ReLU(),
            MaxPool(2),
            Conv2d(4, 6, 3, stride=1, padding=1),
            ReLU(),
            Flatten(),
            Dense(6 * 4 * 4, 3),
        ],
        (1, 8, 8),
    )


def test_forward_from_start_zero_equals_forward():
    spec = eight_layer_spec()
    rng = np.random.default_rng(4)
    pv = init_params(spec, 4, dtype=np.float64)
    batch = Batch(rng.standard_normal((3, 1, 8, 8)), [0, 1, 2])
    loss, _, cache = forward(spec, pv, batch)
    assert forward_from(spec, pv, batch, cache, 0) == loss


def test_forward_from_last_layer_bias_perturbation():
    spec = eight_layer_spec()
    rng = np.random.default_rng(5)
    pv = init_params(spec, 6, dtype=np.float64)
    batch = Batch(rng.standard_normal((3, 1, 8, 8)), [0, 1, 2])
    _, _, cache = forward(spec, pv, batch)
    perturbed = pv.copy()
    perturbed.data[-1] += 0.125  # last-layer bias
    full, _, _ = forward(spec, perturbed, batch)
    resumed = forward_from(spec, perturbed, batch, cache, len(spec.layers) - 1)
    assert resumed == full  # bitwise


def test_forward_from_sweep_all_layers_bitwise():
    spec = eight_layer_spec()
    rng = np.random.default_rng(6)
    pv = init_params(spec, 7, dtype=np.float64)
    pv.data += 0.01 * rng.standard_normal(pv.dim)
    batch = Batch(rng.standard_normal((4, 1, 8, 8)), [0, 1, 2, 0])
    _, _, cache = forward(spec, pv, batch)
    for seg in pv.segments:
        # perturb one coordinate inside this layer; resume just before it
        perturbed = pv.copy()
        perturbed.data[seg.offset] += 0.37
        full, _, _ = forward(spec, perturbed, batch)
        resumed = forward_from(spec, perturbed, batch, cache, seg.layer)
        assert resumed == full, f"layer {seg.layer} reuse mismatch"
        # resuming even earlier must also agree
        if seg.layer > 0:
            assert forward_from(spec, perturbed, batch, cache, 0) == full


def test_forward_from_float32_bitwise():
    spec = eight_layer_spec()
    rng = np.random.default_rng(16)
    pv = init_params(spec, 3, dtype=np.float32)
    batch = Batch(rng.standard_normal((4, 1, 8, 8)).astype(np.float32), [0, 1, 2, 0])
    _, _, cache = forward(spec, pv, batch)
    perturbed = pv.copy()
    seg = perturbed.segments[-1]
    perturbed.data[seg.offset + 2] += np.float32(0.25)
    full, _, _ = forward(spec, perturbed, batch)
    assert forward_from(spec, perturbed, batch, cache, seg.layer) == full


def test_forward_from_detects_stale_cache():
    spec = eight_layer_spec()
    rng = np.random.default_rng(7)
    pv = init_params(spec, 9, dtype=np.float64)
    batch = Batch(rng.standard_normal((2, 1, 8, 8)), [0, 1])
    _, _, cache = forward(spec, pv, batch)
    perturbed = pv.copy()
    perturbed.data[0] += 1.0  # first conv weight
    with pytest.raises(StaleCacheError):
        forward_from(spec, perturbed, batch, cache, 4, verify_cache=True)
    # without verification the call silently reuses the stale prefix
    forward_from(spec, perturbed, batch, cache, 4)


def test_cache_is_frozen_but_caller_arrays_are_not():
    spec = eight_layer_spec()
    pv = init_params(spec, 1, dtype=np.float64)
    inputs = np.random.default_rng(0).standard_normal((2, 1, 8, 8))
    batch = Batch(inputs, [0, 1])
    _, _, cache = forward(spec, pv, batch)
    for act in cache.activations:
        assert not act.flags.writeable
    assert inputs.flags.writeable  # caller data untouched


# --------------------------------------------------------------------------
# coordinate -> layer lookup


def test_layers_of_lookup_total():
    spec = eight_layer_spec()
    pv = init_params(spec, 0)
    layers = pv.layers_of(np.arange(pv.dim))
    lengths = {s.layer: s.length for s in pv.segments}
    counts = {int(l): int((layers == l).sum()) for l in np.unique(layers)}
    assert counts == lengths


def test_predict_shape():
    spec = tiny_cnn_spec()
    pv = init_params(spec, 0)
    preds = predict(spec, pv, np.zeros((5, 2, 6, 6), dtype=np.float32))
    assert preds.shape == (5,)
    assert set(np.unique(preds)) <= {0, 1, 2}
