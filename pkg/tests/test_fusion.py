import math

import numpy as np
import pytest

from fusenet import ops
from fusenet.backbones import BackboneSpec
from fusenet.errors import CheckpointError, ConfigurationError
from fusenet.fusion import FusionModel, default_specs, fuse_forward, param_count
from fusenet.gradcheck import MODEL_TOLERANCE, grad_check, tiny_model_case
from fusenet.rng import Rng
from fusenet.tensor import Tensor, no_grad


def small_model(class_count=2, hidden=16, seed=0, size=16, feature_dim=4):
    specs = [BackboneSpec(kind=k, stem_channels=4, stages=((1, 4), (1, 8)), feature_dim=feature_dim,
                          input_size=(size, size)) for k in ("residual", "inception", "shuffle")]
    return FusionModel(specs, class_count=class_count, hidden=hidden, seed=seed)


def images(n=3, size=16, seed=0):
    return Tensor(Rng(seed).random((n, 1, size, size)))


def test_concat_width_is_three_f():
    assert FusionModel(default_specs(1000)).fused_width == 3000
    assert FusionModel(default_specs(1000)).params["head.fc1.weight"].shape == (512, 3000)


def test_concat_order_fixed():
    model = small_model()
    assert model.kinds == ("residual", "inception", "shuffle")
    assert model.config()["concat_order"] == ["residual", "inception", "shuffle"]


@pytest.mark.parametrize("c", [2, 10])
def test_zero_head_gives_uniform(c):
    model = small_model(class_count=c)
    for name in ("head.fc2.weight", "head.fc2.bias"):
        model.params[name].data[...] = 0
    with no_grad():
        pred = model.forward(images())
    assert np.allclose(pred.log_probs.data, -math.log(c), atol=1e-6)


def test_batch_permutation_covariance():
    model = small_model()
    x = Rng(3).random((4, 1, 16, 16))
    perm = [2, 0, 3, 1]
    with no_grad():
        a = model.forward(Tensor(x)).log_probs.data
        b = model.forward(Tensor(x[perm])).log_probs.data
    assert np.allclose(a[perm], b, atol=1e-6)


def test_prediction_consistency(double):
    model = small_model().astype(np.float64)
    with no_grad():
        pred = model.forward(Tensor(Rng(2).random((5, 1, 16, 16))))
    lp, z = pred.log_probs.data, pred.logits.data
    assert np.array_equal(pred.predicted_class, lp.argmax(axis=1))
    assert np.allclose(pred.positive_prob, np.exp(lp[:, 1]), atol=0)
    sig = 1.0 / (1.0 + np.exp(-(z[:, 1] - z[:, 0])))
    assert np.allclose(pred.positive_prob, sig, atol=1e-9)


def test_argmax_invariant_to_row_shift():
    z = Rng(1).normal((6, 3))
    a = ops.log_softmax(Tensor(z)).data.argmax(axis=1)
    b = ops.log_softmax(Tensor(z + 7.5)).data.argmax(axis=1)
    assert np.array_equal(a, b)


def test_eval_deterministic_and_training_reproducible():
    model = small_model()
    x = images()
    with no_grad():
        a = model.forward(x).logits.data
        b = model.forward(x).logits.data
        c = model.forward(x, training=True, rng=Rng(5)).logits.data
        d = model.forward(x, training=True, rng=Rng(5)).logits.data
    assert np.array_equal(a, b) and np.array_equal(c, d)
    assert not np.array_equal(a, c)


def test_mismatched_input_sizes_rejected_at_construction():
    specs = [BackboneSpec(kind="residual", input_size=(32, 32)), BackboneSpec(kind="shuffle", input_size=(64, 64))]
    with pytest.raises(ConfigurationError):
        FusionModel(specs)


def test_paper_head_param_count():
    model = FusionModel(default_specs(1000), class_count=10, hidden=512)
    assert param_count(model, "head.") == 3000 * 512 + 512 + 512 * 10 + 10 == 1_541_642


def test_small_head_param_count():
    model = small_model(hidden=512)
    assert param_count(model, "head.") == 7_682


def test_param_count_sums_parts():
    model = small_model()
    parts = sum(param_count(model, p) for p in ("residual.", "inception.", "shuffle.", "head."))
    assert parts == param_count(model)


def test_state_dict_roundtrip_and_shape_mismatch():
    a, b = small_model(seed=1), small_model(seed=2)
    b.load_state_dict(a.state_dict())
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    with pytest.raises(CheckpointError, match="head.fc2"):
        small_model(class_count=10).load_state_dict(a.state_dict())


def test_fuse_forward_alias():
    model = small_model()
    with no_grad():
        assert np.array_equal(fuse_forward(model, images()).logits.data, model.forward(images()).logits.data)


def test_nll_matches_binary_sigmoid_nll(double):
    r = Rng(0)
    z = r.normal(1000) * 5
    y = r.integers(2, 1000)
    logits = np.stack([np.zeros_like(z), z], axis=1)
    for i in range(0, 1000, 100):
        a = ops.nll_loss(ops.log_softmax(Tensor(logits[i : i + 100])), y[i : i + 100]).item()
        b = ops.binary_sigmoid_nll(Tensor(z[i : i + 100]), y[i : i + 100]).item()
        assert abs(a - b) < 1e-10


def test_nll_nonnegative():
    lp = ops.log_softmax(Tensor(Rng(1).normal((50, 3)) * 4))
    losses = [ops.nll_loss(Tensor(lp.data[i : i + 1]), [i % 3]).item() for i in range(50)]
    assert min(losses) >= 0


def test_full_model_gradcheck(double):
    f, inputs = tiny_model_case(0)
    assert grad_check(f, inputs) < MODEL_TOLERANCE
