import numpy as np
import pytest

from fusenet.data import Dataset, synthetic_splits
from fusenet.errors import ConfigurationError, DataError, TrainingError
from fusenet.rng import Rng
from fusenet.tensor import Tensor, backward
from fusenet.trainer import AdamState, TrainConfig, adam_step, evaluate, train

from test_fusion import small_model


def _param(value):
    return {"w": Tensor(np.asarray(value, np.float64), requires_grad=True, dtype=np.float64)}


# ---------------------------------------------------------------- adam


def test_first_step_moves_by_lr_against_gradient():
    p = _param([1.0, -2.0, 0.5])
    p["w"].grad = np.array([0.3, -5.0, 1e-3])
    adam_step(p, AdamState(), TrainConfig())
    assert np.allclose(p["w"].data - [1.0, -2.0, 0.5], [-0.003, 0.003, -0.003], rtol=1e-4)


def test_zero_gradient_leaves_params():
    p = _param([1.0, 2.0])
    state = AdamState()
    for _ in range(5):
        p["w"].grad = np.zeros(2)
        adam_step(p, state, TrainConfig())
    assert p["w"].data.tolist() == [1.0, 2.0]
    assert state.t == 5


def test_zero_lr_bit_identical():
    p = _param(Rng(0).normal(10))
    before = p["w"].data.copy()
    p["w"].grad = Rng(1).normal(10)
    adam_step(p, AdamState(), TrainConfig(learning_rate=0.0))
    assert np.array_equal(p["w"].data, before)


def test_quadratic_bowl_decreases():
    p = _param([1.0])
    state, config = AdamState(), TrainConfig(learning_rate=0.003)
    losses = []
    for _ in range(100):
        w = p["w"]
        w.grad = None
        loss = (w * w).sum()
        losses.append(loss.item())
        backward(loss)
        adam_step(p, state, config)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_missing_gradient_names_parameter():
    p = _param([1.0])
    with pytest.raises(TrainingError, match="'?w'?"):
        adam_step(p, AdamState(), TrainConfig())


def test_config_validation():
    for bad in [dict(batch_size=0), dict(learning_rate=-1.0), dict(beta1=1.0), dict(eps=0.0), dict(epochs=0)]:
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- training loop


@pytest.fixture(scope="module")
def toy():
    return synthetic_splits(seed=2, size=16, n_train=18, n_val=6, n_test=6)


def _toy_config(**kw):
    return TrainConfig(**{"batch_size": 4, "epochs": 3, "learning_rate": 0.003, **kw})


def test_two_sample_separable_reaches_full_accuracy():
    images = np.zeros((2, 1, 16, 16), np.float32)
    images[1] = 1.0
    ds = Dataset(images, np.array([0, 1]))
    model = small_model()
    _, record = train(model, ds, ds, TrainConfig(batch_size=2, epochs=50))
    assert max(e.val_accuracy for e in record.epochs) == 1.0
    assert record.best.val_accuracy == 1.0


def test_single_epoch_checkpoint(toy):
    train_set, val_set, _ = toy
    ckpt, record = train(small_model(), train_set, val_set, _toy_config(epochs=1))
    assert record.best_epoch == 1 and ckpt.metadata["epoch"] == 1
    assert len(record.to_jsonl().splitlines()) == 1


def test_every_sample_once_per_epoch(toy):
    train_set, val_set, _ = toy
    seen = {}
    train(small_model(), train_set, val_set, _toy_config(batch_size=5),
          on_batch=lambda epoch, idx: seen.setdefault(epoch, []).extend(idx.tolist()))
    assert sorted(seen) == [1, 2, 3]
    for epoch, idx in seen.items():
        assert sorted(idx) == list(range(len(train_set)))
    assert seen[1] != seen[2]  # reshuffled each epoch


def test_deterministic_record(toy):
    train_set, val_set, _ = toy
    a = train(small_model(), train_set, val_set, _toy_config())[1]
    b = train(small_model(), train_set, val_set, _toy_config())[1]
    assert a.to_jsonl() == b.to_jsonl()


def test_best_epoch_earliest_maximum_and_restored(toy):
    train_set, val_set, _ = toy
    model = small_model()
    ckpt, record = train(model, train_set, val_set, _toy_config(epochs=4))
    accs = [e.val_accuracy for e in record.epochs]
    assert record.best_epoch == accs.index(max(accs)) + 1
    assert all(np.array_equal(model.params[k].data, v) for k, v in ckpt.params.items())
    _, report, _ = evaluate(ckpt, val_set)
    assert report.accuracy == ckpt.metadata["val_accuracy"]


def test_empty_validation_requires_selection_off(toy):
    train_set, _, _ = toy
    empty = train_set.subset([])
    with pytest.raises(DataError):
        train(small_model(), train_set, empty, _toy_config())
    _, record = train(small_model(), train_set, empty, _toy_config(epochs=1, select_best=False))
    assert record.epochs[0].val_accuracy is None


def test_non_finite_loss_aborts(toy):
    train_set, val_set, _ = toy
    model = small_model()
    model.params["head.fc2.bias"].data[:] = np.nan
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(model, train_set, val_set, _toy_config())


def test_mismatched_image_size(toy):
    train_set, val_set, _ = toy
    with pytest.raises(DataError):
        train(small_model(size=32), train_set, val_set, _toy_config())


def test_class_count_ten_trains(toy):
    train_set, val_set, _ = toy
    _, record = train(small_model(class_count=10), train_set, val_set, _toy_config(class_count=10, epochs=1))
    assert np.isfinite(record.epochs[0].train_loss)


# ---------------------------------------------------------------- evaluate


def _constant_model(positive: bool):
    model = small_model()
    model.params["head.fc2.weight"].data[:] = 0
    model.params["head.fc2.bias"].data[:] = [0.0, 5.0] if positive else [5.0, 0.0]
    return model


def test_evaluate_constant_positive():
    images = np.zeros((5, 1, 16, 16), np.float32)
    ds = Dataset(images, np.array([1, 1, 1, 0, 0]))
    cm, report, scores = evaluate(_constant_model(True), ds)
    assert (cm.tp, cm.fp, cm.fn, cm.tn) == (3, 2, 0, 0)
    assert report.recall == 1.0 and report.specificity == 0.0
    assert np.all(scores > 0.99)


def test_evaluate_rejects_non_binary_labels():
    ds = Dataset(np.zeros((2, 1, 16, 16), np.float32), np.array([0, 3]))
    with pytest.raises(DataError):
        evaluate(small_model(), ds)
