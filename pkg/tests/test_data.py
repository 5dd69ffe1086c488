import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusenet.checkpoint import MAGIC, Checkpoint, dumps, load_checkpoint, loads, read_checkpoint, save_checkpoint
from fusenet.data import (
    Dataset,
    SplitPlan,
    decode_pgm,
    encode_pgm,
    load_manifest,
    make_blob_dataset,
    normalize,
    split_dataset,
    synthetic_splits,
    write_manifest,
)
from fusenet.errors import CheckpointError, DataError, FormatError, UsageError
from fusenet.rng import Rng
from fusenet.trainer import evaluate

from test_fusion import small_model


# ---------------------------------------------------------------- pgm


def test_decode_hand_built():
    img = decode_pgm(b"P5 2 2 255\n" + bytes([0, 128, 255, 64]))
    assert img.tolist() == [[0, 128], [255, 64]]


def test_decode_with_comments():
    plain = decode_pgm(b"P5\n2 2\n255\n" + bytes([1, 2, 3, 4]))
    commented = decode_pgm(b"P5\n# a comment\n2 # width\n2\n# more\n255\n" + bytes([1, 2, 3, 4]))
    assert np.array_equal(plain, commented)


@pytest.mark.parametrize("data", [
    b"P2 2 2 255\n" + bytes(4),       # wrong magic
    b"P5 2 2 255\n" + bytes(3),       # truncated payload
    b"P5 2 2 65535\n" + bytes(8),     # 16-bit
    b"P5 2",                          # truncated header
])
def test_decode_errors(data):
    with pytest.raises(FormatError):
        decode_pgm(data)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32))
@settings(max_examples=40)
def test_pgm_roundtrip(h, w, seed):
    img = Rng(seed).integers(256, (h, w)).astype(np.uint8)
    assert np.array_equal(decode_pgm(encode_pgm(img)), img)


def test_normalize():
    assert np.array_equal(normalize(np.zeros((3, 4), np.uint8)), np.zeros((1, 3, 4)))
    assert normalize(np.array([[255]], np.uint8))[0, 0, 0] == 1.0
    img = Rng(1).integers(256, (16, 16)).astype(np.uint8)
    z = normalize(img, standardize=True).astype(np.float64)
    assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6


# ---------------------------------------------------------------- manifest


def _write_images(tmp_path, rows, shapes=None):
    (tmp_path / "img").mkdir(exist_ok=True)
    lines = ["path,label"]
    for i, label in enumerate(rows):
        shape = shapes[i] if shapes else (4, 4)
        (tmp_path / "img" / f"{i}.pgm").write_bytes(encode_pgm(np.full(shape, i * 10, np.uint8)))
        lines.append(f"img/{i}.pgm,{label}")
    (tmp_path / "m.csv").write_text("\n".join(lines) + "\n")
    return tmp_path / "m.csv"


def test_manifest_two_rows(tmp_path):
    ds = load_manifest(_write_images(tmp_path, [1, 0]))
    assert len(ds) == 2 and ds.labels.tolist() == [1, 0]
    assert ds.images.shape == (2, 1, 4, 4)
    assert ds[1].image[0, 0, 0] == pytest.approx(10 / 255)
    assert ds.class_counts == (1, 1)


def test_manifest_bad_label_names_row(tmp_path):
    path = _write_images(tmp_path, [1, 2])
    with pytest.raises(DataError, match="row 3"):
        load_manifest(path)


def test_manifest_missing_file_and_mixed_sizes(tmp_path):
    path = _write_images(tmp_path, [0, 1], shapes=[(4, 4), (5, 4)])
    with pytest.raises(DataError, match="row 3"):
        load_manifest(path)
    assert load_manifest(path, size=(4, 4)).images.shape == (2, 1, 4, 4)
    (tmp_path / "img" / "0.pgm").unlink()
    with pytest.raises(DataError, match="row 2"):
        load_manifest(path)


def test_manifest_corrupt_image_is_data_error(tmp_path):
    path = _write_images(tmp_path, [0, 1])
    (tmp_path / "img" / "1.pgm").write_bytes(b"garbage")
    with pytest.raises(DataError, match="row 3"):
        load_manifest(path)


def test_manifest_order_stable_and_class_counts(tmp_path):
    n, pos = 2482, 1252
    labels = np.array([1] * pos + [0] * (n - pos))[Rng(0).permutation(n)]
    ds = Dataset(np.zeros((n, 1, 2, 2), np.float32), labels)
    manifest = write_manifest(ds, tmp_path)
    a, b = load_manifest(manifest), load_manifest(manifest)
    assert a.class_counts == (1230, 1252)
    assert np.array_equal(a.labels, b.labels) and a.paths == b.paths


# ---------------------------------------------------------------- splits


def test_split_paper_sizes():
    plan = split_dataset(2482, 250, 250, seed=0)
    assert plan.sizes() == (1982, 250, 250)
    plan.validate(2482)


def test_split_deterministic_and_seeded():
    assert split_dataset(100, 10, 10, seed=1) == split_dataset(100, 10, 10, seed=1)
    a, b = split_dataset(100, 10, 10, seed=1), split_dataset(100, 10, 10, seed=2)
    assert a.val != b.val and a.sizes() == b.sizes()


def test_split_errors_and_empty_val():
    with pytest.raises(UsageError):
        split_dataset(20, 10, 10)
    assert split_dataset(20, 0, 5).sizes() == (15, 0, 5)


def test_split_json_roundtrip():
    plan = split_dataset(50, 5, 5, seed=3)
    assert SplitPlan.from_json(plan.to_json()) == plan
    body = json.loads(plan.to_json())
    assert set(body) == {"seed", "n_val", "n_test", "train", "val", "test"}


def test_split_rejects_overlap():
    with pytest.raises(DataError):
        SplitPlan.from_json(json.dumps({"seed": 0, "n_val": 1, "n_test": 1, "train": [0, 1], "val": [1], "test": [2]}))


@given(st.integers(3, 300), st.integers(0, 2**32), st.booleans())
@settings(max_examples=40, deadline=None)
def test_split_partitions(n, seed, stratify):
    n_val, n_test = n // 5, n // 6
    labels = np.arange(n) % 2
    ds = Dataset(np.zeros((n, 1, 1, 1), np.float32), labels)
    plan = split_dataset(ds, n_val, n_test, seed=seed, stratify=stratify)
    plan.validate(n)


def test_synthetic_benchmark_shape_and_balance():
    train, val, test = synthetic_splits(seed=0, size=32, n_train=40, n_val=10, n_test=10)
    assert (len(train), len(val), len(test)) == (40, 10, 10)
    assert train.image_size == (32, 32)
    full = make_blob_dataset(60, size=32, seed=0)
    assert abs(full.class_counts[0] - full.class_counts[1]) <= 1
    assert np.array_equal(make_blob_dataset(6, 16, 1).images, make_blob_dataset(6, 16, 1).images)


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    model = small_model(seed=4)
    save_checkpoint(model, tmp_path / "a.ckpt", {"epoch": 3, "val_accuracy": 0.5, "seed": 4})
    loaded, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert meta == {"epoch": 3, "val_accuracy": 0.5, "seed": 4}
    assert all(np.array_equal(model.params[k].data, loaded.params[k].data) for k in model.params)
    save_checkpoint(loaded, tmp_path / "b.ckpt", meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_layout():
    data = dumps(Checkpoint.from_model(small_model()))
    assert data[:8] == MAGIC == b"FUSENET\0"
    assert int.from_bytes(data[8:12], "little") == 1


def test_checkpoint_double_precision_roundtrip():
    model = small_model().astype(np.float64)
    back = loads(dumps(Checkpoint.from_model(model)))
    assert all(v.dtype == np.float64 for v in back.params.values())


def test_checkpoint_rejections(tmp_path):
    data = bytearray(dumps(Checkpoint.from_model(small_model())))
    flipped = bytes([data[0] ^ 0xFF]) + bytes(data[1:])
    with pytest.raises(CheckpointError, match="magic"):
        loads(flipped)
    version = bytes(data[:8]) + (2).to_bytes(4, "little") + bytes(data[12:])
    with pytest.raises(CheckpointError, match="version"):
        loads(version)
    corrupt = bytearray(data)
    corrupt[len(corrupt) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        loads(bytes(corrupt))
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_into_wrong_config_names_head(tmp_path):
    save_checkpoint(small_model(), tmp_path / "c2.ckpt")
    with pytest.raises(CheckpointError, match="head.fc2"):
        load_checkpoint(tmp_path / "c2.ckpt", model=small_model(class_count=10))


def test_checkpoint_unknown_parameter_rejected(tmp_path):
    ckpt = Checkpoint.from_model(small_model())
    ckpt.params["head.extra"] = np.zeros(3, np.float32)
    with pytest.raises(CheckpointError):
        loads(dumps(ckpt)).build_model()


def test_checkpoint_preserves_evaluate(tmp_path):
    model = small_model(seed=5)
    train, _, _ = synthetic_splits(seed=1, size=16, n_train=12, n_val=2, n_test=2)
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    a, b = evaluate(model, train), evaluate(loaded, train)
    assert a[0] == b[0] and a[1] == b[1] and np.array_equal(a[2], b[2])
