import gzip
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowdict.data_io import (DataError, DeformSpec, deform, load_model, model_bytes,
                              read_idx, read_mnist_dir, read_usps, save_model)
from flowdict.learn import LearnConfig, train

DATA = os.path.join(os.path.dirname(__file__), "data", "mnist5k")


def write_idx_bytes(path, magic, dims, payload, gz=False):
    # independent byte-level writer: big-endian header then raw bytes
    raw = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims) + payload
    opener = gzip.open if gz else open
    with opener(path, "wb") as fh:
        fh.write(raw)


@pytest.mark.parametrize("gz", [False, True])
def test_idx_fixture_round_trip(tmp_path, gz):
    pixels = bytes(range(0, 256, 8)) + bytes(range(255, 127, -8)) * 1  # 48 bytes
    pixels = (pixels * 2)[:2 * 4 * 6]
    write_idx_bytes(tmp_path / "img", 0x803, (2, 4, 6), pixels, gz)
    write_idx_bytes(tmp_path / "lbl", 0x801, (2,), bytes([7, 3]), gz)
    ds = read_idx(tmp_path / "img", tmp_path / "lbl")
    assert ds.images.shape == (2, 4, 6)
    assert ds.labels.tolist() == [7, 3]
    back = np.round(ds.images * 255).astype(np.uint8).tobytes()
    assert back == pixels


def test_idx_errors(tmp_path):
    write_idx_bytes(tmp_path / "img", 0x803, (2, 2, 2), bytes(8))
    write_idx_bytes(tmp_path / "bad", 0x804, (2, 2, 2), bytes(8))
    write_idx_bytes(tmp_path / "short", 0x803, (2, 2, 2), bytes(7))
    write_idx_bytes(tmp_path / "lbl3", 0x801, (3,), bytes(3))
    write_idx_bytes(tmp_path / "lbl2", 0x801, (2,), bytes(2))
    with pytest.raises(DataError, match="magic"):
        read_idx(tmp_path / "bad", tmp_path / "lbl2")
    with pytest.raises(DataError, match="expected"):
        read_idx(tmp_path / "short", tmp_path / "lbl2")
    with pytest.raises(DataError, match="labels"):
        read_idx(tmp_path / "img", tmp_path / "lbl3")


def test_bundled_mnist_subset():
    train_set = read_mnist_dir(DATA, "train")
    test_set = read_mnist_dir(DATA, "test")
    assert train_set.images.shape == (3000, 28, 28)
    assert len(test_set) == 2000
    for ds in (train_set, test_set):
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        assert set(ds.labels.tolist()) == set(range(10))


def test_usps_line(tmp_path):
    path = tmp_path / "usps.txt"
    path.write_text("3 1:-1 256:1\n\n7 2:0\n")
    ds = read_usps(path)
    assert ds.labels.tolist() == [3, 7]
    assert ds.images.shape == (2, 16, 16)
    assert ds.images[0, 0, 0] == 0.0 and ds.images[0, 15, 15] == 1.0
    assert ds.images[1, 0, 1] == 0.5
    assert read_usps(path, label_offset=1).labels.tolist() == [2, 6]


@pytest.mark.parametrize("line,msg", [("3 0:1", "out of"), ("3 257:1", "out of"),
                                      ("x 1:1", "malformed"), ("3 1-1", "malformed")])
def test_usps_errors(tmp_path, line, msg):
    path = tmp_path / "usps.txt"
    path.write_text("1 1:0\n" + line + "\n")
    with pytest.raises(DataError, match=msg) as exc:
        read_usps(path)
    assert ":2:" in str(exc.value)


def asymmetric():
    return np.arange(16, dtype=float).reshape(4, 4) / 15


@pytest.mark.parametrize("spec", [DeformSpec("rotate", 0), DeformSpec("scale", 1.0),
                                  DeformSpec("translate_x", 0), DeformSpec("translate_xy", 0)])
def test_identity_deformations(spec):
    img = np.random.default_rng(0).random((7, 9))
    assert np.array_equal(deform(img, spec), img)


def test_integer_translation():
    img = np.random.default_rng(1).random((6, 8))
    out = deform(img, DeformSpec("translate_x", 2))
    np.testing.assert_array_equal(out[:, 2:], img[:, :-2])
    assert not np.any(out[:, :2])
    out = deform(img, DeformSpec("translate_xy", -1))
    np.testing.assert_array_equal(out[:-1, :-1], img[1:, 1:])


def test_right_angle_rotation():
    img = asymmetric()
    np.testing.assert_array_equal(deform(img, DeformSpec("rotate", 90)), np.rot90(img))
    np.testing.assert_array_equal(deform(img, DeformSpec("rotate", -90)), np.rot90(img, -1))
    np.testing.assert_array_equal(deform(img, DeformSpec("rotate", 180)), np.rot90(img, 2))


def test_scale_up_keeps_center():
    img = np.zeros((9, 9))
    img[4, 4] = 1.0
    out = deform(img, DeformSpec("scale", 2.0))
    assert out[4, 4] == 1.0
    assert out.shape == img.shape


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(["translate_x", "translate_xy", "rotate", "scale"]),
       mag=st.floats(-30, 30), seed=st.integers(0, 1000))
def test_deform_preserves_shape_and_range(kind, mag, seed):
    if kind == "scale":
        mag = 0.5 + abs(mag) / 30
    img = np.random.default_rng(seed).random((10, 12))
    out = deform(img, DeformSpec(kind, mag))
    assert out.shape == img.shape
    assert out.min() >= 0 and out.max() <= 1


@settings(max_examples=30, deadline=None)
@given(a=st.integers(-4, 4), b=st.integers(-4, 4), seed=st.integers(0, 1000))
def test_integer_translations_compose(a, b, seed):
    img = np.random.default_rng(seed).random((8, 10))
    two = deform(deform(img, DeformSpec("translate_x", a)), DeformSpec("translate_x", b))
    one = deform(img, DeformSpec("translate_x", a + b))
    # agree away from the zero-filled border
    lo, hi = max(a, b, a + b, 0), 10 + min(a, b, a + b, 0)
    np.testing.assert_array_equal(two[:, lo:hi], one[:, lo:hi])


def test_deform_spec_parse():
    assert DeformSpec.parse("rotate=15") == DeformSpec("rotate", 15.0)
    with pytest.raises(ValueError):
        DeformSpec.parse("shear=1")
    with pytest.raises(ValueError):
        DeformSpec("scale", 0)


# --------------------------------------------------------------------------
# model files

@pytest.fixture(scope="module")
def small_model():
    rng = np.random.default_rng(0)
    images = rng.random((6, 8, 8))
    labels = np.array([0, 1, 2, 0, 1, 2])
    cfg = LearnConfig(n_atoms=3, epochs=1, batch_size=3, patch_size=3, window_side=3)
    return train((images, labels), cfg), images


def test_model_round_trip(tmp_path, small_model):
    model, images = small_model
    path = tmp_path / "m.fd"
    save_model(model, path)
    loaded = load_model(path)
    assert np.array_equal(loaded.dictionary.data, model.dictionary.data)
    assert np.array_equal(loaded.classifier.weights, model.classifier.weights)
    assert loaded.classifier.mu == model.classifier.mu
    assert loaded.config == model.config
    assert np.array_equal(loaded.dictionary.class_hint, model.dictionary.class_hint)
    assert model_bytes(loaded) == path.read_bytes()
    assert [loaded.predict_one(im) for im in images] == [model.predict_one(im) for im in images]


def test_model_layout(tmp_path, small_model):
    model, _ = small_model
    raw = model_bytes(model)
    assert raw[:8] == b"FLOWDICT"
    version, n, m, p, rows, cols, patch, stride, window, c = struct.unpack_from("<10I", raw, 8)
    assert (version, n, m, p, rows, cols, patch, stride, window, c) == (1, 3, 9, 36, 6, 6, 3,
                                                                       1, 3, 3)
    first = np.frombuffer(raw, "<f8", m, 48)
    # first atom, first column
    np.testing.assert_array_equal(first, model.dictionary.data[0, :, 0])


def test_truncated_model(tmp_path, small_model):
    model, _ = small_model
    path = tmp_path / "m.fd"
    path.write_bytes(model_bytes(model)[:-5])
    with pytest.raises(DataError, match="size mismatch"):
        load_model(path)
    path.write_bytes(model_bytes(model)[:200])
    with pytest.raises(DataError, match="size mismatch"):
        load_model(path)


def test_future_version(tmp_path, small_model):
    model, _ = small_model
    raw = bytearray(model_bytes(model))
    struct.pack_into("<I", raw, 8, 2)
    path = tmp_path / "m.fd"
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="version"):
        load_model(path)
    raw[:8] = b"NOTADICT"
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="FLOWDICT"):
        load_model(path)
