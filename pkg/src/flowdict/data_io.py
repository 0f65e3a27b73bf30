"""Dataset readers, test-time deformations and model files."""

from __future__ import annotations

import gzip
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, fields

import numpy as np

from .classifier import ClassifierParams
from .learn import LearnConfig, Model
from .tensor import Dictionary, Grid

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MODEL_MAGIC = b"FLOWDICT"
MODEL_VERSION = 1
_HEADER = struct.Struct("<8sI9I")


class DataError(ValueError):
    """Malformed or inconsistent dataset or model file."""


@dataclass(frozen=True, eq=False)
class RawDataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    split: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 3:
            raise DataError("images must be an n x H x W array")
        if len(images) != len(labels):
            raise DataError(f"{len(images)} images but {len(labels)} labels")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1:]

    def subset(self, index) -> "RawDataset":
        index = np.asarray(index)
        return RawDataset(self.images[index], self.labels[index], self.name, self.split)

    def head(self, n) -> "RawDataset":
        return self.subset(np.arange(min(int(n), len(self))))


def _open(path):
    with open(path, "rb") as fh:
        gz = fh.read(2) == b"\x1f\x8b"
    return gzip.open(path, "rb") if gz else open(path, "rb")


def _read_idx_file(path, magic):
    with _open(path) as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise DataError(f"{path}: truncated IDX header")
    found = struct.unpack(">I", buf[:4])[0]
    if found != magic:
        raise DataError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    size = int(np.prod(dims))
    if len(buf) - header != size:
        raise DataError(f"{path}: expected {size} data bytes, found {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def read_idx(images_path, labels_path, name="mnist", split="") -> RawDataset:
    """Read an IDX image/label file pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _read_idx_file(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx_file(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    return RawDataset(images / 255.0, labels.astype(np.int64), name, split)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images and labels as an uncompressed IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def find_idx_pair(directory, split="test"):
    """Locate the MNIST-style image/label files for ``split`` in ``directory``."""
    prefix = {"train": "train", "test": "t10k"}[split]
    found = {}
    for kind in ("images-idx3", "labels-idx1"):
        for suffix in ("-ubyte", "-ubyte.gz", ".ubyte", ".ubyte.gz"):
            path = os.path.join(directory, f"{prefix}-{kind}{suffix}")
            if os.path.exists(path):
                found[kind] = path
                break
        else:
            raise FileNotFoundError(f"no {prefix}-{kind} file in {directory}")
    return found["images-idx3"], found["labels-idx1"]


def read_mnist_dir(directory, split="test") -> RawDataset:
    return read_idx(*find_idx_pair(directory, split), name="mnist", split=split)


def read_usps(path, label_offset=0, split="") -> RawDataset:
    """Read USPS in sparse ``label index:value`` text form (values in [-1, 1])."""
    images, labels = [], []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            try:
                label = int(float(parts[0])) - label_offset
                pixels = np.full(256, -1.0)
                for item in parts[1:]:
                    idx, val = item.split(":")
                    idx = int(idx)
                    if not 1 <= idx <= 256:
                        raise DataError(f"{path}:{lineno}: feature index {idx} out of [1, 256]")
                    pixels[idx - 1] = float(val)
            except DataError:
                raise
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed line ({exc})") from None
            images.append(np.clip((pixels + 1.0) / 2.0, 0.0, 1.0).reshape(16, 16))
            labels.append(label)
    if not images:
        raise DataError(f"{path}: no samples")
    return RawDataset(np.stack(images), np.asarray(labels), "usps", split)


# --------------------------------------------------------------------------
# deformations

DEFORM_KINDS = ("translate_x", "translate_xy", "rotate", "scale")


@dataclass(frozen=True)
class DeformSpec:
    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in DEFORM_KINDS:
            raise ValueError(f"unknown deformation {self.kind!r}")
        if self.kind == "scale" and not self.magnitude > 0:
            raise ValueError("scale ratio must be positive")

    @classmethod
    def parse(cls, text):
        kind, _, value = text.partition("=")
        if not value:
            raise ValueError(f"expected kind=value, got {text!r}")
        return cls(kind.strip(), float(value))

    @property
    def is_identity(self) -> bool:
        return self.magnitude == (1.0 if self.kind == "scale" else 0.0)


def _snap(v):
    r = np.round(v)
    return np.where(np.abs(v - r) < 1e-9, r, v)


def deform(image, spec: DeformSpec) -> np.ndarray:
    """Inverse-mapped bilinear warp about the image center with zero background.

    Positive translations move content right (and down); positive rotation
    angles turn the content counterclockwise as displayed.
    """
    image = np.asarray(image, dtype=np.float64)
    if spec.is_identity:
        return image.copy()
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    v, u = rows - cy, cols - cx
    if spec.kind == "translate_x":
        src_r, src_c = rows, cols - spec.magnitude
    elif spec.kind == "translate_xy":
        src_r, src_c = rows - spec.magnitude, cols - spec.magnitude
    elif spec.kind == "rotate":
        th = np.deg2rad(spec.magnitude)
        src_r = cy + np.cos(th) * v + np.sin(th) * u
        src_c = cx - np.sin(th) * v + np.cos(th) * u
    else:
        src_r, src_c = cy + v / spec.magnitude, cx + u / spec.magnitude
    src_r, src_c = _snap(src_r), _snap(src_c)

    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr, fc = src_r - r0, src_c - c0
    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = image

    def tap(r, c):
        inside = (r >= -1) & (r <= h) & (c >= -1) & (c <= w)
        vals = padded[np.clip(r + 1, 0, h + 1), np.clip(c + 1, 0, w + 1)]
        return np.where(inside, vals, 0.0)

    out = ((1 - fr) * (1 - fc) * tap(r0, c0) + (1 - fr) * fc * tap(r0, c0 + 1)
           + fr * (1 - fc) * tap(r0 + 1, c0) + fr * fc * tap(r0 + 1, c0 + 1))
    return np.clip(out, 0.0, 1.0)


def deform_dataset(dataset: RawDataset, spec: DeformSpec | None) -> RawDataset:
    if spec is None or spec.is_identity:
        return dataset
    return RawDataset(np.stack([deform(im, spec) for im in dataset.images]),
                      dataset.labels, dataset.name, dataset.split)


# --------------------------------------------------------------------------
# model files

# run-dependent fields are left out so fixed-seed runs give identical files
_VOLATILE = ("n_threads", "wall_seconds")


def _config_snapshot(model: Model) -> bytes:
    config = {k: v for k, v in model.config.as_dict().items() if k not in _VOLATILE}
    history = [{k: v for k, v in row.items() if k not in _VOLATILE} for row in model.history]
    snap = {"config": config,
            "mu": model.classifier.mu,
            "source_dims": list(model.dictionary.grid.source_dims or ()),
            "class_hint": (None if model.dictionary.class_hint is None
                           else model.dictionary.class_hint.tolist()),
            "history": history}
    return json.dumps(snap, sort_keys=True).encode("utf-8")


def model_bytes(model: Model) -> bytes:
    d = model.dictionary
    g = d.grid
    w = model.classifier.weights
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, d.n_atoms, g.dim, g.n_positions,
                          g.rows, g.cols, g.patch_size, g.stride,
                          model.config.window_side, w.shape[0])
    # atom-major, then column-major within each atom
    atoms = np.ascontiguousarray(d.data.transpose(0, 2, 1), dtype="<f8")
    snap = _config_snapshot(model)
    return b"".join([header, atoms.tobytes(), np.ascontiguousarray(w, dtype="<f8").tobytes(),
                     struct.pack("<I", len(snap)), snap])


def write_atomic(path, data: bytes) -> None:
    """Write ``data`` so that a partial file never appears at ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".flowdict-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: Model, path) -> None:
    write_atomic(path, model_bytes(model))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise DataError(f"{path}: file too short for a model header")
    magic, version, n, m, p, rows, cols, patch, stride, window, n_classes = \
        _HEADER.unpack_from(buf)
    if magic != MODEL_MAGIC:
        raise DataError(f"{path}: not a FLOWDICT model file")
    if version != MODEL_VERSION:
        raise DataError(f"{path}: unsupported model version {version}")
    if m != patch * patch or p != rows * cols:
        raise DataError(f"{path}: inconsistent grid header")
    n_dict = n * m * p
    n_w = n_classes * (n + 1)
    offset = _HEADER.size
    fixed = offset + 8 * (n_dict + n_w) + 4
    if len(buf) < fixed:
        raise DataError(f"{path}: size mismatch, header needs at least {fixed} bytes")
    (snap_len,) = struct.unpack_from("<I", buf, fixed - 4)
    if len(buf) != fixed + snap_len:
        raise DataError(f"{path}: size mismatch, expected {fixed + snap_len} bytes, "
                        f"found {len(buf)}")
    atoms = np.frombuffer(buf, "<f8", n_dict, offset).reshape(n, p, m).transpose(0, 2, 1)
    weights = np.frombuffer(buf, "<f8", n_w, offset + 8 * n_dict).reshape(n_classes, n + 1)
    snap = json.loads(buf[fixed:].decode("utf-8"))
    known = {f.name for f in fields(LearnConfig)}
    cfg = LearnConfig(**{k: v for k, v in snap["config"].items() if k in known})
    dims = tuple(snap.get("source_dims") or ()) or None
    grid = Grid(rows, cols, patch, stride, dims)
    hint = snap.get("class_hint")
    dictionary = Dictionary(atoms.astype(np.float64), grid,
                            None if hint is None else np.asarray(hint))
    params = ClassifierParams(weights.astype(np.float64), snap["mu"])
    return Model(dictionary, params, cfg, tuple(snap.get("history", ())))
