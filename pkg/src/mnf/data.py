"""Dataset ingestion and generation.

Image data moves through the big-endian IDX container, parsed bit-exactly;
a built-in bitmap-glyph renderer produces self-contained digit (classes
0-9) and letter (A-J) corpora at the standard 28x28 size, so the full
pipeline runs without downloads.  The letter set acts as the
out-of-distribution probe for digit-trained models.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Rng
from .errors import ContractError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class DatasetHandle:
    kind: str
    X: np.ndarray
    y: np.ndarray
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.shape[0] != self.y.shape[0]:
            raise ContractError(f"dataset: {self.X.shape[0]} inputs vs "
                                f"{self.y.shape[0]} labels")

    def __len__(self):
        return self.X.shape[0]

    def flat(self):
        """Inputs reshaped to [n, features]."""
        return self.X.reshape(self.X.shape[0], -1)

    def for_model(self, model):
        """(inputs shaped for the model's first weight layer, labels)."""
        first = model.weight_blocks()[0].kind
        if first.endswith("conv"):
            X = self.X if self.X.ndim == 4 else self.X[..., None]
            return X, self.y
        return self.flat(), self.y


# ---------------------------------------------------------------------------
# IDX container

def _read_exact(fh, count, path, what):
    raw = fh.read(count)
    if len(raw) < count:
        raise FormatError(f"{path}: truncated while reading {what} "
                          f"({len(raw)} of {count} bytes)")
    return raw


def _read_header(fh, path, expected_magic, n_dims, what):
    raw = _read_exact(fh, 4, path, f"{what} magic")
    (magic,) = struct.unpack(">I", raw)
    if magic != expected_magic:
        raise FormatError(f"{path}: bad {what} magic bytes {raw.hex()} "
                          f"(0x{magic:08x}), expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{n_dims}I",
                         _read_exact(fh, 4 * n_dims, path, f"{what} dimensions"))
    return dims


def load_idx(images_path, labels_path) -> DatasetHandle:
    """Parse an IDX image/label pair; pixels come out in [0, 1]."""
    with open(images_path, "rb") as fh:
        n, rows, cols = _read_header(fh, images_path, IMAGE_MAGIC, 3, "image")
        raw = _read_exact(fh, n * rows * cols, images_path, "pixels")
        if fh.read(1):
            raise FormatError(f"{images_path}: trailing bytes after pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)

    with open(labels_path, "rb") as fh:
        (n_labels,) = _read_header(fh, labels_path, LABEL_MAGIC, 1, "label")
        raw = _read_exact(fh, n_labels, labels_path, "labels")
        if fh.read(1):
            raise FormatError(f"{labels_path}: trailing bytes after label data")
    labels = np.frombuffer(raw, dtype=np.uint8)

    if n != n_labels:
        raise FormatError(f"{images_path} holds {n} images but {labels_path} "
                          f"holds {n_labels} labels")
    X = (images.astype(np.float64) / 255.0)[..., None]
    return DatasetHandle(kind="idx-images", X=X, y=labels.astype(np.int64),
                         normalization={"scale": 1.0 / 255.0,
                                        "rows": rows, "cols": cols})


def write_idx_images(path, images):
    """Write uint8 images [n, rows, cols] in the IDX container."""
    arr = np.asarray(images)
    if arr.dtype != np.uint8 or arr.ndim != 3:
        raise ContractError(f"write_idx_images: need uint8 [n, rows, cols], "
                            f"got {arr.dtype} {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *arr.shape))
        fh.write(arr.tobytes())


def write_idx_labels(path, labels):
    arr = np.asarray(labels)
    if arr.dtype != np.uint8 or arr.ndim != 1:
        raise ContractError(f"write_idx_labels: need uint8 [n], got {arr.dtype} {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, arr.shape[0]))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# toy regression

def make_toy_regression(seed, n=20) -> DatasetHandle:
    """n points of y = x^3 + noise with x ~ U[-4, 4], noise ~ N(0, 9)."""
    rng = Rng(seed)
    x = rng.child(0).uniform(-4.0, 4.0, (n,))
    noise = 3.0 * rng.child(1).normal((n,))
    y = x ** 3 + noise
    return DatasetHandle(kind="synthetic-toy", X=x[:, None], y=y,
                         normalization={"noise_var": 9.0, "x_low": -4.0, "x_high": 4.0})


# ---------------------------------------------------------------------------
# bitmap-glyph image corpora

_DIGIT_GLYPHS = [
    (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    (".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    (".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."),
    ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    (".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."),
]

_LETTER_GLYPHS = [
    (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    ("####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."),
    ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"),
    ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    (".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    ("..###", "...#.", "...#.", "...#.", "#..#.", "#..#.", ".##.."),
]

_GLYPH_SCALE = 3  # 5x7 glyph -> 15x21 stamp on the 28x28 canvas
_CANVAS = 28


def _glyph_array(glyph_rows):
    return np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in glyph_rows])


def _render_glyph(glyph, rng):
    stamp = np.kron(glyph, np.ones((_GLYPH_SCALE, _GLYPH_SCALE)))
    h, w = stamp.shape
    dy = int(rng.integers(0, _CANVAS - h + 1))
    dx = int(rng.integers(0, _CANVAS - w + 1))
    intensity = float(rng.uniform(0.6, 1.0))
    keep = rng.bernoulli(0.95, stamp.shape)
    canvas = np.zeros((_CANVAS, _CANVAS))
    canvas[dy:dy + h, dx:dx + w] = stamp * keep * intensity
    return np.round(canvas * 255.0).astype(np.uint8)


def _glyph_corpus(glyphs, n, seed):
    rng = Rng(seed)
    images = np.zeros((n, _CANVAS, _CANVAS), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.uint8)
    arrays = [_glyph_array(g) for g in glyphs]
    for i in range(n):
        label = i % len(arrays)
        labels[i] = label
        images[i] = _render_glyph(arrays[label], rng.child(i))
    return images, labels


def synthetic_digits(n, seed):
    """n jittered 28x28 digit images (uint8) with balanced labels 0-9."""
    return _glyph_corpus(_DIGIT_GLYPHS, n, seed)


def synthetic_letters(n, seed):
    """n jittered 28x28 letter images (A-J), the out-of-distribution set."""
    return _glyph_corpus(_LETTER_GLYPHS, n, seed)


def glyph_dataset(kind, n, seed) -> DatasetHandle:
    """In-memory handle over a synthetic corpus, already scaled to [0, 1]."""
    if kind == "digits":
        images, labels = synthetic_digits(n, seed)
    elif kind == "letters":
        images, labels = synthetic_letters(n, seed)
    else:
        raise ContractError(f"glyph_dataset: unknown corpus {kind!r}")
    X = (images.astype(np.float64) / 255.0)[..., None]
    return DatasetHandle(kind="idx-images", X=X, y=labels.astype(np.int64),
                         normalization={"scale": 1.0 / 255.0, "rows": _CANVAS,
                                        "cols": _CANVAS, "source": f"synthetic-{kind}"})
