"""Sample containers and dataset ingestion.

`LabeledSet` is the universal currency: a dense float32 (N, C, H, W) image
array in [0, 1] plus integer class labels. Loaders parse the standard MNIST
IDX and CIFAR-10 binary layouts byte-for-byte and validate as they go;
`array_import` ingests precomputed image-shaped arrays (e.g. spectrograms)
declared by a plain key-value manifest. `synthetic_digits` generates a
deterministic MNIST-shaped corpus for desk-scale runs.
"""

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, ValidationError
from .imageops import affine_warp
from .validation import check_images, check_labels

BYTES_PER_VALUE = 4  # images are float32 throughout

_IDX_IMAGES_MAGIC = 2051
_IDX_LABELS_MAGIC = 2049
_CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels


@dataclass
class LabeledSet:
    """A set of images with class labels.

    images: float32 array (N, C, H, W), values finite, nominally in [0, 1].
    labels: int64 array (N,), each in [0, class_count).
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = check_images(self.images, name="images")
        self.labels = check_labels(
            self.labels, len(self.images), self.class_count, name="labels"
        )
        if self.class_count < 1:
            raise ValidationError(f"class_count must be >= 1, got {self.class_count}")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def nbytes(self):
        c, h, w = self.image_shape
        return len(self) * c * h * w * BYTES_PER_VALUE

    def classes_present(self):
        return sorted(int(c) for c in np.unique(self.labels))

    def indices_of(self, class_id):
        return np.flatnonzero(self.labels == class_id)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledSet(self.images[idx].copy(), self.labels[idx].copy(), self.class_count)

    def class_subset(self, class_ids):
        mask = np.isin(self.labels, np.asarray(sorted(class_ids), dtype=np.int64))
        return self.subset(np.flatnonzero(mask))

    def checksum(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()

    @staticmethod
    def concat(sets):
        sets = list(sets)
        if not sets:
            raise ValidationError("cannot concat zero sets")
        shape = sets[0].image_shape
        cc = sets[0].class_count
        for s in sets[1:]:
            if s.image_shape != shape or s.class_count != cc:
                raise ValidationError("concat requires matching image shape and class_count")
        return LabeledSet(
            np.concatenate([s.images for s in sets], axis=0),
            np.concatenate([s.labels for s in sets], axis=0),
            cc,
        )


def _read_maybe_gz(path):
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            return gzip.decompress(f.read())
        return f.read()


def _find_file(directory, stem):
    for name in (stem, stem + ".gz"):
        p = os.path.join(directory, name)
        if os.path.exists(p):
            return p
    raise DataFormatError(f"dataset file '{stem}' not found under {directory}")


def _read_idx_images(path):
    raw = _read_maybe_gz(path)
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header, {len(raw)} bytes at byte offset 0")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != _IDX_IMAGES_MAGIC:
        raise DataFormatError(
            f"{path}: bad magic {magic:#010x} at byte offset 0, expected {_IDX_IMAGES_MAGIC:#010x}"
        )
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes, got {len(raw)} (payload ends at byte offset {len(raw)})"
        )
    data = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return data.reshape(count, 1, rows, cols)


def _read_idx_labels(path, class_count):
    raw = _read_maybe_gz(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header, {len(raw)} bytes at byte offset 0")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != _IDX_LABELS_MAGIC:
        raise DataFormatError(
            f"{path}: bad magic {magic:#010x} at byte offset 0, expected {_IDX_LABELS_MAGIC:#010x}"
        )
    if len(raw) != 8 + count:
        raise DataFormatError(
            f"{path}: expected {8 + count} bytes, got {len(raw)} (payload ends at byte offset {len(raw)})"
        )
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if labels.size and labels.max() >= class_count:
        i = int(np.argmax(labels >= class_count))
        raise DataFormatError(
            f"{path}: label {int(labels[i])} out of range at byte offset {8 + i}"
        )
    return labels.astype(np.int64)


def load_mnist(directory):
    """Load the four standard MNIST IDX files from `directory`."""
    pairs = {}
    for split, img_stem, lab_stem in (
        ("train", "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("test", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ):
        images = _read_idx_images(_find_file(directory, img_stem))
        labels = _read_idx_labels(_find_file(directory, lab_stem), class_count=10)
        if len(images) != len(labels):
            raise DataFormatError(
                f"mnist {split}: {len(images)} images but {len(labels)} labels"
            )
        pairs[split] = LabeledSet(images.astype(np.float32) / 255.0, labels, 10)
    return pairs["train"], pairs["test"]


def _read_cifar_batch(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
        raise DataFormatError(
            f"{path}: size {len(raw)} is not a multiple of {_CIFAR_RECORD} "
            f"(record boundary at byte offset {len(raw) - len(raw) % _CIFAR_RECORD})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        i = int(np.argmax(labels >= 10))
        raise DataFormatError(
            f"{path}: label {int(labels[i])} out of range at byte offset {i * _CIFAR_RECORD}"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory):
    """Load CIFAR-10 from the standard binary batches in `directory`."""
    train_imgs, train_labels = [], []
    for i in range(1, 6):
        imgs, labs = _read_cifar_batch(_find_file(directory, f"data_batch_{i}.bin"))
        train_imgs.append(imgs)
        train_labels.append(labs)
    test_imgs, test_labels = _read_cifar_batch(_find_file(directory, "test_batch.bin"))
    train = LabeledSet(
        np.concatenate(train_imgs).astype(np.float32) / 255.0,
        np.concatenate(train_labels),
        10,
    )
    test = LabeledSet(test_imgs.astype(np.float32) / 255.0, test_labels, 10)
    return train, test


def _parse_kv_manifest(path):
    entries = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def load_array_import(manifest_path):
    """Load one LabeledSet from an array_import manifest.

    Manifest keys: shape=C,H,W  count=N  data=<file>  labels=<file>  classes=C.
    The data file holds count*C*H*W little-endian float32 values in C order;
    the labels file holds count uint8 class ids.
    """
    kv = _parse_kv_manifest(manifest_path)
    missing = [k for k in ("shape", "count", "data", "labels", "classes") if k not in kv]
    if missing:
        raise DataFormatError(f"{manifest_path}: missing manifest keys {missing}")
    try:
        shape = tuple(int(v) for v in kv["shape"].split(","))
        count = int(kv["count"])
        classes = int(kv["classes"])
    except ValueError as e:
        raise DataFormatError(f"{manifest_path}: bad numeric field ({e})") from None
    if len(shape) != 3:
        raise DataFormatError(f"{manifest_path}: shape must be C,H,W, got {kv['shape']!r}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    data_path = os.path.join(base, kv["data"])
    labels_path = os.path.join(base, kv["labels"])

    n_values = count * int(np.prod(shape))
    with open(data_path, "rb") as f:
        raw = f.read()
    if len(raw) != n_values * BYTES_PER_VALUE:
        raise DataFormatError(
            f"{data_path}: expected {n_values * BYTES_PER_VALUE} bytes, got {len(raw)}"
        )
    images = np.frombuffer(raw, dtype="<f4").reshape((count,) + shape)

    with open(labels_path, "rb") as f:
        raw_labels = f.read()
    if len(raw_labels) != count:
        raise DataFormatError(
            f"{labels_path}: expected {count} label bytes, got {len(raw_labels)}"
        )
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= classes:
        i = int(np.argmax(labels >= classes))
        raise DataFormatError(f"{labels_path}: label {int(labels[i])} out of range at byte offset {i}")
    return LabeledSet(images.astype(np.float32), labels, classes)


def load_dataset(name, source_path):
    """Load (train, test) for a named dataset.

    mnist / cifar10: `source_path` is the raw-file directory
    (`<cache>/<name>/raw`). array_import: `source_path` is a directory holding
    `train.manifest` and `test.manifest`.
    """
    if name == "mnist":
        return load_mnist(source_path)
    if name == "cifar10":
        return load_cifar10(source_path)
    if name == "array_import":
        train = load_array_import(os.path.join(source_path, "train.manifest"))
        test = load_array_import(os.path.join(source_path, "test.manifest"))
        if train.image_shape != test.image_shape or train.class_count != test.class_count:
            raise DataFormatError(
                f"array_import train/test disagree: {train.image_shape}/{train.class_count} "
                f"vs {test.image_shape}/{test.class_count}"
            )
        return train, test
    raise ValidationError(f"unknown dataset {name!r} (expected mnist, cifar10 or array_import)")


# ---------------------------------------------------------------------------
# Deterministic synthetic corpus (desk-scale stand-in for MNIST-shaped data)
# ---------------------------------------------------------------------------

_SEGMENTS = {
    "A": (0.30, 0.20, 0.70, 0.20),
    "B": (0.70, 0.20, 0.70, 0.50),
    "C": (0.70, 0.50, 0.70, 0.80),
    "D": (0.30, 0.80, 0.70, 0.80),
    "E": (0.30, 0.50, 0.30, 0.80),
    "F": (0.30, 0.20, 0.30, 0.50),
    "G": (0.30, 0.50, 0.70, 0.50),
}

# Seven-segment encodings. 6 and 9 are exact 180-degree rotations of each
# other, so the corpus keeps the near-180 ambiguity of rotated digit data.
_GLYPHS = [
    "ABCDEF", "BC", "ABGED", "ABGCD", "FGBC",
    "AFGCD", "AFGECD", "ABC", "ABCDEFG", "ABCDFG",
]


def _segment_mask(h, w, seg, half_width):
    x0, y0, x1, y1 = seg
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px = xs / (w - 1)
    py = ys / (h - 1)
    dx, dy = x1 - x0, y1 - y0
    length_sq = dx * dx + dy * dy
    t = ((px - x0) * dx + (py - y0) * dy) / length_sq
    t = np.clip(t, 0.0, 1.0)
    dist = np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))
    return dist <= half_width


def glyph_templates(image_shape=(1, 28, 28)):
    """Render the ten glyph class templates at the requested shape."""
    c, h, w = image_shape
    templates = np.zeros((10, c, h, w), dtype=np.float32)
    for cls, segs in enumerate(_GLYPHS):
        mask = np.zeros((h, w), dtype=bool)
        for s in segs:
            mask |= _segment_mask(h, w, _SEGMENTS[s], half_width=0.055)
        templates[cls, :, :, :] = mask.astype(np.float32)
    return templates


def synthetic_digits(
    n_train,
    n_test,
    image_shape=(1, 28, 28),
    class_count=10,
    seed=0,
    noise=0.25,
    jitter_deg=8.0,
):
    """Generate a deterministic glyph-classification corpus.

    Balanced classes; each sample is its class template under a random small
    affine (rotation, scale, shift), random amplitude, and additive Gaussian
    pixel noise, clipped to [0, 1].
    """
    import torch

    if class_count > 10:
        raise ValidationError("synthetic_digits supports at most 10 classes")
    templates = glyph_templates(image_shape)[:class_count]
    rng = np.random.default_rng(seed)

    def make(n, stream):
        per = n // class_count
        labels = np.repeat(np.arange(class_count), per)
        extra = n - len(labels)
        labels = np.concatenate([labels, np.arange(extra) % class_count]).astype(np.int64)
        stream.shuffle(labels)
        imgs = templates[labels]
        angles = stream.uniform(-jitter_deg, jitter_deg, size=n).astype(np.float32)
        scales = stream.uniform(0.85, 1.1, size=n).astype(np.float32)
        tx = stream.uniform(-2.0, 2.0, size=n).astype(np.float32)
        ty = stream.uniform(-2.0, 2.0, size=n).astype(np.float32)
        with torch.no_grad():
            warped = affine_warp(torch.from_numpy(imgs), angles, scales, tx, ty).numpy()
        amp = stream.uniform(0.7, 1.0, size=(n, 1, 1, 1)).astype(np.float32)
        warped = warped * amp + stream.normal(0.0, noise, size=warped.shape).astype(np.float32)
        return LabeledSet(np.clip(warped, 0.0, 1.0), labels, class_count)

    train = make(n_train, np.random.default_rng(rng.integers(2**63)))
    test = make(n_test, np.random.default_rng(rng.integers(2**63)))
    return train, test
