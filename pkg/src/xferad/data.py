"""Dataset ingestion, preprocessing, and one-vs-rest anomaly task construction.

Loaders are pure functions on files. Images are float32 [C,H,W] arrays
with values in [0,1]; the project-wide label convention for anomaly
tasks is normal = 0, anomalous = 1.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, FormatError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR10_CLASS_NAMES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]


@dataclass
class LabeledImageSet:
    """Images + integer class labels + class names.

    images may be a list of [C,H,W] arrays (possibly ragged across
    samples) or one stacked [N,C,H,W] array.
    """

    images: object
    labels: np.ndarray
    class_names: list

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ShapeError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and int(self.labels.max()) >= len(self.class_names):
            raise ShapeError(
                f"label {int(self.labels.max())} out of range for {len(self.class_names)} classes"
            )

    def __len__(self):
        return len(self.labels)


@dataclass
class AnomalyTask:
    """Two-class task: anomalous = one source class, normal = pooled rest.

    Splits are sequences of [C,H,W] images; source_indices (when the
    task came from a LabeledImageSet) map each split entry back to its
    sample index for serialization and disjointness checks.
    """

    train_normal: object
    train_anomalous: object
    test_normal: object
    test_anomalous: object
    anomaly_class: int
    seed: int
    source_indices: dict = field(default=None, repr=False)

    LABEL_NORMAL = 0
    LABEL_ANOMALOUS = 1


# ---------------------------------------------------------------------------
# IDX files (big-endian)


def _be_u32(blob, off, what, path):
    if off + 4 > len(blob):
        raise FormatError(f"{path}: truncated at byte {off}, expected {what}")
    return struct.unpack_from(">I", blob, off)[0]


def load_idx(images_path, labels_path):
    """Parse an IDX image/label file pair into a LabeledImageSet.

    Pixel bytes are scaled to [0,1] by /255; image count must agree
    between the two files.
    """
    with open(images_path, "rb") as f:
        blob = f.read()
    magic = _be_u32(blob, 0, "magic", images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(
            f"{images_path}: bad magic {magic:#010x} at byte 0, expected {IDX_IMAGES_MAGIC:#010x}"
        )
    count = _be_u32(blob, 4, "image count", images_path)
    rows = _be_u32(blob, 8, "row count", images_path)
    cols = _be_u32(blob, 12, "column count", images_path)
    need = 16 + count * rows * cols
    if len(blob) < need:
        raise FormatError(
            f"{images_path}: truncated at byte {len(blob)}, expected {need} bytes of pixel data"
        )
    pixels = np.frombuffer(blob, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = (pixels.reshape(count, 1, rows, cols).astype(np.float32)) / 255.0

    with open(labels_path, "rb") as f:
        lblob = f.read()
    lmagic = _be_u32(lblob, 0, "magic", labels_path)
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(
            f"{labels_path}: bad magic {lmagic:#010x} at byte 0, expected {IDX_LABELS_MAGIC:#010x}"
        )
    lcount = _be_u32(lblob, 4, "label count", labels_path)
    if lcount != count:
        raise FormatError(
            f"{labels_path}: {lcount} labels but {images_path} has {count} images"
        )
    if len(lblob) < 8 + count:
        raise FormatError(
            f"{labels_path}: truncated at byte {len(lblob)}, expected {8 + count} bytes"
        )
    labels = np.frombuffer(lblob, dtype=np.uint8, count=count, offset=8).astype(np.int64)

    n_classes = int(labels.max()) + 1 if count else 0
    return LabeledImageSet(images, labels, [str(c) for c in range(n_classes)])


def write_idx(images, labels, images_path, labels_path):
    """Serialize grayscale [N,1,H,W] images in [0,1] back to IDX files."""
    images = np.asarray(images)
    n, _, rows, cols = images.shape
    pix = np.rint(images * 255.0).clip(0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pix.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# PGM (P5) / PPM (P6), maxval 255


def _read_pnm(path):
    with open(path, "rb") as f:
        blob = f.read()

    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments; a single whitespace byte then separates the raster.
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(blob):
            raise FormatError(f"{path}: truncated header")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            nl = blob.find(b"\n", pos)
            pos = len(blob) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    pos += 1  # the single whitespace after maxval

    magic = tokens[0]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise FormatError(f"{path}: unsupported magic {magic!r}, expected P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise FormatError(f"{path}: non-numeric header fields {tokens[1:4]}") from None
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported, expected 255")
    need = width * height * channels
    raster = blob[pos:pos + need]
    if len(raster) < need:
        raise FormatError(f"{path}: raster truncated, {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def load_image_dir(root_path, class_subdirs):
    """Load `<root>/<class>/*.pgm|ppm` with labels from subdirectory order.

    Files sort lexicographically within each class, so repeated listings
    are identical.
    """
    images, labels = [], []
    for label, sub in enumerate(class_subdirs):
        d = os.path.join(root_path, sub)
        if not os.path.isdir(d):
            raise FormatError(f"class directory {d} does not exist")
        names = sorted(
            n for n in os.listdir(d) if n.lower().endswith((".pgm", ".ppm"))
        )
        if not names:
            raise FormatError(f"class directory {d} contains no .pgm/.ppm images")
        for name in names:
            images.append(_read_pnm(os.path.join(d, name)))
            labels.append(label)
    return LabeledImageSet(images, np.asarray(labels), list(class_subdirs))


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record)


def load_cifar10_batches(paths):
    """Read CIFAR-10 binary batch files into a LabeledImageSet."""
    all_images, all_labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) % 3073 != 0:
            raise FormatError(
                f"{path}: size {len(blob)} is not a multiple of the 3073-byte record"
            )
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, 3073)
        all_labels.append(rec[:, 0].astype(np.int64))
        all_images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    images = np.concatenate(all_images)
    labels = np.concatenate(all_labels)
    if labels.size and labels.max() > 9:
        raise FormatError(f"label {labels.max()} out of range for CIFAR-10")
    return LabeledImageSet(images, labels, list(CIFAR10_CLASS_NAMES))


# ---------------------------------------------------------------------------
# anomaly task construction


def build_anomaly_task(image_set, anomaly_class, train_per_class, test_per_class, seed):
    """One-vs-rest task: anomaly class vs. a pooled sample of the rest.

    The normal split is drawn uniformly without replacement from the
    remaining classes pooled as a whole (not stratified, so rest-class
    proportions fluctuate hypergeometrically). Train and test are
    disjoint by source index; split sizes are exactly as requested.
    """
    labels = image_set.labels
    need = train_per_class + test_per_class
    anom_idx = np.flatnonzero(labels == anomaly_class)
    rest_idx = np.flatnonzero(labels != anomaly_class)
    if len(anom_idx) < need:
        raise CapacityError(
            f"anomaly class {anomaly_class} has {len(anom_idx)} samples, need {need}"
        )
    if len(rest_idx) < need:
        raise CapacityError(
            f"remaining classes have {len(rest_idx)} samples, need {need}"
        )

    rng = np.random.default_rng([seed, anomaly_class])
    anom_sel = rng.permutation(anom_idx)[:need]
    norm_sel = rng.choice(rest_idx, size=need, replace=False)

    idx = {
        "train_anomalous": np.sort(anom_sel[:train_per_class]),
        "test_anomalous": np.sort(anom_sel[train_per_class:]),
        "train_normal": np.sort(norm_sel[:train_per_class]),
        "test_normal": np.sort(norm_sel[train_per_class:]),
    }
    return task_from_indices(image_set, idx, anomaly_class, seed)


def task_from_indices(image_set, indices, anomaly_class, seed):
    """Materialize an AnomalyTask from split membership indices."""
    def gather(ix):
        imgs = image_set.images
        if isinstance(imgs, np.ndarray):
            return imgs[ix]
        return [imgs[i] for i in ix]

    return AnomalyTask(
        train_normal=gather(indices["train_normal"]),
        train_anomalous=gather(indices["train_anomalous"]),
        test_normal=gather(indices["test_normal"]),
        test_anomalous=gather(indices["test_anomalous"]),
        anomaly_class=int(anomaly_class),
        seed=int(seed),
        source_indices={k: np.asarray(v, dtype=np.int64) for k, v in indices.items()},
    )


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(image, target_hw):
    """Grayscale replication to 3 channels, then bilinear resize.

    Channel replication happens before resizing; values stay in [0,1].
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeError(f"preprocess expects [1|3,H,W] image, got {image.shape}")
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return _bilinear_resize(image, int(target_hw[0]), int(target_hw[1]))


def _bilinear_resize(image, out_h, out_w):
    """Half-pixel-centered bilinear resample of a [C,H,W] image."""
    C, H, W = image.shape
    if (H, W) == (out_h, out_w):
        return image.astype(np.float32, copy=True)
    src = image.astype(np.float64)

    ys = np.clip((np.arange(out_h) + 0.5) * (H / out_h) - 0.5, 0.0, H - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (W / out_w) - 0.5, 0.0, W - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]

    top = src[:, y0][:, :, x0] * (1.0 - wx) + src[:, y0][:, :, x1] * wx
    bot = src[:, y1][:, :, x0] * (1.0 - wx) + src[:, y1][:, :, x1] * wx
    out = top * (1.0 - wy) + bot * wy
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def preprocess_split(images, target_hw):
    """Preprocess a sequence of images into one stacked [N,3,H,W] array."""
    return np.stack([preprocess(img, target_hw) for img in images])


def preprocess_task(task, target_hw):
    """New AnomalyTask whose splits are stacked preprocessed arrays."""
    return AnomalyTask(
        train_normal=preprocess_split(task.train_normal, target_hw),
        train_anomalous=preprocess_split(task.train_anomalous, target_hw),
        test_normal=preprocess_split(task.test_normal, target_hw),
        test_anomalous=preprocess_split(task.test_anomalous, target_hw),
        anomaly_class=task.anomaly_class,
        seed=task.seed,
        source_indices=task.source_indices,
    )


# ---------------------------------------------------------------------------
# batching


def batch_iter(images, labels, batch_size, shuffle, seed, epoch=0):
    """Yield (image_batch, label_batch) covering every sample exactly once.

    The final partial batch is emitted. Shuffle order is a fresh seeded
    permutation per epoch, drawn from (seed, epoch).
    """
    if batch_size < 1:
        raise ShapeError(f"batch_size must be >= 1, got {batch_size}")
    n = len(labels)
    order = (
        np.random.default_rng([seed, epoch]).permutation(n)
        if shuffle else np.arange(n)
    )
    images = np.asarray(images)
    labels = np.asarray(labels)
    for start in range(0, n, batch_size):
        sel = order[start:start + batch_size]
        yield images[sel], labels[sel]
