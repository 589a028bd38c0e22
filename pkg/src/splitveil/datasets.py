"""CIFAR-10 binary ingestion and a procedurally rendered shapes dataset.

All images leave this module channel-first, float64, normalized to [-1, 1]
with mean 0.5 and std 0.5 per channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DatasetFormatError(ValueError):
    pass


def normalize(x01: np.ndarray) -> np.ndarray:
    return (np.asarray(x01, dtype=np.float64) - 0.5) / 0.5


def denormalize(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * 0.5 + 0.5


def to_unit_range(x: np.ndarray) -> np.ndarray:
    """Denormalize and clip floating error so the result is a valid [0,1] image."""
    return np.clip(denormalize(x), 0.0, 1.0)


@dataclass
class DatasetSplit:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    aux_x: np.ndarray
    aux_y: np.ndarray
    num_classes: int
    train_ids: np.ndarray
    test_ids: np.ndarray
    aux_ids: np.ndarray

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])

    def summary(self) -> dict:
        return {"train": len(self.train_y), "test": len(self.test_y), "aux": len(self.aux_y),
                "classes": self.num_classes, "image_shape": list(self.image_shape)}


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch into uint8 images ``(N,3,32,32)`` and labels."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        offset = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise DatasetFormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"({len(raw) - offset} of {CIFAR_RECORD} bytes present)")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise DatasetFormatError(f"{path}: label {labels[bad[0]]} >= {CIFAR_CLASSES} "
                                 f"at byte offset {int(bad[0]) * CIFAR_RECORD}")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def _carve_aux(n: int, aux_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_aux = int(round(n * aux_fraction))
    return np.sort(perm[n_aux:]), np.sort(perm[:n_aux])


def load_cifar10(path, aux_fraction: float = 0.2, seed: int = 0,
                 train_limit: int | None = None, test_limit: int | None = None) -> DatasetSplit:
    """Load CIFAR-10 from ``path`` (the ``cifar-10-batches-bin`` directory).

    The attacker's auxiliary split is carved from the training pool with a
    seeded permutation; limits take the leading records of each pool.
    """
    path = Path(path)
    train_files = [path / f for f in CIFAR_TRAIN_FILES if (path / f).exists()]
    if not train_files:
        raise FileNotFoundError(f"no CIFAR-10 training batches under {path}")
    if not (path / CIFAR_TEST_FILE).exists():
        raise FileNotFoundError(f"missing {path / CIFAR_TEST_FILE}")
    parts = [read_cifar_batch(f) for f in train_files]
    pool_x = np.concatenate([p[0] for p in parts])
    pool_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = read_cifar_batch(path / CIFAR_TEST_FILE)
    if train_limit is not None:
        pool_x, pool_y = pool_x[:train_limit], pool_y[:train_limit]
    if test_limit is not None:
        test_x, test_y = test_x[:test_limit], test_y[:test_limit]
    train_idx, aux_idx = _carve_aux(len(pool_y), aux_fraction, np.random.default_rng([seed, 0xA0]))
    pool = normalize(pool_x / 255.0)
    return DatasetSplit(
        train_x=pool[train_idx], train_y=pool_y[train_idx],
        test_x=normalize(test_x / 255.0), test_y=test_y,
        aux_x=pool[aux_idx], aux_y=pool_y[aux_idx],
        num_classes=CIFAR_CLASSES,
        train_ids=train_idx, aux_ids=aux_idx,
        test_ids=np.arange(len(test_y)) + len(pool_y),
    )


def _class_palette(k: int, num_classes: int) -> np.ndarray:
    hue = k / num_classes
    # HSV with full saturation/value -> RGB
    h6 = hue * 6.0
    x = 1.0 - abs(h6 % 2.0 - 1.0)
    table = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)]
    return 0.15 + 0.8 * np.array(table[int(h6) % 6], dtype=np.float64)


def _class_anchor(k: int, num_classes: int, h: int, w: int) -> tuple[float, float]:
    cols = int(np.ceil(np.sqrt(num_classes)))
    rows = int(np.ceil(num_classes / cols))
    r, c = divmod(k, cols)
    return (r + 0.5) * h / rows, (c + 0.5) * w / cols


def render_shape(k: int, num_classes: int, h: int, w: int, rng: np.random.Generator,
                 jitter: float = 1.0) -> np.ndarray:
    """One [0,1] image of class ``k``: a rectangle (even k) or disc (odd k) on a noisy background."""
    bg = rng.uniform(0.1, 0.45, size=3)
    img = np.broadcast_to(bg[:, None, None], (3, h, w)).copy()
    cy, cx = _class_anchor(k, num_classes, h, w)
    cy += rng.normal(0, jitter * h / 16)
    cx += rng.normal(0, jitter * w / 16)
    size = (0.22 + 0.06 * rng.uniform(-jitter, jitter)) * min(h, w)
    color = np.clip(_class_palette(k, num_classes) + rng.normal(0, 0.05 * jitter, size=3), 0, 1)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if k % 2 == 0:
        mask = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= 0.7 * size)
    else:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
    img[:, mask] = color[:, None]
    img += rng.normal(0, 0.03 * jitter, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_shapes(n: int, num_classes: int, dims=(16, 16), seed: int = 0, test_fraction: float = 0.2,
                     aux_fraction: float = 0.2, jitter: float = 1.0) -> DatasetSplit:
    """Balanced, seeded dataset whose class fixes shape color, kind and position.

    ``n`` images are rendered (class ``i % num_classes`` for image ``i``), then
    split into test, attacker-auxiliary and train portions.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    h, w = (dims, dims) if np.isscalar(dims) else tuple(dims)
    if h % 8 or w % 8 or h <= 0 or w <= 0:
        raise ValueError(f"image dims must be positive multiples of 8, got {h}x{w}")
    if n < num_classes:
        raise ValueError("n must be at least the number of classes")
    rng = np.random.default_rng([seed, 0x5A])
    labels = np.arange(n) % num_classes
    images = np.stack([render_shape(int(k), num_classes, h, w, rng, jitter) for k in labels])
    perm = np.random.default_rng([seed, 0x5B]).permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx = np.sort(perm[:n_test])
    rest = perm[n_test:]
    n_aux = int(round(len(rest) * aux_fraction))
    aux_idx = np.sort(rest[:n_aux])
    train_idx = np.sort(rest[n_aux:])
    x = normalize(images)
    return DatasetSplit(
        train_x=x[train_idx], train_y=labels[train_idx],
        test_x=x[test_idx], test_y=labels[test_idx],
        aux_x=x[aux_idx], aux_y=labels[aux_idx],
        num_classes=num_classes,
        train_ids=train_idx, test_ids=test_idx, aux_ids=aux_idx,
    )


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Yield index arrays covering ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
