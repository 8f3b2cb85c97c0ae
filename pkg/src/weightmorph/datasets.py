"""IDX dataset ingestion plus a hermetic procedural digit generator.

Real MNIST is read from disk in the standard IDX container (big-endian
magic 0x00000803 for images, 0x00000801 for labels, optionally gzipped);
nothing here touches the network. For environments without the files, the
generator in this module renders stroke-based digits into the exact same
IDX format, so every downstream stage is format-identical either way.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


class DatasetError(ValueError):
    """Dataset files are missing, truncated, or malformed."""


def _read_bytes(path: Path) -> bytes:
    blob = path.read_bytes()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def load_idx_images(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = _read_bytes(path)
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from None
    if len(blob) < 16:
        raise DatasetError(f"{path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != IMAGES_MAGIC:
        raise DatasetError(f"{path}: bad image magic 0x{magic:08x}")
    expect = 16 + n * rows * cols
    if len(blob) != expect:
        raise DatasetError(f"{path}: expected {expect} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, rows, cols).copy()


def load_idx_labels(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = _read_bytes(path)
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from None
    if len(blob) < 8:
        raise DatasetError(f"{path}: truncated IDX header")
    magic, n = struct.unpack(">II", blob[:8])
    if magic != LABELS_MAGIC:
        raise DatasetError(f"{path}: bad label magic 0x{magic:08x}")
    if len(blob) != 8 + n:
        raise DatasetError(f"{path}: expected {8 + n} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, offset=8).astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


@dataclass
class Dataset:
    """Raw u8 images [N,H,W] with int labels, train and test splits."""

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    def limited(self, n_train: int) -> "Dataset":
        """First n_train training samples; the split files keep their order."""
        return Dataset(self.train_images[:n_train], self.train_labels[:n_train],
                       self.test_images, self.test_labels)


def _find(data_dir: Path, stem: str) -> Path:
    for cand in (data_dir / stem, data_dir / (stem + ".gz")):
        if cand.exists():
            return cand
    raise DatasetError(f"missing {stem}[.gz] in {data_dir}")


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DatasetError(f"data directory not found: {data_dir}")
    ds = Dataset(
        train_images=load_idx_images(_find(data_dir, TRAIN_IMAGES)),
        train_labels=load_idx_labels(_find(data_dir, TRAIN_LABELS)),
        test_images=load_idx_images(_find(data_dir, TEST_IMAGES)),
        test_labels=load_idx_labels(_find(data_dir, TEST_LABELS)),
    )
    if len(ds.train_images) != len(ds.train_labels):
        raise DatasetError("train image/label counts differ")
    if len(ds.test_images) != len(ds.test_labels):
        raise DatasetError("test image/label counts differ")
    return ds


def mean_std(images: np.ndarray) -> tuple[float, float]:
    """Pixel mean/std of images scaled to [0,1], for normalization metadata."""
    x = images.astype(np.float64) / 255.0
    return float(x.mean()), float(x.std())


def normalize(images: np.ndarray, mean: float, std: float) -> np.ndarray:
    """u8 [N,H,W] -> float32 [N,1,H,W], (x/255 - mean)/std."""
    x = images.astype(np.float32) / np.float32(255.0)
    x = (x - np.float32(mean)) / np.float32(std)
    return x[:, None, :, :]


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering a shuffled epoch (last batch may be short)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# procedural digits
#
# Each class is a set of strokes in the unit square (y grows downward):
# ("line", x0, y0, x1, y1) or ("arc", cx, cy, rx, ry, deg0, deg1) with the
# angle convention x = cx + rx*cos(a), y = cy + ry*sin(a). Samples get a
# random affine (rotation/scale/shear/shift) and stroke-width jitter, then
# are rasterized into MNIST-like 28x28 grayscale.

DIGIT_STROKES: dict = {
    0: [("arc", .50, .50, .26, .36, 0, 360)],
    1: [("line", .40, .28, .55, .14), ("line", .55, .14, .55, .86)],
    2: [("arc", .50, .34, .23, .19, 160, 360),
        ("line", .72, .40, .28, .84), ("line", .28, .84, .74, .84)],
    3: [("arc", .47, .31, .23, .17, 230, 450),
        ("arc", .47, .68, .25, .19, 270, 490)],
    4: [("line", .58, .12, .24, .56), ("line", .24, .56, .80, .56),
        ("line", .62, .30, .62, .88)],
    5: [("line", .70, .14, .34, .14), ("line", .34, .14, .31, .47),
        ("arc", .45, .63, .25, .21, 230, 480)],
    6: [("line", .60, .12, .38, .45), ("arc", .47, .64, .22, .20, 0, 360)],
    7: [("line", .26, .15, .74, .15), ("line", .74, .15, .42, .86),
        ("line", .36, .50, .64, .50)],
    8: [("arc", .50, .30, .19, .16, 0, 360), ("arc", .50, .66, .23, .19, 0, 360)],
    9: [("arc", .52, .34, .21, .18, 0, 360), ("line", .72, .40, .58, .86)],
}

_STEP = 0.012  # sampling pitch along strokes, in unit-square units


def _stroke_points(strokes) -> np.ndarray:
    pts = []
    for s in strokes:
        if s[0] == "line":
            _, x0, y0, x1, y1 = s
            length = float(np.hypot(x1 - x0, y1 - y0))
            n = max(2, int(length / _STEP))
            t = np.linspace(0.0, 1.0, n)
            pts.append(np.stack([x0 + (x1 - x0) * t, y0 + (y1 - y0) * t], axis=1))
        else:
            _, cx, cy, rx, ry, a0, a1 = s
            sweep = np.radians(a1 - a0)
            length = abs(sweep) * (rx + ry) / 2.0
            n = max(2, int(length / _STEP))
            a = np.radians(a0) + sweep * np.linspace(0.0, 1.0, n)
            pts.append(np.stack([cx + rx * np.cos(a), cy + ry * np.sin(a)], axis=1))
    return np.concatenate(pts, axis=0)


def _random_affine(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    ang = rng.uniform(-0.18, 0.18)
    shear = rng.uniform(-0.18, 0.18)
    sx, sy = rng.uniform(0.80, 1.12, size=2)
    c, s = np.cos(ang), np.sin(ang)
    rot = np.array([[c, -s], [s, c]])
    sh = np.array([[1.0, shear], [0.0, 1.0]])
    m = rot @ sh @ np.diag([sx, sy])
    t = rng.uniform(-0.04, 0.04, size=2)
    return m, t


def render_digit(label: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """One u8 [size,size] image of the given class with sampled jitter."""
    pts = _stroke_points(DIGIT_STROKES[label])
    m, t = _random_affine(rng)
    pts = (pts - 0.5) @ m.T
    pts = pts - pts.mean(axis=0) + 0.5 + t  # center ink mass, then jitter

    px = pts * (size - 8) + 4.0  # 4-pixel margin like standard MNIST framing
    sigma = rng.uniform(0.85, 1.35)
    intensity = rng.uniform(0.85, 1.0)

    r = 3
    offs = np.arange(-r, r + 1)
    dyx = np.stack(np.meshgrid(offs, offs, indexing="ij"), axis=-1).reshape(-1, 2)
    centers = np.rint(px).astype(np.int64)                    # [P,2] (x,y)
    grid = centers[:, None, :] + dyx[None, :, ::-1]           # [P,49,2] (x,y)
    d2 = ((grid - px[:, None, :]) ** 2).sum(axis=-1)
    vals = np.exp(-d2 / (2.0 * sigma * sigma)).reshape(-1)

    xs = grid[..., 0].reshape(-1)
    ys = grid[..., 1].reshape(-1)
    ok = (xs >= 0) & (xs < size) & (ys >= 0) & (ys < size)
    canvas = np.zeros(size * size, dtype=np.float64)
    np.maximum.at(canvas, ys[ok] * size + xs[ok], vals[ok])
    canvas = np.clip(canvas * intensity * 1.25, 0.0, 1.0)
    return np.rint(canvas.reshape(size, size) * 255.0).astype(np.uint8)


def synthesize_digits(n: int, seed: int, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """n rendered digits with balanced-random labels, deterministic in seed."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = np.empty((n, size, size), dtype=np.uint8)
    for i in range(n):
        images[i] = render_digit(int(labels[i]), rng, size)
    return images, labels.astype(np.int64)


def write_synthetic_dataset(data_dir, n_train: int = 8000, n_test: int = 2000,
                            seed: int = 0) -> None:
    """Emit the four standard IDX files into data_dir."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    tr_img, tr_lab = synthesize_digits(n_train, seed)
    te_img, te_lab = synthesize_digits(n_test, seed + 1)
    write_idx_images(data_dir / TRAIN_IMAGES, tr_img)
    write_idx_labels(data_dir / TRAIN_LABELS, tr_lab)
    write_idx_images(data_dir / TEST_IMAGES, te_img)
    write_idx_labels(data_dir / TEST_LABELS, te_lab)
