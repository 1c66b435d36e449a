"""Datasets: IDX files, synthetic generators, augmentation and the corruption suite."""

from __future__ import annotations

import gzip
import io
import os
import struct
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IDXError(ValueError):
    """Malformed or inconsistent IDX input."""


@dataclass
class Dataset:
    """Images in [0, 1] with shape (N, C, H, W) and integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    provenance: str = ""
    num_classes: Optional[int] = None
    domains: Optional[np.ndarray] = None
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("images and labels disagree on N")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        self.validate()

    def validate(self) -> None:
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, index, split: Optional[str] = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], split or self.split,
                       self.provenance, self.num_classes,
                       None if self.domains is None else self.domains[index], dict(self.meta))

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None,
                drop_last: bool = True) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        stop = len(order) - (len(order) % batch_size if drop_last else 0)
        for i in range(0, stop, batch_size):
            idx = order[i:i + batch_size]
            yield self.images[idx], self.labels[idx]


# ---------------------------------------------------------------------------
# IDX


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 16:
        raise IDXError(f"{path}: truncated header")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise IDXError(f"{path}: bad image magic 0x{magic:08x}")
    need = n * h * w
    if len(raw) - 16 < need:
        raise IDXError(f"{path}: truncated, expected {need} pixel bytes, found {len(raw) - 16}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=16).reshape(n, h, w)


def read_idx_labels(path) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise IDXError(f"{path}: truncated header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise IDXError(f"{path}: bad label magic 0x{magic:08x}")
    if len(raw) - 8 < n:
        raise IDXError(f"{path}: truncated, expected {n} labels, found {len(raw) - 8}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8)


def write_idx_images(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3:
        raise ValueError("expected a uint8 array of shape (N, H, W)")
    n, h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(pixels).tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("labels must be a 1-D array of byte values")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def load_idx_pair(images_path, labels_path, split: str = "train",
                  num_classes: Optional[int] = None) -> Dataset:
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise IDXError(f"image count {len(pixels)} != label count {len(labels)}")
    images = pixels[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), split,
                   f"idx:{os.path.basename(os.fspath(images_path))}", num_classes)


IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_idx_dir(directory, split: str = "train", limit: Optional[int] = None) -> Dataset:
    """Load the standard MNIST file pair for ``split`` from ``directory`` (``.gz`` optional)."""
    names = IDX_NAMES[split]
    paths = []
    for name in names:
        for candidate in (name, name + ".gz"):
            p = os.path.join(directory, candidate)
            if os.path.exists(p):
                paths.append(p)
                break
        else:
            raise FileNotFoundError(f"{name} not found in {directory}")
    ds = load_idx_pair(paths[0], paths[1], split, num_classes=10)
    return ds.subset(np.arange(min(limit, len(ds)))) if limit else ds


def save_idx_dir(directory, train: Dataset, test: Dataset) -> None:
    os.makedirs(directory, exist_ok=True)
    for split, ds in (("train", train), ("test", test)):
        img_name, lab_name = IDX_NAMES[split]
        pixels = np.rint(ds.images[:, 0] * 255.0).astype(np.uint8)
        write_idx_images(os.path.join(directory, img_name), pixels)
        write_idx_labels(os.path.join(directory, lab_name), ds.labels)


# ---------------------------------------------------------------------------
# synthetic generators


def synth_two_domain(n_per_domain: int, shift: float = 0.5, noise_sigma: float = 0.1,
                     seed: int = 0, image_size: int = 8) -> Dataset:
    """Two classes drawn from two domains whose pixel means differ by ``shift``.

    Class 0 images sit around 0.25 and class 1 around 0.45 (plus a faint
    class-specific stripe); domain 1 adds ``shift`` to every pixel.  Domain ids
    are kept in ``Dataset.domains``.
    """
    if n_per_domain < 2:
        raise ValueError("need at least 2 samples per domain")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if not 0 <= shift <= 0.5:
        raise ValueError("shift must lie in [0, 0.5] to stay inside the pixel range")
    rng = np.random.default_rng(seed)
    n = 2 * n_per_domain
    domains = np.repeat([0, 1], n_per_domain)
    labels = np.tile(np.arange(n_per_domain) % 2, 2)
    stripe = np.zeros((image_size, image_size))
    stripe[:, image_size // 2:] = 0.05
    base = 0.25 + 0.2 * labels[:, None, None] + np.where(labels[:, None, None] == 1, stripe, -stripe)
    images = base + shift * domains[:, None, None] + noise_sigma * rng.standard_normal((n, image_size, image_size))
    images = np.clip(images, 0.0, 1.0)[:, None]
    return Dataset(images, labels, "train", f"synth_two_domain(shift={shift},sigma={noise_sigma},seed={seed})",
                   2, domains)


def synth_blobs(n: int, seed: int = 0, image_size: int = 8, num_classes: int = 2,
                noise_sigma: float = 0.1, template_seed: Optional[int] = None) -> Dataset:
    """Class-template images plus Gaussian noise; linearly separable at low noise.

    Templates come from ``template_seed`` (default ``seed``), so train and test
    draws can share class templates while using different noise.
    """
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    templates = np.random.default_rng(seed if template_seed is None else template_seed).uniform(
        0.2, 0.8, size=(num_classes, image_size, image_size))
    rng = np.random.default_rng([seed, 1])
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = templates[labels] + noise_sigma * rng.standard_normal((n, image_size, image_size))
    return Dataset(np.clip(images, 0.0, 1.0)[:, None], labels, "train",
                   f"synth_blobs(n={n},seed={seed})", num_classes)


def _arc(cx, cy, rx, ry, start, stop, num=24):
    t = np.radians(np.linspace(start, stop, num))
    return list(zip(cx + rx * np.cos(t), cy + ry * np.sin(t)))


# Strokes in a unit box (x right, y down); angles in degrees, 0 = east, 90 = south.
DIGIT_STROKES: Dict[int, List[List[Tuple[float, float]]]] = {
    0: [_arc(0.5, 0.5, 0.27, 0.38, 0, 360, 40)],
    1: [[(0.36, 0.24), (0.52, 0.1), (0.52, 0.9)]],
    2: [_arc(0.5, 0.33, 0.25, 0.22, 200, 380) + [(0.25, 0.88), (0.8, 0.88)]],
    3: [_arc(0.48, 0.3, 0.24, 0.2, 210, 450), _arc(0.48, 0.68, 0.27, 0.22, 270, 510)],
    4: [[(0.62, 0.9), (0.62, 0.1), (0.2, 0.64), (0.82, 0.64)]],
    5: [[(0.76, 0.12), (0.32, 0.12), (0.28, 0.46)] + _arc(0.48, 0.64, 0.26, 0.23, 240, 500)[1:]],
    6: [[(0.7, 0.12)] + _arc(0.62, 0.62, 0.4, 0.5, 240, 180, 8)[1:] + _arc(0.5, 0.67, 0.24, 0.22, 180, 540)],
    7: [[(0.2, 0.12), (0.8, 0.12), (0.42, 0.9)]],
    8: [_arc(0.5, 0.3, 0.2, 0.18, 0, 360), _arc(0.5, 0.69, 0.24, 0.21, 0, 360)],
    9: [_arc(0.5, 0.33, 0.22, 0.21, 0, 360), [(0.72, 0.33), (0.62, 0.9)]],
}


def _render_digit(digit: int, rng: np.random.Generator, size: int, canvas: int,
                  rotation: float, jitter: float) -> np.ndarray:
    angle = np.radians(rng.uniform(-rotation, rotation))
    shear = rng.uniform(-0.3, 0.3)
    scale = rng.uniform(0.7, 1.05)
    aspect = rng.uniform(0.75, 1.25)
    shift = rng.uniform(-0.1, 0.1, size=2)
    a = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    a = a @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([scale * aspect, scale])
    width = int(round(canvas * rng.uniform(0.06, 0.13)))
    img = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(img)
    for stroke in DIGIT_STROKES[digit]:
        pts = np.asarray(stroke) - 0.5
        pts = pts + rng.normal(0.0, jitter, size=pts.shape)
        pts = pts @ a.T + 0.5 + shift
        xy = [(float(px * canvas), float(py * canvas)) for px, py in pts]
        draw.line(xy, fill=255, width=width, joint="curve")
        r = width / 2
        for px, py in (xy[0], xy[-1]):
            draw.ellipse((px - r, py - r, px + r, py + r), fill=255)
    small = img.resize((size, size), Image.Resampling.BOX)
    return np.asarray(small, dtype=np.float64) / 255.0 * rng.uniform(0.6, 1.0)


def synth_digits(n: int, seed: int = 0, size: int = 28, *, rotation: float = 40.0,
                 jitter: float = 0.05, noise_sigma: float = 0.15, background: float = 0.35,
                 clutter: float = 1.0) -> Dataset:
    """MNIST-like 28x28 digits rendered from jittered strokes, in the spirit of
    the rotated / background-image MNIST variants.

    Each digit gets a random affine distortion (rotation up to ``rotation``
    degrees), stroke width, intensity and control-point jitter.  With
    probability ``clutter`` a fragment of another digit is pasted in; a smooth
    random background of amplitude ``background`` and Gaussian pixel noise
    are added last.
    """
    rng = np.random.default_rng(seed)
    canvas = size * 4
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = np.empty((n, 1, size, size))
    for i, d in enumerate(labels):
        img = _render_digit(int(d), rng, size, canvas, rotation, jitter)
        if rng.random() < clutter:
            other = _render_digit(int(rng.integers(10)), rng, size, canvas, rotation, jitter)
            mask = np.zeros_like(other)
            r0, c0 = rng.integers(0, size - 12, size=2)
            mask[r0:r0 + 12, c0:c0 + 12] = 1.0
            img = np.maximum(img, 0.8 * other * mask)
        if background:
            field = ndimage.gaussian_filter(rng.standard_normal((size, size)), 3.0, mode="wrap")
            field = (field - field.min()) / (np.ptp(field) + 1e-12)
            img = np.maximum(img, background * field)
        img = img + noise_sigma * rng.standard_normal(img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    # quantize to bytes so an IDX round trip is exact
    images = np.rint(images * 255.0) / 255.0
    return Dataset(images, labels, "train", f"synth_digits(n={n},seed={seed})", 10)


TEST_SEED_OFFSET = 1_000_003


def digit_split(split: str, n: int, seed: int = 0) -> Dataset:
    """The train or test portion of the synthetic digit set (disjoint seeds)."""
    ds = synth_digits(n, seed=seed if split == "train" else seed + TEST_SEED_OFFSET)
    ds.split = split
    return ds


def make_digit_splits(n_train: int = 10000, n_test: int = 2000, seed: int = 0) -> Tuple[Dataset, Dataset]:
    return digit_split("train", n_train, seed), digit_split("test", n_test, seed)


# ---------------------------------------------------------------------------
# augmentation


def augment(images: np.ndarray, seed: int, flip: bool = True, crop_pad: int = 2,
            max_rotation: float = 15.0) -> np.ndarray:
    """Random horizontal flip (p=0.5), random crop after zero padding, random rotation."""
    rng = np.random.default_rng(seed)
    x = np.array(images, dtype=np.float64, copy=True)
    n, c, h, w = x.shape
    if flip:
        mask = rng.random(n) < 0.5
        x[mask] = x[mask][..., ::-1]
    if crop_pad:
        padded = np.pad(x, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)))
        offs = rng.integers(0, 2 * crop_pad + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offs):
            x[i] = padded[i, :, dy:dy + h, dx:dx + w]
    if max_rotation:
        angles = rng.uniform(-max_rotation, max_rotation, size=n)
        for i, ang in enumerate(angles):
            x[i] = ndimage.rotate(x[i], ang, axes=(1, 2), reshape=False, order=1, mode="constant")
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# corruptions

CORRUPTIONS = ("gaussian_noise", "shot_noise", "impulse_noise", "gaussian_blur",
               "contrast", "brightness", "pixelate", "jpeg_blockiness")
SEVERITIES = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


def corruption_suite() -> List[CorruptionSpec]:
    return [CorruptionSpec(k, s) for k in CORRUPTIONS for s in SEVERITIES]


def parse_kv_text(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_corruption_table(path=None) -> Dict[Tuple[str, int], float]:
    """Severity constants, from ``path`` or the packaged ``corruptions.cfg``."""
    if path is None:
        text = resources.files("advprop_lab").joinpath("corruptions.cfg").read_text()
    else:
        with open(path) as f:
            text = f.read()
    table: Dict[Tuple[str, int], float] = {}
    for key, value in parse_kv_text(text).items():
        kind, _, sev = key.rpartition(".")
        spec = CorruptionSpec(kind, int(sev))
        table[(spec.kind, spec.severity)] = float(value)
    missing = [(c.kind, c.severity) for c in corruption_suite() if (c.kind, c.severity) not in table]
    if missing:
        raise ValueError(f"corruption table is missing entries: {missing}")
    return table


_DEFAULT_TABLE: Optional[Dict[Tuple[str, int], float]] = None


def default_table() -> Dict[Tuple[str, int], float]:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = load_corruption_table()
    return _DEFAULT_TABLE


def _resize(plane: np.ndarray, h: int, w: int, method) -> np.ndarray:
    img = Image.fromarray(plane.astype(np.float32), mode="F")
    return np.asarray(img.resize((w, h), method), dtype=np.float64)


def _jpeg(plane: np.ndarray, quality: int) -> np.ndarray:
    img = Image.fromarray(np.rint(plane * 255.0).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    return np.asarray(Image.open(buf), dtype=np.float64) / 255.0


def apply_corruption(images: np.ndarray, kind: str, value: float, seed: int = 0) -> np.ndarray:
    """Apply ``kind`` with an explicit strength ``value`` (the severity-table entry)."""
    x = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n, c, h, w = x.shape
    if kind == "gaussian_noise":
        out = x + value * rng.standard_normal(x.shape) if value > 0 else x.copy()
    elif kind == "shot_noise":
        out = rng.poisson(x * value) / value
    elif kind == "impulse_noise":
        out = x.copy()
        u = rng.random(x.shape)
        out[u < value / 2] = 0.0
        out[(u >= value / 2) & (u < value)] = 1.0
    elif kind == "gaussian_blur":
        out = ndimage.gaussian_filter(x, sigma=(0, 0, value, value), mode="nearest")
    elif kind == "contrast":
        means = x.mean(axis=(1, 2, 3), keepdims=True)
        out = (x - means) * value + means
    elif kind == "brightness":
        out = x + value
    elif kind == "pixelate":
        sh, sw = max(1, int(round(h * value))), max(1, int(round(w * value)))
        out = np.empty_like(x)
        for i in range(n):
            for j in range(c):
                small = _resize(x[i, j], sh, sw, Image.Resampling.BOX)
                out[i, j] = _resize(small, h, w, Image.Resampling.NEAREST)
    elif kind == "jpeg_blockiness":
        out = np.empty_like(x)
        for i in range(n):
            for j in range(c):
                out[i, j] = _jpeg(x[i, j], int(value))
    else:
        raise ValueError(f"unknown corruption {kind!r}")
    return np.clip(out, 0.0, 1.0)


def corrupt(images: np.ndarray, spec: CorruptionSpec, seed: int = 0,
            table: Optional[Dict[Tuple[str, int], float]] = None) -> np.ndarray:
    table = default_table() if table is None else table
    return apply_corruption(images, spec.kind, table[(spec.kind, spec.severity)], seed)
