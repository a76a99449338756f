"""Image set container, synthetic fine-grained generator, and on-disk format.

On disk a dataset is a directory holding ``manifest.csv`` (header
``relative_path,label``), optional ``classes.txt`` (one class name per line),
and one raw file per image::

    b"CCIM" | u16 height | u16 width | u16 channels | u8 pixels, row-major (H, W, C)

Integers are little-endian.  Pixels are stored as ``round(255 * value)``, so
images whose values are already multiples of 1/255 round-trip exactly.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from cocokit.crc import Dictionary

IMAGE_MAGIC = b"CCIM"
_HEADER = struct.Struct("<4sHHH")


class DatasetError(ValueError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)
    glyphs: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, H, W, C), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError("one label per image required")
        if not self.class_names:
            k = int(self.labels.max()) + 1 if self.labels.size else 0
            self.class_names = [f"class{i}" for i in range(k)]
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label outside the class list")

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx) -> "LabeledImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledImageSet(self.images[idx], self.labels[idx], list(self.class_names), self.glyphs)

    def resized(self, size: int | None) -> "LabeledImageSet":
        """Bilinear resize to ``size x size``; a no-op when already that size."""
        if size is None or self.images.shape[1:3] == (size, size):
            return self
        N, H, W, C = self.images.shape
        zoom = (1, size / H, size / W, 1)
        out = np.clip(ndimage.zoom(self.images, zoom, order=1, grid_mode=True, mode="nearest"), 0, 1)
        return LabeledImageSet(out, self.labels, list(self.class_names), self.glyphs)


# -- synthetic data ----------------------------------------------------------

def _smooth_texture(rng, size, channels, cells):
    coarse = rng.random((cells, cells, channels))
    tex = ndimage.zoom(coarse, (size / cells, size / cells, 1), order=3, mode="grid-wrap",
                       grid_mode=True)
    tex -= tex.min()
    tex /= max(tex.max(), 1e-12)
    return tex


def class_sizes_for(classes: int, per_class: int, long_tail: bool, decay: float, min_size: int):
    if not long_tail:
        return [per_class] * classes
    return [max(min_size, int(round(per_class * decay**i))) for i in range(classes)]


def synth_finegrained(classes: int = 8, per_class: int = 100, image_size: int = 32,
                      background_textures: int = 6, glyph_contrast: float = 0.6,
                      long_tail: bool = False, seed: int = 0, *, jitter: int = 3,
                      glyph_size: int = 5, flip_fraction: float = 0.3, decay: float = 0.75,
                      min_class_size: int = 5, noise: float = 0.03,
                      channels: int = 3) -> LabeledImageSet:
    """Images of one faint class-specific glyph on a busy shared background.

    Every class glyph is a copy of one shared ``glyph_size`` square sign
    pattern with a class-specific ``flip_fraction`` of its cells inverted, so
    classes differ only in a few cells.  Each image draws one of
    ``background_textures`` smooth textures (randomly rolled and re-lit),
    adds the glyph at the centre shifted by up to ``jitter`` pixels, scaled
    by ``glyph_contrast``, and adds pixel noise.  With ``long_tail`` class
    ``i`` gets ``round(per_class * decay**i)`` samples.
    """
    if classes < 2:
        raise DatasetError("need at least two classes")
    if glyph_size + 2 * jitter > image_size:
        raise DatasetError(f"glyph of size {glyph_size} with jitter {jitter} "
                           f"does not fit a {image_size}px image")
    rng = np.random.default_rng(seed)
    base = rng.choice([-1.0, 1.0], size=(glyph_size, glyph_size))
    glyphs = np.empty((classes, glyph_size, glyph_size))
    n_flip = max(1, int(round(flip_fraction * glyph_size**2)))
    for c in range(classes):
        g = base.copy().ravel()
        g[rng.choice(g.size, size=n_flip, replace=False)] *= -1
        glyphs[c] = g.reshape(glyph_size, glyph_size)
    tint = 0.6 + 0.4 * rng.random(channels)
    textures = [_smooth_texture(rng, image_size, channels, cells=int(rng.integers(3, 7)))
                for _ in range(background_textures)]

    sizes = class_sizes_for(classes, per_class, long_tail, decay, min_class_size)
    labels = np.repeat(np.arange(classes), sizes)
    rng.shuffle(labels)
    images = np.empty((labels.size, image_size, image_size, channels))
    top = (image_size - glyph_size) // 2
    for i, c in enumerate(labels):
        tex = textures[int(rng.integers(background_textures))]
        shift = rng.integers(0, image_size, size=2)
        bg = np.roll(tex, tuple(shift), axis=(0, 1))
        bg = 0.15 + 0.7 * bg * rng.uniform(0.7, 1.0) + rng.uniform(-0.1, 0.1)
        dy, dx = rng.integers(-jitter, jitter + 1, size=2)
        y0, x0 = top + dy, top + dx
        bg[y0:y0 + glyph_size, x0:x0 + glyph_size, :] += (
            glyph_contrast * 0.5 * glyphs[c][:, :, None] * tint)
        bg += noise * rng.standard_normal(bg.shape)
        images[i] = bg
    images = np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    names = [f"species{c}" for c in range(classes)]
    return LabeledImageSet(images, labels, names, glyphs)


# -- raw image files -----------------------------------------------------------

def encode_image(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3:
        raise DatasetError(f"image must be (H, W, C), got {img.shape}")
    H, W, C = img.shape
    px = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return _HEADER.pack(IMAGE_MAGIC, H, W, C) + px.tobytes()


def decode_image(buf: bytes, where: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise DatasetError(f"{where}: truncated image header")
    magic, H, W, C = _HEADER.unpack_from(buf)
    if magic != IMAGE_MAGIC:
        raise DatasetError(f"{where}: bad magic {magic!r}")
    expected = _HEADER.size + H * W * C
    if len(buf) != expected:
        raise DatasetError(f"{where}: expected {expected} bytes for {H}x{W}x{C}, got {len(buf)}")
    px = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size).reshape(H, W, C)
    return px.astype(np.float64) / 255.0


def save_dataset(ds: LabeledImageSet, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    width = max(5, len(str(len(ds))))
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        rel = f"images/{i:0{width}d}.ccim"
        (out / rel).write_bytes(encode_image(img))
        rows.append((rel, int(lab)))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["relative_path", "label"])
        w.writerows(rows)
    (out / "classes.txt").write_text("".join(f"{n}\n" for n in ds.class_names))
    return out / "manifest.csv"


def _read_rows(path: Path):
    with open(path, newline="") as fh:
        rows = [(i, r) for i, r in enumerate(csv.reader(fh), start=1) if r and any(c.strip() for c in r)]
    if not rows:
        raise DatasetError(f"{path}: no samples")
    return rows


def load_features(path) -> Dictionary:
    """Read a ``label,f1,...,fd`` CSV into a class-sorted :class:`Dictionary`."""
    path = Path(path)
    rows = _read_rows(path)
    if rows[0][1][0].strip().lower() == "label":
        rows = rows[1:]
    if not rows:
        raise DatasetError(f"{path}: no samples")
    d = len(rows[0][1]) - 1
    labels, feats = [], []
    for lineno, r in rows:
        if len(r) - 1 != d or d < 1:
            raise DatasetError(f"{path}:{lineno}: expected {d + 1} fields, got {len(r)}")
        try:
            labels.append(int(r[0]))
            feats.append([float(v) for v in r[1:]])
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        if labels[-1] < 0:
            raise DatasetError(f"{path}:{lineno}: unknown label {labels[-1]}")
    return Dictionary.from_samples(np.array(feats).T, labels)


def load_dataset(manifest_path, resize_to: int | None = None):
    """Load an image manifest, or a feature CSV (detected by a ``label`` header).

    Image manifests return a :class:`LabeledImageSet`; feature CSVs return a
    :class:`~cocokit.crc.Dictionary`.
    """
    path = Path(manifest_path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows = _read_rows(path)
    head = [c.strip().lower() for c in rows[0][1]]
    if head and head[0] == "label":
        return load_features(path)
    if head == ["relative_path", "label"]:
        rows = rows[1:]
    if not rows:
        raise DatasetError(f"{path}: no samples")
    classes_file = path.parent / "classes.txt"
    names = classes_file.read_text().split("\n")[:-1] if classes_file.exists() else None
    images, labels, shape = [], [], None
    for lineno, r in rows:
        if len(r) != 2:
            raise DatasetError(f"{path}:{lineno}: expected 'relative_path,label'")
        rel, lab = r[0].strip(), r[1].strip()
        try:
            lab = int(lab)
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: unknown label {lab!r}") from None
        if lab < 0 or (names is not None and lab >= len(names)):
            raise DatasetError(f"{path}:{lineno}: unknown label {lab}")
        img_path = path.parent / rel
        try:
            buf = img_path.read_bytes()
        except OSError as exc:
            raise DatasetError(f"{path}:{lineno}: cannot read {rel}: {exc.strerror}") from None
        img = decode_image(buf, f"{path}:{lineno}")
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DatasetError(f"{path}:{lineno}: image {img.shape} differs from {shape}")
        images.append(img)
        labels.append(lab)
    if names is None:
        names = [f"class{i}" for i in range(max(labels) + 1)]
    ds = LabeledImageSet(np.stack(images), np.array(labels), names)
    return ds.resized(resize_to)
