"""Captioned image datasets: synthetic shapes, folder ingestion, batching."""

import hashlib
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ConfigError

log = logging.getLogger(__name__)

COLORS = {
    "red": (220, 40, 40), "green": (40, 180, 60), "blue": (40, 80, 220),
    "yellow": (230, 220, 50), "cyan": (50, 210, 220), "magenta": (210, 50, 200),
    "orange": (240, 140, 30), "purple": (130, 50, 170),
}
BACKGROUNDS = {"black": (20, 20, 20), "white": (235, 235, 235), "gray": (128, 128, 128)}
SHAPES = ("circle", "square", "triangle")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")
CAPTION_RE = re.compile(r"^a (\w+) (\w+) on a (\w+) background$")


def caption_for(color, shape, background):
    return f"a {color} {shape} on a {background} background"


def parse_caption(caption):
    """Inverse of :func:`caption_for`; returns a dict or None if the grammar does not match."""
    m = CAPTION_RE.match(caption.strip().lower())
    if not m:
        return None
    return {"color": m.group(1), "shape": m.group(2), "background": m.group(3)}


@dataclass
class SyntheticSpec:
    shapes: list = field(default_factory=lambda: list(SHAPES))
    colors: list = field(default_factory=lambda: list(COLORS))
    backgrounds: list = field(default_factory=lambda: list(BACKGROUNDS))
    size_range: tuple = (0.22, 0.36)  # half-extent as a fraction of the side
    image_size: int = 64
    supersample: int = 4
    seed: int = 0

    def validate(self):
        for name in ("shapes", "colors", "backgrounds"):
            if not getattr(self, name):
                raise ConfigError(f"synthetic spec has an empty {name} set")
        for s in self.shapes:
            if s not in SHAPES:
                raise ConfigError(f"unknown shape {s!r}")
        for c in self.colors:
            if c not in COLORS:
                raise ConfigError(f"unknown color {c!r}")
        for b in self.backgrounds:
            if b not in BACKGROUNDS:
                raise ConfigError(f"unknown background {b!r}")
        return self

    @classmethod
    def from_config(cls, data_cfg):
        return cls(shapes=list(data_cfg.shapes), colors=list(data_cfg.colors),
                   backgrounds=list(data_cfg.backgrounds), image_size=data_cfg.image_size,
                   seed=data_cfg.seed).validate()


def _shape_mask(shape, cx, cy, half, size):
    """Boolean mask on a ``size`` x ``size`` grid of pixel centers."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half ** 2
    if shape == "square":
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    # upward isosceles triangle filling the box [cx-half, cx+half] x [cy-half, cy+half]
    top, bottom = cy - half, cy + half
    t = (ys - top) / (2 * half)
    return (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= t * half)


def render(shape, color, background, cx, cy, half, size=64, supersample=4):
    """Antialiased uint8 HxWx3 rendering via supersampling and box filtering."""
    big = size * supersample
    mask = _shape_mask(shape, cx * supersample, cy * supersample, half * supersample, big)
    cov = mask.reshape(size, supersample, size, supersample).mean(axis=(1, 3))[..., None]
    fg = np.array(COLORS[color], dtype=np.float64)
    bg = np.array(BACKGROUNDS[background], dtype=np.float64)
    return np.round(cov * fg + (1 - cov) * bg).astype(np.uint8)


def uint8_to_tensor(arr):
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def tensor_to_uint8(img):
    arr = ((img.detach().clamp(-1, 1).permute(1, 2, 0).numpy() + 1.0) * 127.5)
    return np.round(arr).astype(np.uint8)


class CaptionedDataset:
    """In-memory images (N, 3, S, S) in [-1, 1] with captions.

    Lower resolutions are produced on demand by box downsampling and cached.
    """

    def __init__(self, images, captions, attributes=None):
        if images.shape[0] != len(captions):
            raise ValueError("images and captions differ in length")
        self.images = images.clamp(-1, 1)
        self.captions = list(captions)
        self.attributes = attributes
        self._cache = {images.shape[-1]: self.images}

    def __len__(self):
        return len(self.captions)

    @property
    def resolution(self):
        return self.images.shape[-1]

    def images_at(self, res):
        if res not in self._cache:
            if res > self.resolution or self.resolution % res:
                raise ValueError(f"cannot derive {res}px images from {self.resolution}px data")
            self._cache[res] = F.avg_pool2d(self.images, self.resolution // res)
        return self._cache[res]

    def digest(self):
        h = hashlib.sha256()
        h.update(self.images.numpy().tobytes())
        h.update("\n".join(self.captions).encode())
        return h.hexdigest()[:16]


def generate_synthetic(spec, n):
    """Draw ``n`` captioned shape images deterministically from ``spec.seed``."""
    spec.validate()
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    images, captions, attrs = [], [], []
    for _ in range(n):
        shape = spec.shapes[rng.integers(len(spec.shapes))]
        color = spec.colors[rng.integers(len(spec.colors))]
        bg = spec.backgrounds[rng.integers(len(spec.backgrounds))]
        half = rng.uniform(*spec.size_range) * size
        cx = rng.uniform(half, size - half)
        cy = rng.uniform(half, size - half)
        arr = render(shape, color, bg, cx, cy, half, size, spec.supersample)
        images.append(uint8_to_tensor(arr))
        captions.append(caption_for(color, shape, bg))
        attrs.append({"color": color, "shape": shape, "background": bg})
    return CaptionedDataset(torch.stack(images), captions, attrs)


def export_folder(dataset, path):
    """Write ``NNNNN.png`` + ``NNNNN.txt`` pairs."""
    from PIL import Image

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, (img, cap) in enumerate(zip(dataset.images, dataset.captions)):
        Image.fromarray(tensor_to_uint8(img)).save(path / f"{i:05d}.png")
        (path / f"{i:05d}.txt").write_text(cap + "\n")
    return path


class FolderDataset(CaptionedDataset):
    """Image files with same-stem ``.txt`` captions, decoded on first access."""

    def __init__(self, files, captions, image_size):
        self.files = list(files)
        self.captions = list(captions)
        self.attributes = None
        self.image_size = image_size
        self._cache = {}

    @property
    def resolution(self):
        return self.image_size

    def load(self, i):
        from PIL import Image

        with Image.open(self.files[i]) as im:
            im = im.convert("RGB")
            w, h = im.size
            side = min(w, h)
            left, top = (w - side) // 2, (h - side) // 2
            im = im.crop((left, top, left + side, top + side))
            if side != self.image_size:
                im = im.resize((self.image_size, self.image_size), Image.BICUBIC)
            return uint8_to_tensor(np.asarray(im))

    @property
    def images(self):
        if self.image_size not in self._cache:
            self._cache[self.image_size] = torch.stack([self.load(i) for i in range(len(self.files))])
        return self._cache[self.image_size]

    def images_at(self, res):
        if res not in self._cache:
            base = self.images
            if res > self.image_size or self.image_size % res:
                raise ValueError(f"cannot derive {res}px images from {self.image_size}px data")
            self._cache[res] = F.avg_pool2d(base, self.image_size // res)
        return self._cache[res]


def load_folder(path, image_size=64):
    """Collect (image, caption) pairs from ``path``; bad or uncaptioned files are skipped."""
    from PIL import Image

    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset folder not found: {path}")
    files, captions = [], []
    for f in sorted(path.iterdir()):
        if f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        cap = f.with_suffix(".txt")
        if not cap.exists():
            log.warning("skipping %s: no caption file %s", f.name, cap.name)
            continue
        try:
            with Image.open(f) as im:
                im.verify()
        except Exception as exc:  # PIL raises a variety of types for corrupt files
            log.warning("skipping %s: unreadable image (%s)", f.name, exc)
            continue
        files.append(f)
        captions.append(cap.read_text().strip())
    if not files:
        raise ValueError(f"no usable image/caption pairs in {path}")
    return FolderDataset(files, captions, image_size)


def derangement(n, rng):
    """Uniformly random permutation of range(n) without fixed points (rejection sampling)."""
    if n < 2:
        raise ValueError("a derangement needs at least two elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def mismatch_shuffle(captions, rng):
    perm = derangement(len(captions), rng)
    return [captions[i] for i in perm]


class BatchSampler:
    """Seeded epoch-wise shuffling; state is a plain dict for checkpoints."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(n)
        self.pos = 0

    def next(self):
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx

    def state_dict(self):
        return {"rng": self.rng.bit_generator.state, "order": self.order.tolist(), "pos": self.pos}

    def load_state_dict(self, state):
        self.rng.bit_generator.state = state["rng"]
        self.order = np.asarray(state["order"])
        self.pos = state["pos"]


def classify_attributes(image, colors=None, backgrounds=None):
    """Heuristic (color, shape, background) classifier for synthetic-shape images.

    Background is the nearest named background to the border median; the
    foreground color is the nearest named color to the mean of pixels far from
    the background; the shape comes from the foreground fill ratio of its
    bounding box (square ~1, circle ~0.79, triangle ~0.5).
    """
    colors = list(colors or COLORS)
    backgrounds = list(backgrounds or BACKGROUNDS)
    arr = ((image.detach().clamp(-1, 1).permute(1, 2, 0).numpy() + 1.0) * 127.5)
    border = np.concatenate([arr[0], arr[-1], arr[:, 0], arr[:, -1]])
    bg_val = np.median(border, axis=0)
    bg = min(backgrounds, key=lambda b: np.sum((np.array(BACKGROUNDS[b]) - bg_val) ** 2))
    dist = np.sqrt(((arr - bg_val) ** 2).sum(-1))
    fg = dist > 60.0
    if fg.sum() == 0:
        return {"color": None, "shape": None, "background": bg}
    mean = arr[fg].mean(axis=0)
    color = min(colors, key=lambda c: np.sum((np.array(COLORS[c]) - mean) ** 2))
    ys, xs = np.nonzero(fg)
    box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    fill = fg.sum() / box
    shape = "square" if fill > 0.9 else "triangle" if fill < 0.64 else "circle"
    return {"color": color, "shape": shape, "background": bg}


def color_accuracy(images, captions, colors=None):
    """Fraction of images whose classified color matches the caption's color."""
    hits = 0
    for img, cap in zip(images, captions):
        want = parse_caption(cap)
        got = classify_attributes(img, colors)
        hits += int(want is not None and got["color"] == want["color"])
    return hits / max(len(captions), 1)


def dataset_from_config(data_cfg):
    if data_cfg.kind == "synthetic":
        return generate_synthetic(SyntheticSpec.from_config(data_cfg), data_cfg.n)
    if data_cfg.kind == "folder":
        return load_folder(data_cfg.path, data_cfg.image_size)
    raise ConfigError(f"unknown dataset kind {data_cfg.kind!r}")
