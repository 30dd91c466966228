"""Corpus ingestion, resizing, center masking and batching.

Images move through the pipeline as NHWC arrays wrapped in :class:`ImageTensor`,
tagged with the value space they live in: ``storage`` ([0, 255], what sits on
disk) or ``model`` ([-1, 1], what the networks consume).
"""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
MANIFEST_DIR = "manifests"


class DataError(Exception):
    """Raised for bad corpus layouts, invalid geometry or wrong value spaces."""


class Space(str, Enum):
    STORAGE = "storage_0_255"
    MODEL = "model_minus1_1"


_BOUNDS = {Space.STORAGE: (0.0, 255.0), Space.MODEL: (-1.0, 1.0)}


@dataclass
class ImageTensor:
    """Batched image array (batch, height, width, channels) in a declared space."""

    data: np.ndarray
    space: Space

    def __post_init__(self):
        self.space = Space(self.space)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise DataError(f"expected a 4-D NHWC array, got shape {self.data.shape}")
        n, h, w, c = self.data.shape
        if n < 1 or h < 1 or w < 1:
            raise DataError(f"empty image tensor {self.data.shape}")
        if c != 3:
            raise DataError(f"expected 3 channels, got {c}")
        lo, hi = _BOUNDS[self.space]
        if self.data.size and (self.data.min() < lo or self.data.max() > hi):
            raise DataError(
                f"values [{self.data.min()}, {self.data.max()}] outside {self.space.value}"
            )

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def require(self, space: Space) -> "ImageTensor":
        if self.space != space:
            raise DataError(f"expected {Space(space).value} image, got {self.space.value}")
        return self


@dataclass(frozen=True)
class MaskGeometry:
    image_size: int
    mask_size: int
    offset_row: int
    offset_col: int

    @classmethod
    def centered(cls, image_size: int, mask_size: int) -> "MaskGeometry":
        if not 0 < mask_size <= image_size:
            raise DataError(f"mask size {mask_size} must be in (0, {image_size}]")
        off = (image_size - mask_size) // 2
        return cls(image_size, mask_size, off, off)

    @property
    def rows(self) -> slice:
        return slice(self.offset_row, self.offset_row + self.mask_size)

    @property
    def cols(self) -> slice:
        return slice(self.offset_col, self.offset_col + self.mask_size)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "mask_size": self.mask_size,
            "offset_row": self.offset_row,
            "offset_col": self.offset_col,
        }


@dataclass
class MaskedSample:
    masked_image: ImageTensor
    ground_truth_patch: ImageTensor
    geometry: MaskGeometry
    source_id: list[str] = field(default_factory=list)


@dataclass
class SplitSpec:
    train: list[str]
    validation: list[str]
    test: list[str]

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name in ("train", "validation", "test"):
            for part in getattr(self, name):
                if part in seen:
                    raise DataError(f"partition {part!r} is in both {seen[part]} and {name}")
                seen[part] = name

    @classmethod
    def street_view(cls) -> "SplitSpec":
        """Parts 1 and 10 for testing, 9 for validation, 2-8 for training."""
        return cls(
            train=[f"part{i}" for i in range(2, 9)],
            validation=["part9"],
            test=["part1", "part10"],
        )

    def as_dict(self) -> dict[str, list[str]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


@dataclass(frozen=True)
class ImageRecord:
    path: Path
    partition: str
    source_id: str


@dataclass
class Corpus:
    """Per-split ordered image records plus an ingestion report."""

    splits: dict[str, list[ImageRecord]]
    skipped: list[Path] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}


# --------------------------------------------------------------------------- corpus


def _partition_paths(root: Path, part: str) -> list[Path]:
    manifest = root / MANIFEST_DIR / f"{part}.txt"
    if manifest.is_file():
        lines = manifest.read_text().splitlines()
        return sorted(root / line.strip() for line in lines if line.strip())
    pdir = root / part
    if not pdir.is_dir():
        raise DataError(f"partition {part!r} not found under {root}")
    return sorted(p for p in pdir.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def load_corpus(root, split_spec: SplitSpec, verify: bool = True) -> Corpus:
    """List the images of every split in lexicographic path order.

    Pixel data is not loaded. With ``verify`` each file's header is checked and
    undecodable files are dropped and listed in ``Corpus.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus root {root} does not exist")
    has_parts = any(p.is_dir() and p.name != MANIFEST_DIR for p in root.iterdir()) or (
        root / MANIFEST_DIR
    ).is_dir()
    if not has_parts:
        raise DataError(f"no partitions found in {root}")

    corpus = Corpus(splits={})
    for split, parts in split_spec.as_dict().items():
        records = []
        for part in parts:
            for path in _partition_paths(root, part):
                if verify and not _decodable(path):
                    log.warning("skipping undecodable image %s", path)
                    corpus.skipped.append(path)
                    continue
                rel = path.relative_to(root).as_posix()
                records.append(ImageRecord(path, part, rel))
        records.sort(key=lambda r: r.path.as_posix())
        corpus.splits[split] = records
    log.info("corpus %s: %s, %d skipped", root, corpus.counts(), len(corpus.skipped))
    return corpus


def write_manifests(root, partitions: Sequence[str]) -> dict[str, Path]:
    """Write one ``manifests/<partition>.txt`` per partition, relative paths."""
    root = Path(root)
    (root / MANIFEST_DIR).mkdir(parents=True, exist_ok=True)
    out = {}
    for part in partitions:
        pdir = root / part
        paths = sorted(
            p.relative_to(root).as_posix()
            for p in pdir.rglob("*")
            if p.suffix.lower() in IMAGE_SUFFIXES
        )
        out[part] = root / MANIFEST_DIR / f"{part}.txt"
        out[part].write_text("".join(p + "\n" for p in paths))
    return out


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_images(
    records: Sequence[ImageRecord], size: int | None = None, workers: int = 0
) -> tuple[np.ndarray, list[str]]:
    """Decode records into a uint8 (N, size, size, 3) array, resizing as needed.

    Decoding may run on a thread pool; the returned order always matches
    ``records``.
    """

    def one(rec: ImageRecord) -> np.ndarray:
        arr = read_image(rec.path)
        if size is not None and arr.shape[:2] != (size, size):
            resized = resize_image(ImageTensor(arr.astype(np.float32), Space.STORAGE), size)
            arr = quantize(resized.data[0])
        return arr

    if workers > 0:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(one, records))
    else:
        images = [one(r) for r in records]
    if not images:
        raise DataError("no images to load")
    return np.stack(images), [r.source_id for r in records]


# --------------------------------------------------------------------------- pixels


def resize_image(img: ImageTensor, target: int) -> ImageTensor:
    """Bilinear rescale of every image to ``target`` x ``target``.

    Aspect ratio is not preserved. Same-size input is returned unchanged.
    """
    img.require(Space.STORAGE)
    if target <= 0:
        raise DataError(f"resize target must be positive, got {target}")
    if img.size == (target, target):
        return ImageTensor(img.data.copy(), img.space)
    out = np.empty((img.batch, target, target, 3), dtype=np.float32)
    for n in range(img.batch):
        for c in range(3):
            band = Image.fromarray(img.data[n, :, :, c].astype(np.float32), mode="F")
            out[n, :, :, c] = np.asarray(band.resize((target, target), Image.BILINEAR))
    np.clip(out, 0.0, 255.0, out=out)
    return ImageTensor(out, Space.STORAGE)


def quantize(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 255] and round half-up to uint8."""
    return np.floor(np.clip(x, 0.0, 255.0) + 0.5).astype(np.uint8)


def normalize(img: ImageTensor) -> ImageTensor:
    img.require(Space.STORAGE)
    data = img.data.astype(np.float64) / 127.5 - 1.0
    return ImageTensor(np.clip(data, -1.0, 1.0), Space.MODEL)


def denormalize(img: ImageTensor) -> ImageTensor:
    img.require(Space.MODEL)
    return ImageTensor(quantize((img.data.astype(np.float64) + 1.0) * 127.5), Space.STORAGE)


def center_mask(img: ImageTensor, mask_size: int, fill=0.0, source_id=None) -> MaskedSample:
    """Blank the centered ``mask_size`` square of every image with ``fill``.

    ``fill`` is a scalar or a per-channel triple in the image's own space.
    """
    h, w = img.size
    if h != w:
        raise DataError(f"center masks need square images, got {h}x{w}")
    if mask_size > h:
        raise DataError(f"mask size {mask_size} exceeds image side {h}")
    geom = MaskGeometry.centered(h, mask_size)
    patch = img.data[:, geom.rows, geom.cols, :].copy()
    fill = np.broadcast_to(np.asarray(fill, dtype=img.data.dtype), (3,))
    masked = img.data.copy()
    masked[:, geom.rows, geom.cols, :] = fill
    if source_id is None:
        source_id = [str(i) for i in range(img.batch)]
    elif isinstance(source_id, str):
        source_id = [source_id]
    return MaskedSample(
        masked_image=ImageTensor(masked, img.space),
        ground_truth_patch=ImageTensor(patch, img.space),
        geometry=geom,
        source_id=list(source_id),
    )


def channel_mean(images: np.ndarray) -> np.ndarray:
    """Per-channel mean of uint8 storage images, mapped into model space."""
    mean = images.reshape(-1, 3).astype(np.float64).mean(axis=0)
    return mean / 127.5 - 1.0


# --------------------------------------------------------------------------- synthetic


def _synthetic_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    img = np.empty((size, size, 3))
    for c in range(3):
        a, b, base = rng.uniform(-1, 1, 3)
        img[..., c] = 0.5 + 0.25 * base + 0.2 * (a * xx + b * yy)
    for _ in range(rng.integers(2, 5)):
        fx, fy = rng.uniform(1, 4, 2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.12, 3)
        wave = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img += amp * wave[..., None]
    for _ in range(rng.integers(1, 4)):
        r0, c0 = rng.integers(0, size, 2)
        r1 = min(size, r0 + rng.integers(max(size // 6, 1), max(size // 2, 2)))
        c1 = min(size, c0 + rng.integers(max(size // 6, 1), max(size // 2, 2)))
        img[r0:r1, c0:c1] = 0.6 * img[r0:r1, c0:c1] + 0.4 * rng.uniform(0, 1, 3)
    return quantize(img * 255.0)


def synthetic_corpus(n: int, size: int, seed: int, root, partitions: int = 1) -> list[Path]:
    """Write ``n`` seeded synthetic RGB PNGs under ``root/part1..partK``.

    Images are spread over partitions in contiguous blocks. Identical
    arguments always produce byte-identical files.
    """
    if n < 1:
        raise DataError("synthetic corpus needs n >= 1")
    if partitions < 1:
        raise DataError("need at least one partition")
    root = Path(root)
    rng = np.random.default_rng(seed)
    bounds = np.linspace(0, n, partitions + 1).round().astype(int)
    paths = []
    for p in range(partitions):
        pdir = root / f"part{p + 1}"
        pdir.mkdir(parents=True, exist_ok=True)
        for i in range(bounds[p], bounds[p + 1]):
            path = pdir / f"img_{i:05d}.png"
            write_png(path, _synthetic_image(rng, size))
            paths.append(path)
    write_manifests(root, [f"part{p + 1}" for p in range(partitions)])
    return paths


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------- batching


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(items: Sequence, batch_size: int, seed: int, epoch: int, shuffle: bool = True):
    """Yield consecutive groups of ``items`` in a (seed, epoch)-determined order.

    The last batch may be short.
    """
    if batch_size < 1:
        raise DataError(f"batch size must be >= 1, got {batch_size}")
    if len(items) == 0:
        raise DataError("cannot batch an empty split")
    order = epoch_order(len(items), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        yield [items[i] for i in order[start : start + batch_size]]


@dataclass
class InpaintingSet:
    """In-memory split: uint8 storage images and their identifiers."""

    images: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, records: Sequence[ImageRecord], size: int, workers: int = 0):
        images, ids = load_images(records, size, workers=workers)
        return cls(images, ids)

    def sample(self, indices, mask_size: int, fill) -> MaskedSample:
        """Normalize and center-mask the images at ``indices``."""
        indices = list(indices)
        img = normalize(ImageTensor(self.images[indices], Space.STORAGE))
        return center_mask(img, mask_size, fill, [self.ids[i] for i in indices])

    def batches(self, batch_size: int, seed: int, epoch: int, mask_size: int, fill, shuffle=True
                ) -> Iterator[MaskedSample]:
        for idx in make_batches(range(len(self)), batch_size, seed, epoch, shuffle):
            yield self.sample(idx, mask_size, fill)


def env_root(default: str = ".") -> Path:
    return Path(os.environ.get("RESPOLISH_HOME", default))
