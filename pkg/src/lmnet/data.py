"""Dataset preparation and batching.

The preparation pipeline turns large annotated scenes into fixed-size
training pairs: tile each scene losslessly, drop tiles whose mask foreground
fraction falls outside a band, resize what remains, and write a tab-separated
index of (image, mask, split) records. Tiles inherit the split of their
parent scene, so no scene leaks across splits.

Masks are binary the moment they enter this module and stay binary through
every operation. A synthetic rectangle generator provides deterministic
fixtures for tests and smoke runs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgio
from .errors import ConfigError, DataError
from .seeding import derive_rng

MASK_THRESHOLD = 128.0 / 255.0
SPLITS = ("train", "val", "test")


@dataclass
class ImagePair:
    """One sample: color image (1, 3, h, w) in [0, 1], binary mask (1, 1, h, w)."""

    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 3):
            raise DataError(f"image must be (1, 3, h, w), got {self.image.shape}")
        if self.mask.ndim != 4 or self.mask.shape[:2] != (1, 1):
            raise DataError(f"mask must be (1, 1, h, w), got {self.mask.shape}")
        if self.image.shape[2:] != self.mask.shape[2:]:
            raise DataError(
                f"image dims {self.image.shape[2:]} != mask dims {self.mask.shape[2:]}"
            )
        bad = (self.mask != 0) & (self.mask != 1)
        if bad.any():
            raise DataError("mask is not binary")

    @property
    def size(self):
        return self.image.shape[2:]


def binarize_mask(raw, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Map [0, 1] grayscale to {0, 1}: value >= threshold becomes 1.

    The comparison runs in the array's own dtype so 8-bit level 128 lands
    exactly on the threshold and is kept.
    """
    raw = np.asarray(raw)
    return (raw >= raw.dtype.type(threshold)).astype(raw.dtype)


def tile_image(pair: ImagePair, tile: int = 500) -> list[ImagePair]:
    """Cut a pair into non-overlapping tile×tile pieces, row-major.

    Both source dims must divide evenly; no pixel is resampled or dropped.
    """
    h, w = pair.size
    if h % tile:
        raise DataError(f"height {h} is not divisible by tile size {tile}")
    if w % tile:
        raise DataError(f"width {w} is not divisible by tile size {tile}")
    out = []
    for r in range(h // tile):
        for c in range(w // tile):
            ys = slice(r * tile, (r + 1) * tile)
            xs = slice(c * tile, (c + 1) * tile)
            out.append(ImagePair(
                image=pair.image[:, :, ys, xs].copy(),
                mask=pair.mask[:, :, ys, xs].copy(),
            ))
    return out


def reassemble_tiles(tiles, rows: int, cols: int) -> ImagePair:
    """Inverse of tile_image for a row-major rows×cols tiling."""
    if len(tiles) != rows * cols:
        raise DataError(f"need {rows * cols} tiles, got {len(tiles)}")
    bands_img = []
    bands_mask = []
    for r in range(rows):
        row = tiles[r * cols:(r + 1) * cols]
        bands_img.append(np.concatenate([t.image for t in row], axis=3))
        bands_mask.append(np.concatenate([t.mask for t in row], axis=3))
    return ImagePair(
        image=np.concatenate(bands_img, axis=2),
        mask=np.concatenate(bands_mask, axis=2),
    )


def foreground_fraction(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask)) / mask.size


def filter_tiles(tiles, min_fg: float = 0.01, max_fg: float = 0.90):
    """Keep tiles whose mask foreground fraction lies in [min_fg, max_fg].

    Returns (kept tiles, rejections) where each rejection is
    (position in the input list, fraction). Both interval ends are inclusive.
    """
    if not (0.0 <= min_fg < max_fg <= 1.0):
        raise ConfigError(
            f"foreground band must satisfy 0 <= min < max <= 1, got [{min_fg}, {max_fg}]"
        )
    kept, rejected = [], []
    for i, t in enumerate(tiles):
        frac = foreground_fraction(t.mask)
        if min_fg <= frac <= max_fg:
            kept.append(t)
        else:
            rejected.append((i, frac))
    return kept, rejected


def _bilinear_axis(in_len: int, out_len: int):
    scale = in_len / out_len
    centers = (np.arange(out_len, dtype=np.float64) + 0.5) * scale - 0.5
    lo = np.floor(centers)
    frac = centers - lo
    lo = lo.astype(np.int64)
    i0 = np.clip(lo, 0, in_len - 1)
    i1 = np.clip(lo + 1, 0, in_len - 1)
    return i0, i1, frac


def _resize_bilinear(img: np.ndarray, target) -> np.ndarray:
    """Pixel-center bilinear resize of (..., h, w), edges clamped.

    Interpolation is written in lerp form v0 + f*(v1 - v0) so constants and
    the no-op resize come out bit-exact.
    """
    th, tw = target
    h, w = img.shape[-2:]
    y0, y1, fy = _bilinear_axis(h, th)
    x0, x1, fx = _bilinear_axis(w, tw)
    work = img.astype(np.float64, copy=False)
    rows0 = work[..., y0, :]
    rows1 = work[..., y1, :]
    band = rows0 + fy[:, None] * (rows1 - rows0)
    cols0 = band[..., :, x0]
    cols1 = band[..., :, x1]
    out = cols0 + fx * (cols1 - cols0)
    return out.astype(img.dtype, copy=False)


def _resize_nearest(mask: np.ndarray, target) -> np.ndarray:
    th, tw = target
    h, w = mask.shape[-2:]
    ys = np.minimum((np.arange(th) + 0.5) * (h / th), h - 1).astype(np.int64)
    xs = np.minimum((np.arange(tw) + 0.5) * (w / tw), w - 1).astype(np.int64)
    return mask[..., ys, :][..., :, xs]


def resize_pair(pair: ImagePair, target=(192, 192)) -> ImagePair:
    """Downscale a pair: bilinear for the image, nearest for the mask.

    The mask is re-binarized at 0.5 after the gather, keeping the strict
    {0, 1} closure. Upscaling is refused.
    """
    th, tw = target
    h, w = pair.size
    if th > h or tw > w:
        raise DataError(
            f"target {target} exceeds source {pair.size}; upscaling is not supported"
        )
    mask = _resize_nearest(pair.mask, target)
    mask = (mask >= mask.dtype.type(0.5)).astype(mask.dtype)
    return ImagePair(image=_resize_bilinear(pair.image, target), mask=mask)


# ---------------------------------------------------------------------------
# Index files

@dataclass
class IndexRecord:
    image: str  # path relative to the index file
    mask: str
    split: str


@dataclass
class DatasetIndex:
    root: Path  # directory the record paths are relative to
    records: list

    def split_records(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def counts(self) -> dict:
        out = {s: 0 for s in SPLITS}
        for r in self.records:
            out[r.split] = out.get(r.split, 0) + 1
        return out

    def image_path(self, rec: IndexRecord) -> Path:
        return self.root / rec.image

    def mask_path(self, rec: IndexRecord) -> Path:
        return self.root / rec.mask


def save_index(index: DatasetIndex, path) -> None:
    lines = [f"{r.image}\t{r.mask}\t{r.split}\n" for r in index.records]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(lines)


def load_index(path) -> DatasetIndex:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: index file does not exist")
    root = path.parent
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{ln}: expected 3 tab-separated fields")
            image, mask, split = parts
            if split not in SPLITS:
                raise DataError(f"{path}:{ln}: unknown split {split!r}")
            if image in seen:
                raise DataError(f"{path}:{ln}: duplicate image path {image}")
            seen.add(image)
            for rel in (image, mask):
                if not (root / rel).is_file():
                    raise DataError(f"{path}:{ln}: referenced file {rel} is missing")
            records.append(IndexRecord(image=image, mask=mask, split=split))
    return DatasetIndex(root=root, records=records)


def build_index(prepared_dir) -> DatasetIndex:
    """Scan a prepared directory layout into an index.

    Expects `<dir>/<split>/images/*.png` with a like-named file under
    `<dir>/<split>/masks/`. Images without a mask fail the build, listing
    every orphan.
    """
    prepared = Path(prepared_dir)
    records = []
    orphans = []
    for split in SPLITS:
        img_dir = prepared / split / "images"
        mask_dir = prepared / split / "masks"
        if not img_dir.is_dir():
            continue
        for img in sorted(img_dir.iterdir()):
            if not img.is_file():
                continue
            mask = mask_dir / img.name
            if not mask.is_file():
                orphans.append(str(img.relative_to(prepared)))
                continue
            records.append(IndexRecord(
                image=str(img.relative_to(prepared)),
                mask=str(mask.relative_to(prepared)),
                split=split,
            ))
    if orphans:
        raise DataError(
            "images with no matching mask: " + ", ".join(orphans[:10])
            + ("" if len(orphans) <= 10 else f" (+{len(orphans) - 10} more)")
        )
    return DatasetIndex(root=prepared, records=records)


def load_pair(index: DatasetIndex, rec: IndexRecord) -> ImagePair:
    image = imgio.read_rgb(index.image_path(rec))[None]
    mask = binarize_mask(imgio.read_gray(index.mask_path(rec)))[None, None]
    return ImagePair(image=image, mask=mask)


def batch_iter(index: DatasetIndex, split: str, batch_size: int,
               seed: int = 0, epoch: int = 0, shuffle: bool = True):
    """Yield (images (b,3,h,w), masks (b,1,h,w)) batches over one split.

    Order is a pure function of (seed, epoch); the final short batch is
    yielded as-is. With shuffle=False records come in index order and seed
    and epoch are ignored.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    records = index.split_records(split)
    order = np.arange(len(records))
    if shuffle:
        order = derive_rng(seed, 0, epoch).permutation(len(records))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        pairs = [load_pair(index, r) for r in chunk]
        sizes = {p.size for p in pairs}
        if len(sizes) > 1:
            raise DataError(f"split {split!r} mixes image sizes {sorted(sizes)}")
        yield (
            np.concatenate([p.image for p in pairs], axis=0),
            np.concatenate([p.mask for p in pairs], axis=0),
        )


# ---------------------------------------------------------------------------
# Synthetic fixtures

@dataclass
class SynthRect:
    top: int
    left: int
    height: int
    width: int


def synth_pair(size: int, rng) -> tuple:
    """One synthetic sample: bright axis-aligned rectangles on dark noise.

    Returns (ImagePair, rectangle records). Rectangle sides are 10% to 30%
    of the image side, so even five rectangles cover under half the area.
    The mask is exactly the union of the rectangles.
    """
    noise = rng.random((3, size, size))
    image = (0.05 + 0.40 * noise).astype(np.float32)
    mask = np.zeros((size, size), dtype=np.float32)
    rects = []
    for _ in range(int(rng.integers(1, 6))):
        rh = max(1, int(rng.uniform(0.1, 0.3) * size))
        rw = max(1, int(rng.uniform(0.1, 0.3) * size))
        top = int(rng.integers(0, size - rh + 1))
        left = int(rng.integers(0, size - rw + 1))
        base = rng.uniform(0.65, 0.9)
        fill = base + 0.1 * rng.random((3, rh, rw))
        image[:, top:top + rh, left:left + rw] = fill.astype(np.float32)
        mask[top:top + rh, left:left + rw] = 1.0
        rects.append(SynthRect(top=top, left=left, height=rh, width=rw))
    pair = ImagePair(image=image[None], mask=mask[None, None])
    return pair, rects


def synth_generate(n: int, size: int, seed: int) -> list:
    """n deterministic synthetic pairs; sample i depends only on (seed, i)."""
    if size % 8:
        raise ConfigError(f"synthetic image size must be divisible by 8, got {size}")
    return [synth_pair(size, derive_rng(seed, 2, i))[0] for i in range(n)]


def write_synthetic_dataset(out_dir, counts: dict, size: int, seed: int) -> DatasetIndex:
    """Write a synthetic prepared layout + index; counts maps split -> n."""
    out = Path(out_dir)
    offset = 0
    records = []
    for split in SPLITS:
        n = counts.get(split, 0)
        if n == 0:
            continue
        (out / split / "images").mkdir(parents=True, exist_ok=True)
        (out / split / "masks").mkdir(parents=True, exist_ok=True)
        for i in range(n):
            pair = synth_pair(size, derive_rng(seed, 2, offset + i))[0]
            name = f"synth_{offset + i:05d}.png"
            imgio.write_rgb(out / split / "images" / name, pair.image[0])
            imgio.write_gray(out / split / "masks" / name, pair.mask[0, 0])
            records.append(IndexRecord(
                image=f"{split}/images/{name}", mask=f"{split}/masks/{name}",
                split=split,
            ))
        offset += n
    index = DatasetIndex(root=out, records=records)
    save_index(index, out / "index.tsv")
    return index


# ---------------------------------------------------------------------------
# Preparation pipeline

def prepare_dataset(input_dir, output_dir, tile: int = 500, target=(192, 192),
                    min_fg: float = 0.01, max_fg: float = 0.90,
                    overwrite: bool = False) -> dict:
    """Run the full pipeline over a raw scene layout.

    Raw layout mirrors the prepared one: `<input>/<split>/images/*` with
    like-named masks under `<input>/<split>/masks/`. Scenes are tiled,
    filtered by mask foreground fraction, resized to `target`, and written
    as 8-bit PNGs with `index.tsv` and `rejects.tsv` at the output root.

    Returns per-split counts: {split: {"kept": k, "rejected": r}}.
    """
    if not (0.0 <= min_fg < max_fg <= 1.0):
        raise ConfigError(
            f"foreground band must satisfy 0 <= min < max <= 1, got [{min_fg}, {max_fg}]"
        )
    inp = Path(input_dir)
    out = Path(output_dir)
    if not inp.is_dir():
        raise DataError(f"{inp}: input directory does not exist")
    raw = build_index(inp)
    if not raw.records:
        raise DataError(f"{inp}: no image/mask pairs found under <split>/images")
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ConfigError(f"{out} already has content; pass overwrite to replace it")

    records = []
    reject_rows = []
    summary = {s: {"kept": 0, "rejected": 0} for s in SPLITS}
    for rec in raw.records:
        scene = load_pair(raw, rec)
        stem = os.path.splitext(os.path.basename(rec.image))[0]
        try:
            tiles = tile_image(scene, tile)
        except DataError as exc:
            raise DataError(f"{rec.image}: {exc}") from exc
        cols = scene.size[1] // tile
        kept, rejected = filter_tiles(tiles, min_fg, max_fg)
        fractions = {i: f for i, f in rejected}
        img_dir = out / rec.split / "images"
        mask_dir = out / rec.split / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for i, t in enumerate(tiles):
            name = f"{stem}_r{i // cols}c{i % cols}.png"
            rel_img = f"{rec.split}/images/{name}"
            rel_mask = f"{rec.split}/masks/{name}"
            if i in fractions:
                summary[rec.split]["rejected"] += 1
                reject_rows.append(
                    f"{rel_img}\t{rel_mask}\t{rec.split}\t{fractions[i]!r}\n"
                )
                continue
            small = resize_pair(t, target)
            imgio.write_rgb(img_dir / name, small.image[0])
            imgio.write_gray(mask_dir / name, small.mask[0, 0])
            records.append(IndexRecord(image=rel_img, mask=rel_mask, split=rec.split))
            summary[rec.split]["kept"] += 1

    index = DatasetIndex(root=out, records=records)
    save_index(index, out / "index.tsv")
    with open(out / "rejects.tsv", "w", encoding="utf-8", newline="") as fh:
        fh.writelines(reject_rows)
    return summary
