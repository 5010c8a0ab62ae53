"""Synthetic dataset where the best field of view depends on location.

Each image is split into two halves:

* fine-texture half (mean intensity 0.5): Voronoi cells filled with vertical
  (class 0) or horizontal (class 1) stripes of period 2 px. Any resampling
  that averages neighbouring pixels turns both into flat grey, so only the
  full-resolution patch separates them.
* coarse-context half (mean intensity 0.2): flat background with a few
  bright 5x5 markers. Pixels within ``radius`` of a marker are class 2, the
  rest class 3. Locally the two look identical; telling them apart needs a
  field of view wide enough to contain the marker.

A region map (0 fine, 1 coarse) is stored alongside each label map.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError
from .storage import load_image, load_labels, save_image, save_labels

N_CLASSES = 4
FINE, COARSE = 0, 1


@dataclass
class Sample:
    image_id: str
    image: np.ndarray
    labels: np.ndarray
    region: Optional[np.ndarray] = None


def _stripes(shape, vertical: bool, contrast: float) -> np.ndarray:
    h, w = shape
    idx = np.arange(w)[None, :] if vertical else np.arange(h)[:, None]
    pattern = np.where(idx % 2 == 0, 0.5 + contrast, 0.5 - contrast)
    return np.broadcast_to(pattern, shape).astype(np.float64)


def generate_image(size: int, rng: np.random.Generator, n_cells: int = 6, n_markers: int = 3,
                   radius: float = 20.0, noise: float = 0.03, contrast: float = 0.25):
    """One (image, labels, region) triple; retries until all classes appear."""
    for _ in range(100):
        out = _try_generate(size, rng, n_cells, n_markers, radius, noise, contrast)
        if out is not None:
            return out
    raise RuntimeError("could not generate an image containing every class")


def _try_generate(size, rng, n_cells, n_markers, radius, noise, contrast):
    h = w = size
    rr, cc = np.mgrid[0:h, 0:w]
    horizontal_split = rng.random() < 0.5
    coarse_first = rng.random() < 0.5
    axis_coord = rr if horizontal_split else cc
    first = axis_coord < size // 2
    region = np.where(first == coarse_first, COARSE, FINE)

    labels = np.zeros((h, w), dtype=np.int64)
    image = np.zeros((h, w))

    # fine half: Voronoi cells of vertical / horizontal stripes
    fine = region == FINE
    fr, fc = np.nonzero(fine)
    pick = rng.choice(fr.size, size=n_cells, replace=False)
    seeds = np.stack([fr[pick], fc[pick]], axis=1)
    cell_class = rng.integers(0, 2, size=n_cells)
    cell_class[0], cell_class[1] = 0, 1
    d2 = (rr[..., None] - seeds[:, 0]) ** 2 + (cc[..., None] - seeds[:, 1]) ** 2
    owner = cell_class[np.argmin(d2, axis=-1)]
    vert, horiz = _stripes((h, w), True, contrast), _stripes((h, w), False, contrast)
    image = np.where(fine & (owner == 0), vert, image)
    image = np.where(fine & (owner == 1), horiz, image)
    labels[fine] = owner[fine]

    # coarse half: markers on a dark background
    coarse = region == COARSE
    image[coarse] = 0.2
    labels[coarse] = 3
    cr, ccol = np.nonzero(coarse)
    inner = (cr >= 2) & (cr < h - 2) & (ccol >= 2) & (ccol < w - 2)
    far_from_split = np.abs(axis_coord[cr, ccol] - (size // 2 - 0.5)) > 3
    cand = np.nonzero(inner & far_from_split)[0]
    centers = cand[rng.choice(cand.size, size=n_markers, replace=False)]
    near = np.zeros((h, w), dtype=bool)
    for k in centers:
        mr, mc = cr[k], ccol[k]
        near |= (rr - mr) ** 2 + (cc - mc) ** 2 <= radius ** 2
        image[mr - 2:mr + 3, mc - 2:mc + 3] = 0.9
    labels[coarse & near] = 2

    image = np.clip(image + rng.normal(0.0, noise, size=image.shape), 0.0, 1.0)
    if len(np.unique(labels)) < N_CLASSES:
        return None
    return image[..., None], labels, region


def separability_after_downsampling(image, labels, region, factor: int = 4) -> float:
    """Best single-threshold balanced accuracy separating the two fine classes
    after a ``factor`` x box downsample and nearest upsample of the image."""
    img = np.asarray(image)[..., 0]
    h, w = img.shape
    hb, wb = h // factor, w // factor
    small = img[:hb * factor, :wb * factor].reshape(hb, factor, wb, factor).mean(axis=(1, 3))
    up = np.repeat(np.repeat(small, factor, axis=0), factor, axis=1)
    lab = labels[:hb * factor, :wb * factor]
    mask = (region[:hb * factor, :wb * factor] == FINE) & (lab < 2)
    return best_threshold_accuracy(up[mask], lab[mask])


def best_threshold_accuracy(values: np.ndarray, classes: np.ndarray, balanced: bool = True) -> float:
    """Accuracy of the best rule ``class = (value > t)`` or its inverse.

    Balanced accuracy (mean per-class recall) by default, so a majority-class
    guess scores 0.5 regardless of class proportions.
    """
    order = np.argsort(values, kind="stable")
    v, y = values[order], classes[order]
    n = y.size
    ones_left = np.concatenate([[0], np.cumsum(y == 1)])
    zeros_left = np.arange(n + 1) - ones_left
    n1 = ones_left[-1]
    n0 = n - n1
    # a threshold can only fall between distinct values
    cut = np.concatenate([[True], v[1:] != v[:-1], [True]])
    if balanced:
        r0, r1 = zeros_left / max(n0, 1), (n1 - ones_left) / max(n1, 1)
        acc_a = (r0 + r1) / 2
    else:
        acc_a = (zeros_left + (n1 - ones_left)) / n
    acc_b = 1.0 - acc_a
    return float(max(acc_a[cut].max(), acc_b[cut].max()))


def write_dataset(out_dir, n_images: int, size: int, seed: int, min_fov: int = 16,
                  split=(0.6, 0.2, 0.2), **gen_kwargs) -> Path:
    if size < 4 * min_fov:
        raise ConfigError(f"image size {size} must be at least 4x the smallest FoV ({min_fov})")
    out = Path(out_dir)
    for sub in ("images", "labels", "regions"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_val = int(round(n_images * split[1]))
    n_test = int(round(n_images * split[2]))
    n_train = max(n_images - n_val - n_test, min(n_images, 1))
    n_val = min(n_val, n_images - n_train)
    rows = []
    for i in range(n_images):
        image, labels, region = generate_image(size, rng, **gen_kwargs)
        name = f"img_{i:03d}"
        save_image(out / "images" / f"{name}.png", image)
        save_labels(out / "labels" / f"{name}.png", labels)
        save_labels(out / "regions" / f"{name}.png", region)
        split_name = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        rows.append((name, split_name, f"images/{name}.png", f"labels/{name}.png", f"regions/{name}.png"))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split", "image", "labels", "region"])
        writer.writerows(rows)
    return out


def load_split(data_dir, split: str) -> List[Sample]:
    """Samples of one split from a manifest.csv directory."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found")
    out = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] != split:
                continue
            region = load_labels(data_dir / row["region"]) if row.get("region") else None
            out.append(Sample(row["id"], load_image(data_dir / row["image"]),
                              load_labels(data_dir / row["labels"]), region))
    return out


def make_samples(n_images: int, size: int, seed: int, **gen_kwargs) -> List[Sample]:
    """In-memory dataset, identical in content to ``write_dataset`` up to 8-bit quantisation."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_images):
        image, labels, region = generate_image(size, rng, **gen_kwargs)
        out.append(Sample(f"img_{i:03d}", np.round(image * 255.0) / 255.0, labels, region))
    return out
