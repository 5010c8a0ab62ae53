"""Low-resolution views, the concentric patch extractor, and tile grids."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .storage import TiledImage, image_shape, take
from .tensor import IGNORE, ContractError


@dataclass(frozen=True)
class PatchSpec:
    """D square fields of view (full-res side lengths) resampled to ``out_size``."""

    fovs: Tuple[int, ...]
    out_size: int
    lowres_rate: float
    pad_mode: str = "reflect"

    def __post_init__(self):
        fovs = tuple(int(f) for f in self.fovs)
        object.__setattr__(self, "fovs", fovs)
        if not fovs:
            raise ContractError("PatchSpec needs at least one field of view")
        if any(b <= a for a, b in zip(fovs, fovs[1:])):
            raise ContractError(f"fovs must be strictly ascending, got {fovs}")
        if fovs[0] < 1 or self.out_size < 1:
            raise ContractError("fovs and out_size must be positive")
        if not 0 < self.lowres_rate <= 1:
            raise ContractError(f"lowres_rate must lie in (0, 1], got {self.lowres_rate}")
        if self.pad_mode not in ("reflect", "zero"):
            raise ContractError(f"pad_mode must be 'reflect' or 'zero', got {self.pad_mode!r}")

    @property
    def n_patches(self) -> int:
        return len(self.fovs)


@dataclass
class PatchSet:
    center_lr: Tuple[int, int]
    center: Tuple[int, int]
    patches: np.ndarray  # (D, S, S, C)
    spec: PatchSpec


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def lowres_shape(height: int, width: int, rate: float) -> Tuple[int, int]:
    if not 0 < rate <= 1:
        raise ContractError(f"rate must lie in (0, 1], got {rate}")
    h, w = _round_half_up(height * rate), _round_half_up(width * rate)
    if h < 1 or w < 1:
        raise ContractError(f"rate {rate} collapses a {height}x{width} image")
    return h, w


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) box-filter weights; output i averages [i, i+1) * n_in/n_out."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    j = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / (n_in / n_out)


def make_lowres(image, rate: float, strip: int = 1024) -> np.ndarray:
    """Area-average downsampling to ``round(H*rate) x round(W*rate)``.

    Tiled images are processed in row strips so the full image never has to
    be resident.
    """
    H, W = image_shape(image)[:2]
    h, w = lowres_shape(H, W, rate)
    if h == H and w == W:
        arr = image.to_array() if isinstance(image, TiledImage) else image
        return np.array(arr, dtype=np.float64)
    ah, aw = area_matrix(H, h), area_matrix(W, w)
    if not isinstance(image, TiledImage):
        return np.einsum("ih,hwc,jw->ijc", ah, np.asarray(image, dtype=np.float64), aw, optimize=True)
    out = np.zeros((h, w, image.shape[2]))
    for r0 in range(0, H, strip):
        r1 = min(H, r0 + strip)
        block = image.row_strip(r0, r1)
        out += np.einsum("ih,hwc,jw->ijc", ah[:, r0:r1], block, aw, optimize=True)
    return out


def lr_to_full(center_lr: Tuple[int, int], full_shape, lowres: Tuple[int, int]) -> Tuple[int, int]:
    """Map a low-res pixel to the nearest full-res pixel at the same position."""
    (H, W), (h, w) = full_shape[:2], lowres
    r, c = center_lr
    return (_round_half_up((r + 0.5) * H / h - 0.5), _round_half_up((c + 0.5) * W / w - 0.5))


def full_to_lr(center, full_shape, lowres) -> Tuple[int, int]:
    (H, W), (h, w) = full_shape[:2], lowres
    return (min(h - 1, int((center[0] + 0.5) * h / H)), min(w - 1, int((center[1] + 0.5) * w / W)))


def _pad_index(idx: np.ndarray, n: int, mode: str) -> Tuple[np.ndarray, np.ndarray]:
    """In-bounds indices plus a mask of which entries were originally inside."""
    inside = (idx >= 0) & (idx < n)
    if mode == "zero" or n == 1:
        return np.clip(idx, 0, n - 1), inside
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m > n - 1, period - m, m), inside


def _sample_axis(top: int, fov: int, size: int):
    # clamp to the crop so upsampling never reads outside it
    pos = np.clip((np.arange(size) + 0.5) * (fov / size) - 0.5, 0.0, fov - 1) + top
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    return lo, lo + 1, frac


def extract_patches_at(image, center: Tuple[int, int], spec: PatchSpec) -> np.ndarray:
    """All D patches around a full-res ``center`` as a (D, S, S, C) array.

    Patch d crops the side-``fovs[d]`` square whose top-left is
    ``center - fovs[d] // 2`` and resamples it bilinearly (half-pixel
    centres) to S x S. Only the source rows/columns the interpolation touches
    are read.
    """
    H, W, C = image_shape(image)
    S = spec.out_size
    out = np.empty((spec.n_patches, S, S, C))
    for d, fov in enumerate(spec.fovs):
        rlo, rhi, rf = _sample_axis(center[0] - fov // 2, fov, S)
        clo, chi, cf = _sample_axis(center[1] - fov // 2, fov, S)
        rows, rin = _pad_index(np.concatenate([rlo, rhi]), H, spec.pad_mode)
        cols, cin = _pad_index(np.concatenate([clo, chi]), W, spec.pad_mode)
        block = np.asarray(take(image, rows, cols), dtype=np.float64)
        if spec.pad_mode == "zero":
            block = block * (rin[:, None, None] & cin[None, :, None])
        rw0, rw1 = (1.0 - rf)[:, None, None], rf[:, None, None]
        vert = block[:S] * rw0 + block[S:] * rw1
        cw0, cw1 = (1.0 - cf)[None, :, None], cf[None, :, None]
        out[d] = vert[:, :S] * cw0 + vert[:, S:] * cw1
    return out


def extract_patch_set(image, center_lr: Tuple[int, int], spec: PatchSpec) -> PatchSet:
    shape = image_shape(image)
    lowres = lowres_shape(shape[0], shape[1], spec.lowres_rate)
    r, c = center_lr
    if not (0 <= r < lowres[0] and 0 <= c < lowres[1]):
        raise ContractError(f"center {center_lr} outside low-res grid {lowres}")
    center = lr_to_full(center_lr, shape, lowres)
    return PatchSet(tuple(center_lr), center, extract_patches_at(image, center, spec), spec)


def label_patch_at(labels: np.ndarray, center: Tuple[int, int], spec: PatchSpec) -> np.ndarray:
    """Nearest-neighbour crop of the smallest-FoV square; outside pixels are IGNORE."""
    H, W = labels.shape
    S, fov = spec.out_size, spec.fovs[0]
    offs = np.floor((np.arange(S) + 0.5) * (fov / S)).astype(int)
    rows = center[0] - fov // 2 + offs
    cols = center[1] - fov // 2 + offs
    rin = (rows >= 0) & (rows < H)
    cin = (cols >= 0) & (cols < W)
    out = np.full((S, S), IGNORE, dtype=np.int64)
    out[np.ix_(rin, cin)] = labels[np.ix_(rows[rin], cols[cin])]
    return out


def extract_label_patch(labels: np.ndarray, center_lr: Tuple[int, int], spec: PatchSpec) -> np.ndarray:
    lowres = lowres_shape(labels.shape[0], labels.shape[1], spec.lowres_rate)
    return label_patch_at(labels, lr_to_full(center_lr, labels.shape, lowres), spec)


def _axis_tops(n: int, tile: int, stride: int) -> List[int]:
    last = max(n - tile, 0)
    tops = list(range(0, last + 1, stride))
    if tops[-1] != last:
        tops.append(last)
    return tops


def tile_grid(image_shape_: Sequence[int], spec: PatchSpec, stride_lr=None) -> List[Tuple[int, int]]:
    """Full-res centres of smallest-FoV tiles covering the image.

    ``stride_lr`` is in low-res pixels (default: one smallest FoV). Strides
    larger than a tile are shortened so coverage is never lost, and the last
    row/column of tiles is clamped to end at the image border.
    """
    H, W = image_shape_[:2]
    tile = spec.fovs[0]
    if stride_lr is None:
        stride = tile
    else:
        if stride_lr < 1:
            raise ContractError("stride_lr must be >= 1")
        stride = max(1, _round_half_up(stride_lr / spec.lowres_rate))
    stride = min(stride, tile)
    half = tile // 2
    return [(t + half, l + half) for t in _axis_tops(H, tile, stride) for l in _axis_tops(W, tile, stride)]
