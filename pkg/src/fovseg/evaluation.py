"""Whole-image inference, foveation / gold-standard maps and segmentation scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError
from .foveation import FoveationNet
from .patchio import (
    PatchSpec, extract_patches_at, full_to_lr, label_patch_at, lowres_shape, make_lowres, tile_grid,
)
from .segnet import SegNet
from .storage import image_shape
from .tensor import IGNORE, argmax_onehot, blend, DiffTensor


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------


@dataclass
class ClassScores:
    iou: np.ndarray          # NaN where the class has empty union
    pixel_acc: np.ndarray    # NaN where the class is absent from the truth
    present: np.ndarray      # class occurs in the truth
    miou: float
    overall_acc: float
    empty: bool = False


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, k: int) -> np.ndarray:
    """(K, K) counts indexed [truth, pred], IGNORE pixels dropped."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    valid = truth != IGNORE
    t, p = truth[valid].astype(np.int64), pred[valid].astype(np.int64)
    return np.bincount(t * k + p, minlength=k * k).reshape(k, k)


def scores_from_confusion(conf: np.ndarray) -> ClassScores:
    inter = np.diag(conf).astype(np.float64)
    gt = conf.sum(axis=1).astype(np.float64)
    pr = conf.sum(axis=0).astype(np.float64)
    union = gt + pr - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)
        acc = np.where(gt > 0, inter / gt, np.nan)
    present = gt > 0
    total = conf.sum()
    if total == 0:
        return ClassScores(iou, acc, present, float("nan"), float("nan"), empty=True)
    return ClassScores(iou, acc, present, float(iou[present].mean()), float(inter.sum() / total))


def compute_scores(pred: np.ndarray, truth: np.ndarray, k: int) -> ClassScores:
    """Per-class IoU and pixel accuracy; mIoU averages classes present in the truth."""
    return scores_from_confusion(confusion_matrix(pred, truth, k))


def write_scores_csv(path, scores: ClassScores) -> None:
    lines = ["class,iou,pixel_accuracy"]
    for c, (i, a) in enumerate(zip(scores.iou, scores.pixel_acc)):
        lines.append(f"{c},{i:.6f},{a:.6f}")
    lines.append(f"mean,{scores.miou:.6f},{scores.overall_acc:.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# maps
# ---------------------------------------------------------------------------


def _normalise_fov(avg: np.ndarray, fovs: Sequence[float]) -> np.ndarray:
    lo, hi = float(min(fovs)), float(max(fovs))
    if hi == lo:
        return np.zeros_like(avg)
    return (avg - lo) / (hi - lo)


def foveation_map(dist: np.ndarray, fovs: Sequence[float]) -> np.ndarray:
    """Probability-weighted FoV per location, min-max normalised to [0, 1]."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape[-1] != len(fovs):
        raise ContractError(f"distribution has {dist.shape[-1]} entries, expected {len(fovs)}")
    return _normalise_fov(dist @ np.asarray(fovs, dtype=np.float64), fovs)


def _miou_weights(miou_maps) -> np.ndarray:
    m = np.nan_to_num(np.asarray(miou_maps, dtype=np.float64), nan=0.0)
    s = m.sum(axis=0)
    uniform = np.full_like(m, 1.0 / m.shape[0])
    return np.where(s > 0, m / np.where(s > 0, s, 1.0), uniform)


def gold_standard_map(miou_maps, fovs: Sequence[float]) -> np.ndarray:
    """FoVs weighted by each fixed-patch baseline's local mIoU, then normalised.

    ``miou_maps`` stacks one map per baseline on axis 0, in FoV order.
    """
    miou_maps = np.asarray(miou_maps, dtype=np.float64)
    if miou_maps.shape[0] != len(fovs):
        raise ConfigError(f"need one mIoU map per FoV ({len(fovs)}), got {miou_maps.shape[0]}")
    w = _miou_weights(miou_maps)
    avg = np.tensordot(np.asarray(fovs, dtype=np.float64), w, axes=(0, 0))
    return _normalise_fov(avg, fovs)


def gold_standard_argmax_map(miou_maps, fovs: Sequence[float]) -> np.ndarray:
    """FoV of the best baseline at each location (lowest FoV on ties)."""
    miou_maps = np.nan_to_num(np.asarray(miou_maps, dtype=np.float64), nan=0.0)
    if miou_maps.shape[0] != len(fovs):
        raise ConfigError(f"need one mIoU map per FoV ({len(fovs)}), got {miou_maps.shape[0]}")
    best = np.asarray(fovs, dtype=np.float64)[np.argmax(miou_maps, axis=0)]
    return _normalise_fov(best, fovs)


def map_mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"map shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def parse_mode(mode: str) -> Tuple[str, Optional[int]]:
    """'mean' | 'gsm' | 'mode' | 'random' | 'average' | 'fixed-<d>'."""
    if mode in ("mean", "gsm", "mode", "random", "average"):
        return mode, None
    if mode.startswith("fixed-"):
        try:
            return "fixed", int(mode[len("fixed-"):])
        except ValueError:
            pass
    raise ConfigError(f"unknown selection mode {mode!r}")


def uses_foveation(mode: str) -> bool:
    return parse_mode(mode)[0] in ("mean", "gsm", "mode")


def inference_weights(mode: str, f: Optional[np.ndarray], n: int, d_total: int, rng=None) -> np.ndarray:
    """(n, D) patch weights at inference; sampled schemes collapse to argmax."""
    kind, d = parse_mode(mode)
    if kind == "mean":
        return np.asarray(f)
    if kind in ("gsm", "mode"):
        return argmax_onehot(np.asarray(f))
    if kind == "fixed":
        if not 0 <= d < d_total:
            raise ConfigError(f"fixed patch index {d} outside [0, {d_total})")
        return np.tile(np.eye(d_total)[d], (n, 1))
    if kind == "average":
        return np.full((n, d_total), 1.0 / d_total)
    rng = rng if rng is not None else np.random.default_rng(0)
    return np.eye(d_total)[rng.integers(0, d_total, size=n)]


@dataclass
class Segmentation:
    pred: np.ndarray            # (H, W) class indices
    logits: np.ndarray          # (H, W, K) seam-averaged logits
    centers: List[Tuple[int, int]]
    weights: np.ndarray         # (n_tiles, D) weights used per tile
    dist: Optional[np.ndarray]  # distribution grid the weights were read from


def distribution_grid(image, fov_net: FoveationNet, spec: PatchSpec, fov_lr_rate: float = 1.0) -> np.ndarray:
    """Eval-mode foveation output, optionally area-downsampled by ``fov_lr_rate``."""
    lowres = make_lowres(image, spec.lowres_rate)
    dist = fov_net.forward(lowres[None], mode="eval").values[0]
    if fov_lr_rate != 1.0:
        dist = make_lowres(dist, fov_lr_rate)
    return dist


def segment_image(
    image,
    fov_net: Optional[FoveationNet],
    seg_net: SegNet,
    spec: PatchSpec,
    mode: str = "mean",
    fov_lr_rate: float = 1.0,
    rng=None,
    batch_size: int = 64,
) -> Segmentation:
    """Tile the image with smallest-FoV tiles and stitch per-tile predictions.

    Overlapping tile logits are averaged before the argmax.
    """
    H, W = image_shape(image)[:2]
    D, S, F = spec.n_patches, spec.out_size, spec.fovs[0]
    centers = tile_grid((H, W), spec)
    dist = None
    f = None
    if uses_foveation(mode):
        if fov_net is None:
            raise ConfigError(f"mode {mode!r} needs a foveation network")
        dist = distribution_grid(image, fov_net, spec, fov_lr_rate)
        idx = [full_to_lr(c, (H, W), dist.shape[:2]) for c in centers]
        f = np.stack([dist[r, c] for r, c in idx])
    weights = inference_weights(mode, f, len(centers), D, rng)

    k = seg_net.config.classes
    acc = np.zeros((H, W, k))
    count = np.zeros((H, W, 1))
    offs = np.floor((np.arange(F) + 0.5) * (S / F)).astype(int)
    for b0 in range(0, len(centers), batch_size):
        chunk = centers[b0:b0 + batch_size]
        patches = np.stack([extract_patches_at(image, c, spec) for c in chunk])
        x = blend(DiffTensor(weights[b0:b0 + len(chunk)]), patches)
        logits = seg_net.forward(x).values
        for c, lg in zip(chunk, logits):
            r0, c0 = c[0] - F // 2, c[1] - F // 2
            rr, cc = np.arange(r0, r0 + F), np.arange(c0, c0 + F)
            rin, cin = (rr >= 0) & (rr < H), (cc >= 0) & (cc < W)
            up = lg[np.ix_(offs[rin], offs[cin])]
            acc[np.ix_(rr[rin], cc[cin])] += up
            count[np.ix_(rr[rin], cc[cin])] += 1.0
    logits = acc / np.maximum(count, 1.0)
    return Segmentation(np.argmax(logits, axis=-1), logits, centers, weights, dist)


def tile_miou(pred: np.ndarray, truth: np.ndarray, centers, spec: PatchSpec, k: int) -> np.ndarray:
    """mIoU of ``pred`` inside each smallest-FoV tile (NaN when the tile has no labels)."""
    out = np.empty(len(centers))
    for i, c in enumerate(centers):
        t = label_patch_at(truth, c, spec)
        p = label_patch_at(pred, c, spec)
        out[i] = compute_scores(p, t, k).miou
    return out


def foveation_map_at_tiles(dist: np.ndarray, fovs, centers, full_shape) -> np.ndarray:
    fmap = foveation_map(dist, fovs)
    idx = [full_to_lr(c, full_shape, fmap.shape) for c in centers]
    return np.array([fmap[r, c] for r, c in idx])


def tiles_to_grid(values: np.ndarray, centers) -> np.ndarray:
    """Arrange per-tile values on the (rows, cols) grid implied by the centres."""
    rows = sorted({c[0] for c in centers})
    cols = sorted({c[1] for c in centers})
    grid = np.full((len(rows), len(cols)), np.nan)
    ri = {r: i for i, r in enumerate(rows)}
    ci = {c: i for i, c in enumerate(cols)}
    for v, (r, c) in zip(values, centers):
        grid[ri[r], ci[c]] = v
    return grid
