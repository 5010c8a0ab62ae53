"""Joint training of the foveation module and the segmentation network."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import ConfigError
from .evaluation import confusion_matrix, parse_mode, scores_from_confusion, segment_image
from .foveation import FoveationNet, TemperatureSchedule, gsm_sample, tau_at
from .optim import OptimState, adam_step, poly_lr
from .patchio import PatchSpec, extract_label_patch, extract_patch_set, lowres_shape, make_lowres
from .segnet import SegConfig, SegNet
from .storage import image_shape
from .synth import Sample

log = logging.getLogger(__name__)

LEARNING_MODES = ("mean", "gsm", "mode")


@dataclass
class TrainConfig:
    mode: str = "mean"
    images_per_batch: int = 2       # L
    locations_per_image: int = 4    # B
    iterations: int = 2000
    lr0: float = 2e-5
    power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    fovs: Tuple[int, ...] = (16, 32, 64)
    out_size: int = 16
    lowres_rate: float = 0.125
    pad_mode: str = "reflect"
    classes: int = 4
    in_channels: int = 1
    fov_hidden: Tuple[int, ...] = (40, 40)
    seg_widths: Tuple[int, ...] = (16, 32, 64)
    tau_floor: float = 0.10
    tau_rate: Optional[float] = None  # default 1 / iterations
    val_every: int = 100
    threads: int = 1

    def __post_init__(self):
        self.fovs = tuple(int(f) for f in self.fovs)
        self.fov_hidden = tuple(int(w) for w in self.fov_hidden)
        self.seg_widths = tuple(int(w) for w in self.seg_widths)
        kind, d = parse_mode(self.mode)
        if kind == "fixed" and not 0 <= d < len(self.fovs):
            raise ConfigError(f"{self.mode}: patch index must lie in [0, {len(self.fovs)})")
        if self.images_per_batch < 1 or self.locations_per_image < 1:
            raise ConfigError("L and B must be >= 1")

    @property
    def patches_per_batch(self) -> int:
        return self.images_per_batch * self.locations_per_image

    @property
    def spec(self) -> PatchSpec:
        return PatchSpec(self.fovs, self.out_size, self.lowres_rate, self.pad_mode)

    @property
    def schedule(self) -> TemperatureSchedule:
        rate = self.tau_rate if self.tau_rate is not None else 1.0 / max(self.iterations, 1)
        return TemperatureSchedule(rate=rate, floor=self.tau_floor)

    @property
    def seg_config(self) -> SegConfig:
        return SegConfig(self.in_channels, self.classes, self.out_size, self.seg_widths)


class SeedStreams:
    """One master seed split into independent data / init / sampling streams."""

    def __init__(self, seed: int):
        data, init, sampling = np.random.SeedSequence(seed).spawn(3)
        init_fov, init_seg = init.spawn(2)
        self.data = np.random.default_rng(data)
        self.init_fov = np.random.default_rng(init_fov)
        self.init_seg = np.random.default_rng(init_seg)
        self.sampling = np.random.default_rng(sampling)


def build_models(config: TrainConfig, streams: SeedStreams) -> Tuple[FoveationNet, SegNet]:
    fov = FoveationNet(config.in_channels, config.fov_hidden + (len(config.fovs),), rng=streams.init_fov)
    seg = SegNet(config.seg_config, rng=streams.init_seg)
    return fov, seg


# ---------------------------------------------------------------------------
# minibatches
# ---------------------------------------------------------------------------


@dataclass
class Minibatch:
    image_slots: np.ndarray     # (P,) index into ``images``
    image_ids: List[str]
    locations: np.ndarray       # (P, 2) low-res (row, col)
    patches: np.ndarray         # (P, D, S, S, C)
    labels: np.ndarray          # (P, S, S)
    images: List[int]           # dataset indices of the L images
    lowres: List[np.ndarray]    # their low-res versions

    def __len__(self):
        return len(self.image_slots)


class LowresCache:
    def __init__(self, rate: float):
        self.rate = rate
        self._store: Dict[int, np.ndarray] = {}

    def get(self, idx: int, image) -> np.ndarray:
        if idx not in self._store:
            self._store[idx] = make_lowres(image, self.rate)
        return self._store[idx]


def build_minibatch(dataset: Sequence[Sample], config: TrainConfig, rng: np.random.Generator,
                    cache: Optional[LowresCache] = None, pool: Optional[ThreadPoolExecutor] = None) -> Minibatch:
    """L images, B random low-res locations each, with their patch sets and labels."""
    if not dataset:
        raise ConfigError("dataset is empty")
    spec = config.spec
    cache = cache if cache is not None else LowresCache(spec.lowres_rate)
    L, B = config.images_per_batch, config.locations_per_image
    chosen = rng.choice(len(dataset), size=L, replace=L > len(dataset))
    jobs, slots, locs = [], [], []
    for slot, idx in enumerate(chosen):
        sample = dataset[idx]
        h, w = lowres_shape(*image_shape(sample.image)[:2], spec.lowres_rate)
        flat = rng.choice(h * w, size=B, replace=B > h * w)
        for f in flat:
            loc = (int(f // w), int(f % w))
            jobs.append((sample, loc))
            slots.append(slot)
            locs.append(loc)

    def work(job):
        sample, loc = job
        return extract_patch_set(sample.image, loc, spec).patches, extract_label_patch(sample.labels, loc, spec)

    results = list(pool.map(work, jobs)) if pool is not None else [work(j) for j in jobs]
    return Minibatch(
        image_slots=np.array(slots),
        image_ids=[dataset[chosen[s]].image_id for s in slots],
        locations=np.array(locs),
        patches=np.stack([r[0] for r in results]),
        labels=np.stack([r[1] for r in results]),
        images=[int(i) for i in chosen],
        lowres=[cache.get(int(i), dataset[i].image) for i in chosen],
    )


# ---------------------------------------------------------------------------
# one optimisation step
# ---------------------------------------------------------------------------


class NonFiniteLoss(FloatingPointError):
    pass


def patch_distribution(fov: FoveationNet, batch: Minibatch) -> T.DiffTensor:
    """Train-mode foveation output gathered at the batch locations -> (P, D)."""
    shapes = {lr.shape for lr in batch.lowres}
    if len(shapes) == 1:
        fmap = fov.forward(np.stack(batch.lowres), mode="train")
        return T.gather_locations(fmap, batch.image_slots, batch.locations[:, 0], batch.locations[:, 1])
    # slots are contiguous in the batch, so per-image pieces concatenate in order
    parts = []
    for slot, lr in enumerate(batch.lowres):
        sel = np.nonzero(batch.image_slots == slot)[0]
        fmap = fov.forward(lr[None], mode="train")
        parts.append(T.gather_locations(fmap, np.zeros(sel.size, int), batch.locations[sel, 0], batch.locations[sel, 1]))
    return T.concat(parts, axis=0)


def selection_weights(config: TrainConfig, fov: FoveationNet, batch: Minibatch, tau: float,
                      rng: np.random.Generator) -> T.DiffTensor:
    kind, d = parse_mode(config.mode)
    P, D = len(batch), len(config.fovs)
    if kind == "mean":
        return patch_distribution(fov, batch)
    if kind == "gsm":
        return gsm_sample(patch_distribution(fov, batch), tau, rng)
    if kind == "mode":
        return T.straight_through_onehot(patch_distribution(fov, batch))
    if kind == "fixed":
        return T.DiffTensor(np.tile(np.eye(D)[d], (P, 1)))
    if kind == "average":
        return T.DiffTensor(np.full((P, D), 1.0 / D))
    return T.DiffTensor(np.eye(D)[rng.integers(0, D, size=P)])


def batch_loss(config: TrainConfig, fov: FoveationNet, seg: SegNet, batch: Minibatch, tau: float,
               rng: np.random.Generator) -> T.DiffTensor:
    weights = selection_weights(config, fov, batch, tau, rng)
    x = T.blend(weights, batch.patches)
    logits = seg.forward(x)
    return T.cross_entropy(logits, batch.labels, per_sample=True)


def trainable_parameters(config: TrainConfig, fov: FoveationNet, seg: SegNet) -> List[T.DiffTensor]:
    params = seg.parameters()
    if parse_mode(config.mode)[0] in LEARNING_MODES:
        params = fov.parameters() + params
    return params


def train_step(batch: Minibatch, fov: FoveationNet, seg: SegNet, state: OptimState, config: TrainConfig,
               t: int, rng: np.random.Generator) -> float:
    """Mean loss over the batch's P patches, then one Adam step at poly_lr(t)."""
    params = trainable_parameters(config, fov, seg)
    for p in params:
        p.zero_grad()
    tau = tau_at(config.schedule, t)
    loss = batch_loss(config, fov, seg, batch, tau, rng)
    value = float(loss.values)
    if not np.isfinite(value):
        raise NonFiniteLoss(
            f"non-finite loss at iteration {t}; batch locations: "
            + ", ".join(f"{i}@{tuple(l)}" for i, l in zip(batch.image_ids, batch.locations))
        )
    if loss.requires_grad:
        loss.backward()
    adam_step(params, state, poly_lr(t, config.iterations, config.lr0, config.power))
    return value


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class RunLog:
    iteration: List[int] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    tau: List[float] = field(default_factory=list)
    val_miou: Dict[int, float] = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "lr", "tau", "val_miou"])
            for it, lo, lr, tau in zip(self.iteration, self.loss, self.lr, self.tau):
                v = self.val_miou.get(it)
                w.writerow([it, repr(lo), repr(lr), repr(tau), "" if v is None else repr(v)])


@dataclass
class FitResult:
    fov: FoveationNet
    seg: SegNet
    log: RunLog
    best_miou: float
    best_iteration: int


def validation_miou(dataset: Sequence[Sample], fov: FoveationNet, seg: SegNet, config: TrainConfig,
                    fov_lr_rate: float = 1.0, rng=None) -> float:
    conf = np.zeros((config.classes, config.classes), dtype=np.int64)
    for s in dataset:
        pred = segment_image(s.image, fov, seg, config.spec, config.mode, fov_lr_rate, rng=rng).pred
        conf += confusion_matrix(pred, s.labels, config.classes)
    return scores_from_confusion(conf).miou


def model_state(fov: FoveationNet, seg: SegNet) -> Dict[str, np.ndarray]:
    return {**fov.state_dict(), **seg.state_dict()}


def fit(train: Sequence[Sample], val: Sequence[Sample], config: TrainConfig, out_dir=None) -> FitResult:
    """Run Algorithm-style joint optimisation; keep the best-validation parameters."""
    if not train:
        raise ConfigError("training set is empty")
    streams = SeedStreams(config.seed)
    fov, seg = build_models(config, streams)
    params = trainable_parameters(config, fov, seg)
    state = OptimState.for_params(params, lr0=config.lr0, beta1=config.beta1, beta2=config.beta2,
                                  eps=config.eps, weight_decay=config.weight_decay)
    runlog = RunLog()
    cache = LowresCache(config.lowres_rate)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best_state, best_miou, best_it = None, -np.inf, 0
    start = time.perf_counter()
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        with threadpool_limits(limits=config.threads):
            for t in range(config.iterations):
                batch = build_minibatch(train, config, streams.data, cache, pool)
                loss = train_step(batch, fov, seg, state, config, t, streams.sampling)
                runlog.iteration.append(t)
                runlog.loss.append(loss)
                runlog.lr.append(poly_lr(t, config.iterations, config.lr0, config.power))
                runlog.tau.append(tau_at(config.schedule, t))
                done = t + 1
                if val and (done % config.val_every == 0 or done == config.iterations):
                    miou = validation_miou(val, fov, seg, config, rng=np.random.default_rng(config.seed))
                    runlog.val_miou[t] = miou
                    log.info("iter %d loss %.4f val mIoU %.4f", done, loss, miou)
                    if miou > best_miou:
                        best_state, best_miou, best_it = model_state(fov, seg), miou, done
                        if out is not None:
                            save_checkpoint(out / "best.ckpt", best_state)
    finally:
        if pool is not None:
            pool.shutdown()
    runlog.wall_clock = time.perf_counter() - start
    if best_state is not None:
        fov.load_state_dict(best_state)
        seg.load_state_dict(best_state)
    else:
        best_it = config.iterations
        best_miou = float("nan")
    if out is not None:
        save_checkpoint(out / "model.ckpt", model_state(fov, seg))
        runlog.to_csv(out / "runlog.csv")
    return FitResult(fov, seg, runlog, float(best_miou), best_it)
