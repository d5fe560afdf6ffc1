"""Supervised training of the enhancement network against binary vein masks.

The objective is BCE on the fused output plus, for every pyramid level, the
channel-averaged BCE of ``sigmoid(s_hat)`` against the same mask (deep
supervision). Each presentation is expanded into four samples (original,
horizontal flip, original, vertical flip) and the expanded list is reshuffled
every epoch.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ParameterError, PoisonedGradientError
from .imaging import load_gray, resize_bilinear, resize_nearest
from .presentation import WORKING_SIZE, Presentation
from .resfpn import ResFPNModel, fam_forward, sdblock_forward
from .tensor import (
    BCE_EPS,
    DTYPE,
    AdamState,
    Tensor,
    adam_step,
    add_scalars,
    bce_loss,
    sigmoid,
    sigmoid_forward,
    zero_grads,
)

log = logging.getLogger(__name__)


@dataclass
class TrainSample:
    image: Presentation
    mask: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.mask)
        if m.shape != self.image.shape:
            raise ParameterError(f"mask {m.shape} and image {self.image.shape} differ in size")
        if not np.all((m == 0) | (m == 1)):
            raise ParameterError("mask values must be 0 or 1")
        self.mask = m.astype(np.uint8)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 8
    alpha: float = 0.10
    seed: int = 0
    target_size: tuple[int, int] = WORKING_SIZE

    def __post_init__(self) -> None:
        self.target_size = (int(self.target_size[0]), int(self.target_size[1]))
        if self.lr < 0:
            raise ParameterError("learning rate must be non-negative")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2 for batch-norm statistics")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_size"] = list(self.target_size)
        return d


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    mean_output_bce: float
    batches: int
    samples: int
    step: int
    val_loss: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# data preparation


def hflip(sample: TrainSample) -> TrainSample:
    return TrainSample(Presentation(sample.image.pixels[:, ::-1], sample.image.source_id), sample.mask[:, ::-1])


def vflip(sample: TrainSample) -> TrainSample:
    return TrainSample(Presentation(sample.image.pixels[::-1, :], sample.image.source_id), sample.mask[::-1, :])


def augment_flips(sample: TrainSample) -> list[TrainSample]:
    """Original, horizontal flip, original, vertical flip (in that order)."""
    return [sample, hflip(sample), sample, vflip(sample)]


def rescale(image: Presentation, target_size: tuple[int, int] = WORKING_SIZE) -> Presentation:
    """Bilinear resampling to ``target_size`` (H, W)."""
    return Presentation(resize_bilinear(image.pixels, target_size), image.source_id)


def rescale_mask(mask: np.ndarray, target_size: tuple[int, int] = WORKING_SIZE) -> np.ndarray:
    """Nearest-neighbour resampling, re-binarised at 0.5."""
    return (resize_nearest(np.asarray(mask, dtype=np.float32), target_size) >= 0.5).astype(np.uint8)


def prepare(sample: TrainSample, target_size: tuple[int, int] = WORKING_SIZE) -> TrainSample:
    return TrainSample(rescale(sample.image, target_size), rescale_mask(sample.mask, target_size))


def load_training_dir(path: str | Path, target_size: tuple[int, int] = WORKING_SIZE) -> list[TrainSample]:
    """Pairs ``<id>.png`` with ``<id>.mask.png``; masks must be strictly 0/255."""
    path = Path(path)
    samples = []
    for img_path in sorted(path.glob("*.png")):
        if img_path.name.endswith(".mask.png"):
            continue
        mask_path = img_path.with_name(img_path.stem + ".mask.png")
        if not mask_path.exists():
            continue
        raw = np.rint(load_gray(mask_path) * 255).astype(np.uint8)
        if not np.all((raw == 0) | (raw == 255)):
            raise FormatError(f"{mask_path}: mask must contain only 0 and 255")
        img = Presentation(load_gray(img_path), img_path.stem)
        samples.append(prepare(TrainSample(img, (raw == 255).astype(np.uint8)), target_size))
    if not samples:
        raise FormatError(f"{path}: no <id>.png / <id>.mask.png pairs found")
    return samples


def expand(samples: Sequence[TrainSample]) -> list[TrainSample]:
    out: list[TrainSample] = []
    for s in samples:
        out.extend(augment_flips(s))
    return out


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic permutation for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def _stack(samples: Sequence[TrainSample]) -> tuple[Tensor, np.ndarray]:
    x = np.stack([s.image.pixels for s in samples])[:, None].astype(DTYPE)
    t = np.stack([s.mask for s in samples])[:, None].astype(DTYPE)
    return Tensor(x), t


# --------------------------------------------------------------------------
# objective


def total_loss(y: Tensor, s_hat_list: Sequence[Tensor], y_target) -> Tensor:
    """Output BCE plus the channel-averaged BCE of every ``sigmoid(s_hat)``."""
    t = y_target.data if isinstance(y_target, Tensor) else np.asarray(y_target, dtype=DTYPE)
    if t.shape != y.shape:
        raise ParameterError(f"target {t.shape} does not match output {y.shape}")
    terms = [bce_loss(y, t)]
    for s in s_hat_list:
        if s.shape[0] != t.shape[0] or s.shape[2:] != t.shape[2:]:
            raise ParameterError(f"level map {s.shape} does not match target {t.shape}")
        # mean over every element == mean over channels of per-channel BCE
        terms.append(bce_loss(sigmoid(s), np.broadcast_to(t, s.shape)))
    return add_scalars(terms)


def _block_sums(t: np.ndarray, factor: int) -> np.ndarray:
    n, c, h, w = t.shape
    return t.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5), dtype=np.float64)


def level_bce(z: Tensor, t: np.ndarray, factor: int) -> Tensor:
    """``BCE(sigmoid(upsample(z, factor)), t)`` evaluated at the low resolution.

    Nearest upsampling makes the prediction constant on each factor x factor
    block, so the block's contribution depends only on its vein-pixel count.
    The value and gradient equal the full-resolution composition.
    """
    counts = _block_sums(t, factor)  # (N, 1, h, w)
    area = float(factor * factor)
    p = sigmoid_forward(z.data).astype(np.float64)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    total = np.sum(-(counts * np.log(pc) + (area - counts) * np.log1p(-pc)))
    n_elems = z.data.size * area
    loss = np.asarray(total / n_elems, dtype=DTYPE)

    def backward(g: np.ndarray):
        # d/dz through the clamp; zero wherever the clamp is active
        gz = (area * pc - counts) / n_elems
        gz = np.where((p < BCE_EPS) | (p > 1.0 - BCE_EPS), 0.0, gz * p * (1.0 - p) / (pc * (1.0 - pc)))
        return ((gz * float(g)).astype(DTYPE),)

    return Tensor.from_op(loss, (z,), backward)


def _forward_fast(model: ResFPNModel, x: Tensor, t: np.ndarray, update_stats: bool = True) -> tuple[Tensor, Tensor]:
    """Training objective via the low-resolution level losses; returns (loss, output BCE)."""
    from .tensor import conv2d

    h, w = x.shape[2:]
    feats = x
    s_list = []
    for block in model.blocks:
        s, feats = sdblock_forward(block, feats, update_stats)
        s_list.append(s)
    _, y, _ = fam_forward(model.fam, s_list, (h, w))
    out_term = bce_loss(y, t)
    terms = [out_term]
    for s, proj, factor in zip(s_list, model.fam.per_level, model.fam.factors):
        terms.append(level_bce(conv2d(s, proj), t, factor))
    return add_scalars(terms), out_term


# --------------------------------------------------------------------------
# loops


def _snapshot_buffers(model: ResFPNModel) -> list[tuple[str, np.ndarray]]:
    return [(n, b.copy()) for n, b in model.named_buffers()]


def train_epoch(
    model: ResFPNModel,
    samples: Sequence[TrainSample],
    config: TrainConfig,
    adam_state: AdamState,
    epoch: int = 0,
) -> tuple[ResFPNModel, AdamState, EpochReport]:
    """One shuffled pass over ``samples`` (already augmented).

    On a non-finite gradient the offending batch is undone (batch-norm running
    statistics restored; parameters were never touched) and
    :class:`PoisonedGradientError` is raised.
    """
    if not samples:
        raise ParameterError("no training samples")
    model.train()
    adam_state.lr = config.lr
    params = model.parameters()
    order = epoch_order(len(samples), config.seed, epoch)
    losses: list[float] = []
    out_bces: list[float] = []
    weights: list[int] = []
    for b, start in enumerate(range(0, len(order), config.batch_size)):
        batch = [samples[i] for i in order[start : start + config.batch_size]]
        x, t = _stack(batch)
        saved = _snapshot_buffers(model)
        zero_grads(params)
        loss, out_term = _forward_fast(model, x, t)
        loss.backward()
        try:
            adam_step(params, [p.grad for p in params], adam_state)
        except PoisonedGradientError as exc:
            for name, buf in saved:
                model.set_buffer(name, buf)
            zero_grads(params)
            raise PoisonedGradientError(f"epoch {epoch}, batch {b}: {exc}") from exc
        losses.append(loss.item())
        out_bces.append(out_term.item())
        weights.append(len(batch))
    zero_grads(params)
    wts = np.asarray(weights, dtype=np.float64)
    report = EpochReport(
        epoch=epoch,
        mean_loss=float(np.dot(losses, wts) / wts.sum()),
        mean_output_bce=float(np.dot(out_bces, wts) / wts.sum()),
        batches=len(weights),
        samples=len(samples),
        step=adam_state.step,
    )
    return model, adam_state, report


def validate(model: ResFPNModel, samples: Sequence[TrainSample]) -> float:
    """Mean objective over ``samples`` with batch norm in eval mode."""
    if not samples:
        raise ParameterError("validation needs at least one sample")
    modes = [b.bn.training for b in model.blocks]
    model.eval()
    try:
        vals = []
        for s in samples:
            x, t = _stack([s])
            loss, _ = _forward_fast(model, x, t, update_stats=False)
            vals.append(loss.item())
    finally:
        for b, m in zip(model.blocks, modes):
            b.bn.training = m
    return float(np.mean(vals))


@dataclass
class FitResult:
    model: ResFPNModel
    adam_state: AdamState
    reports: list[EpochReport] = field(default_factory=list)
    best_epoch: int | None = None


def fit(
    model: ResFPNModel,
    train: Sequence[TrainSample],
    config: TrainConfig,
    val: Sequence[TrainSample] | None = None,
    adam_state: AdamState | None = None,
    on_epoch=None,
) -> FitResult:
    """Train for ``config.epochs`` epochs over the flip-augmented ``train`` list.

    With a validation list, the parameters of the epoch with the lowest
    validation loss are restored at the end.
    """
    state = adam_state or AdamState(lr=config.lr)
    samples = expand(train)
    result = FitResult(model, state)
    best: tuple[float, list[np.ndarray], list[tuple[str, np.ndarray]]] | None = None
    for epoch in range(config.epochs):
        model, state, report = train_epoch(model, samples, config, state, epoch)
        if val:
            report.val_loss = validate(model, val)
            if best is None or report.val_loss < best[0]:
                best = (report.val_loss, [p.data.copy() for p in model.parameters()], _snapshot_buffers(model))
                result.best_epoch = epoch
        log.info("epoch %d loss %.5f val %s", epoch, report.mean_loss, report.val_loss)
        result.reports.append(report)
        if on_epoch is not None:
            on_epoch(report)
    if best is not None:
        for p, data in zip(model.parameters(), best[1]):
            p.data = data
        for name, buf in best[2]:
            model.set_buffer(name, buf)
    result.model, result.adam_state = model, state
    return result


def checkpoint_save(model: ResFPNModel, adam_state: AdamState | None, path: str | Path, extra: dict | None = None) -> str:
    """Write a self-describing checkpoint; returns the embedded config hash."""
    from .formats import save_checkpoint

    return save_checkpoint(path, model, adam_state, extra)


def checkpoint_load(path: str | Path) -> tuple[ResFPNModel, AdamState | None, dict]:
    from .formats import load_checkpoint

    return load_checkpoint(path)
