"""Pair sampling, learning-rate/freezing schedule and the SGD training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig, TrainConfig
from .evaluation import Sequence
from .geometry import BoundingBox, CropSpec, context_side, crop_patch, crop_square
from .head import assign_labels, stack_labels
from .numerics import BatchNorm

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def lr_at(epoch_fraction: float, cfg: TrainConfig | None = None) -> float:
    """Linear warmup then exponential decay, exact at the segment ends."""
    cfg = TrainConfig() if cfg is None else cfg
    t = float(epoch_fraction)
    if not 0.0 <= t <= cfg.epochs:
        raise ValueError(f"epoch {t} outside [0, {cfg.epochs}]")
    if t <= cfg.warmup_epochs:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * t / cfg.warmup_epochs
    u = (t - cfg.warmup_epochs) / cfg.decay_epochs
    return cfg.lr_peak ** (1.0 - u) * cfg.lr_end ** u


def frozen_stages(epoch: int, cfg: TrainConfig, stage_names) -> list[str]:
    """Backbone stages frozen during 0-based ``epoch``."""
    if epoch < cfg.freeze_backbone_epochs:
        return list(stage_names)
    return list(cfg.partial_freeze)


def apply_freeze(model, epoch: int, cfg: TrainConfig) -> None:
    bb = model.backbone
    bb.unfreeze("all")
    names = frozen_stages(epoch, cfg, bb.stage_names)
    if names:
        bb.freeze(names)


# --------------------------------------------------------------------------
# Pair sampling


@dataclass
class PairSample:
    template: np.ndarray        # [127, 127, 3] float
    search: np.ndarray          # [287, 287, 3] float
    template_box: BoundingBox   # target in template-patch coordinates
    gt_box: BoundingBox         # target in search-patch coordinates


def make_pair(seq: Sequence, template_index: int, search_index: int, shift=(0.0, 0.0),
              scale_factor: float = 1.0, crop: CropSpec = CropSpec()) -> PairSample:
    """Crop a training pair; the search crop centre is the gt centre + ``shift`` (image px)."""
    tb = seq.gt[template_index]
    template, scale_z = crop_patch(seq.frame(template_index), tb, crop.template_size,
                                   crop.context_amount)
    c = crop.template_size / 2
    template_box = BoundingBox(c, c, tb.w * scale_z, tb.h * scale_z)

    sb = seq.gt[search_index]
    side_x = context_side(sb.w, sb.h, crop.context_amount) * crop.search_size / crop.template_size
    side_x *= scale_factor
    cx, cy = sb.cx + shift[0], sb.cy + shift[1]
    search = crop_square(seq.frame(search_index), cx, cy, side_x, crop.search_size)
    scale_x = crop.search_size / side_x
    h = crop.search_size / 2
    gt = BoundingBox(h + (sb.cx - cx) * scale_x, h + (sb.cy - cy) * scale_x,
                     sb.w * scale_x, sb.h * scale_x)
    return PairSample(template, search, template_box, gt)


def sample_pair(source, rng: np.random.Generator, crop: CropSpec = CropSpec(),
                max_gap: int = 20, shift_jitter: float = 0.25,
                scale_jitter: float = 0.45) -> PairSample:
    """Random pair from one sequence of ``source`` (a Sequence or a list of them)."""
    seqs = [source] if isinstance(source, Sequence) else list(source)
    if not seqs:
        raise ValueError("no sequences to sample from")
    seq = seqs[int(rng.integers(len(seqs)))]
    n = len(seq)
    if n < 1:
        raise ValueError(f"sequence {seq.name} has no frames")
    ti = int(rng.integers(n))
    si = int(np.clip(ti + rng.integers(-max_gap, max_gap + 1), 0, n - 1))
    sb = seq.gt[si]
    side_z = context_side(sb.w, sb.h, crop.context_amount)
    shift = tuple(rng.uniform(-shift_jitter, shift_jitter, size=2) * side_z)
    ls = math.log1p(scale_jitter)
    scale = float(math.exp(rng.uniform(-ls, ls)))
    return make_pair(seq, ti, si, shift, scale, crop)


@dataclass
class Batch:
    templates: np.ndarray
    searches: np.ndarray
    template_boxes: list
    labels: object
    gt_boxes: list = field(default_factory=list)


def make_batch(pairs: list[PairSample], grid) -> Batch:
    return Batch(np.stack([p.template for p in pairs]),
                 np.stack([p.search for p in pairs]),
                 [p.template_box for p in pairs],
                 stack_labels([assign_labels(p.gt_box, grid) for p in pairs]),
                 [p.gt_box for p in pairs])


class PairSource:
    """Draws batches of pairs from a pool of sequences."""

    def __init__(self, sequences, cfg: TrainConfig, crop: CropSpec):
        self.sequences = [sequences] if isinstance(sequences, Sequence) else list(sequences)
        self.cfg = cfg
        self.crop = crop

    def batch(self, rng, grid, size: int | None = None) -> Batch:
        n = self.cfg.batch_size if size is None else size
        pairs = [sample_pair(self.sequences, rng, self.crop, self.cfg.max_gap,
                             self.cfg.shift_jitter, self.cfg.scale_jitter) for _ in range(n)]
        return make_batch(pairs, grid)


# --------------------------------------------------------------------------
# Optimisation


class SGD:
    def __init__(self, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, model, lr: float, grad_clip: float | None = None) -> float:
        items = list(model.named_grads())
        norm = math.sqrt(sum(float((g * g).sum()) for _, _, g in items))
        factor = 1.0
        if grad_clip and norm > grad_clip:
            factor = grad_clip / norm
        for path, p, g in items:
            d = g * factor + self.weight_decay * p
            v = self.velocity.get(path)
            v = d if v is None else self.momentum * v + d
            self.velocity[path] = v
            p -= lr * v
        return norm


def calibrate_batchnorm(model, batches) -> None:
    """Set the running statistics of every non-frozen batch norm to their
    average over ``batches``.

    Frozen layers keep their statistics and stay in inference mode, so the
    layers after them are calibrated on the features they will actually see.
    """
    bns = [op for _, op in model.named_ops() if isinstance(op, BatchNorm) and not op.frozen]
    saved = [op.momentum for op in bns]
    for op in bns:
        op.momentum, op.num_batches = None, 0
    try:
        for b in batches:
            model.forward(b.templates, b.searches, b.template_boxes, training=True)
    finally:
        for op, m in zip(bns, saved):
            op.momentum, op.num_batches = m, 0


@dataclass
class TrainResult:
    checkpoints: list[Path]
    log_lines: list[str]
    losses: list[float]


LOG_HEADER = "epoch,step,lr,total,cls,cen,reg"


def train(cfg: RunConfig, model, source, out_dir=None, log_path=None,
          steps_override: int | None = None) -> TrainResult:
    """Train ``model`` in place; writes ``epoch_XX.ckpt`` files to ``out_dir``.

    The learning rate is evaluated per step at ``epoch + step / steps_per_epoch``.
    """
    tcfg = cfg.train
    rng = np.random.default_rng(cfg.seed)
    pairs = source if isinstance(source, PairSource) else PairSource(source, tcfg, model.crop)
    opt = SGD(tcfg.momentum, tcfg.weight_decay)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        new = not log_path.exists() or log_path.stat().st_size == 0
        log_file = log_path.open("a")
        if new:
            log_file.write(LOG_HEADER + "\n")

    if tcfg.calibration_batches:
        calibrate_batchnorm(model, [pairs.batch(rng, model.grid) for _ in range(tcfg.calibration_batches)])

    result = TrainResult([], [], [])
    step_global = 0
    total_steps = tcfg.epochs * tcfg.steps_per_epoch
    if steps_override is not None:
        total_steps = min(total_steps, steps_override)
    try:
        for epoch in range(tcfg.epochs):
            apply_freeze(model, epoch, tcfg)
            for step in range(tcfg.steps_per_epoch):
                if step_global >= total_steps:
                    break
                lr = lr_at(epoch + step / tcfg.steps_per_epoch, tcfg)
                batch = pairs.batch(rng, model.grid)
                out, cache = model.forward(batch.templates, batch.searches, batch.template_boxes,
                                           training=True)
                loss = model.loss(out, batch.labels)
                if not all(math.isfinite(v) for v in (loss.total, loss.cls, loss.cen, loss.reg)):
                    _dump(out_dir, batch, epoch, step)
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch + 1} step {step}: total={loss.total} "
                        f"cls={loss.cls} cen={loss.cen} reg={loss.reg}")
                model.zero_grad()
                model.backward(loss.grad, cache)
                opt.step(model, lr, tcfg.grad_clip)
                line = (f"{epoch + 1},{step_global},{lr:.8g},{loss.total:.8g},{loss.cls:.8g},"
                        f"{loss.cen:.8g},{loss.reg:.8g}")
                result.log_lines.append(line)
                result.losses.append(loss.total)
                if log_file:
                    log_file.write(line + "\n")
                step_global += 1
            if out_dir is not None and ((epoch + 1) % tcfg.checkpoint_every == 0
                                        or epoch + 1 == tcfg.epochs):
                result.checkpoints.append(
                    save_checkpoint(out_dir / f"epoch_{epoch + 1:02d}.ckpt", model.state_dict()))
            log.info("epoch %d done, last loss %.4f", epoch + 1,
                     result.losses[-1] if result.losses else float("nan"))
            if step_global >= total_steps:
                break
    finally:
        if log_file:
            log_file.close()
        model.backbone.unfreeze("all")
    return result


def _dump(out_dir, batch: Batch, epoch, step) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(out_dir / f"diverged_e{epoch + 1}_s{step}.npz",
             templates=batch.templates, searches=batch.searches,
             template_boxes=np.array([b.to_xywh() for b in batch.template_boxes]),
             gt_boxes=np.array([b.to_xywh() for b in batch.gt_boxes]))
