"""Anchor-free classification / centerness / regression head and its losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import BoundingBox, grid_offset
from .numerics import DTYPE, BatchNorm, Conv1x1, DiffOp, ReLU, Sequential


@dataclass(frozen=True)
class GridSpec:
    """Response grid of ``size x size`` cells laid over a ``patch_size`` patch."""

    size: int
    stride: int
    patch_size: int

    @property
    def offset(self) -> float:
        return grid_offset(self.patch_size, self.size, self.stride)

    def anchors(self) -> np.ndarray:
        """Patch coordinate of every cell anchor along one axis."""
        return self.offset + self.stride * np.arange(self.size, dtype=DTYPE)

    def anchor(self, i: int, j: int) -> tuple[float, float]:
        """``(px, py)`` of cell ``(row i, col j)``."""
        return self.offset + self.stride * j, self.offset + self.stride * i


class HeadOutput(NamedTuple):
    cls: np.ndarray  # [..., H, W, 2] background / foreground logits
    cen: np.ndarray  # [..., H, W, 1] centerness logit
    reg: np.ndarray  # [..., H, W, 4] l, t, r, b (patch px, >= 0)


def _tower(cin, hidden, depth, rng):
    ops = []
    for d in range(depth):
        ops += [Conv1x1(cin if d == 0 else hidden, hidden, bias=False, rng=rng),
                BatchNorm(hidden), ReLU()]
    return Sequential(*ops)


class Head(DiffOp):
    """Two 1x1 conv towers: classification (+ centerness) and regression.

    Regression distances are ``reg_scale * exp(z)`` so they stay positive.
    """

    def __init__(self, in_channels: int, hidden: int = 64, depth: int = 2,
                 reg_scale: float = 8.0, centerness: bool = True, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_channels = in_channels
        self.reg_scale = reg_scale
        self.centerness = centerness
        self.cls_tower = self.add("cls_tower", _tower(in_channels, hidden, depth, rng))
        self.reg_tower = self.add("reg_tower", _tower(in_channels, hidden, depth, rng))
        self.cls_out = self.add("cls_out", Conv1x1(hidden, 2, rng=rng, std=0.01))
        self.cen_out = self.add("cen_out", Conv1x1(hidden, 1, rng=rng, std=0.01))
        self.reg_out = self.add("reg_out", Conv1x1(hidden, 4, rng=rng, std=0.01))

    def forward(self, resp, training: bool = False):
        resp = np.asarray(resp, dtype=DTYPE)
        if resp.shape[-1] != self.in_channels:
            raise ValueError(
                f"dimension mismatch: head expects {self.in_channels} channels, got {resp.shape[-1]}")
        hc, c_cls = self.cls_tower.forward(resp, training)
        hr, c_reg = self.reg_tower.forward(resp, training)
        cls, c1 = self.cls_out.forward(hc)
        cen, c2 = self.cen_out.forward(hc)
        z, c3 = self.reg_out.forward(hr)
        reg = self.reg_scale * np.exp(z)
        return HeadOutput(cls, cen, reg), (c_cls, c_reg, c1, c2, c3, reg)

    def backward(self, dout: HeadOutput, cache):
        c_cls, c_reg, c1, c2, c3, reg = cache
        dcls, dcen, dreg = dout
        dhc = self.cls_out.backward(dcls, c1) + self.cen_out.backward(dcen, c2)
        dhr = self.reg_out.backward(dreg * reg, c3)
        return self.cls_tower.backward(dhc, c_cls) + self.reg_tower.backward(dhr, c_reg)


# --------------------------------------------------------------------------
# Labels and decoding


@dataclass
class LabelMap:
    cls_target: np.ndarray  # [..., H, W] in {0, 1}
    cen_target: np.ndarray  # [..., H, W] in [0, 1]
    reg_target: np.ndarray  # [..., H, W, 4]
    empty: bool = False


def centerness(ltrb: np.ndarray) -> np.ndarray:
    l, t, r, b = np.moveaxis(np.asarray(ltrb, dtype=DTYPE), -1, 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = (np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, b) / np.maximum(t, b))
    return np.sqrt(np.clip(np.nan_to_num(v), 0.0, 1.0))


def assign_labels(gt_box_in_patch: BoundingBox, grid: GridSpec) -> LabelMap:
    """Cells whose anchor lies strictly inside the gt box are positive."""
    a = grid.anchors()
    px, py = a[None, :], a[:, None]
    x0, y0, x1, y1 = gt_box_in_patch.corners
    l = np.broadcast_to(px - x0, (grid.size, grid.size))
    t = np.broadcast_to(py - y0, (grid.size, grid.size))
    r = np.broadcast_to(x1 - px, (grid.size, grid.size))
    b = np.broadcast_to(y1 - py, (grid.size, grid.size))
    ltrb = np.stack([l, t, r, b], axis=-1)
    pos = (ltrb > 0).all(axis=-1)
    reg = np.where(pos[..., None], ltrb, 0.0)
    cen = np.where(pos, centerness(reg), 0.0)
    return LabelMap(pos.astype(DTYPE), cen, reg, empty=not pos.any())


def stack_labels(labels: list[LabelMap]) -> LabelMap:
    return LabelMap(np.stack([m.cls_target for m in labels]),
                    np.stack([m.cen_target for m in labels]),
                    np.stack([m.reg_target for m in labels]),
                    empty=all(m.empty for m in labels))


def decode_box(cell: tuple[int, int], reg, grid: GridSpec) -> BoundingBox:
    """Box ``[px-l, py-t, px+r, py+b]`` around the anchor of ``cell = (row, col)``."""
    l, t, r, b = (float(v) for v in reg)
    if min(l, t, r, b) < 0:
        raise ValueError("regression distances must be nonnegative")
    px, py = grid.anchor(*cell)
    return BoundingBox.from_corners(px - l, py - t, px + r, py + b)


# --------------------------------------------------------------------------
# Losses


@dataclass
class LossResult:
    total: float
    cls: float
    cen: float
    reg: float
    grad: HeadOutput  # d total / d head outputs


def _log_softmax2(z):
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def iou_ltrb(pred: np.ndarray, target: np.ndarray):
    """IoU of boxes sharing an anchor, plus d IoU / d pred."""
    pl, pt, pr, pb = np.moveaxis(pred, -1, 0)
    tl, tt, tr, tb = np.moveaxis(target, -1, 0)
    wi = np.minimum(pl, tl) + np.minimum(pr, tr)
    hi = np.minimum(pt, tt) + np.minimum(pb, tb)
    inter = wi * hi
    ap = (pl + pr) * (pt + pb)
    at = (tl + tr) * (tt + tb)
    union = ap + at - inter
    iou = inter / union
    dI = np.stack([hi * (pl < tl), wi * (pt < tt), hi * (pr < tr), wi * (pb < tb)], axis=-1)
    dA = np.stack([pt + pb, pl + pr, pt + pb, pl + pr], axis=-1)
    u = union[..., None]
    grad = (dI * u - inter[..., None] * (dA - dI)) / u ** 2
    return iou, grad


def head_loss(out: HeadOutput, labels: LabelMap, lambda_cen: float = 1.0,
              lambda_reg: float = 3.0, cls_loss: str = "ce", focal_gamma: float = 2.0,
              centerness: bool = True) -> LossResult:
    """``cls + lambda_cen * cen + lambda_reg * reg``.

    cls is averaged over all cells; cen (BCE on logits) and reg (1 - IoU)
    over positive cells only and are 0 when there are none.
    """
    cls_t = np.asarray(labels.cls_target)
    if out.cls.shape[:-1] != cls_t.shape:
        raise ValueError(f"head output {out.cls.shape[:-1]} and labels {cls_t.shape} differ")
    y = cls_t.astype(np.int64)
    n_cells = y.size
    logp = _log_softmax2(out.cls)
    onehot = np.stack([1 - y, y], axis=-1).astype(DTYPE)
    p = np.exp(logp)
    if cls_loss == "ce":
        cls_val = -(onehot * logp).sum() / n_cells
        dcls = (p - onehot) / n_cells
    elif cls_loss == "focal":
        pt_ = (p * onehot).sum(axis=-1)
        logpt = (logp * onehot).sum(axis=-1)
        q = 1.0 - pt_
        cls_val = -(q ** focal_gamma * logpt).sum() / n_cells
        dfl_dpt = focal_gamma * q ** (focal_gamma - 1) * logpt - q ** focal_gamma / pt_
        dzt = dfl_dpt * pt_ * q / n_cells
        sign = np.where(onehot > 0, 1.0, -1.0)
        dcls = sign * dzt[..., None]
    else:
        raise ValueError(f"unknown classification loss {cls_loss!r}")

    pos = cls_t > 0
    n_pos = int(pos.sum())
    dcen = np.zeros_like(out.cen)
    dreg = np.zeros_like(out.reg)
    cen_val = reg_val = 0.0
    if n_pos:
        if centerness:
            z = out.cen[..., 0][pos]
            tgt = labels.cen_target[pos]
            cen_val = float((_softplus(z) - tgt * z).sum() / n_pos)
            g = np.zeros(pos.shape)
            g[pos] = (_sigmoid(z) - tgt) / n_pos
            dcen = (lambda_cen * g)[..., None]
        iou, diou = iou_ltrb(out.reg[pos], labels.reg_target[pos])
        reg_val = float((1.0 - iou).sum() / n_pos)
        dreg[pos] = -lambda_reg * diou / n_pos
    total = float(cls_val) + lambda_cen * cen_val + lambda_reg * reg_val
    return LossResult(total, float(cls_val), cen_val, reg_val, HeadOutput(dcls, dcen, dreg))


class HeadWithLoss(DiffOp):
    """``resp -> total loss`` for a fixed label map (gradient checking)."""

    def __init__(self, head: Head, labels: LabelMap, **loss_kw):
        super().__init__()
        self.head = self.add("head", head)
        self.labels = labels
        self.loss_kw = loss_kw

    def forward(self, resp, training: bool = False):
        out, cache = self.head.forward(resp, training)
        res = head_loss(out, self.labels, **self.loss_kw)
        return np.asarray(res.total), (cache, res.grad)

    def backward(self, dout, cache):
        cache_h, g = cache
        s = float(dout)
        return self.head.backward(HeadOutput(g.cls * s, g.cen * s, g.reg * s), cache_h)
