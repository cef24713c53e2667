"""Sequence I/O and tracking benchmark metrics (OPE precision/success, AO/SR).

Conventions:

* success curve thresholds are ``k / 20`` for ``k = 0..20``; a frame counts
  at threshold ``t`` when ``IoU >= t``;
* precision counts frames whose centre error is ``<= threshold`` (20 px);
* ``SR_t`` counts frames with ``IoU > t`` (strict);
* the initial frame is excluded from per-sequence metrics;
* multi-sequence aggregates are means of per-sequence values.
"""
from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BoundingBox, center_error_xywh, iou_xywh

SUCCESS_THRESHOLDS = np.arange(21) / 20
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class SequenceFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# Metrics


def _series(values, name) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"empty {name} series")
    return arr


def success_curve(ious) -> np.ndarray:
    ious = _series(ious, "IoU")
    return (ious[None, :] >= SUCCESS_THRESHOLDS[:, None]).mean(axis=1)


def success_auc(ious) -> float:
    """Mean of the 21-point success curve."""
    return float(success_curve(ious).mean())


def precision_curve(center_errors, thresholds=np.arange(51)) -> np.ndarray:
    err = _series(center_errors, "centre error")
    return (err[None, :] <= np.asarray(thresholds, dtype=np.float64)[:, None]).mean(axis=1)


def precision_at(center_errors, threshold: float = 20.0) -> float:
    err = _series(center_errors, "centre error")
    if (err < 0).any():
        raise ValueError("centre errors must be nonnegative")
    return float((err <= threshold).mean())


def ao_sr(ious) -> dict[str, float]:
    ious = _series(ious, "IoU")
    return {"AO": float(ious.mean()),
            "SR_0.5": float((ious > 0.5).mean()),
            "SR_0.75": float((ious > 0.75).mean())}


@dataclass
class SequenceResult:
    name: str
    ious: np.ndarray
    center_errors: np.ndarray

    def metrics(self) -> dict[str, float]:
        out = {"precision@20": precision_at(self.center_errors),
               "success_auc": success_auc(self.ious)}
        out.update(ao_sr(self.ious))
        return out


@dataclass
class EvalReport:
    sequences: list[SequenceResult]
    aggregate: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{k}: {v:.6f}" for k, v in self.aggregate.items()]
        lines.append(f"sequences: {len(self.sequences)}")
        for s in self.sequences:
            m = s.metrics()
            lines.append(f"{s.name}: " + " ".join(f"{k}={v:.6f}" for k, v in m.items()))
        return "\n".join(lines) + "\n"

    def curve_tables(self) -> dict[str, str]:
        succ = np.mean([success_curve(s.ious) for s in self.sequences], axis=0)
        prec = np.mean([precision_curve(s.center_errors) for s in self.sequences], axis=0)
        return {
            "success": "threshold,value\n" + "".join(
                f"{t:.2f},{v:.6f}\n" for t, v in zip(SUCCESS_THRESHOLDS, succ)),
            "precision": "threshold,value\n" + "".join(
                f"{t},{v:.6f}\n" for t, v in zip(range(51), prec)),
        }


def evaluate_sequence(pred_xywh, gt_xywh, name: str = "seq", skip_first: bool = True) -> SequenceResult:
    pred = np.asarray(pred_xywh, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_xywh, dtype=np.float64).reshape(-1, 4)
    if len(pred) != len(gt):
        raise SequenceFormatError(
            f"{name}: count mismatch, {len(pred)} result boxes vs {len(gt)} ground-truth boxes")
    if skip_first and len(gt) > 1:
        pred, gt = pred[1:], gt[1:]
    return SequenceResult(name, iou_xywh(pred, gt), center_error_xywh(pred, gt))


def aggregate(results: list[SequenceResult]) -> EvalReport:
    if not results:
        raise ValueError("no sequences to aggregate")
    per = [r.metrics() for r in results]
    agg = {k: float(np.mean([m[k] for m in per])) for k in per[0]}
    return EvalReport(results, agg)


def evaluate(pairs, workers: int = 1, skip_first: bool = True) -> EvalReport:
    """``pairs``: iterable of ``(name, pred_xywh, gt_xywh)``."""
    pairs = list(pairs)

    def one(p):
        return evaluate_sequence(p[1], p[2], p[0], skip_first)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, pairs))
    else:
        results = [one(p) for p in pairs]
    return aggregate(results)


# --------------------------------------------------------------------------
# Sequences on disk


@dataclass
class Sequence:
    name: str
    frames: list            # arrays [H, W, 3] uint8 or image paths
    gt: list[BoundingBox]
    attributes: set[str] = field(default_factory=set)

    def __post_init__(self):
        if len(self.frames) != len(self.gt):
            raise SequenceFormatError(
                f"{self.name}: {len(self.frames)} frames but {len(self.gt)} boxes")
        if len(self.gt) < 2:
            raise SequenceFormatError(f"{self.name}: a sequence needs at least 2 frames")

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, k: int) -> np.ndarray:
        f = self.frames[k]
        return read_image(f) if isinstance(f, (str, Path)) else f

    def gt_xywh(self) -> np.ndarray:
        return np.array([b.to_xywh() for b in self.gt])

    def materialize(self) -> "Sequence":
        return Sequence(self.name, [self.frame(k) for k in range(len(self))], self.gt,
                        set(self.attributes))


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path, arr: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)


_SPLIT = re.compile(r"[,\s]+")


def parse_boxes(text: str, source: str = "boxes") -> list[BoundingBox]:
    boxes = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = [p for p in _SPLIT.split(line) if p]
        try:
            if len(parts) != 4:
                raise ValueError(f"expected 4 values, got {len(parts)}")
            x, y, w, h = (float(p) for p in parts)
            boxes.append(BoundingBox.from_xywh(x, y, w, h))
        except ValueError as exc:
            raise SequenceFormatError(f"{source}: malformed box on line {n}: {line!r} ({exc})") from exc
    return boxes


def _fmt(v) -> str:
    s = repr(float(v))  # shortest exact round-trip
    return s[:-2] if s.endswith(".0") else s


def format_boxes(boxes) -> str:
    lines = []
    for b in boxes:
        x, y, w, h = b.to_xywh() if isinstance(b, BoundingBox) else b
        lines.append(",".join(_fmt(v) for v in (x, y, w, h)))
    return "\n".join(lines) + "\n"


def save_results(boxes, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_boxes(boxes))
    return path


def load_boxes(path) -> list[BoundingBox]:
    path = Path(path)
    return parse_boxes(path.read_text(), str(path))


def load_sequence(directory, load_frames: bool = False) -> Sequence:
    """Read ``groundtruth.txt`` plus ordered frame images from ``directory``.

    Frames may sit in the directory itself or in an ``img/`` sub-directory.
    An optional ``attributes.txt`` holds whitespace/comma separated tags.
    """
    d = Path(directory)
    gt_path = d / "groundtruth.txt"
    if not gt_path.is_file():
        raise SequenceFormatError(f"{d}: missing groundtruth.txt")
    gt = load_boxes(gt_path)
    img_dir = d / "img" if (d / "img").is_dir() else d
    frames = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if len(frames) != len(gt):
        raise SequenceFormatError(
            f"{d}: count mismatch, {len(frames)} frames vs {len(gt)} ground-truth boxes")
    attrs: set[str] = set()
    attr_path = d / "attributes.txt"
    if attr_path.is_file():
        attrs = {a for a in _SPLIT.split(attr_path.read_text()) if a}
    seq = Sequence(d.name, list(frames), gt, attrs)
    return seq.materialize() if load_frames else seq


def save_sequence(seq: Sequence, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k in range(len(seq)):
        write_image(d / f"{k + 1:05d}.png", seq.frame(k))
    (d / "groundtruth.txt").write_text(format_boxes(seq.gt))
    if seq.attributes:
        (d / "attributes.txt").write_text(" ".join(sorted(seq.attributes)) + "\n")
    return d


def find_sequences(root) -> list[Path]:
    """``root`` itself if it is a sequence directory, else its sequence children."""
    root = Path(root)
    if (root / "groundtruth.txt").is_file():
        return [root]
    found = sorted(p for p in root.iterdir() if (p / "groundtruth.txt").is_file()) if root.is_dir() else []
    if not found:
        raise SequenceFormatError(f"no sequence directories under {root}")
    return found
