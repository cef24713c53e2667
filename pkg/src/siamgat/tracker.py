"""Frame-by-frame tracking with a fixed first-frame template."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrackConfig
from .geometry import BoundingBox, context_side, crop_patch, crop_square
from .model import TemplateCode


@dataclass
class TrackerState:
    template: TemplateCode
    current_box: BoundingBox
    window: np.ndarray
    cfg: TrackConfig
    frame_shape: tuple[int, int]
    model: object


def _change(r):
    return np.maximum(r, 1.0 / r)


def _sz(w, h):
    pad = (w + h) * 0.5
    return np.sqrt((w + pad) * (h + pad))


def init(frame: np.ndarray, box: BoundingBox, model, cfg: TrackConfig | None = None) -> TrackerState:
    cfg = TrackConfig() if cfg is None else cfg
    if not box.valid:
        raise ValueError(f"degenerate initial box {box}")
    H, W = frame.shape[:2]
    spec = model.crop
    patch, scale = crop_patch(frame, box, spec.template_size, spec.context_amount)
    c = spec.template_size / 2
    code = model.encode_template(patch, BoundingBox(c, c, box.w * scale, box.h * scale))
    n = model.grid.size
    window = np.outer(np.hanning(n), np.hanning(n))
    return TrackerState(code, box, window, cfg, (H, W), model)


def update(state: TrackerState, frame: np.ndarray) -> BoundingBox:
    model = state.model
    cfg, box, spec = state.cfg, state.current_box, model.crop
    side_z = context_side(box.w, box.h, spec.context_amount)
    scale = spec.template_size / side_z
    side_x = side_z * spec.search_size / spec.template_size
    patch = crop_square(frame, box.cx, box.cy, side_x, spec.search_size)

    fg, cen, reg = model.predict(state.template, patch)
    score = fg * cen
    l, t, r, b = np.moveaxis(reg, -1, 0)
    wp = np.maximum(l + r, 1e-12)
    hp = np.maximum(t + b, 1e-12)
    tw, th = box.w * scale, box.h * scale
    s_c = _change(_sz(wp, hp) / _sz(tw, th))
    r_c = _change((tw / th) / (wp / hp))
    penalty = np.exp(-(r_c * s_c - 1.0) * cfg.penalty_k)
    pscore = penalty * score
    pscore = pscore * (1.0 - cfg.window_influence) + state.window * cfg.window_influence
    i, j = np.unravel_index(int(np.argmax(pscore)), pscore.shape)

    px, py = model.grid.anchor(i, j)
    bx = px + (r[i, j] - l[i, j]) / 2
    by = py + (b[i, j] - t[i, j]) / 2
    half = spec.search_size / 2
    H, W = state.frame_shape
    cx = float(np.clip(box.cx + (bx - half) / scale, 0, W))
    cy = float(np.clip(box.cy + (by - half) / scale, 0, H))
    w = (1 - cfg.lr) * box.w + cfg.lr * wp[i, j] / scale
    h = (1 - cfg.lr) * box.h + cfg.lr * hp[i, j] / scale
    w = float(np.clip(w, cfg.min_size, max(W, cfg.min_size)))
    h = float(np.clip(h, cfg.min_size, max(H, cfg.min_size)))
    state.current_box = BoundingBox(cx, cy, w, h)
    return state.current_box


def track_sequence(model, frames, init_box: BoundingBox, cfg: TrackConfig | None = None,
                   overlay_dir=None) -> list[BoundingBox]:
    """Run one-pass tracking; the first entry is the initial box."""
    frames = list(frames)
    state = init(_load(frames[0]), init_box, model, cfg)
    boxes = [init_box]
    for f in frames[1:]:
        boxes.append(update(state, _load(f)))
    if overlay_dir is not None:
        write_overlays(frames, boxes, overlay_dir)
    return boxes


def _load(frame):
    if isinstance(frame, (str, Path)):
        from .evaluation import read_image
        return read_image(frame)
    return frame


def write_overlays(frames, boxes, out_dir) -> None:
    from PIL import Image, ImageDraw

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, (f, box) in enumerate(zip(frames, boxes)):
        img = Image.fromarray(np.asarray(_load(f), dtype=np.uint8))
        x0, y0, x1, y1 = box.corners
        ImageDraw.Draw(img).rectangle([x0, y0, x1 - 1, y1 - 1], outline=(255, 0, 0))
        img.save(out / f"{k + 1:05d}.png")
