"""Synthetic tracking sequences with exact ground truth.

A textured rectangle moves over a smooth textured background.  Its size
follows ``w = w0 * s^f * a^f``, ``h = h0 * s^f / a^f`` with ``f = t/(n-1)``,
``s = 1 + scale_drift`` and ``a = aspect_drift``, so ``aspect_drift=2``
doubles the width, halves the height and multiplies the aspect ratio by 4
over the clip.  Boxes are snapped to whole pixels before rendering so the
emitted ground truth is exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .evaluation import Sequence
from .geometry import BoundingBox


@dataclass(frozen=True)
class SynthSpec:
    n_frames: int = 40
    canvas: tuple[int, int] = (240, 320)   # H, W
    init_size: tuple[float, float] = (48.0, 32.0)  # w, h
    motion: float = 2.0          # px per frame
    scale_drift: float = 0.0
    aspect_drift: float = 1.0
    distractors: int = 0
    noise: float = 0.0           # pixel noise std (0..255 scale)
    texture_cells: int = 5
    seed: int = 0


def resize_bilinear(arr: np.ndarray, H: int, W: int) -> np.ndarray:
    """Align-corners bilinear resize of ``[h, w, C]`` to ``[H, W, C]``."""
    h, w = arr.shape[:2]
    ys = np.linspace(0, h - 1, H) if H > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, W) if W > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    b = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return a * (1 - fy) + b * fy


def _trajectory(rng, n, H, W, w, h, speed, cx0, cy0):
    """Centres of a smooth random walk reflected at the canvas border."""
    cx, cy = cx0, cy0
    theta = rng.uniform(0, 2 * math.pi)
    out, clipped = [], False
    for t in range(n):
        if t:
            theta += rng.normal(0, 0.3)
            cx += speed * math.cos(theta)
            cy += speed * math.sin(theta)
        hw, hh = w[t] / 2, h[t] / 2
        if hw * 2 > W or hh * 2 > H:
            clipped = True
        lo_x, hi_x = hw, max(W - hw, hw)
        lo_y, hi_y = hh, max(H - hh, hh)
        if cx < lo_x or cx > hi_x:
            cx = float(np.clip(2 * (lo_x if cx < lo_x else hi_x) - cx, lo_x, hi_x))
            theta = math.pi - theta
        if cy < lo_y or cy > hi_y:
            cy = float(np.clip(2 * (lo_y if cy < lo_y else hi_y) - cy, lo_y, hi_y))
            theta = -theta
        out.append((cx, cy))
    return out, clipped


def _paste(frame, tex, x, y, w, h):
    H, W = frame.shape[:2]
    patch = resize_bilinear(tex, h, w)
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, W), min(y + h, H)
    if x1 > x0 and y1 > y0:
        frame[y0:y1, x0:x1] = patch[y0 - y:y1 - y, x0 - x:x1 - x]


def synth_sequence(spec: SynthSpec = SynthSpec(), name: str | None = None) -> Sequence:
    if spec.n_frames < 2:
        raise ValueError("n_frames must be at least 2")
    rng = np.random.default_rng(spec.seed)
    H, W = spec.canvas
    n = spec.n_frames

    bg_low = rng.uniform(70, 180, size=(H // 24 + 2, W // 24 + 2, 1)) + rng.uniform(-20, 20, size=(1, 1, 3))
    background = resize_bilinear(bg_low, H, W)
    tex = rng.uniform(0, 255, size=(spec.texture_cells, spec.texture_cells, 3))

    f = np.arange(n) / (n - 1)
    s = (1.0 + spec.scale_drift) ** f
    a = spec.aspect_drift ** f
    w0, h0 = spec.init_size
    ws = np.maximum(np.round(w0 * s * a), 2).astype(int)
    hs = np.maximum(np.round(h0 * s / a), 2).astype(int)
    centres, clipped = _trajectory(rng, n, H, W, ws, hs, spec.motion, W / 2, H / 2)

    distractors = []
    for _ in range(spec.distractors):
        dtex = np.clip(tex + rng.normal(0, 40, size=tex.shape), 0, 255)
        dw, dh = int(round(w0)), int(round(h0))
        start = (rng.uniform(dw / 2, W - dw / 2), rng.uniform(dh / 2, H - dh / 2))
        path, _ = _trajectory(rng, n, H, W, [dw] * n, [dh] * n, spec.motion, *start)
        distractors.append((dtex, dw, dh, path))

    frames, gt = [], []
    for t in range(n):
        frame = background.copy()
        for dtex, dw, dh, path in distractors:
            dx, dy = path[t]
            _paste(frame, dtex, int(round(dx - dw / 2)), int(round(dy - dh / 2)), dw, dh)
        x = int(round(centres[t][0] - ws[t] / 2))
        y = int(round(centres[t][1] - hs[t] / 2))
        _paste(frame, tex, x, y, int(ws[t]), int(hs[t]))
        if spec.noise > 0:
            frame = frame + rng.normal(0, spec.noise, size=frame.shape)
        frames.append(np.clip(np.round(frame), 0, 255).astype(np.uint8))
        gt.append(BoundingBox.from_xywh(float(x), float(y), float(ws[t]), float(hs[t])))

    attrs = set()
    if spec.scale_drift:
        attrs.add("SV")
    if spec.aspect_drift != 1.0:
        attrs.add("ARC")
    if spec.distractors:
        attrs.add("DIS")
    if clipped:
        attrs.add("clipped")
    return Sequence(name or f"synth_{spec.seed:04d}", frames, gt, attrs)
