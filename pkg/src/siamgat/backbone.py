"""Siamese feature extractors.

The tracker only relies on the :class:`Backbone` contract (stride, receptive
field, channel count).  :class:`ToyBone` is a small trainable CNN built from
unpadded strided convolutions so that ``feat_size(s) = (s - rf) // stride + 1``
holds exactly.
"""
from __future__ import annotations

from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .numerics import DTYPE, BatchNorm, DiffOp, ReLU


class Conv2d(DiffOp):
    """Valid (unpadded) k x k convolution with stride; weight ``[k, k, Cin, Cout]``."""

    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        std = np.sqrt(2.0 / (kernel * kernel * cin))
        self.params["weight"] = rng.normal(0.0, std, size=(kernel, kernel, cin, cout))
        self.kernel = kernel
        self.stride = stride

    def forward(self, x, training: bool = False, keep_cols: bool = True):
        k, s = self.kernel, self.stride
        N, H, W, C = x.shape
        w = self.params["weight"]
        if C != w.shape[2]:
            raise ValueError(f"dimension mismatch: input has {C} channels, kernel expects {w.shape[2]}")
        if H < k or W < k:
            raise ValueError(f"input {H}x{W} smaller than the {k}x{k} kernel")
        Ho, Wo = (H - k) // s + 1, (W - k) // s + 1
        x = np.ascontiguousarray(x)
        sn, sh, sw, sc = x.strides
        win = as_strided(x, (N, Ho, Wo, k, k, C), (sn, sh * s, sw * s, sh, sw, sc), writeable=False)
        cols = win.reshape(N * Ho * Wo, k * k * C)
        out = (cols @ w.reshape(k * k * C, -1)).reshape(N, Ho, Wo, -1)
        return out, (x.shape, cols if keep_cols else None)

    def backward(self, dout, cache, need_input_grad: bool = True):
        shape, cols = cache
        N, H, W, C = shape
        k, s = self.kernel, self.stride
        _, Ho, Wo, Cout = dout.shape
        g2 = dout.reshape(-1, Cout)
        wmat = self.params["weight"].reshape(k * k * C, Cout)
        if not self.frozen:
            self.accumulate("weight", (cols.T @ g2).reshape(self.params["weight"].shape))
        if not need_input_grad:
            return None
        dcols = (g2 @ wmat.T).reshape(N, Ho, Wo, k, k, C)
        dx = np.zeros(shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                dx[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
        return dx


class Stage(DiffOp):
    """conv k x k -> batch norm -> ReLU.

    Accepts a list of batches that may differ in spatial size.  Batch norm
    statistics are pooled over all of them, so in train mode template and
    search crops see the same normalisation, as they do in infer mode.
    """

    def __init__(self, cin, cout, kernel, stride, rng=None):
        super().__init__()
        self.conv = self.add("conv", Conv2d(cin, cout, kernel, stride, rng))
        self.bn = self.add("bn", BatchNorm(cout))
        self.relu = ReLU()

    def forward(self, xs, training: bool = False):
        need_cache = training and not self.frozen
        ys, c1 = zip(*[self.conv.forward(x, keep_cols=need_cache) for x in xs])
        C = ys[0].shape[-1]
        joint, c2 = self.bn.forward(np.concatenate([y.reshape(-1, C) for y in ys]), training=training)
        ends = np.cumsum([y.size // C for y in ys])[:-1]
        parts = [p.reshape(y.shape) for p, y in zip(np.split(joint, ends), ys)]
        outs, c3 = zip(*[self.relu.forward(p) for p in parts])
        return list(outs), (c1, c2, c3, ends)

    def backward(self, douts, cache, need_input_grad: bool = True):
        c1, c2, c3, ends = cache
        ds = [self.relu.backward(d, c) for d, c in zip(douts, c3)]
        C = ds[0].shape[-1]
        joint = self.bn.backward(np.concatenate([d.reshape(-1, C) for d in ds]), c2)
        parts = [p.reshape(d.shape) for p, d in zip(np.split(joint, ends), ds)]
        return [self.conv.backward(p, c, need_input_grad=need_input_grad) for p, c in zip(parts, c1)]


class Backbone(DiffOp):
    """Contract shared by all feature extractors."""

    stride: int = 8
    receptive_field: int = 31
    out_channels: int = 32
    stage_names: tuple[str, ...] = ()

    def feat_size(self, in_size: int) -> int:
        if in_size < self.receptive_field or (in_size - self.receptive_field) % self.stride:
            raise ValueError(
                f"input size {in_size} violates the stride contract "
                f"(need {self.receptive_field} + k*{self.stride})"
            )
        return (in_size - self.receptive_field) // self.stride + 1

    def extract(self, image_patch: np.ndarray) -> np.ndarray:
        """Features of one ``[S, S, 3]`` patch in infer mode."""
        out, _ = self.forward(np.asarray(image_patch, dtype=DTYPE)[None], training=False)
        return out[0]

    def _resolve(self, depth_spec) -> list[str]:
        if isinstance(depth_spec, str):
            names = list(self.stage_names) if depth_spec == "all" else [depth_spec]
        else:
            names = list(depth_spec)
        unknown = [n for n in names if n not in self.stage_names]
        if unknown:
            raise ValueError(f"unknown backbone stage(s): {unknown}; have {list(self.stage_names)}")
        return names

    def freeze(self, depth_spec: str | Iterable[str] = "all") -> None:
        for name in self._resolve(depth_spec):
            self.children[name].set_frozen(True)

    def unfreeze(self, depth_spec: str | Iterable[str] = "all") -> None:
        for name in self._resolve(depth_spec):
            self.children[name].set_frozen(False)


class ToyBone(Backbone):
    """Four unpadded {conv, BN, ReLU} stages: kernels 3, strides 2-2-2-1.

    Receptive field 31 and total stride 8 give 13x13 maps for 127 px
    templates and 33x33 maps for 287 px search regions.
    """

    kernels = (3, 3, 3, 3)
    strides = (2, 2, 2, 1)

    def __init__(self, channels: int = 32, widths: tuple[int, ...] = (16, 32, 32), rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        dims = (3, *widths, channels)
        if len(dims) != 5:
            raise ValueError("toybone needs three intermediate widths")
        self.stage_names = tuple(f"stage{i + 1}" for i in range(4))
        for i, name in enumerate(self.stage_names):
            self.add(name, Stage(dims[i], dims[i + 1], self.kernels[i], self.strides[i], rng))
        self.out_channels = channels
        self.stride = int(np.prod(self.strides))
        rf, jump = 1, 1
        for k, s in zip(self.kernels, self.strides):
            rf += (k - 1) * jump
            jump *= s
        self.receptive_field = rf

    def forward(self, x, training: bool = False):
        """``x`` is one ``[N, S, S, 3]`` batch or a list of them.

        A list is processed jointly (shared batch statistics) and returns a
        list of feature maps; a single batch returns a single map.
        """
        single = isinstance(x, np.ndarray)
        xs = [x] if single else list(x)
        for b in xs:
            self.feat_size(b.shape[1])
            self.feat_size(b.shape[2])
        caches = []
        for name in self.stage_names:
            xs, c = self.children[name].forward(xs, training=training)
            caches.append(c)
        return (xs[0] if single else xs), (single, caches)

    def backward(self, dout, cache):
        single, caches = cache
        douts = [dout] if single else list(dout)
        stages = [self.children[n] for n in self.stage_names]
        for i in reversed(range(len(stages))):
            if stages[i].frozen and all(s.frozen for s in stages[:i]):
                break
            upstream_trainable = any(not s.frozen for s in stages[:i])
            douts = stages[i].backward(douts, caches[i], need_input_grad=upstream_trainable)
            if douts[0] is None:
                break
        # image gradients are never needed
        return None
