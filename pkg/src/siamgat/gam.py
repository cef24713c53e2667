"""Graph-attention information embedding between template and search features.

Every 1x1xc cell of a feature map is a node.  Search node ``i`` attends to
template node ``j`` with score ``<bn_s(ws h_s^i), bn_t(wt h_t^j)>``; the
scores are softmax-normalised over the template nodes, the transformed
template nodes ``bn_v(wv h_t^j)`` are averaged with those weights, and the
result is concatenated with ``bn_v(wv h_s^i)`` and passed through a ReLU.

Nodes are flattened row-major over ``(row, col)``.  The complete bipartite
graph is implicit in the dense ``[Ns, Nt]`` score matrix.

Template nodes are chosen by an ROI on the template grid:

* ``crop``      keeps only the ROI cells (a ``h x w x c`` sub-tensor);
* ``zero_mask`` keeps the full grid with out-of-ROI cells set to zero.

With ``masking="exclude"`` the out-of-ROI nodes are removed from the softmax
support; ``"include_zeros"`` keeps them in (each then carries the score of a
zero feature vector).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TemplateROI
from .numerics import DTYPE, BatchNorm, Conv1x1, DiffOp, masked_softmax, masked_softmax_backward

SELECTION_MODES = ("crop", "zero_mask")
MASKING_MODES = ("exclude", "include_zeros")


def select_template_nodes(ft: np.ndarray, roi: TemplateROI, mode: str = "zero_mask"):
    """Return ``(ft_hat, mask)`` where ``mask`` flags the in-ROI cells of the full grid."""
    if mode not in SELECTION_MODES:
        raise ValueError(f"unknown selection mode {mode!r}")
    if tuple(ft.shape[:2]) != tuple(roi.grid_shape):
        raise ValueError(f"ROI grid {roi.grid_shape} does not match features {ft.shape[:2]}")
    mask = roi.mask
    if mode == "crop":
        return ft[roi.row0:roi.row1 + 1, roi.col0:roi.col1 + 1].copy(), mask
    return np.where(mask[..., None], ft, 0.0), mask


def _support(mask: np.ndarray, mode: str, masking: str) -> np.ndarray:
    """Softmax support over the nodes of ``ft_hat`` (flattened)."""
    if mode == "crop":
        return np.ones(int(mask.sum()), dtype=bool)
    if masking == "exclude":
        return mask.reshape(-1)
    return np.ones(mask.size, dtype=bool)


@dataclass
class AttentionDetails:
    scores: np.ndarray      # [Ns, Nt]
    attention: np.ndarray   # [Ns, Nt]
    support: np.ndarray     # [Nt] bool
    template_values: np.ndarray  # [Nt, c'] transformed template nodes
    aggregated: np.ndarray  # [Ns, c']


class GraphAttention(DiffOp):
    """Batched graph attention module (the trainable ``ws, wt, wv`` + BNs).

    ``wv``/``bn_v`` are shared between the template and search sides and the
    batch-norm statistics of ``bn_v`` are taken jointly over both node sets.
    ``ws`` and ``wt`` are bias-free so zero template nodes score zero.
    """

    def __init__(self, channels: int, out_channels: int | None = None, *,
                 selection: str = "zero_mask", masking: str = "exclude",
                 batchnorm: bool = True, value_bias: bool = True, rng=None):
        super().__init__()
        if selection not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode {selection!r}")
        if masking not in MASKING_MODES:
            raise ValueError(f"unknown masking policy {masking!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        cp = channels if out_channels is None else out_channels
        self.channels, self.out_channels = channels, cp
        self.selection, self.masking = selection, masking
        self.use_bn = batchnorm
        self.ws = self.add("ws", Conv1x1(channels, cp, bias=False, rng=rng))
        self.wt = self.add("wt", Conv1x1(channels, cp, bias=False, rng=rng))
        self.wv = self.add("wv", Conv1x1(channels, cp, bias=value_bias, rng=rng))
        self.bn_s = self.bn_t = self.bn_v = None
        if batchnorm:
            self.bn_s = self.add("bn_s", BatchNorm(cp))
            self.bn_t = self.add("bn_t", BatchNorm(cp))
            self.bn_v = self.add("bn_v", BatchNorm(cp))

    @property
    def response_channels(self) -> int:
        return 2 * self.out_channels

    # -- transforms --------------------------------------------------------
    @staticmethod
    def _branch(conv, bn, x, training):
        y, c1 = conv.forward(x)
        if bn is None:
            return y, (c1, None)
        y, c2 = bn.forward(y, training=training)
        return y, (c1, c2)

    @staticmethod
    def _branch_back(conv, bn, d, cache):
        c1, c2 = cache
        if bn is not None:
            d = bn.backward(d, c2)
        return conv.backward(d, c1)

    def _check(self, x):
        if x.shape[-1] != self.channels:
            raise ValueError(f"dimension mismatch: expected {self.channels} channels, got {x.shape[-1]}")

    # -- forward / backward ------------------------------------------------
    def forward(self, ft, fs, rois, training: bool = False):
        ft = np.asarray(ft, dtype=DTYPE)
        fs = np.asarray(fs, dtype=DTYPE)
        self._check(ft)
        self._check(fs)
        if isinstance(rois, TemplateROI):
            rois = [rois] * ft.shape[0]
        N, Hs, Ws, c = fs.shape
        if ft.shape[0] != N or len(rois) != N:
            raise ValueError("template, search and ROI batch sizes differ")
        Ns = Hs * Ws

        nodes, supports, masks = [], [], []
        for k in range(N):
            hat, mask = select_template_nodes(ft[k], rois[k], self.selection)
            nodes.append(hat.reshape(-1, c))
            supports.append(_support(mask, self.selection, self.masking))
            masks.append(mask)
        counts = [len(n) for n in nodes]
        splits = np.cumsum(counts)[:-1]
        T = np.concatenate(nodes)
        S = fs.reshape(N * Ns, c)

        qs, cqs = self._branch(self.ws, self.bn_s, S, training)
        qt, cqt = self._branch(self.wt, self.bn_t, T, training)
        vv, cvv = self._branch(self.wv, self.bn_v, np.concatenate([T, S]), training)
        M = T.shape[0]
        vt_all, vs = vv[:M], vv[M:]
        qt_k = np.split(qt, splits)
        vt_k = np.split(vt_all, splits)

        cp = self.out_channels
        agg = np.empty((N, Ns, cp))
        details = []
        for k in range(N):
            q = qs[k * Ns:(k + 1) * Ns]
            e = q @ qt_k[k].T
            a = masked_softmax(e, supports[k])
            agg[k] = a @ vt_k[k]
            details.append(AttentionDetails(e, a, supports[k], vt_k[k], agg[k]))
        fused = np.concatenate([agg, vs.reshape(N, Ns, cp)], axis=-1)
        out = np.maximum(fused, 0.0).reshape(N, Hs, Ws, 2 * cp)
        cache = dict(shape_t=ft.shape, shape_s=fs.shape, masks=masks, rois=rois, splits=splits,
                     qs=qs, qt_k=qt_k, vt_k=vt_k, cqs=cqs, cqt=cqt, cvv=cvv, M=M,
                     fused=fused, details=details)
        return out, cache

    def backward(self, dout, cache):
        N, Hs, Ws, c = cache["shape_s"]
        Ns, cp = Hs * Ws, self.out_channels
        dfused = dout.reshape(N, Ns, 2 * cp) * (cache["fused"] > 0)
        dagg, dvs = dfused[..., :cp], dfused[..., cp:]
        qs, details = cache["qs"], cache["details"]
        dqs = np.empty_like(qs)
        dqt_k, dvt_k = [], []
        for k in range(N):
            d = details[k]
            q = qs[k * Ns:(k + 1) * Ns]
            da = dagg[k] @ d.template_values.T
            dvt_k.append(d.attention.T @ dagg[k])
            de = masked_softmax_backward(d.attention, da)
            dqs[k * Ns:(k + 1) * Ns] = de @ cache["qt_k"][k]
            dqt_k.append(de.T @ q)
        dvv = np.concatenate(dvt_k + [dvs.reshape(N * Ns, cp)])
        dTS_v = self._branch_back(self.wv, self.bn_v, dvv, cache["cvv"])
        M = cache["M"]
        dT = self._branch_back(self.wt, self.bn_t, np.concatenate(dqt_k), cache["cqt"]) + dTS_v[:M]
        dS = self._branch_back(self.ws, self.bn_s, dqs, cache["cqs"]) + dTS_v[M:]

        dft = np.zeros(cache["shape_t"])
        for k, dTk in enumerate(np.split(dT, cache["splits"])):
            roi, mask = cache["rois"][k], cache["masks"][k]
            if self.selection == "crop":
                dft[k, roi.row0:roi.row1 + 1, roi.col0:roi.col1 + 1] = dTk.reshape(roi.height, roi.width, c)
            else:
                dft[k] = dTk.reshape(mask.shape + (c,)) * mask[..., None]
        return dft, dS.reshape(N, Hs, Ws, c)


# --------------------------------------------------------------------------
# Single-instance functional views


def _override(params: GraphAttention, selection=None, masking=None):
    sel = params.selection if selection is None else selection
    msk = params.masking if masking is None else masking
    return sel, msk


def attention_scores(fs: np.ndarray, ft_hat: np.ndarray, params: GraphAttention,
                     mode: str = "infer") -> np.ndarray:
    """Score matrix ``[Hs*Ws, Nt]`` for one search map and one template node grid."""
    fs = np.asarray(fs, dtype=DTYPE)
    ft_hat = np.asarray(ft_hat, dtype=DTYPE)
    params._check(fs)
    params._check(ft_hat)
    training = mode == "train"
    qs, _ = params._branch(params.ws, params.bn_s, fs.reshape(-1, fs.shape[-1]), training)
    qt, _ = params._branch(params.wt, params.bn_t, ft_hat.reshape(-1, ft_hat.shape[-1]), training)
    return qs @ qt.T


def attention_normalize(scores: np.ndarray, template_mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise masked softmax of a score matrix."""
    scores = np.asarray(scores, dtype=DTYPE)
    if template_mask is None:
        template_mask = np.ones(scores.shape[-1], dtype=bool)
    template_mask = np.asarray(template_mask, dtype=bool).reshape(-1)
    if template_mask.shape[0] != scores.shape[-1]:
        raise ValueError("template mask length does not match score columns")
    return masked_softmax(scores, template_mask[None, :])


def aggregate_and_fuse(att: np.ndarray, ft_hat: np.ndarray, fs: np.ndarray,
                       params: GraphAttention, mode: str = "infer") -> np.ndarray:
    """``ReLU(sum_j a_ij v(h_t^j) || v(h_s^i))`` reshaped onto the search grid."""
    fs = np.asarray(fs, dtype=DTYPE)
    ft_hat = np.asarray(ft_hat, dtype=DTYPE)
    params._check(fs)
    params._check(ft_hat)
    Hs, Ws, c = fs.shape
    T = ft_hat.reshape(-1, c)
    if att.shape != (Hs * Ws, T.shape[0]):
        raise ValueError(f"attention shape {att.shape} does not match {(Hs * Ws, T.shape[0])}")
    vv, _ = params._branch(params.wv, params.bn_v, np.concatenate([T, fs.reshape(-1, c)]),
                           mode == "train")
    vt, vs = vv[:T.shape[0]], vv[T.shape[0]:]
    out = np.maximum(np.concatenate([att @ vt, vs], axis=-1), 0.0)
    return out.reshape(Hs, Ws, -1)


def gam_forward(ft: np.ndarray, fs: np.ndarray, roi: TemplateROI, params: GraphAttention,
                selection: str | None = None, masking: str | None = None,
                mode: str = "infer", return_details: bool = False):
    """Response map ``[Hs, Ws, 2c']`` for a single template/search pair."""
    sel, msk = _override(params, selection, masking)
    prev = params.selection, params.masking
    params.selection, params.masking = sel, msk
    try:
        out, cache = params.forward(np.asarray(ft)[None], np.asarray(fs)[None], [roi],
                                    training=mode == "train")
    finally:
        params.selection, params.masking = prev
    if return_details:
        return out[0], cache["details"][0]
    return out[0]


# --------------------------------------------------------------------------
# Depth-wise cross-correlation baseline


def dw_xcorr(ft_crop: np.ndarray, fs: np.ndarray) -> np.ndarray:
    """Channel-by-channel valid correlation of a template crop over a search map.

    Works on single maps ``[h, w, c]`` or batches ``[N, h, w, c]``.
    """
    ft_crop = np.asarray(ft_crop, dtype=DTYPE)
    fs = np.asarray(fs, dtype=DTYPE)
    single = ft_crop.ndim == 3
    if single:
        ft_crop, fs = ft_crop[None], fs[None]
    _, ht, wt, c = ft_crop.shape
    _, Hs, Ws, cs = fs.shape
    if c != cs:
        raise ValueError(f"dimension mismatch: template has {c} channels, search {cs}")
    if ht > Hs or wt > Ws:
        raise ValueError(f"template {ht}x{wt} larger than search {Hs}x{Ws}")
    Ho, Wo = Hs - ht + 1, Ws - wt + 1
    out = np.zeros((fs.shape[0], Ho, Wo, c))
    for u in range(ht):
        for v in range(wt):
            out += ft_crop[:, u, v, None, None, :] * fs[:, u:u + Ho, v:v + Wo, :]
    return out[0] if single else out


class DWXcorr(DiffOp):
    def forward(self, ft_crop, fs, training: bool = False):
        return dw_xcorr(ft_crop, fs), (np.asarray(ft_crop, dtype=DTYPE), np.asarray(fs, dtype=DTYPE))

    def backward(self, dout, cache):
        t, s = cache
        single = t.ndim == 3
        if single:
            t, s, dout = t[None], s[None], dout[None]
        _, ht, wt, _ = t.shape
        _, Ho, Wo, _ = dout.shape
        dt = np.zeros_like(t)
        ds = np.zeros_like(s)
        for u in range(ht):
            for v in range(wt):
                win = s[:, u:u + Ho, v:v + Wo, :]
                dt[:, u, v, :] = (dout * win).sum(axis=(1, 2))
                ds[:, u:u + Ho, v:v + Wo, :] += dout * t[:, u, v, None, None, :]
        if single:
            return dt[0], ds[0]
        return dt, ds


class XcorrEmbedding(DiffOp):
    """DW-Xcorr embedding with 1x1 conv + BN adapters on both branches.

    The template is cut to its ROI before correlation, so every ROI in a
    batch must have the same size (the pre-fixed crop).
    """

    def __init__(self, channels: int, out_channels: int | None = None, *,
                 batchnorm: bool = True, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        cp = channels if out_channels is None else out_channels
        self.channels, self.out_channels = channels, cp
        self.kt = self.add("kt", Conv1x1(channels, cp, bias=False, rng=rng))
        self.ks = self.add("ks", Conv1x1(channels, cp, bias=False, rng=rng))
        self.bn_t = self.bn_s = None
        if batchnorm:
            self.bn_t = self.add("bn_t", BatchNorm(cp))
            self.bn_s = self.add("bn_s", BatchNorm(cp))
        self.xcorr = DWXcorr()

    @property
    def response_channels(self) -> int:
        return self.out_channels

    def forward(self, ft, fs, rois, training: bool = False):
        if isinstance(rois, TemplateROI):
            rois = [rois] * ft.shape[0]
        sizes = {(r.height, r.width) for r in rois}
        if len(sizes) != 1:
            raise ValueError("DW-Xcorr needs equally sized template crops across the batch")
        crop = np.stack([select_template_nodes(ft[k], r, "crop")[0] for k, r in enumerate(rois)])
        zt, ct = GraphAttention._branch(self.kt, self.bn_t, crop, training)
        zs, cs = GraphAttention._branch(self.ks, self.bn_s, fs, training)
        out, cx = self.xcorr.forward(zt, zs)
        return out, (ct, cs, cx, rois, ft.shape)

    def backward(self, dout, cache):
        ct, cs, cx, rois, shape_t = cache
        dzt, dzs = self.xcorr.backward(dout, cx)
        dcrop = GraphAttention._branch_back(self.kt, self.bn_t, dzt, ct)
        dfs = GraphAttention._branch_back(self.ks, self.bn_s, dzs, cs)
        dft = np.zeros(shape_t)
        for k, r in enumerate(rois):
            dft[k, r.row0:r.row1 + 1, r.col0:r.col1 + 1] = dcrop[k]
        return dft, dfs
