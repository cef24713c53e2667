"""Backbone -> embedding -> head, trained and run as one DiffOp."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import ToyBone
from .config import ModelConfig
from .gam import GraphAttention, XcorrEmbedding
from .geometry import BoundingBox, CropSpec, TemplateROI, project_box
from .head import GridSpec, Head, HeadOutput, head_loss, LabelMap
from .numerics import DTYPE, DiffOp


def normalize_image(patch: np.ndarray) -> np.ndarray:
    return np.asarray(patch, dtype=DTYPE) / 255.0


@dataclass(frozen=True)
class TemplateCode:
    """Template features and ROI kept fixed for a whole sequence."""

    features: np.ndarray  # [Ht, Wt, C], read-only
    roi: TemplateROI


class SiamGATModel(DiffOp):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = ModelConfig() if cfg is None else cfg
        rng = np.random.default_rng(seed)
        self.crop = CropSpec(cfg.template_size, cfg.search_size, cfg.context_amount)
        self.backbone = self.add("backbone", ToyBone(cfg.channels, tuple(cfg.backbone_widths), rng))
        self.template_feat = self.backbone.feat_size(cfg.template_size)
        self.search_feat = self.backbone.feat_size(cfg.search_size)
        if cfg.embedding == "gam":
            self.embed = self.add("gam", GraphAttention(
                cfg.channels, cfg.transformed_channels, selection=cfg.selection_impl,
                masking=cfg.masking, batchnorm=cfg.gam_batchnorm, value_bias=cfg.value_bias, rng=rng))
            resp = self.search_feat
        elif cfg.embedding == "dw_xcorr":
            self.embed = self.add("xcorr", XcorrEmbedding(
                cfg.channels, cfg.transformed_channels, batchnorm=cfg.gam_batchnorm, rng=rng))
            resp = self.search_feat - cfg.prefix_size + 1
        else:
            raise ValueError(f"unknown embedding {cfg.embedding!r}")
        self.grid = GridSpec(resp, self.backbone.stride, cfg.search_size)
        self.head = self.add("head", Head(self.embed.response_channels, cfg.head_hidden,
                                          cfg.head_depth, cfg.reg_scale, cfg.centerness, rng))

    # -- geometry ----------------------------------------------------------
    def template_roi(self, box_in_patch: BoundingBox) -> TemplateROI:
        shape = (self.template_feat, self.template_feat)
        if self.cfg.selection == "prefixed_crop":
            return TemplateROI.centered(shape, self.cfg.prefix_size)
        return project_box(box_in_patch, self.backbone.stride, self.cfg.template_size,
                           self.template_feat)

    # -- training path -----------------------------------------------------
    def forward(self, templates, searches, template_boxes, training: bool = False):
        (ft, fs), cb = self.backbone.forward(
            [normalize_image(templates), normalize_image(searches)], training)
        rois = [self.template_roi(b) for b in template_boxes]
        resp, ce = self.embed.forward(ft, fs, rois, training=training)
        out, ch = self.head.forward(resp, training)
        return out, (cb, ce, ch)

    def backward(self, dout: HeadOutput, cache):
        cb, ce, ch = cache
        dresp = self.head.backward(dout, ch)
        dft, dfs = self.embed.backward(dresp, ce)
        self.backbone.backward([dft, dfs], cb)

    def loss(self, out: HeadOutput, labels: LabelMap):
        c = self.cfg
        return head_loss(out, labels, c.lambda_cen, c.lambda_reg, c.cls_loss,
                         centerness=c.centerness)

    # -- inference path ----------------------------------------------------
    def encode_template(self, patch: np.ndarray, box_in_patch: BoundingBox) -> TemplateCode:
        feats = self.backbone.extract(normalize_image(patch))
        feats.setflags(write=False)
        return TemplateCode(feats, self.template_roi(box_in_patch))

    def predict(self, code: TemplateCode, search_patch: np.ndarray):
        """Per-cell ``(foreground prob, centerness prob, ltrb)`` for one search patch."""
        fs = self.backbone.extract(normalize_image(search_patch))
        resp, _ = self.embed.forward(np.array(code.features)[None], fs[None], [code.roi])
        out, _ = self.head.forward(resp)
        z = out.cls[0]
        fg = 1.0 / (1.0 + np.exp(z[..., 0] - z[..., 1]))
        cen = 1.0 / (1.0 + np.exp(-out.cen[0, ..., 0]))
        if not self.cfg.centerness:
            cen = np.ones_like(cen)
        return fg, cen, out.reg[0]
