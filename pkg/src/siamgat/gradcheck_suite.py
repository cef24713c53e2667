"""Finite-difference checks over every differentiable op, on small random instances."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backbone import Conv2d, Stage, ToyBone
from .gam import DWXcorr, GraphAttention, XcorrEmbedding
from .geometry import BoundingBox, TemplateROI
from .head import GridSpec, Head, HeadWithLoss, assign_labels, stack_labels
from .numerics import BatchNorm, Conv1x1, DiffOp, MaskedSoftmax, ReLU, grad_check


class _SumSquares(DiffOp):
    def forward(self, x, training: bool = False):
        return np.asarray((x * x).sum()), x

    def backward(self, dout, cache):
        return 2.0 * cache * dout


@dataclass
class Case:
    name: str
    build: Callable[[np.random.Generator], tuple]  # rng -> (op, inputs, options)


def _conv1x1(rng):
    return Conv1x1(3, 4, rng=rng), [rng.normal(size=(2, 3, 3, 3))], {}


def _bn_train(rng):
    op = BatchNorm(3)
    op.params["gamma"] = rng.uniform(0.5, 1.5, 3)
    op.params["beta"] = rng.normal(size=3)
    return op, [rng.normal(size=(2, 3, 3, 3))], {}


def _bn_infer(rng):
    op, inputs, _ = _bn_train(rng)
    op.buffers["running_mean"] = rng.normal(size=3)
    op.buffers["running_var"] = rng.uniform(0.5, 2.0, 3)
    return op, inputs, {"training": False}


def _relu(rng):
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    return ReLU(), [x], {}


def _softmax(rng):
    v = rng.normal(size=(4, 6))
    mask = rng.random((4, 6)) < 0.6
    mask[:, 0] = True
    return MaskedSoftmax(), [v, mask], {}


def _conv2d(rng):
    return Conv2d(2, 3, 3, 2, rng=rng), [rng.normal(size=(2, 7, 7, 2))], {}


class _Joint(DiffOp):
    """Feeds two differently sized batches through a list-taking op; flattens the outputs."""

    def __init__(self, inner):
        super().__init__()
        self.inner = self.add("inner", inner)

    def forward(self, a, b, training: bool = False):
        outs, cache = self.inner.forward([a, b], training=training)
        return np.concatenate([o.ravel() for o in outs]), (cache, [o.shape for o in outs])

    def backward(self, dout, cache):
        inner_cache, shapes = cache
        ends = np.cumsum([int(np.prod(s)) for s in shapes])[:-1]
        douts = [d.reshape(s) for d, s in zip(np.split(dout, ends), shapes)]
        dins = self.inner.backward(douts, inner_cache)
        return None if dins is None else tuple(dins)


def _stage(rng):
    op = _Joint(Stage(2, 3, 3, 1, rng=rng))
    return op, [rng.normal(size=(2, 4, 4, 2)), rng.normal(size=(2, 6, 6, 2))], {}


def _toybone(rng):
    # smallest input honouring the contract gives a 2x2 map; image grads are not returned
    return ToyBone(3, (2, 3, 3), rng=rng), [rng.normal(size=(2, 39, 39, 3))], {"wrt_inputs": False}


def _toybone_joint(rng):
    op = _Joint(ToyBone(3, (2, 3, 3), rng=rng))
    return op, [rng.normal(size=(2, 39, 39, 3)), rng.normal(size=(1, 47, 47, 3))], {"wrt_inputs": False}


def _gam(selection, masking, batchnorm=True):
    def build(rng):
        op = GraphAttention(4, 3, selection=selection, masking=masking, batchnorm=batchnorm, rng=rng)
        ft = rng.normal(size=(2, 3, 3, 4))
        fs = rng.normal(size=(2, 5, 5, 4))
        rois = [TemplateROI(0, 1, 1, 2, (3, 3)), TemplateROI(1, 0, 2, 2, (3, 3))]
        return op, [ft, fs, rois], {}
    return build


def _dw_xcorr(rng):
    return DWXcorr(), [rng.normal(size=(2, 2, 4)), rng.normal(size=(5, 4, 4))], {}


def _xcorr_embedding(rng):
    op = XcorrEmbedding(3, 2, rng=rng)
    rois = [TemplateROI(1, 1, 2, 2, (4, 4)), TemplateROI(0, 2, 1, 3, (4, 4))]
    return op, [rng.normal(size=(2, 4, 4, 3)), rng.normal(size=(2, 5, 5, 3)), rois], {}


def _head_loss(cls_loss):
    def build(rng):
        grid = GridSpec(5, 8, 63)
        boxes = [BoundingBox(31.5 + rng.uniform(-4, 4), 31.5 + rng.uniform(-4, 4),
                             rng.uniform(18, 34), rng.uniform(18, 34)) for _ in range(2)]
        labels = stack_labels([assign_labels(b, grid) for b in boxes])
        head = Head(6, hidden=5, depth=2, rng=rng)
        for name in ("cls_out", "cen_out", "reg_out"):  # larger than the training init
            head.children[name].params["weight"] = rng.normal(0, 0.3, size=head.children[name].params["weight"].shape)
        op = HeadWithLoss(head, labels, cls_loss=cls_loss)
        return op, [rng.normal(size=(2, 5, 5, 6))], {}
    return build


CASES = [
    Case("sum_squares", lambda rng: (_SumSquares(), [rng.normal(size=(3, 4))], {})),
    Case("conv1x1", _conv1x1),
    Case("batchnorm_train", _bn_train),
    Case("batchnorm_infer", _bn_infer),
    Case("relu", _relu),
    Case("masked_softmax", _softmax),
    Case("conv2d", _conv2d),
    Case("backbone_stage", _stage),
    Case("toybone", _toybone),
    Case("toybone_joint", _toybone_joint),
    Case("gam_zero_mask_exclude", _gam("zero_mask", "exclude")),
    Case("gam_zero_mask_include_zeros", _gam("zero_mask", "include_zeros")),
    Case("gam_crop", _gam("crop", "exclude")),
    Case("gam_no_batchnorm", _gam("zero_mask", "exclude", batchnorm=False)),
    Case("dw_xcorr", _dw_xcorr),
    Case("xcorr_embedding", _xcorr_embedding),
    Case("head_loss_ce", _head_loss("ce")),
    Case("head_loss_focal", _head_loss("focal")),
]


@dataclass
class SuiteRow:
    name: str
    seed: int
    max_rel_err: float
    passed: bool
    worst: str


def run_case(case: Case, seed: int, eps: float = 1e-5, tol: float = 1e-4) -> SuiteRow:
    rng = np.random.default_rng(seed)
    op, inputs, opts = case.build(rng)
    rep = grad_check(op, inputs, eps=eps, tol=tol, seed=seed, **opts)
    return SuiteRow(case.name, seed, rep.max_rel_err, rep.passed, rep.worst)


def run_suite(seeds=(0, 1, 2), eps: float = 1e-5, tol: float = 1e-4, names=None) -> list[SuiteRow]:
    cases = CASES if names is None else [c for c in CASES if c.name in set(names)]
    return [run_case(c, s, eps, tol) for c in cases for s in seeds]


def format_table(rows: list[SuiteRow]) -> str:
    lines = [f"{'op':30s} {'seed':>4s} {'max_rel_err':>12s}  result"]
    for r in rows:
        lines.append(f"{r.name:30s} {r.seed:4d} {r.max_rel_err:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
