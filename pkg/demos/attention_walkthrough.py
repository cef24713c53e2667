"""Walk through one graph-attention pass on tiny random features.

Run with ``python3 demos/attention_walkthrough.py``.
"""
import numpy as np

from siamgat.gam import GraphAttention, dw_xcorr, gam_forward
from siamgat.geometry import BoundingBox, TemplateROI, project_box

rng = np.random.default_rng(0)

# A 4x4 template grid and a 6x6 search grid with 3 channels each.
ft = rng.normal(size=(4, 4, 3))
fs = rng.normal(size=(6, 6, 3))
op = GraphAttention(3, 2, batchnorm=False, rng=rng)

# Target-aware selection keeps only the template cells covered by the target box.
roi = TemplateROI(1, 1, 2, 3, (4, 4))
print("template cells kept:", roi.cell_count, "of", 16)

out, det = gam_forward(ft, fs, roi, op, "zero_mask", "exclude", return_details=True)
print("response shape:", out.shape)               # (6, 6, 2 * out_channels)
print("attention shape:", det.attention.shape)    # one row per search node
print("row sums:", det.attention.sum(axis=1)[:4])  # each row is a distribution
print("weight on masked nodes:", det.attention[:, ~det.support].max())

# The aggregated message for each search node lies inside the per-channel
# range of the template values it attends to.
vt = det.template_values[det.support]
print("channel range of messages:", det.aggregated.min(axis=0), det.aggregated.max(axis=0))
print("channel range of template values:", vt.min(axis=0), vt.max(axis=0))

# Dropping masked nodes and zero-filling them give the same response.
crop = gam_forward(ft, fs, roi, op, "crop", "exclude")
print("crop vs zero_mask max diff:", np.abs(crop - out).max())

# The baseline correlates a fixed template window with the search grid.
print("dw_xcorr response:", dw_xcorr(ft[1:3, 1:3], fs).shape)

# Image boxes reach the template grid through the backbone projection.
box = BoundingBox(63.5, 63.5, 80.0, 40.0)
print("projected ROI for an 80x40 box:", project_box(box, 8, 127, 13))
